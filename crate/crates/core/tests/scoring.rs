use std::collections::BTreeMap;

use alps_core::geometry::Projection;
use alps_core::rng::SplitMix64;
use alps_core::scoring::*;
use alps_core::tensor::Tensor;
use alps_core::*;

fn random_ckpt(g: &ModelGeometry, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = SplitMix64::new(seed);
    let mut tensors = BTreeMap::new();
    for l in 0..g.n_layers {
        for p in Projection::ALL {
            let [r, c] = p.expected_shape(g);
            let data = (0..r * c).map(|_| rng.uniform(-0.5, 0.5)).collect();
            tensors.insert(p.tensor_name(l), Tensor::from_f64(vec![r, c], data).unwrap());
        }
    }
    tensors
}

fn toy() -> ModelGeometry {
    ModelGeometry::new(2, 16, 4, 2).unwrap()
}

#[test]
fn identical_checkpoints_score_zero_everywhere() {
    let g = toy();
    let ck = Checkpoint::from_tensors(g.to_meta(), &random_ckpt(&g, 1)).unwrap();
    for m in Metric::ALL {
        let r = score_all_heads(&ck, &ck, &g, m, m.default_domain(), 1.0).unwrap();
        assert_eq!(r.entries.len(), g.total_heads());
        assert!(r.entries.iter().all(|e| e.score == 0.0), "{m}");
        r.validate().unwrap();
    }
}

#[test]
fn perturbed_head_has_largest_pad() {
    let g = toy();
    let base = random_ckpt(&g, 2);
    let mut task = base.clone();
    // Perturb head 3 of layer 1 (q rows 8..12).
    let name = Projection::Q.tensor_name(1);
    let mut q = task[&name].to_f64_vec();
    let mut rng = SplitMix64::new(9);
    for r in 8..12 {
        for c in 0..g.d_model {
            q[r * g.d_model + c] += rng.uniform(-1.0, 1.0);
        }
    }
    task.insert(name, Tensor::from_f64(vec![16, 16], q).unwrap());
    let b = Checkpoint::from_tensors(g.to_meta(), &base).unwrap();
    let t = Checkpoint::from_tensors(g.to_meta(), &task).unwrap();
    let r = score_all_heads(&b, &t, &g, Metric::Pad, MetricDomain::Dist, 1.0).unwrap();
    let layer1: Vec<&ScoreEntry> = r.entries.iter().filter(|e| e.layer == 1).collect();
    let best = layer1.iter().max_by(|a, b| a.score.total_cmp(&b.score)).unwrap();
    assert_eq!(best.head, 3);
    assert!(layer1.iter().filter(|e| e.head != 3).all(|e| e.score < best.score));
    assert!(r.entries.iter().filter(|e| e.layer == 0).all(|e| e.score == 0.0));
}

#[test]
fn geometry_mismatch_rejected() {
    let g = toy();
    let other = ModelGeometry::new(2, 16, 4, 4).unwrap();
    let a = Checkpoint::from_tensors(g.to_meta(), &random_ckpt(&g, 1)).unwrap();
    let b = Checkpoint::from_tensors(other.to_meta(), &random_ckpt(&other, 1)).unwrap();
    assert!(matches!(score_all_heads(&a, &b, &g, Metric::Pad, MetricDomain::Dist, 1.0), Err(Error::Geometry(_))));
}

#[test]
fn pad_rejects_raw_domain() {
    let g = toy();
    let a = Checkpoint::from_tensors(g.to_meta(), &random_ckpt(&g, 1)).unwrap();
    assert!(score_all_heads(&a, &a, &g, Metric::Pad, MetricDomain::Raw, 1.0).is_err());
}

#[test]
fn parallelism_does_not_change_bits() {
    let g = toy();
    let a = Checkpoint::from_tensors(g.to_meta(), &random_ckpt(&g, 1)).unwrap();
    let b = Checkpoint::from_tensors(g.to_meta(), &random_ckpt(&g, 2)).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| score_all_heads(&a, &b, &g, Metric::Pad, MetricDomain::Dist, 1.0).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn heatmap_layout() {
    let g = toy();
    let a = Checkpoint::from_tensors(g.to_meta(), &random_ckpt(&g, 1)).unwrap();
    let b = Checkpoint::from_tensors(g.to_meta(), &random_ckpt(&g, 2)).unwrap();
    let r = score_all_heads(&a, &b, &g, Metric::Euclid, MetricDomain::Raw, 1.0).unwrap();
    let csv = r.heatmap_csv();
    let rows: Vec<Vec<f64>> = csv.lines().map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.len() == 4));
    for e in &r.entries {
        assert_eq!(rows[e.layer][e.head - 1], e.score);
    }
}
