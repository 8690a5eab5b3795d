use alps_core::geometry::{HeadKey, ModelGeometry, Projection};
use alps_core::selection::{select_random, trainable_plan, HeadMask, Strategy, TrainablePlan};
use alps_core::trainer::*;
use alps_core::Error;

mod common;
use common::{gradient_check, randomize_head};

fn small_batch(family: TaskFamily, seed: u64, n: usize) -> Vec<Example> {
    make_dataset(family, seed, n).unwrap()
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let cfg = ModelConfig::default();
    let a = init_model(cfg, 7).unwrap();
    let b = init_model(cfg, 7).unwrap();
    let c = init_model(cfg, 8).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.tensor("tok_emb.weight"), c.tensor("tok_emb.weight"));
    assert!(a.tensor("lm_head.weight").unwrap().iter().all(|&w| w == 0.0));
    assert_eq!(a.layout().total(), Layout::census(&cfg));
}

#[test]
fn initial_loss_is_log_vocab() {
    let model = init_model(ModelConfig::default(), 3).unwrap();
    for family in TaskFamily::ALL {
        let loss = model.loss(&small_batch(family, 11, 4)).unwrap();
        assert_eq!(loss, (VOCAB as f64).ln());
    }
    let e = evaluate(&model, &small_batch(TaskFamily::Copy, 2, 8)).unwrap();
    assert_eq!(e.loss, (VOCAB as f64).ln());
}

#[test]
fn rejects_bad_tokens_and_lengths() {
    let model = init_model(ModelConfig::default(), 0).unwrap();
    assert!(matches!(model.forward_sequence(&[1, 32]), Err(Error::Value(_))));
    assert!(matches!(model.forward_sequence(&[]), Err(Error::Value(_))));
    assert!(matches!(model.forward_sequence(&[0; 33]), Err(Error::Value(_))));
}

#[test]
fn forward_is_batch_invariant_and_finite() {
    let mut model = init_model(ModelConfig::default(), 5).unwrap();
    randomize_head(&mut model, 1);
    let batch: Vec<Vec<u32>> = small_batch(TaskFamily::Sortnext, 4, 3).into_iter().map(|e| e.input).collect();
    let together = model.forward(&batch).unwrap();
    for (tokens, cache) in batch.iter().zip(&together) {
        let alone = model.forward_sequence(tokens).unwrap();
        assert_eq!(alone.logits(), cache.logits());
        assert!(cache.logits().iter().all(|z| z.is_finite()));
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut model = init_model(ModelConfig::default(), 9).unwrap();
    randomize_head(&mut model, 2);
    let tokens = &small_batch(TaskFamily::Copy, 1, 1)[0].input;
    let cache = model.forward_sequence(tokens).unwrap();
    let t = tokens.len();
    for layer in 0..4 {
        let probs = cache.attention(layer);
        for row in probs.chunks(t) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
        for (r, row) in probs.chunks(t).enumerate() {
            let pos = r % t;
            assert!(row[pos + 1..].iter().all(|&p| p == 0.0));
        }
    }
}

#[test]
fn single_token_attention_returns_its_value() {
    let model = init_model(ModelConfig::default(), 4).unwrap();
    let g = *model.geometry();
    let cache = model.forward_sequence(&[17]).unwrap();
    for layer in 0..g.n_layers {
        assert!(cache.attention(layer).iter().all(|&p| p == 1.0));
        let v = cache.values(layer);
        let o = cache.head_outputs(layer);
        for h in 1..=g.n_heads {
            let grp = alps_core::kv_group_of(h, &g).unwrap();
            assert_eq!(&o[(h - 1) * g.d_v..h * g.d_v], &v[(grp - 1) * g.d_v..grp * g.d_v]);
        }
    }
}

/// Straightforward multi-head attention transformer over the same weights,
/// written without shared kernels.
fn reference_mha_logits(model: &ToyModel, tokens: &[u32]) -> Vec<Vec<f64>> {
    let g = model.geometry();
    let cfg = model.config();
    let (d, n, dk, dv, f) = (g.d_model, g.n_heads, g.d_k, g.d_v, cfg.mlp_width);
    let w = |name: &str| model.tensor(name).unwrap().to_vec();
    let matvec = |m: &[f64], x: &[f64], out: usize| -> Vec<f64> {
        (0..out).map(|o| (0..x.len()).map(|i| m[o * x.len() + i] * x[i]).sum()).collect()
    };
    let norm = |x: &[f64], s: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + 1e-5).sqrt();
        x.iter().zip(s).map(|(v, s)| v * r * s).collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
    let (tok, pos) = (w("tok_emb.weight"), w("pos_emb.weight"));
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &x)| (0..d).map(|i| tok[x as usize * d + i] + pos[t * d + i]).collect())
        .collect();
    for l in 0..g.n_layers {
        let wq = w(&format!("layers.{l}.attn.q_proj.weight"));
        let wk = w(&format!("layers.{l}.attn.k_proj.weight"));
        let wv = w(&format!("layers.{l}.attn.v_proj.weight"));
        let wo = w(&format!("layers.{l}.attn.o_proj.weight"));
        let s1 = w(&format!("layers.{l}.attn_norm.weight"));
        let a: Vec<Vec<f64>> = h.iter().map(|x| norm(x, &s1)).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|x| matvec(&wq, x, n * dk)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|x| matvec(&wk, x, n * dk)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|x| matvec(&wv, x, n * dv)).collect();
        for t in 0..tokens.len() {
            let mut concat = vec![0.0; n * dv];
            for head in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..dk).map(|i| q[t][head * dk + i] * k[s][head * dk + i]).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for s in 0..=t {
                    for i in 0..dv {
                        concat[head * dv + i] += e[s] / z * v[s][head * dv + i];
                    }
                }
            }
            let out = matvec(&wo, &concat, d);
            for i in 0..d {
                h[t][i] += out[i];
            }
        }
        let s2 = w(&format!("layers.{l}.mlp_norm.weight"));
        let up = w(&format!("layers.{l}.mlp.up_proj.weight"));
        let down = w(&format!("layers.{l}.mlp.down_proj.weight"));
        for x in h.iter_mut() {
            let u: Vec<f64> = matvec(&up, &norm(x, &s2), f).into_iter().map(gelu).collect();
            let m = matvec(&down, &u, d);
            for i in 0..d {
                x[i] += m[i];
            }
        }
    }
    let fs = w("final_norm.weight");
    let head = w("lm_head.weight");
    h.iter().map(|x| matvec(&head, &norm(x, &fs), cfg.vocab)).collect()
}

#[test]
fn full_kv_groups_match_reference_multi_head_attention() {
    let geometry = ModelGeometry::new(2, 32, 4, 4).unwrap();
    let cfg = ModelConfig::new(geometry);
    let mut model = init_model(cfg, 21).unwrap();
    randomize_head(&mut model, 3);
    let tokens: Vec<u32> = (0..12).map(|i| (i * 7 + 3) % 32).collect();
    let cache = model.forward_sequence(&tokens).unwrap();
    let reference = reference_mha_logits(&model, &tokens);
    for (t, row) in reference.iter().enumerate() {
        for (j, &z) in row.iter().enumerate() {
            let got = cache.logits()[t * cfg.vocab + j];
            assert!((got - z).abs() <= 1e-12, "t={t} j={j}: {got} vs {z}");
        }
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (worst, checked) = gradient_check(4, 31);
    assert!(checked >= 100);
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn masked_plan_omits_frozen_slices() {
    let cfg = ModelConfig::default();
    let model = init_model(cfg, 1).unwrap();
    let g = cfg.geometry;
    let mask = HeadMask {
        geometry: g,
        strategy: Strategy::Topk,
        ratio: 0.25,
        seed: None,
        selected: vec![HeadKey::new(1, 2), HeadKey::new(2, 7), HeadKey::new(3, 8)],
        source_report_id: None,
    };
    let plan = trainable_plan(&mask).unwrap();
    let (_, grads) = model.loss_and_grads(&small_batch(TaskFamily::Copy, 0, 2), &plan).unwrap();
    for p in [Projection::Q, Projection::K, Projection::V] {
        let name = p.tensor_name(0);
        let rows = model.layout().find(&name).unwrap().rows();
        assert!((0..rows).all(|r| !grads.covers(&name, r)), "{name}");
    }
    assert!(grads.covers(&Projection::O.tensor_name(0), 0));
    let q1 = Projection::Q.tensor_name(1);
    assert!(grads.covers(&q1, 8) && grads.covers(&q1, 15));
    assert!(!grads.covers(&q1, 0) && !grads.covers(&q1, 16));
    assert!(grads.covers(&Projection::K.tensor_name(1), 0));
    assert!(!grads.covers(&Projection::K.tensor_name(1), 8));
}

#[test]
fn masked_gradients_equal_full_gradients_on_trainable_slices() {
    let mut model = init_model(ModelConfig::default(), 6).unwrap();
    randomize_head(&mut model, 6);
    let batch = small_batch(TaskFamily::Modadd, 6, 2);
    let mask = select_random(model.geometry(), 0.25, 6).unwrap();
    let (l1, masked) = model.loss_and_grads(&batch, &trainable_plan(&mask).unwrap()).unwrap();
    let (l2, full) = model.loss_and_grads(&batch, &TrainablePlan::full(model.geometry())).unwrap();
    assert_eq!(l1, l2);
    for s in &masked.slices {
        let info = model.layout().find(&s.name).unwrap();
        for (j, &v) in s.values.iter().enumerate() {
            let idx = s.slice.rows.start * info.cols() + j;
            assert_eq!(full.get(model.layout(), &s.name, idx), Some(v));
        }
    }
}

#[test]
fn duplicated_or_permuted_batch_keeps_loss() {
    let mut model = init_model(ModelConfig::default(), 2).unwrap();
    randomize_head(&mut model, 8);
    let batch = small_batch(TaskFamily::Sortnext, 3, 4);
    let plan = TrainablePlan::full(model.geometry());
    let (base, _) = model.loss_and_grads(&batch, &plan).unwrap();
    let doubled: Vec<Example> = batch.iter().chain(batch.iter()).cloned().collect();
    let (twice, _) = model.loss_and_grads(&doubled, &plan).unwrap();
    assert!((base - twice).abs() <= 1e-12);
    let mut reversed = batch.clone();
    reversed.reverse();
    assert!((model.loss(&reversed).unwrap() - base).abs() <= 1e-12);
}

#[test]
fn plan_geometry_mismatch_is_rejected() {
    let model = init_model(ModelConfig::default(), 0).unwrap();
    let other = ModelGeometry::new(4, 64, 8, 4).unwrap();
    let r = model.loss_and_grads(&small_batch(TaskFamily::Copy, 0, 1), &TrainablePlan::full(&other));
    assert!(matches!(r, Err(Error::Geometry(_))));
}

#[test]
fn schedule_hits_its_joints() {
    let s = LrSchedule::new(1e-3, 100, 0.1, 0.1);
    assert_eq!(s.warmup_steps, 10);
    assert_eq!(s.lr(10), 1e-3);
    assert!((s.lr(99) - 1e-4).abs() < 1e-18);
    assert!(s.lr(0) > 0.0 && s.lr(0) < s.lr(9));
    for step in 10..99 {
        assert!(s.lr(step + 1) <= s.lr(step));
    }
}

#[test]
fn frozen_parameter_survives_hundred_steps() {
    let cfg = ModelConfig::default();
    let mut model = init_model(cfg, 12).unwrap();
    let q0 = Projection::Q.tensor_name(0);
    model.tensor_mut(&q0).unwrap().fill(0.5);
    let plan = TrainablePlan::frozen_attention(&cfg.geometry);
    let batch = small_batch(TaskFamily::Copy, 1, 2);
    let hyper = AdamWParams::default();
    let mut state = AdamWState::new(&model);
    let before_o = model.tensor(&Projection::O.tensor_name(0)).unwrap().to_vec();
    for step in 0..100 {
        let (_, grads) = model.loss_and_grads(&batch, &plan).unwrap();
        adamw_step(&mut model, &grads, &hyper, 1e-3, step, &mut state);
    }
    assert!(model.tensor(&q0).unwrap().iter().all(|w| w.to_bits() == 0.5f64.to_bits()));
    assert_ne!(model.tensor(&Projection::O.tensor_name(0)).unwrap(), &before_o[..]);
}

fn quick_config(family: TaskFamily, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new(family);
    c.steps = steps;
    c.batch_size = 4;
    c.train_size = 64;
    c.eval_size = 16;
    c.peak_lr = 3e-3;
    c
}

#[test]
fn freeze_none_leaves_attention_untouched() {
    let base = init_model(ModelConfig::default(), 4).unwrap();
    let mut c = quick_config(TaskFamily::Copy, 10);
    c.freeze = AttentionFreeze::None;
    let out = train(base.clone(), &c, None).unwrap();
    for l in 0..4 {
        for p in [Projection::Q, Projection::K, Projection::V] {
            let name = p.tensor_name(l);
            assert_eq!(out.model.tensor(&name), base.tensor(&name), "{name}");
        }
        let o = Projection::O.tensor_name(l);
        assert_ne!(out.model.tensor(&o), base.tensor(&o));
    }
    assert_ne!(out.model.tensor("lm_head.weight"), base.tensor("lm_head.weight"));
}

#[test]
fn training_is_deterministic_and_logged() {
    let base = init_model(ModelConfig::default(), 5).unwrap();
    let mut c = quick_config(TaskFamily::Modadd, 6);
    c.eval_every = 3;
    let a = train(base.clone(), &c, None).unwrap();
    let b = train(base.clone(), &c, None).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log_jsonl(), b.log_jsonl());
    assert_eq!(a.log.len(), 6);
    assert!(a.log[2].eval_loss.is_some() && a.log[3].eval_loss.is_none());
    assert_eq!(a.log[5].eval_loss, Some(a.eval.loss));
    let first: serde_json::Value = serde_json::from_str(a.log_jsonl().lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert!(first["loss"].is_f64() && first["lr"].is_f64());
    c.shuffle_seed = 1;
    let d = train(base, &c, None).unwrap();
    assert_ne!(a.model.params(), d.model.params());
}

#[test]
fn mask_geometry_mismatch_is_rejected() {
    let base = init_model(ModelConfig::default(), 0).unwrap();
    let other = ModelGeometry::new(2, 64, 8, 2).unwrap();
    let mask = select_random(&other, 0.25, 0).unwrap();
    let mut c = quick_config(TaskFamily::Copy, 2);
    c.freeze = AttentionFreeze::Mask;
    assert!(matches!(train(base.clone(), &c, Some(&mask)), Err(Error::Geometry(_))));
    c.freeze = AttentionFreeze::Mask;
    assert!(matches!(train(base, &c, None), Err(Error::Value(_))));
}

#[test]
fn evaluate_is_repeatable() {
    let mut model = init_model(ModelConfig::default(), 1).unwrap();
    randomize_head(&mut model, 1);
    let data = small_batch(TaskFamily::Copy, 9, 8);
    assert_eq!(evaluate(&model, &data).unwrap(), evaluate(&model, &data).unwrap());
}

#[test]
fn checkpoint_roundtrip_preserves_model() {
    let mut model = init_model(ModelConfig::default(), 13).unwrap();
    randomize_head(&mut model, 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.alps");
    std::fs::write(&path, model.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
    let back = ToyModel::from_checkpoint(&alps_core::read_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.config(), model.config());
}

#[test]
fn copy_is_learned_in_three_hundred_steps() {
    let base = init_model(ModelConfig::default(), 0).unwrap();
    let mut c = TrainConfig::new(TaskFamily::Copy);
    c.steps = 300;
    c.batch_size = 16;
    c.peak_lr = 3e-3;
    let out = train(base, &c, None).unwrap();
    assert!(out.eval.accuracy > 0.9, "accuracy {}", out.eval.accuracy);
}

#[test]
fn ablation_of_untrained_model_is_zero() {
    let model = init_model(ModelConfig::default(), 2).unwrap();
    let data = small_batch(TaskFamily::Copy, 2, 4);
    let report = ablation_sensitivity(&model, &data, None, 1.0).unwrap();
    assert_eq!(report.entries.len(), 32);
    assert!(report.entries.iter().all(|e| e.delta == 0.0));
    assert_eq!(report.top_k.len(), 32);
    let keys: Vec<HeadKey> = report.entries.iter().map(|e| HeadKey::new(e.layer, e.head)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn ablation_orders_by_drop() {
    let mut c = quick_config(TaskFamily::Copy, 30);
    c.train_size = 128;
    let out = train(init_model(ModelConfig::default(), 3).unwrap(), &c, None).unwrap();
    let data = small_batch(TaskFamily::Copy, 77, 8);
    let report = ablation_sensitivity(&out.model, &data, None, 0.25).unwrap();
    assert_eq!(report.top_k.len(), 8);
    for w in report.entries.windows(2) {
        assert!(
            w[0].delta > w[1].delta || (w[0].delta == w[1].delta && (w[0].layer, w[0].head) < (w[1].layer, w[1].head))
        );
    }
    let subset = [HeadKey::new(0, 1)];
    let partial = ablation_sensitivity(&out.model, &data, Some(&subset), 1.0).unwrap();
    assert_eq!(partial.entries.len(), 1);
    assert_eq!(partial.entries[0].delta, report.entries.iter().find(|e| e.layer == 0 && e.head == 1).unwrap().delta);
}
