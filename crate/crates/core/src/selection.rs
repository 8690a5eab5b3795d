//! Head selection strategies and the trainable-parameter plan they induce.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{enumerate_heads, HeadKey, ModelGeometry};
use crate::rng::SplitMix64;
use crate::scoring::ScoreReport;

/// Default retention ratio.
pub const DEFAULT_RATIO: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Topk,
    Random,
    Lc,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Topk => "topk",
            Strategy::Random => "random",
            Strategy::Lc => "lc",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(Strategy::Topk),
            "random" => Ok(Strategy::Random),
            "lc" => Ok(Strategy::Lc),
            other => Err(Error::Value(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMask {
    pub geometry: ModelGeometry,
    pub strategy: Strategy,
    pub ratio: f64,
    pub seed: Option<u64>,
    pub selected: Vec<HeadKey>,
    pub source_report_id: Option<String>,
}

impl HeadMask {
    pub fn contains(&self, key: &HeadKey) -> bool {
        self.selected.binary_search(key).is_ok()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let k = head_budget(self.ratio, self.geometry.total_heads())?;
        if self.selected.len() != k {
            return Err(Error::Value(format!(
                "mask selects {} heads, ratio {} implies {k}",
                self.selected.len(),
                self.ratio
            )));
        }
        for key in &self.selected {
            key.validate(&self.geometry)?;
        }
        if self.selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Value("mask heads must be unique and canonically sorted".into()));
        }
        Ok(())
    }

    /// Heads selected per layer.
    pub fn layer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.geometry.n_layers];
        for k in &self.selected {
            counts[k.layer] += 1;
        }
        counts
    }

    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("mask serializes")))
    }
}

/// `K = ⌈ratio · total⌉`.
///
/// Products within 1e-9 of an integer are snapped to it first, so that
/// e.g. `0.3 · 10` counts as 3 rather than rounding up to 4.
pub fn head_budget(ratio: f64, total: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Value(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    let x = ratio * total as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 { nearest } else { x.ceil() };
    Ok((k as usize).clamp(1, total))
}

/// The `K` highest-scoring heads across all layers. Ties go to the head
/// that comes first in canonical order.
pub fn select_topk(report: &ScoreReport, ratio: f64) -> Result<HeadMask> {
    report.validate()?;
    let k = head_budget(ratio, report.geometry.total_heads())?;
    let mut ranked: Vec<(HeadKey, f64)> = report.entries.iter().map(|e| (e.key(), e.score)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut selected: Vec<HeadKey> = ranked.into_iter().take(k).map(|(key, _)| key).collect();
    selected.sort();
    Ok(HeadMask {
        geometry: report.geometry,
        strategy: Strategy::Topk,
        ratio,
        seed: None,
        selected,
        source_report_id: Some(report.fingerprint()),
    })
}

/// Draw `k` items uniformly without replacement (partial Fisher-Yates).
fn draw<T: Copy>(items: &mut [T], k: usize, rng: &mut SplitMix64) -> Vec<T> {
    let n = items.len();
    for i in 0..k {
        let j = i + rng.below((n - i) as u64) as usize;
        items.swap(i, j);
    }
    items[..k].to_vec()
}

pub fn select_random(geometry: &ModelGeometry, ratio: f64, seed: u64) -> Result<HeadMask> {
    geometry.validate()?;
    let mut keys = enumerate_heads(geometry);
    let k = head_budget(ratio, keys.len())?;
    let mut selected = draw(&mut keys, k, &mut SplitMix64::new(seed));
    selected.sort();
    Ok(HeadMask {
        geometry: *geometry,
        strategy: Strategy::Random,
        ratio,
        seed: Some(seed),
        selected,
        source_report_id: None,
    })
}

/// Random selection with a per-layer quota of `⌊K/L⌋`, the `K mod L`
/// leftover heads going to the lowest-indexed layers.
pub fn select_layer_consistent(geometry: &ModelGeometry, ratio: f64, seed: u64) -> Result<HeadMask> {
    geometry.validate()?;
    let k = head_budget(ratio, geometry.total_heads())?;
    let layers = geometry.n_layers;
    let mut rng = SplitMix64::new(seed);
    let mut selected = Vec::with_capacity(k);
    for layer in 0..layers {
        let quota = k / layers + usize::from(layer < k % layers);
        let mut heads: Vec<HeadKey> = (1..=geometry.n_heads).map(|h| HeadKey::new(layer, h)).collect();
        selected.extend(draw(&mut heads, quota, &mut rng));
    }
    selected.sort();
    Ok(HeadMask {
        geometry: *geometry,
        strategy: Strategy::Lc,
        ratio,
        seed: Some(seed),
        selected,
        source_report_id: None,
    })
}

/// Trainable attention slices of one layer (1-based indices).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub q_heads: BTreeSet<usize>,
    pub kv_groups: BTreeSet<usize>,
}

/// Which attention slices receive gradients. Everything outside attention
/// q/k/v (embeddings, o_proj, MLP, norms, output head) is always trainable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainablePlan {
    pub geometry: ModelGeometry,
    pub layers: Vec<LayerPlan>,
}

impl TrainablePlan {
    pub fn full(geometry: &ModelGeometry) -> Self {
        let layer =
            LayerPlan { q_heads: (1..=geometry.n_heads).collect(), kv_groups: (1..=geometry.n_kv_groups).collect() };
        Self { geometry: *geometry, layers: vec![layer; geometry.n_layers] }
    }

    pub fn frozen_attention(geometry: &ModelGeometry) -> Self {
        Self { geometry: *geometry, layers: vec![LayerPlan::default(); geometry.n_layers] }
    }

    pub fn q_trainable(&self, layer: usize, head: usize) -> bool {
        self.layers[layer].q_heads.contains(&head)
    }

    pub fn kv_trainable(&self, layer: usize, group: usize) -> bool {
        self.layers[layer].kv_groups.contains(&group)
    }
}

/// A KV group trains iff at least one of its query heads is selected.
pub fn trainable_plan(mask: &HeadMask) -> Result<TrainablePlan> {
    let g = &mask.geometry;
    let mut plan = TrainablePlan::frozen_attention(g);
    for key in &mask.selected {
        let group = key.kv_group(g)?;
        let layer = plan
            .layers
            .get_mut(key.layer)
            .ok_or_else(|| Error::Range(format!("layer {} outside geometry", key.layer)))?;
        layer.q_heads.insert(key.head);
        layer.kv_groups.insert(group);
    }
    Ok(plan)
}
