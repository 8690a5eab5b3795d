//! Ablation sensitivity: how much the held-out loss rises when a single
//! head's output contribution is removed.
//!
//! The evaluation metric is negative mean cross-entropy, so a head's drop
//! `Δp` equals `loss(ablated) − loss(original)`.

use serde::{Deserialize, Serialize};

use super::data::Example;
use super::model::ToyModel;
use super::train::evaluate;
use crate::error::Result;
use crate::geometry::{enumerate_heads, HeadKey};
use crate::selection::head_budget;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub layer: usize,
    pub head: usize,
    pub kv_group: usize,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline_loss: f64,
    pub ratio: f64,
    /// Sorted by `delta` descending, ties in canonical head order.
    pub entries: Vec<AblationEntry>,
    pub top_k: Vec<HeadKey>,
}

/// Performance drop from ablating every head in `heads` at once.
pub fn ablation_delta(model: &ToyModel, dataset: &[Example], heads: &[HeadKey]) -> Result<f64> {
    if heads.is_empty() {
        return Ok(0.0);
    }
    let base = evaluate(model, dataset)?.loss;
    let mut ablated = model.clone();
    for k in heads {
        ablated.ablate_head(k.layer, k.head)?;
    }
    Ok(evaluate(&ablated, dataset)?.loss - base)
}

/// Per-head `Δp` over `heads` (all heads when `None`) plus the Top-K set
/// for `K = ⌈ratio · |heads|⌉`.
pub fn ablation_sensitivity(
    model: &ToyModel,
    dataset: &[Example],
    heads: Option<&[HeadKey]>,
    ratio: f64,
) -> Result<AblationReport> {
    let geometry = *model.geometry();
    let mut candidates = heads.map_or_else(|| enumerate_heads(&geometry), <[HeadKey]>::to_vec);
    candidates.sort();
    candidates.dedup();
    for k in &candidates {
        k.validate(&geometry)?;
    }
    let baseline_loss = evaluate(model, dataset)?.loss;
    let mut entries = Vec::with_capacity(candidates.len());
    for key in &candidates {
        let mut ablated = model.clone();
        ablated.ablate_head(key.layer, key.head)?;
        let delta = evaluate(&ablated, dataset)?.loss - baseline_loss;
        entries.push(AblationEntry { layer: key.layer, head: key.head, kv_group: key.kv_group(&geometry)?, delta });
    }
    entries.sort_by(|a, b| b.delta.total_cmp(&a.delta).then((a.layer, a.head).cmp(&(b.layer, b.head))));
    let top_k = if entries.is_empty() {
        Vec::new()
    } else {
        let k = head_budget(ratio, entries.len())?;
        let mut top: Vec<HeadKey> = entries[..k].iter().map(|e| HeadKey::new(e.layer, e.head)).collect();
        top.sort();
        top
    };
    Ok(AblationReport { baseline_loss, ratio, entries, top_k })
}
