//! Scoring every head of a base/task checkpoint pair.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{enumerate_heads, HeadKey, LayerProjections, ModelGeometry};
use crate::metrics::{
    cosine_score, euclid_score, head_projection, kl_divergence, tempered_softmax, w1_distance, Metric, MetricDomain,
};
use crate::store::Checkpoint;

pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub layer: usize,
    pub head: usize,
    pub kv_group: usize,
    pub score: f64,
}

impl ScoreEntry {
    pub fn key(&self) -> HeadKey {
        HeadKey::new(self.layer, self.head)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: Metric,
    #[serde(default = "default_domain")]
    pub metric_domain: MetricDomain,
    pub tau: f64,
    pub base_id: String,
    pub task_id: String,
    pub geometry: ModelGeometry,
    pub entries: Vec<ScoreEntry>,
}

fn default_domain() -> MetricDomain {
    MetricDomain::Dist
}

impl ScoreReport {
    /// Content hash of the serialized report.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("report serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Check entry count, ordering, and score validity against the geometry.
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let keys = enumerate_heads(&self.geometry);
        if keys.len() != self.entries.len() {
            return Err(Error::Value(format!(
                "report has {} entries, geometry has {} heads",
                self.entries.len(),
                keys.len()
            )));
        }
        let mut seen = vec![false; keys.len()];
        for e in &self.entries {
            let key = e.key();
            key.validate(&self.geometry)?;
            let idx = key.ordinal(&self.geometry);
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::Value(format!("duplicate entry for layer {} head {}", e.layer, e.head)));
            }
            if !(e.score.is_finite() && e.score >= 0.0) {
                return Err(Error::Value(format!("invalid score {} for layer {} head {}", e.score, e.layer, e.head)));
            }
        }
        Ok(())
    }

    /// Scores arranged `[layer][head-1]`.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let mut grid = vec![vec![0.0; self.geometry.n_heads]; self.geometry.n_layers];
        for e in &self.entries {
            grid[e.layer][e.head - 1] = e.score;
        }
        grid
    }

    /// Layer × head CSV: one row per layer, one column per head, no header.
    pub fn heatmap_csv(&self) -> String {
        let mut out = String::new();
        for row in self.grid() {
            let cells: Vec<String> = row.iter().map(|s| format!("{s}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn checkpoint_geometry(ckpt: &Checkpoint, geometry: &ModelGeometry, which: &str) -> Result<()> {
    match ckpt.geometry()? {
        Some(g) if g != *geometry => {
            Err(Error::Geometry(format!("{which} checkpoint geometry {g:?} differs from {geometry:?}")))
        }
        _ => Ok(()),
    }
}

fn score_pair(base: &[f64], task: &[f64], metric: Metric, domain: MetricDomain, tau: f64) -> Result<f64> {
    let dist = |m: &[f64]| tempered_softmax(m, tau);
    match (metric, domain) {
        (Metric::Pad, _) => w1_distance(&dist(base)?, &dist(task)?),
        (Metric::Kl, _) => kl_divergence(&dist(base)?, &dist(task)?),
        (Metric::Cosine, MetricDomain::Raw) => cosine_score(base, task),
        (Metric::Cosine, MetricDomain::Dist) => cosine_score(&dist(base)?, &dist(task)?),
        (Metric::Euclid, MetricDomain::Raw) => euclid_score(base, task),
        (Metric::Euclid, MetricDomain::Dist) => euclid_score(&dist(base)?, &dist(task)?),
    }
}

/// Score every head under `metric`. Heads are processed in parallel on the
/// current rayon pool; the report is always in canonical order.
pub fn score_all_heads(
    base: &Checkpoint,
    task: &Checkpoint,
    geometry: &ModelGeometry,
    metric: Metric,
    domain: MetricDomain,
    tau: f64,
) -> Result<ScoreReport> {
    geometry.validate()?;
    if !metric.supports(domain) {
        return Err(Error::Value(format!("metric {metric} is only defined on distributions")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Value(format!("temperature must be positive, got {tau}")));
    }
    checkpoint_geometry(base, geometry, "base")?;
    checkpoint_geometry(task, geometry, "task")?;

    let per_layer: Vec<Vec<ScoreEntry>> = (0..geometry.n_layers)
        .into_par_iter()
        .map(|layer| -> Result<Vec<ScoreEntry>> {
            let b = LayerProjections::load(base, geometry, layer)?;
            let t = LayerProjections::load(task, geometry, layer)?;
            (1..=geometry.n_heads)
                .into_par_iter()
                .map(|head| {
                    let bs = b.head(head)?;
                    let ts = t.head(head)?;
                    let pb = head_projection(&bs.wq, &bs.wk, &bs.wv)?.to_f64_vec();
                    let pt = head_projection(&ts.wq, &ts.wk, &ts.wv)?.to_f64_vec();
                    let score = score_pair(&pb, &pt, metric, domain, tau)?;
                    if !score.is_finite() {
                        return Err(Error::Numeric(format!("non-finite score at layer {layer} head {head}")));
                    }
                    Ok(ScoreEntry { layer, head, kv_group: HeadKey::new(layer, head).kv_group(geometry)?, score })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(ScoreReport {
        metric,
        metric_domain: domain,
        tau,
        base_id: base.fingerprint().to_string(),
        task_id: task.fingerprint().to_string(),
        geometry: *geometry,
        entries: per_layer.into_iter().flatten().collect(),
    })
}
