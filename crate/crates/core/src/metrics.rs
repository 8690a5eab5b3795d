//! Per-head sensitivity metrics.
//!
//! A head's static transformation is summarized by the composite projection
//! `Wq · (Wkᵀ · Wv)` of shape `[d_model, d_v]`. The PAD score turns base and
//! task projections into probability vectors with a global tempered softmax
//! and measures the 1-D Wasserstein-1 distance between the two value
//! multisets. KL works on the same distributions; cosine and Euclidean
//! compare projections directly (or distributions, when asked).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::HeadKey;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Pad,
    Kl,
    Cosine,
    Euclid,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Pad, Metric::Kl, Metric::Cosine, Metric::Euclid];

    /// Domain used when the caller does not choose one.
    pub fn default_domain(self) -> MetricDomain {
        match self {
            Metric::Pad | Metric::Kl => MetricDomain::Dist,
            Metric::Cosine | Metric::Euclid => MetricDomain::Raw,
        }
    }

    pub fn supports(self, domain: MetricDomain) -> bool {
        matches!(self, Metric::Cosine | Metric::Euclid) || domain == MetricDomain::Dist
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Pad => "pad",
            Metric::Kl => "kl",
            Metric::Cosine => "cosine",
            Metric::Euclid => "euclid",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pad" => Ok(Metric::Pad),
            "kl" => Ok(Metric::Kl),
            "cosine" => Ok(Metric::Cosine),
            "euclid" => Ok(Metric::Euclid),
            other => Err(Error::Value(format!("unknown metric `{other}`"))),
        }
    }
}

/// Whether a metric sees raw projections or their softmax distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricDomain {
    Raw,
    Dist,
}

impl FromStr for MetricDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(MetricDomain::Raw),
            "dist" => Ok(MetricDomain::Dist),
            other => Err(Error::Value(format!("unknown metric domain `{other}`"))),
        }
    }
}

impl fmt::Display for MetricDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricDomain::Raw => "raw",
            MetricDomain::Dist => "dist",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadProjection {
    pub key: HeadKey,
    pub matrix: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadDistribution {
    pub key: HeadKey,
    pub probs: Vec<f64>,
    pub tau: f64,
}

impl HeadDistribution {
    pub fn from_projection(proj: &HeadProjection, tau: f64) -> Result<Self> {
        Ok(Self { key: proj.key, probs: tempered_softmax(&proj.matrix.to_f64_vec(), tau)?, tau })
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

/// `Wq · (Wkᵀ · Wv)` in binary64. Inputs are `[d, d_k]`, `[d, d_k]`, `[d, d_v]`.
pub fn head_projection(wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    let (d, dk) = matrix_dims(wq, "Wq")?;
    let (dk_rows, dk2) = matrix_dims(wk, "Wk")?;
    let (dv_rows, dv) = matrix_dims(wv, "Wv")?;
    if dk_rows != dv_rows {
        return Err(Error::Shape(format!("Wkᵀ·Wv inner dimension {dk_rows} vs {dv_rows}")));
    }
    if dk != dk2 {
        return Err(Error::Shape(format!("Wq·(Wkᵀ·Wv) inner dimension {dk} vs {dk2}")));
    }
    let (q, k, v) = (wq.to_f64_vec(), wk.to_f64_vec(), wv.to_f64_vec());

    // inner[a, b] = Σ_i k[i, a] v[i, b]
    let mut inner = vec![0.0; dk * dv];
    for i in 0..dk_rows {
        let krow = &k[i * dk..(i + 1) * dk];
        let vrow = &v[i * dv..(i + 1) * dv];
        for (a, &ka) in krow.iter().enumerate() {
            let out = &mut inner[a * dv..(a + 1) * dv];
            for (o, &vb) in out.iter_mut().zip(vrow) {
                *o += ka * vb;
            }
        }
    }
    let mut out = vec![0.0; d * dv];
    for r in 0..d {
        let qrow = &q[r * dk..(r + 1) * dk];
        let orow = &mut out[r * dv..(r + 1) * dv];
        for (a, &qa) in qrow.iter().enumerate() {
            for (o, &x) in orow.iter_mut().zip(&inner[a * dv..(a + 1) * dv]) {
                *o += qa * x;
            }
        }
    }
    Tensor::from_f64(vec![d, dv], out)
}

/// Global softmax of `values / tau` over every entry.
pub fn tempered_softmax(values: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Value(format!("temperature must be positive, got {tau}")));
    }
    if values.is_empty() {
        return Err(Error::Shape("softmax of an empty matrix".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Exact W1 between two equal-size, equal-weight 1-D empirical
/// distributions: the mean absolute difference of the sorted samples.
pub fn w1_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    if p.is_empty() {
        return Ok(0.0);
    }
    let mut a = p.to_vec();
    let mut b = q.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let total: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / p.len() as f64)
}

/// `Σ p·ln(p/q)` in nats, index-aligned.
pub fn kl_divergence(p_base: &[f64], p_task: &[f64]) -> Result<f64> {
    same_len(p_base, p_task)?;
    let mut total = 0.0;
    for (&p, &q) in p_base.iter().zip(p_task) {
        if p > 0.0 {
            if q <= 0.0 {
                return Err(Error::Value("KL undefined: task distribution has a zero where base does not".into()));
            }
            total += p * (p / q).ln();
        }
    }
    // Rounding can leave a tiny negative residue for identical inputs.
    Ok(total.max(0.0))
}

/// `1 − cos(a, b)` on the flattened inputs; larger means more changed.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Value("cosine score of a zero-norm matrix".into()));
    }
    if a == b {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Frobenius norm of `a − b`.
pub fn euclid_score(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}
