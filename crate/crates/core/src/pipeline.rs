//! End-to-end runs: train a task model, score it against its base, select
//! heads, and fine-tune the base under the resulting mask.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::Metric;
use crate::scoring::{score_all_heads, ScoreReport};
use crate::selection::{select_layer_consistent, select_random, select_topk, HeadMask, Strategy};
use crate::trainer::{train, AttentionFreeze, EvalResult, ToyModel, TrainConfig, TrainOutcome};

/// Fully fine-tune `base` on the configured task and score every head of
/// the result against `base`.
pub fn localize(
    base: &ToyModel,
    config: &TrainConfig,
    metric: Metric,
    tau: f64,
) -> Result<(TrainOutcome, ScoreReport)> {
    let mut full = config.clone();
    full.freeze = AttentionFreeze::All;
    let task = train(base.clone(), &full, None)?;
    let report = score_models(base, &task.model, metric, tau)?;
    Ok((task, report))
}

pub fn score_models(base: &ToyModel, task: &ToyModel, metric: Metric, tau: f64) -> Result<ScoreReport> {
    score_all_heads(
        &base.to_checkpoint()?,
        &task.to_checkpoint()?,
        base.geometry(),
        metric,
        metric.default_domain(),
        tau,
    )
}

/// Head mask for `strategy`. Top-K reads the report; the random strategies
/// only use its geometry.
pub fn select_heads(strategy: Strategy, report: &ScoreReport, ratio: f64, seed: u64) -> Result<HeadMask> {
    match strategy {
        Strategy::Topk => select_topk(report, ratio),
        Strategy::Random => select_random(&report.geometry, ratio, seed),
        Strategy::Lc => select_layer_consistent(&report.geometry, ratio, seed),
    }
}

/// Fine-tune `base` with only the masked heads' attention slices trainable.
pub fn finetune_masked(base: &ToyModel, config: &TrainConfig, mask: &HeadMask) -> Result<TrainOutcome> {
    let mut c = config.clone();
    c.freeze = AttentionFreeze::Mask;
    train(base.clone(), &c, Some(mask))
}

/// Fine-tune `base` under a freeze mode that needs no mask.
pub fn finetune(base: &ToyModel, config: &TrainConfig, freeze: AttentionFreeze) -> Result<TrainOutcome> {
    let mut c = config.clone();
    c.freeze = freeze;
    train(base.clone(), &c, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub selected: usize,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

/// Masked fine-tuning over the grid `ratios × strategies × seeds`.
///
/// A row's seed drives both batch shuffling and the random strategies, so
/// at ratio 1.0 every strategy yields the same run. Rows come back in grid
/// order however the runs were scheduled.
pub fn sweep(
    base: &ToyModel,
    report: &ScoreReport,
    config: &TrainConfig,
    ratios: &[f64],
    strategies: &[Strategy],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let mut grid = Vec::with_capacity(ratios.len() * strategies.len() * seeds.len());
    for &ratio in ratios {
        for &strategy in strategies {
            for &seed in seeds {
                grid.push((ratio, strategy, seed));
            }
        }
    }
    grid.par_iter()
        .map(|&(ratio, strategy, seed)| {
            let mask = select_heads(strategy, report, ratio, seed)?;
            let mut c = config.clone();
            c.shuffle_seed = seed;
            let EvalResult { loss, accuracy } = finetune_masked(base, &c, &mask)?.eval;
            Ok(SweepRow {
                ratio,
                strategy,
                seed,
                selected: mask.selected.len(),
                eval_loss: loss,
                eval_accuracy: accuracy,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio,strategy,seed,selected,eval_loss,eval_accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.ratio, r.strategy, r.seed, r.selected, r.eval_loss, r.eval_accuracy
        ));
    }
    out
}

/// Sample mean of `values`.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `|a ∩ b| / |a ∪ b|` over the selected heads.
pub fn jaccard(a: &HeadMask, b: &HeadMask) -> f64 {
    let inter = a.selected.iter().filter(|k| b.contains(k)).count();
    let union = a.selected.len() + b.selected.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Monte Carlo estimate of the mean intersection size and mean Jaccard
/// overlap of two independent uniform K-subsets of the geometry's heads.
pub fn random_overlap_expectation(
    geometry: &crate::geometry::ModelGeometry,
    ratio: f64,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = crate::rng::SplitMix64::new(seed);
    let (mut inter, mut jac) = (0.0, 0.0);
    for _ in 0..draws {
        let a = select_random(geometry, ratio, rng.next_u64())?;
        let b = select_random(geometry, ratio, rng.next_u64())?;
        inter += a.selected.iter().filter(|k| b.contains(k)).count() as f64;
        jac += jaccard(&a, &b);
    }
    Ok((inter / draws as f64, jac / draws as f64))
}
