//! Training loop, evaluation, and the training configuration file format.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{make_dataset, Example, TaskFamily};
use super::model::ToyModel;
use super::optim::{adamw_step, AdamWParams, AdamWState, LrSchedule};
use crate::error::{Error, Result};
use crate::geometry::ModelGeometry;
use crate::rng::SplitMix64;
use crate::selection::{trainable_plan, HeadMask, TrainablePlan};

/// Which attention q/k/v slices train: the masked subset, all of them
/// (full fine-tuning), or none (attention frozen).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionFreeze {
    Mask,
    #[default]
    All,
    None,
}

impl fmt::Display for AttentionFreeze {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionFreeze::Mask => "mask",
            AttentionFreeze::All => "all",
            AttentionFreeze::None => "none",
        })
    }
}

impl FromStr for AttentionFreeze {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(AttentionFreeze::Mask),
            "all" => Ok(AttentionFreeze::All),
            "none" => Ok(AttentionFreeze::None),
            other => Err(Error::Value(format!("unknown freeze mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task_family: TaskFamily,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "defaults::train_size")]
    pub train_size: usize,
    #[serde(default = "defaults::eval_size")]
    pub eval_size: usize,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "defaults::warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default = "defaults::final_lr_fraction")]
    pub final_lr_fraction: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub freeze: AttentionFreeze,
    /// Head mask file used when `freeze = "mask"`.
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Seed for a fresh model when no `init` checkpoint is given.
    #[serde(default)]
    pub model_seed: u64,
    /// Starting checkpoint; a fresh model is initialized when absent.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub geometry: Option<ModelGeometry>,
    /// Evaluate every this many steps (0 = only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

mod defaults {
    pub fn train_size() -> usize {
        2048
    }
    pub fn eval_size() -> usize {
        256
    }
    pub fn steps() -> usize {
        1000
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn peak_lr() -> f64 {
        3e-4
    }
    pub fn warmup_ratio() -> f64 {
        0.1
    }
    pub fn final_lr_fraction() -> f64 {
        0.1
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        0.1
    }
}

impl TrainConfig {
    pub fn new(task_family: TaskFamily) -> Self {
        Self {
            task_family,
            data_seed: 0,
            train_size: defaults::train_size(),
            eval_size: defaults::eval_size(),
            steps: defaults::steps(),
            batch_size: defaults::batch_size(),
            peak_lr: defaults::peak_lr(),
            warmup_ratio: defaults::warmup_ratio(),
            final_lr_fraction: defaults::final_lr_fraction(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            weight_decay: defaults::weight_decay(),
            freeze: AttentionFreeze::All,
            mask: None,
            shuffle_seed: 0,
            model_seed: 0,
            init: None,
            geometry: None,
            eval_every: 0,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.peak_lr, self.steps, self.warmup_ratio, self.final_lr_fraction)
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Value("steps, batch_size, train_size and eval_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Value(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Value("warmup_ratio and final_lr_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Value("AdamW betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn train_set(&self) -> Result<Vec<Example>> {
        make_dataset(self.task_family, self.data_seed, self.train_size)
    }

    /// Held-out split, drawn from a stream disjoint from the training seed.
    pub fn eval_set(&self) -> Result<Vec<Example>> {
        make_dataset(self.task_family, eval_seed(self.data_seed), self.eval_size)
    }

    /// The trainable plan this configuration implies for `geometry`.
    pub fn plan(&self, geometry: &ModelGeometry, mask: Option<&HeadMask>) -> Result<TrainablePlan> {
        if let Some(m) = mask {
            if m.geometry != *geometry {
                return Err(Error::Geometry(format!(
                    "mask geometry {:?} differs from model geometry {geometry:?}",
                    m.geometry
                )));
            }
            m.validate()?;
        }
        match (self.freeze, mask) {
            (AttentionFreeze::All, _) => Ok(TrainablePlan::full(geometry)),
            (AttentionFreeze::None, _) => Ok(TrainablePlan::frozen_attention(geometry)),
            (AttentionFreeze::Mask, Some(m)) => trainable_plan(m),
            (AttentionFreeze::Mask, None) => Err(Error::Value("freeze = \"mask\" needs a head mask".into())),
        }
    }
}

pub fn eval_seed(data_seed: u64) -> u64 {
    SplitMix64::new(data_seed ^ 0x5EED_E7A1_0000_0001).next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(model: &ToyModel, dataset: &[Example]) -> Result<EvalResult> {
    let (loss, accuracy) = model.evaluate_batch(dataset)?;
    Ok(EvalResult { loss, accuracy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub log: Vec<LogRecord>,
    pub eval: EvalResult,
}

impl TrainOutcome {
    /// Metrics log as line-delimited JSON.
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("log record serializes") + "\n").collect()
    }
}

/// Fine-tune `model` on the configured task. Deterministic in
/// `(model, config, mask)`.
pub fn train(mut model: ToyModel, config: &TrainConfig, mask: Option<&HeadMask>) -> Result<TrainOutcome> {
    config.validate()?;
    let plan = config.plan(model.geometry(), mask)?;
    let train_set = config.train_set()?;
    let eval_set = config.eval_set()?;
    let schedule = config.schedule();
    let hyper = config.adamw();
    let mut state = AdamWState::new(&model);

    let mut rng = SplitMix64::new(config.shuffle_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0;

    let mut log = Vec::with_capacity(config.steps);
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(train_set[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grads) = model.loss_and_grads(&batch, &plan)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at step {step}")));
        }
        let lr = schedule.lr(step);
        adamw_step(&mut model, &grads, &hyper, lr, step, &mut state);

        let mut record = LogRecord { step, loss, lr, eval_loss: None, eval_accuracy: None };
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 && step + 1 < config.steps {
            let e = evaluate(&model, &eval_set)?;
            record.eval_loss = Some(e.loss);
            record.eval_accuracy = Some(e.accuracy);
        }
        log.push(record);
    }
    let eval = evaluate(&model, &eval_set)?;
    if !eval.loss.is_finite() {
        return Err(Error::Numeric(format!("final eval loss is {}", eval.loss)));
    }
    if let Some(last) = log.last_mut() {
        last.eval_loss = Some(eval.loss);
        last.eval_accuracy = Some(eval.accuracy);
    }
    Ok(TrainOutcome { model, log, eval })
}
