//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use super::model::{Gradients, ToyModel};

/// Linear warmup to `peak`, then cosine decay to `final_fraction · peak`
/// at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub final_fraction: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_ratio: f64, final_fraction: f64) -> Self {
        let warmup_steps = ((warmup_ratio * total_steps as f64).round() as usize).min(total_steps.saturating_sub(1));
        Self { peak, total_steps, warmup_steps, final_fraction }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / (self.warmup_steps + 1) as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(1).saturating_sub(self.warmup_steps);
        let floor = self.final_fraction * self.peak;
        if decay_steps == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        self.peak - (self.peak - floor) * 0.5 * (1.0 - (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// First and second moments, one slot per model parameter. Slots of frozen
/// parameters are never touched.
#[derive(Clone, Debug)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamWState {
    pub fn new(model: &ToyModel) -> Self {
        let n = model.params().len();
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One AdamW update of every slice present in `grads`. `step_index` is
/// 0-based; bias correction uses `step_index + 1`.
pub fn adamw_step(
    model: &mut ToyModel,
    grads: &Gradients,
    hyper: &AdamWParams,
    lr: f64,
    step_index: usize,
    state: &mut AdamWState,
) {
    let t = (step_index + 1) as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let layout = model.layout().clone();
    let params = model.params_mut();
    for sg in &grads.slices {
        let info = &layout.params()[sg.slice.param];
        let start = info.offset + sg.slice.rows.start * info.cols();
        let decay = if info.decays() { hyper.weight_decay } else { 0.0 };
        for (i, &g) in sg.values.iter().enumerate() {
            let idx = start + i;
            let m = hyper.beta1 * state.m[idx] + (1.0 - hyper.beta1) * g;
            let v = hyper.beta2 * state.v[idx] + (1.0 - hyper.beta2) * g * g;
            state.m[idx] = m;
            state.v[idx] = v;
            let update = (m / bc1) / ((v / bc2).sqrt() + hyper.eps);
            params[idx] -= lr * (update + decay * params[idx]);
        }
    }
}
