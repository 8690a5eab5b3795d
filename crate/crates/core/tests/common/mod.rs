use alps_core::rng::SplitMix64;
use alps_core::selection::TrainablePlan;
use alps_core::trainer::{init_model, make_dataset, ModelConfig, TaskFamily, ToyModel};

/// Give the zero-initialized output head random weights so gradients reach
/// every parameter.
pub fn randomize_head(model: &mut ToyModel, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for w in model.tensor_mut("lm_head.weight").unwrap() {
        *w = rng.uniform(-0.5, 0.5);
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs() / 1e-7
    } else {
        (a - b).abs() / scale
    }
}

/// Largest relative error between analytic and central-difference
/// gradients over `per_param` coordinates of every parameter tensor.
pub fn gradient_check(per_param: usize, seed: u64) -> (f64, usize) {
    let mut model = init_model(ModelConfig::default(), seed).unwrap();
    randomize_head(&mut model, seed + 1);
    let batch = make_dataset(TaskFamily::Copy, seed, 2).unwrap();
    let plan = TrainablePlan::full(model.geometry());
    let (_, grads) = model.loss_and_grads(&batch, &plan).unwrap();
    let layout = model.layout().clone();
    let mut rng = SplitMix64::new(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let h = 1e-5;
    for info in layout.params() {
        for _ in 0..per_param {
            let i = rng.below(info.len() as u64) as usize;
            let idx = info.offset + i;
            let orig = model.params()[idx];
            model.params_mut()[idx] = orig + h;
            let up = model.loss(&batch).unwrap();
            model.params_mut()[idx] = orig - h;
            let down = model.loss(&batch).unwrap();
            model.params_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(&layout, &info.name, i).unwrap();
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
    }
    (worst, checked)
}
