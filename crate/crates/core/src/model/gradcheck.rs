use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::forward::BiMamba;
use crate::error::Result;
use crate::tensor::{relative_error, Tensor};

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compare the backward pass against central differences for every
/// coordinate of every parameter, in `f64`, on one random sample.
pub fn check_gradients(config: &ModelConfig, seed: u64, step: f64, floor: f64) -> Result<GradCheckReport> {
    let model = BiMamba::<f64>::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let shape = [config.height, config.width];
    let frontal = Tensor::<f64>::sample_uniform(&shape, 0.0, 1.0, &mut rng)?;
    let lateral = Tensor::<f64>::sample_uniform(&shape, 0.0, 1.0, &mut rng)?;
    let label = true;
    let (_, grads) = model.loss_and_gradients(&frontal, &lateral, label)?;

    let mut analytic = Vec::new();
    grads.visit(|name, g| analytic.push((name, g.clone())));
    let mut report = GradCheckReport {
        coordinates: 0,
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
    };
    let mut probe = model.clone();
    for (p, (name, grad)) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = stored_value(&model, p, i);
            set_coordinate(&mut probe, p, i, orig + step);
            let up = probe.loss(&frontal, &lateral, label)?;
            set_coordinate(&mut probe, p, i, orig - step);
            let down = probe.loss(&frontal, &lateral, label)?;
            set_coordinate(&mut probe, p, i, orig);
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(grad.data()[i], numeric, floor);
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_parameter = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn stored_value(model: &BiMamba<f64>, param: usize, index: usize) -> f64 {
    let mut k = 0;
    let mut out = 0.0;
    model.params.visit(|_, t| {
        if k == param {
            out = t.data()[index];
        }
        k += 1;
    });
    out
}

fn set_coordinate(model: &mut BiMamba<f64>, param: usize, index: usize, value: f64) {
    let mut k = 0;
    model.params.visit_mut(|_, t| {
        if k == param {
            t.data_mut()[index] = value;
        }
        k += 1;
    });
}
