use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{kl_from_logs, AnnotatorCode, NeuralParams};
use crate::data::LabelDistribution;
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Gradient step size.
    pub beta: f64,
    /// Weight decay applied to the embedding each step.
    pub decay: f64,
    pub steps: usize,
    /// Standard deviation of the initial embedding; 0 starts from zeros.
    pub sigma_a: f64,
    /// Stop once one step improves the KL by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { beta: 0.1, decay: 0.0, steps: 200, sigma_a: 0.0, tol: 1e-9, seed: 0 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.decay >= 0.0) || !(self.sigma_a >= 0.0) || self.steps == 0 {
            return Err(Error::invalid("inference needs beta ≥ 0, decay ≥ 0, sigma_a ≥ 0 and at least one step"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub z_a: Vec<f64>,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub steps: usize,
}

/// KL(y_I ‖ z_yI) for a free annotator code, and its gradient.
pub fn embedding_kl_and_grad(params: &NeuralParams, x: &[f64], y_i: &[f64], z_a: &[f64]) -> (f64, Vec<f64>) {
    let code = AnnotatorCode::Free(z_a);
    let t = params.run(x, code, None);
    let kl = kl_from_logs(y_i, &t.log_probs[1]);
    let mut d_yi: Vec<f64> = t.log_probs[1].iter().map(|v| v.exp()).collect();
    d_yi.iter_mut().zip(y_i).for_each(|(d, y)| *d -= y);
    let zeros = vec![0.0; params.dims().p];
    let g = params.backward(x, code, &t, &[zeros.clone(), d_yi, zeros], None, &mut []);
    (kl, g)
}

/// Fits an annotator code to an item's label distribution with all network
/// weights frozen.
pub fn infer_annotator(
    params: &NeuralParams,
    x: &[f64],
    y_i: &LabelDistribution,
    cfg: &InferenceConfig,
) -> Result<InferenceResult> {
    cfg.validate()?;
    let d = params.dims();
    if y_i.len() != d.p {
        return Err(Error::LengthMismatch { expected: d.p, got: y_i.len() });
    }
    let mut z_a = vec![0.0; d.j_a];
    params.check_input(x, AnnotatorCode::Free(&z_a))?;
    if cfg.sigma_a > 0.0 {
        let normal = Normal::new(0.0, cfg.sigma_a).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = seeded(cfg.seed);
        z_a.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    let (initial_kl, mut grad) = embedding_kl_and_grad(params, x, y_i.probs(), &z_a);
    let mut kl = initial_kl;
    let mut steps = 0;
    for _ in 0..cfg.steps {
        let next: Vec<f64> = z_a.iter().zip(&grad).map(|(z, g)| z - cfg.beta * g - cfg.decay * z).collect();
        let (next_kl, next_grad) = embedding_kl_and_grad(params, x, y_i.probs(), &next);
        if !next_kl.is_finite() {
            return Err(Error::NonFinite("annotator inference KL".into()));
        }
        z_a = next;
        grad = next_grad;
        steps += 1;
        let improvement = kl - next_kl;
        kl = next_kl;
        if improvement < cfg.tol {
            break;
        }
    }
    Ok(InferenceResult { z_a, initial_kl, final_kl: kl, steps })
}

/// Largest relative error between the code gradient and central differences.
pub fn embedding_gradient_check(params: &NeuralParams, x: &[f64], y_i: &[f64], z_a: &[f64], h: f64) -> f64 {
    let (_, grad) = embedding_kl_and_grad(params, x, y_i, z_a);
    let mut probe = z_a.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..z_a.len() {
        probe[i] = z_a[i] + h;
        let up = embedding_kl_and_grad(params, x, y_i, &probe).0;
        probe[i] = z_a[i] - h;
        let down = embedding_kl_and_grad(params, x, y_i, &probe).0;
        probe[i] = z_a[i];
        worst = worst.max(super::relative_error((up - down) / (2.0 * h), grad[i]));
    }
    worst
}
