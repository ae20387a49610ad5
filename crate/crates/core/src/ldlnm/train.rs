use log::debug;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{annotator_dists, check_targets, head_deltas, sample_loss, AnnotatorCode, Masks, NeuralParams, Targets};
use crate::data::{empirical_dist, AnnotationMatrix};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// One training example: annotator `annotator` labeled item `item`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub item: usize,
    pub annotator: usize,
    pub targets: Targets,
}

/// One sample per annotation on `items`. y_I is the item's empirical
/// distribution, y_A the annotator's label distribution over `items`, and y
/// the label given.
pub fn build_samples(matrix: &AnnotationMatrix, items: &[usize]) -> Result<Vec<Sample>> {
    let annotators = annotator_dists(matrix, items);
    let mut out = Vec::new();
    for &m in items {
        let y_i = empirical_dist(matrix, m)?;
        for e in matrix.item_entries(m) {
            let y_a = annotators[e.annotator].clone().expect("annotator has a label on this item");
            out.push(Sample { item: m, annotator: e.annotator, targets: Targets { y: e.label, y_i: y_i.clone(), y_a } });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Drop probability on z_P and z_E.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, with dropout active.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= cfg.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.epsilon);
        }
    }
}

fn draw_mask(rng: &mut crate::rng::Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// Mini-batch Adam on the summed loss, averaged over each batch.
pub fn train(
    params: &mut NeuralParams,
    features: &[Vec<f64>],
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let dims = *params.dims();
    for s in samples {
        let x = features.get(s.item).ok_or_else(|| Error::invalid(format!("no features for item {}", s.item + 1)))?;
        params.check_input(x, AnnotatorCode::Column(s.annotator))?;
        check_targets(&s.targets, dims.p)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of item {}", s.item + 1)));
        }
    }

    let mut rng = seeded(cfg.seed);
    let mut adam = Adam { m: vec![0.0; params.len()], v: vec![0.0; params.len()], t: 0 };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport { epoch_losses: Vec::with_capacity(cfg.epochs), steps: 0 };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let masks: Vec<Option<Masks>> = batch
                .iter()
                .map(|_| {
                    (cfg.dropout > 0.0).then(|| Masks {
                        p: draw_mask(&mut rng, dims.j_p, cfg.dropout),
                        e: draw_mask(&mut rng, dims.j_p, cfg.dropout),
                    })
                })
                .collect();
            let (loss, grad) = batch_gradient(params, features, samples, batch, &masks);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, step {} (batch of {})",
                    report.steps,
                    batch.len()
                )));
            }
            let scale = 1.0 / batch.len() as f64;
            let grad: Vec<f64> = grad.into_iter().map(|g| g * scale).collect();
            adam.step(params.as_mut_slice(), &grad, cfg);
            report.steps += 1;
            epoch_loss += loss;
        }
        let mean = epoch_loss / samples.len() as f64;
        debug!("epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Summed loss and gradient over `batch`, reduced in a fixed order.
fn batch_gradient(
    params: &NeuralParams,
    features: &[Vec<f64>],
    samples: &[Sample],
    batch: &[usize],
    masks: &[Option<Masks>],
) -> (f64, Vec<f64>) {
    let partials: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(32)
        .zip(masks.par_chunks(32))
        .map(|(idx, mk)| {
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            for (&i, mask) in idx.iter().zip(mk) {
                let s = &samples[i];
                let x = &features[s.item];
                let code = AnnotatorCode::Column(s.annotator);
                let trace = params.run(x, code, mask.as_ref());
                loss += sample_loss(&trace, &s.targets);
                params.backward(x, code, &trace, &head_deltas(&trace, &s.targets), mask.as_ref(), &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (loss, grad)
}

/// Mean evaluation-mode loss over `samples`.
pub fn mean_loss(params: &NeuralParams, features: &[Vec<f64>], samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += params.loss(&features[s.item], s.annotator, &s.targets)?;
    }
    Ok(total / samples.len().max(1) as f64)
}
