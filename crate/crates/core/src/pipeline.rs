//! Label snapping, a linear-softmax supervised learner, and post-processing
//! of raw predictions through the graph model.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    argmax_label, empirical_dist, kl_divergence, multinomial_log_pmf, round_counts, AnnotationMatrix,
    LabelDistribution, KL_SMOOTHING,
};
use crate::error::{Error, Result};
use crate::pgm::ModelParams;

/// Snapped distribution for item cluster `k`: Σ_l Ω_l Θ_{k,l}.
pub fn cluster_distribution(params: &ModelParams, k: usize) -> LabelDistribution {
    params.item_cluster_marginal(k)
}

/// Replaces each item's labels by the marginal distribution of its cluster.
pub fn snap_labels(params: &ModelParams, w: &[usize]) -> Result<Vec<LabelDistribution>> {
    let k = params.num_item_clusters();
    if let Some(bad) = w.iter().position(|&c| c >= k) {
        return Err(Error::invalid(format!("item {} assigned to cluster {} of {k}", bad + 1, w[bad] + 1)));
    }
    let snapped: Vec<LabelDistribution> = (0..k).map(|c| cluster_distribution(params, c)).collect();
    Ok(w.iter().map(|&c| snapped[c].clone()).collect())
}

/// How compatible a raw prediction is with Cat(Θ_{k,l}).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// exp(Σ_p raw_p ln Θ_{k,l,p}).
    GeometricMean,
    /// exp(−KL(raw ‖ Θ_{k,l})). Differs from the geometric mean only by the
    /// factor exp(H(raw)), so the posterior over clusters is the same.
    ExpNegKl,
    /// Multinomial pmf of `n` pseudo-counts rounded from raw.
    Multinomial { n: u64 },
    /// exp(n Σ_p raw_p ln q_{k,p}) against the cluster marginal
    /// q_k = Σ_l Ω_l Θ_{k,l}: the expected likelihood of n labels from
    /// annotators drawn at random. Replaces the Σ_l mixture.
    Marginal { n: f64 },
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::Marginal { n: 10.0 }
    }
}

fn smoothed(theta: &[f64]) -> Vec<f64> {
    let u = KL_SMOOTHING / theta.len() as f64;
    theta.iter().map(|t| (1.0 - KL_SMOOTHING) * t + u).collect()
}

fn log_compat(kernel: Kernel, raw: &[f64], theta: &[f64]) -> Result<f64> {
    let t = smoothed(theta);
    let cross: f64 = raw.iter().zip(&t).filter(|(r, _)| **r > 0.0).map(|(r, q)| r * q.ln()).sum();
    Ok(match kernel {
        Kernel::GeometricMean => cross,
        Kernel::ExpNegKl => -kl_divergence(raw, theta)?,
        Kernel::Multinomial { n } => multinomial_log_pmf(&round_counts(raw, n), &t),
        Kernel::Marginal { .. } => unreachable!("handled per cluster"),
    })
}

/// Posterior over item clusters for a raw prediction:
/// P(k) ∝ ψ_k Σ_l Ω_l compat(raw, Θ_{k,l}), or ψ_k compat(raw, q_k) for
/// [`Kernel::Marginal`]. Returns the argmax and the posterior.
pub fn assign_cluster(raw: &[f64], params: &ModelParams, kernel: Kernel) -> Result<(usize, LabelDistribution)> {
    if raw.len() != params.num_labels() {
        return Err(Error::LengthMismatch { expected: params.num_labels(), got: raw.len() });
    }
    let (k, l) = (params.num_item_clusters(), params.num_annotator_clusters());
    let mut logw = Vec::with_capacity(k);
    for kk in 0..k {
        if let Kernel::Marginal { n } = kernel {
            let q = smoothed(cluster_distribution(params, kk).probs());
            let cross: f64 = raw.iter().zip(&q).filter(|(r, _)| **r > 0.0).map(|(r, q)| r * q.ln()).sum();
            logw.push(params.psi()[kk].ln() + n * cross);
            continue;
        }
        let terms = (0..l)
            .map(|ll| Ok(params.omega()[ll].ln() + log_compat(kernel, raw, params.theta(kk, ll))?))
            .collect::<Result<Vec<f64>>>()?;
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = if max == f64::NEG_INFINITY {
            max
        } else {
            max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
        };
        logw.push(params.psi()[kk].ln() + lse);
    }
    if logw.iter().all(|v| !v.is_finite() || v.is_nan()) {
        return Err(Error::invalid("cluster posterior has zero total mass"));
    }
    let post = LabelDistribution::from_log_weights(&logw)?;
    Ok((argmax_label(post.probs()), post))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Step size; `None` picks 1 / (mean‖x̃‖² / 2 + l2), for which
    /// full-batch descent is monotone.
    pub step_size: Option<f64>,
    /// Stop when the loss drops by less than this in one epoch.
    pub tol: f64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 2000, step_size: None, tol: 1e-10, l2: 0.0 }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedModel {
    pub num_labels: usize,
    pub feature_dim: usize,
    /// Row-major P × (J+1); the last column is the bias.
    pub weights: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

impl SupervisedModel {
    pub fn zeros(num_labels: usize, feature_dim: usize) -> Self {
        Self {
            num_labels,
            feature_dim,
            weights: vec![0.0; num_labels * (feature_dim + 1)],
            feature_mean: vec![0.0; feature_dim],
            feature_scale: vec![1.0; feature_dim],
        }
    }

    /// Standardized features with a trailing 1.
    fn augment(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> =
            x.iter().zip(&self.feature_mean).zip(&self.feature_scale).map(|((v, m), s)| (v - m) / s).collect();
        out.push(1.0);
        out
    }

    fn logits(&self, xa: &[f64]) -> Vec<f64> {
        self.weights.chunks(self.feature_dim + 1).map(|row| row.iter().zip(xa).map(|(w, x)| w * x).sum()).collect()
    }

    /// h_raw(x).
    pub fn predict_raw(&self, x: &[f64]) -> Result<LabelDistribution> {
        if x.len() != self.feature_dim {
            return Err(Error::LengthMismatch { expected: self.feature_dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
        let mut z = self.logits(&self.augment(x));
        softmax_in_place(&mut z);
        LabelDistribution::new(z)
    }

    /// Mean KL(target ‖ prediction) plus the L2 penalty, and its gradient,
    /// over pre-augmented rows.
    fn loss_and_grad(&self, xs: &[Vec<f64>], targets: &[LabelDistribution], l2: f64) -> (f64, Vec<f64>) {
        let cols = self.feature_dim + 1;
        let n = xs.len() as f64;
        // Fixed chunks summed in order keep the result independent of the
        // thread count.
        let partials: Vec<(f64, Vec<f64>)> = xs
            .par_chunks(64)
            .zip(targets.par_chunks(64))
            .map(|(xc, tc)| {
                let mut loss = 0.0;
                let mut g = vec![0.0; self.weights.len()];
                for (xa, t) in xc.iter().zip(tc) {
                    let mut s = self.logits(xa);
                    softmax_in_place(&mut s);
                    for (&tp, &sp) in t.probs().iter().zip(&s) {
                        if tp > 0.0 {
                            loss += tp * (tp.ln() - sp.ln());
                        }
                    }
                    for p in 0..self.num_labels {
                        let d = s[p] - t.probs()[p];
                        for (gj, xj) in g[p * cols..(p + 1) * cols].iter_mut().zip(xa) {
                            *gj += d * xj;
                        }
                    }
                }
                (loss, g)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.weights.len()];
        for (l, g) in partials {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let mut loss = loss / n;
        let mut grad: Vec<f64> = grad.into_iter().map(|g| g / n).collect();
        if l2 > 0.0 {
            for p in 0..self.num_labels {
                for j in 0..self.feature_dim {
                    let w = self.weights[p * cols + j];
                    loss += 0.5 * l2 * w * w;
                    grad[p * cols + j] += l2 * w;
                }
            }
        }
        (loss, grad)
    }

    /// Mean KL(target ‖ prediction) and its gradient with respect to
    /// `weights`, on raw feature rows.
    pub fn objective(&self, features: &[Vec<f64>], targets: &[LabelDistribution], l2: f64) -> (f64, Vec<f64>) {
        let xs: Vec<Vec<f64>> = features.iter().map(|x| self.augment(x)).collect();
        self.loss_and_grad(&xs, targets, l2)
    }
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let dim = features.first().map(Vec::len).ok_or_else(|| Error::invalid("no training rows"))?;
    for (i, row) in features.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::LengthMismatch { expected: dim, got: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature row {}", i + 1)));
        }
    }
    Ok(dim)
}

/// Full-batch gradient descent on mean KL(target ‖ softmax(W x̃)). Returns
/// the model and the per-epoch loss trace.
pub fn train_supervised(
    features: &[Vec<f64>],
    targets: &[LabelDistribution],
    cfg: &TrainConfig,
) -> Result<(SupervisedModel, Vec<f64>)> {
    if features.len() != targets.len() {
        return Err(Error::LengthMismatch { expected: features.len(), got: targets.len() });
    }
    let dim = check_features(features)?;
    let p = targets[0].len();
    if targets.iter().any(|t| t.len() != p) {
        return Err(Error::invalid("targets disagree on the number of labels"));
    }

    let n = features.len() as f64;
    let mut model = SupervisedModel::zeros(p, dim);
    for j in 0..dim {
        let mean = features.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = features.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        model.feature_mean[j] = mean;
        model.feature_scale[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
    }
    let xs: Vec<Vec<f64>> = features.iter().map(|x| model.augment(x)).collect();
    let step = match cfg.step_size {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(_) => return Err(Error::invalid("step size must be positive")),
        None => {
            let sq = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n;
            1.0 / (0.5 * sq + cfg.l2)
        }
    };

    let mut trace = Vec::new();
    let (mut loss, mut grad) = model.loss_and_grad(&xs, targets, cfg.l2);
    trace.push(loss);
    for _ in 0..cfg.max_epochs {
        model.weights.iter_mut().zip(&grad).for_each(|(w, g)| *w -= step * g);
        let (next, g) = model.loss_and_grad(&xs, targets, cfg.l2);
        if !next.is_finite() {
            return Err(Error::NonFinite("supervised training loss".into()));
        }
        trace.push(next);
        let done = loss - next < cfg.tol;
        loss = next;
        grad = g;
        if done {
            break;
        }
    }
    Ok((model, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub h_raw: LabelDistribution,
    pub cluster: usize,
    pub cluster_posterior: LabelDistribution,
    pub h_dist: LabelDistribution,
    pub h_max: usize,
}

/// h_raw, then cluster assignment, then the snapped h_dist.
pub fn predict(sup: &SupervisedModel, params: &ModelParams, x: &[f64], kernel: Kernel) -> Result<Prediction> {
    let h_raw = sup.predict_raw(x)?;
    let (cluster, cluster_posterior) = assign_cluster(h_raw.probs(), params, kernel)?;
    let h_dist = cluster_distribution(params, cluster);
    let h_max = argmax_label(h_dist.probs());
    Ok(Prediction { h_raw, cluster, cluster_posterior, h_dist, h_max })
}

/// Order of the arguments to KL in [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(prediction ‖ gold), gold smoothed.
    #[default]
    PredictionFirst,
    /// KL(gold ‖ prediction), prediction smoothed.
    GoldFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_kl: f64,
    pub accuracy: f64,
}

/// Mean KL against each item's empirical label distribution, and the rate at
/// which the predicted argmax equals the empirical argmax.
pub fn evaluate(
    predictions: &BTreeMap<usize, LabelDistribution>,
    matrix: &AnnotationMatrix,
    items: &[usize],
    direction: KlDirection,
) -> Result<Metrics> {
    let missing: Vec<usize> = items.iter().filter(|m| !predictions.contains_key(m)).map(|m| m + 1).collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    if items.is_empty() {
        return Err(Error::invalid("no items to evaluate"));
    }
    let mut total_kl = 0.0;
    let mut hits = 0usize;
    for &m in items {
        let pred = &predictions[&m];
        if pred.len() != matrix.num_labels() {
            return Err(Error::LengthMismatch { expected: matrix.num_labels(), got: pred.len() });
        }
        let gold = empirical_dist(matrix, m)?;
        total_kl += match direction {
            KlDirection::PredictionFirst => kl_divergence(pred.probs(), gold.probs())?,
            KlDirection::GoldFirst => kl_divergence(gold.probs(), pred.probs())?,
        };
        hits += usize::from(argmax_label(pred.probs()) == argmax_label(gold.probs()));
    }
    let n = items.len() as f64;
    Ok(Metrics { mean_kl: total_kl / n, accuracy: hits as f64 / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::sample_dirichlet;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    fn dist(v: &[f64]) -> LabelDistribution {
        LabelDistribution::new(v.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    fn random_params(seed: u64, k: usize, l: usize, p: usize) -> ModelParams {
        let mut rng = seeded(seed);
        let theta = (0..k).map(|_| (0..l).map(|_| sample_dirichlet(&mut rng, 1.0, p)).collect()).collect();
        ModelParams::new(theta, sample_dirichlet(&mut rng, 2.0, k), sample_dirichlet(&mut rng, 2.0, l)).unwrap()
    }

    #[test]
    fn snap_with_one_annotator_cluster_is_theta() {
        let params = random_params(1, 3, 1, 4);
        let snapped = snap_labels(&params, &[2, 0]).unwrap();
        assert_close(snapped[0].probs(), params.theta(2, 0));
        assert_close(snapped[1].probs(), params.theta(0, 0));
    }

    #[test]
    fn snap_mixture_by_hand() {
        let params = ModelParams::new(
            vec![vec![dist(&[1.0, 0.0]), dist(&[0.0, 1.0])]],
            dist(&[1.0]),
            dist(&[0.5, 0.5]),
        )
        .unwrap();
        assert_eq!(snap_labels(&params, &[0]).unwrap()[0].probs(), &[0.5, 0.5]);
    }

    #[test]
    fn snap_matches_resummation() {
        let params = random_params(7, 3, 4, 5);
        let w = [0, 1, 2, 1];
        for (m, row) in snap_labels(&params, &w).unwrap().iter().enumerate() {
            for p in 0..5 {
                let direct: f64 = (0..4).map(|l| params.omega()[l] * params.theta(w[m], l)[p]).sum();
                assert_abs_diff_eq!(row.probs()[p], direct, epsilon = 1e-14);
            }
        }
        assert!(snap_labels(&params, &[3]).is_err());
    }

    #[test]
    fn single_cluster_assignment() {
        let params = random_params(2, 1, 2, 3);
        let (k, post) = assign_cluster(&[0.2, 0.3, 0.5], &params, Kernel::default()).unwrap();
        assert_eq!(k, 0);
        assert_eq!(post.probs(), &[1.0]);
    }

    #[test]
    fn raw_equal_to_theta_row_picks_its_cluster() {
        let theta = vec![
            vec![dist(&[0.9, 0.05, 0.05]), dist(&[0.8, 0.1, 0.1])],
            vec![dist(&[0.05, 0.9, 0.05]), dist(&[0.1, 0.8, 0.1])],
            vec![dist(&[0.05, 0.05, 0.9]), dist(&[0.1, 0.1, 0.8])],
        ];
        let params = ModelParams::new(theta, LabelDistribution::uniform(3), LabelDistribution::uniform(2)).unwrap();
        for k in 0..3 {
            for l in 0..2 {
                for kernel in [Kernel::GeometricMean, Kernel::ExpNegKl, Kernel::Multinomial { n: 10 }] {
                    let (got, _) = assign_cluster(params.theta(k, l), &params, kernel).unwrap();
                    // Enumerate the K×L grid directly.
                    let mut best = (f64::NEG_INFINITY, 0);
                    for kk in 0..3 {
                        let s: f64 = (0..2).map(|ll| log_compat(kernel, params.theta(k, l), params.theta(kk, ll)).unwrap().exp()).sum();
                        if s > best.0 {
                            best = (s, kk);
                        }
                    }
                    assert_eq!(got, best.1);
                    assert_eq!(got, k);
                }
            }
        }
    }

    #[test]
    fn exp_neg_kl_posterior_equals_geometric_mean() {
        let params = random_params(9, 3, 2, 4);
        let raw = [0.1, 0.2, 0.3, 0.4];
        let (_, a) = assign_cluster(&raw, &params, Kernel::GeometricMean).unwrap();
        let (_, b) = assign_cluster(&raw, &params, Kernel::ExpNegKl).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-7);
        }
    }

    #[test]
    fn duplicating_an_annotator_cluster_keeps_the_argmax() {
        let mut rng = seeded(4);
        for seed in 0..50 {
            let params = random_params(seed, 3, 2, 4);
            let mut theta = params.theta_nested();
            for row in theta.iter_mut() {
                let extra = row[1].clone();
                row.push(extra);
            }
            let o = params.omega();
            let split = ModelParams::new(
                theta.into_iter().map(|r| r.into_iter().map(|d| dist(&d)).collect()).collect(),
                dist(params.psi()),
                dist(&[o[0], o[1] / 2.0, o[1] / 2.0]),
            )
            .unwrap();
            let raw = sample_dirichlet(&mut rng, 1.0, 4);
            for kernel in [Kernel::GeometricMean, Kernel::default()] {
                let (a, pa) = assign_cluster(raw.probs(), &params, kernel).unwrap();
                let (b, pb) = assign_cluster(raw.probs(), &split, kernel).unwrap();
                assert_eq!(a, b);
                assert!(pa.total_variation(&pb) < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_kernel_matches_mixed_predictions() {
        // Cluster 0 is an even split between two confident annotator groups,
        // cluster 1 is mildly peaked on label 0.
        let theta = vec![
            vec![dist(&[1.0, 0.0]), dist(&[0.0, 1.0])],
            vec![dist(&[0.7, 0.3]), dist(&[0.7, 0.3])],
        ];
        let params = ModelParams::new(theta, LabelDistribution::uniform(2), LabelDistribution::uniform(2)).unwrap();
        let raw = [0.5, 0.5];
        assert_eq!(assign_cluster(&raw, &params, Kernel::GeometricMean).unwrap().0, 1);
        assert_eq!(assign_cluster(&raw, &params, Kernel::default()).unwrap().0, 0);
    }

    #[test]
    fn marginal_kernel_weight_scales_evidence() {
        let params = random_params(5, 3, 2, 4);
        let raw = [0.4, 0.3, 0.2, 0.1];
        let (_, flat) = assign_cluster(&raw, &params, Kernel::Marginal { n: 0.0 }).unwrap();
        assert!(flat.total_variation(&dist(params.psi())) < 1e-12);
        let logw = |n: f64| -> Vec<f64> {
            (0..3)
                .map(|k| {
                    let q = smoothed(cluster_distribution(&params, k).probs());
                    params.psi()[k].ln() + n * raw.iter().zip(&q).map(|(r, q)| r * q.ln()).sum::<f64>()
                })
                .collect()
        };
        let (_, post) = assign_cluster(&raw, &params, Kernel::Marginal { n: 7.0 }).unwrap();
        let expected = LabelDistribution::from_log_weights(&logw(7.0)).unwrap();
        assert!(post.total_variation(&expected) < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let features: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| normal.sample(&mut rng)).collect()).collect();
        let targets: Vec<_> = (0..12).map(|_| sample_dirichlet(&mut rng, 1.0, 4)).collect();
        let mut model = SupervisedModel::zeros(4, 3);
        model.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        let (_, grad) = model.objective(&features, &targets, 0.1);
        let h = 1e-5;
        for i in 0..model.weights.len() {
            let mut plus = model.clone();
            plus.weights[i] += h;
            let mut minus = model.clone();
            minus.weights[i] -= h;
            let fd = (plus.objective(&features, &targets, 0.1).0 - minus.objective(&features, &targets, 0.1).0) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-5, "weight {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn constant_targets_give_constant_prediction() {
        let mut rng = seeded(5);
        let features: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let target = dist(&[0.6, 0.3, 0.1]);
        let (model, trace) = train_supervised(&features, &vec![target.clone(); 40], &TrainConfig::default()).unwrap();
        assert!(*trace.last().unwrap() < 1e-6);
        let pred = model.predict_raw(&[0.3, 0.9]).unwrap();
        assert!(pred.total_variation(&target) < 1e-3);
    }

    #[test]
    fn separable_clusters_are_learned_and_loss_is_monotone() {
        let mut rng = seeded(6);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            let center = if c == 0 { -2.0 } else { 2.0 };
            features.push(vec![center + normal.sample(&mut rng), normal.sample(&mut rng)]);
            targets.push(LabelDistribution::one_hot(2, c));
        }
        let (model, trace) = train_supervised(&features, &targets, &TrainConfig::default()).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        let correct = features
            .iter()
            .zip(&targets)
            .filter(|(x, t)| argmax_label(model.predict_raw(x).unwrap().probs()) == argmax_label(t.probs()))
            .count();
        assert!(correct as f64 / 200.0 >= 0.95);
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let t = vec![LabelDistribution::uniform(2); 2];
        assert!(train_supervised(&[vec![1.0], vec![f64::NAN]], &t, &TrainConfig::default()).is_err());
    }

    #[test]
    fn single_cluster_prediction_is_constant() {
        let params = random_params(3, 1, 1, 3);
        let (sup, _) = train_supervised(
            &[vec![0.0], vec![1.0]],
            &[dist(&[1.0, 0.0, 0.0]), dist(&[0.0, 1.0, 0.0])],
            &TrainConfig::default(),
        )
        .unwrap();
        for x in [-3.0, 0.5, 10.0] {
            let pred = predict(&sup, &params, &[x], Kernel::default()).unwrap();
            assert_close(pred.h_dist.probs(), params.theta(0, 0));
            assert_eq!(pred.h_max, argmax_label(pred.h_dist.probs()));
        }
    }

    fn three_items() -> AnnotationMatrix {
        AnnotationMatrix::from_triples(
            3,
            2,
            2,
            [(0, 0, 0), (0, 1, 0), (1, 0, 0), (1, 1, 1), (2, 0, 1), (2, 1, 1)],
        )
        .unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let matrix = three_items();
        let preds: BTreeMap<_, _> = (0..3).map(|m| (m, empirical_dist(&matrix, m).unwrap())).collect();
        let metrics = evaluate(&preds, &matrix, &[0, 1, 2], KlDirection::default()).unwrap();
        assert!(metrics.mean_kl < 1e-8);
        assert_eq!(metrics.accuracy, 1.0);
    }

    #[test]
    fn uniform_prediction_against_one_hot_gold() {
        let matrix = AnnotationMatrix::from_triples(1, 1, 5, [(0, 0, 3)]).unwrap();
        let preds = BTreeMap::from([(0, LabelDistribution::uniform(5))]);
        let gold_first = evaluate(&preds, &matrix, &[0], KlDirection::GoldFirst).unwrap();
        assert_abs_diff_eq!(gold_first.mean_kl, 5f64.ln(), epsilon = 1e-6);
        // Prediction first puts mass where the smoothed gold is ~1e-9/5.
        let pred_first = evaluate(&preds, &matrix, &[0], KlDirection::PredictionFirst).unwrap();
        let tiny = KL_SMOOTHING / 5.0;
        let expected = 0.8 * (0.2 / tiny).ln() + 0.2 * (0.2 / (1.0 - KL_SMOOTHING + tiny)).ln();
        assert_abs_diff_eq!(pred_first.mean_kl, expected, epsilon = 1e-9);
    }

    #[test]
    fn hand_computed_three_items() {
        let matrix = three_items();
        let preds = BTreeMap::from([
            (0, dist(&[0.75, 0.25])),
            (1, dist(&[0.5, 0.5])),
            (2, dist(&[0.6, 0.4])),
        ]);
        let metrics = evaluate(&preds, &matrix, &[0, 1, 2], KlDirection::GoldFirst).unwrap();
        // Gold: (1,0), (0.5,0.5), (0,1); smoothing effect is below 1e-8.
        let expected = ((1.0f64 / 0.75).ln() + 0.0 + (1.0f64 / 0.4).ln()) / 3.0;
        assert_abs_diff_eq!(metrics.mean_kl, expected, epsilon = 1e-8);
        // Argmax ties resolve to the first label: item 2 gold argmax is 0.
        assert_abs_diff_eq!(metrics.accuracy, 2.0 / 3.0);
    }

    #[test]
    fn missing_predictions_are_listed() {
        let matrix = three_items();
        let preds = BTreeMap::from([(1, dist(&[0.5, 0.5]))]);
        match evaluate(&preds, &matrix, &[0, 1, 2], KlDirection::default()) {
            Err(Error::MissingPredictions(ids)) => assert_eq!(ids, vec![1, 3]),
            other => panic!("{other:?}"),
        }
    }
}
