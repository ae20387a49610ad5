//! Sampling planted-truth datasets from the generative process of the graph
//! model: cluster label distributions, cluster priors, hidden item/annotator
//! clusters, then one categorical label per assigned (item, annotator) pair.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, AnnotationMatrix, LabelDistribution};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

/// Cluster counts and symmetric Dirichlet concentrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Number of item clusters.
    pub k: usize,
    /// Number of annotator clusters.
    pub l: usize,
    /// Prior on each cluster-pair label distribution.
    pub alpha: f64,
    /// Prior on the item-cluster distribution.
    pub gamma: f64,
    /// Prior on the annotator-cluster distribution.
    pub tau: f64,
}

impl Hyperparams {
    pub fn new(k: usize, l: usize, alpha: f64, gamma: f64, tau: f64) -> Result<Self> {
        let hp = Self { k, l, alpha, gamma, tau };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 {
            return Err(Error::invalid("cluster counts K and L must be at least 1"));
        }
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("tau", self.tau)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// The closed-form M-step needs every concentration to be at least 1.
    pub fn validate_for_em(&self) -> Result<()> {
        self.validate()?;
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("tau", self.tau)] {
            if v < 1.0 {
                return Err(Error::invalid(format!("EM requires {name} >= 1, got {v}")));
            }
        }
        Ok(())
    }
}

/// Parameters and hidden assignments drawn by [`gen_graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    /// `theta[k][l]`: label distribution of item cluster k, annotator cluster l.
    pub theta: Vec<Vec<LabelDistribution>>,
    pub psi: LabelDistribution,
    pub omega: LabelDistribution,
    /// Item clusters (0-based).
    pub w: Vec<usize>,
    /// Annotator clusters (0-based).
    pub z: Vec<usize>,
}

impl GroundTruthModel {
    /// Label distribution of item cluster `k` marginalized over annotator
    /// clusters.
    pub fn item_cluster_marginal(&self, k: usize) -> LabelDistribution {
        marginal(&self.theta[k], self.omega.probs())
    }
}

fn marginal(row: &[LabelDistribution], omega: &[f64]) -> LabelDistribution {
    let p = row[0].len();
    let mut out = vec![0.0; p];
    for (dist, w) in row.iter().zip(omega) {
        for (o, v) in out.iter_mut().zip(dist.probs()) {
            *o += w * v;
        }
    }
    LabelDistribution::from_weights(out).expect("mixture of distributions")
}

/// Draws from a symmetric Dirichlet via normalized Gamma variates.
pub fn sample_dirichlet(rng: &mut Rng, concentration: f64, dim: usize) -> LabelDistribution {
    sample_dirichlet_vec(rng, &vec![concentration; dim])
}

/// Draws from Dirichlet(`concentrations`).
///
/// Shapes below 1 are sampled in log space as `Gamma(a + 1) * U^(1/a)` so that
/// tiny concentrations do not underflow to an all-zero vector.
pub fn sample_dirichlet_vec(rng: &mut Rng, concentrations: &[f64]) -> LabelDistribution {
    let log_draws: Vec<f64> = concentrations
        .iter()
        .map(|&a| {
            if a >= 1.0 {
                Gamma::new(a, 1.0).expect("positive shape").sample(rng).ln()
            } else {
                let g = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                g.ln() + u.ln() / a
            }
        })
        .collect();
    LabelDistribution::from_log_weights(&log_draws).expect("finite gamma draws")
}

/// Draws an index from a categorical distribution.
pub fn sample_categorical(rng: &mut Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Options beyond the plain generative process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    /// Resample Θ and Ω until every pair of item clusters has marginal
    /// label distributions at least this far apart in total variation.
    pub min_separation: Option<f64>,
    pub max_tries: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { min_separation: None, max_tries: 100_000 }
    }
}

/// Samples a model and labels for exactly the pairs in `assignments`.
pub fn gen_graph(
    hp: &Hyperparams,
    num_items: usize,
    num_annotators: usize,
    num_labels: usize,
    assignments: &[(usize, usize)],
    seed: u64,
) -> Result<(GroundTruthModel, AnnotationMatrix)> {
    gen_graph_with(hp, num_items, num_annotators, num_labels, assignments, GenOptions::default(), seed)
}

pub fn gen_graph_with(
    hp: &Hyperparams,
    num_items: usize,
    num_annotators: usize,
    num_labels: usize,
    assignments: &[(usize, usize)],
    opts: GenOptions,
    seed: u64,
) -> Result<(GroundTruthModel, AnnotationMatrix)> {
    hp.validate()?;
    if num_labels == 0 {
        return Err(Error::invalid("P must be at least 1"));
    }
    if assignments.is_empty() {
        return Err(Error::invalid("empty assignment set"));
    }
    let mut covered = vec![false; num_items];
    for &(m, n) in assignments {
        if m >= num_items || n >= num_annotators {
            return Err(Error::invalid(format!("assignment ({}, {}) out of range", m + 1, n + 1)));
        }
        covered[m] = true;
    }
    if let Some(m) = covered.iter().position(|c| !c) {
        return Err(Error::invalid(format!("item {} has no assigned annotator", m + 1)));
    }

    let mut rng = seeded(seed);
    let draw_theta = |rng: &mut Rng| -> Vec<Vec<LabelDistribution>> {
        (0..hp.k)
            .map(|_| (0..hp.l).map(|_| sample_dirichlet(rng, hp.alpha, num_labels)).collect())
            .collect()
    };
    let mut theta = draw_theta(&mut rng);
    let psi = sample_dirichlet(&mut rng, hp.gamma, hp.k);
    let mut omega = sample_dirichlet(&mut rng, hp.tau, hp.l);
    if let Some(floor) = opts.min_separation {
        let mut tries = 1;
        while min_pairwise_tv(&theta, omega.probs()) < floor {
            if tries >= opts.max_tries {
                return Err(Error::invalid(format!(
                    "no Θ with separation {floor} found in {tries} draws"
                )));
            }
            theta = draw_theta(&mut rng);
            omega = sample_dirichlet(&mut rng, hp.tau, hp.l);
            tries += 1;
        }
    }
    let w: Vec<usize> = (0..num_items).map(|_| sample_categorical(&mut rng, psi.probs())).collect();
    let z: Vec<usize> = (0..num_annotators).map(|_| sample_categorical(&mut rng, omega.probs())).collect();
    let entries = assignments
        .iter()
        .map(|&(m, n)| Annotation {
            item: m,
            annotator: n,
            label: sample_categorical(&mut rng, theta[w[m]][z[n]].probs()),
        })
        .collect();
    let matrix = AnnotationMatrix::new(num_items, num_annotators, num_labels, entries)?;
    Ok((GroundTruthModel { theta, psi, omega, w, z }, matrix))
}

/// Smallest total-variation distance between item-cluster marginals.
pub fn min_pairwise_tv(theta: &[Vec<LabelDistribution>], omega: &[f64]) -> f64 {
    let marginals: Vec<_> = theta.iter().map(|row| marginal(row, omega)).collect();
    let mut min = f64::INFINITY;
    for a in 0..marginals.len() {
        for b in a + 1..marginals.len() {
            min = min.min(marginals[a].total_variation(&marginals[b]));
        }
    }
    min
}

/// Matches each item with `per_item` distinct annotators, uniformly at random.
pub fn random_assignment(
    num_items: usize,
    num_annotators: usize,
    per_item: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if per_item > num_annotators {
        return Err(Error::invalid(format!(
            "cannot draw {per_item} distinct annotators out of {num_annotators}"
        )));
    }
    if per_item == 0 {
        return Err(Error::invalid("annotators per item must be at least 1"));
    }
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(num_items * per_item);
    for m in 0..num_items {
        let mut picks = index::sample(&mut rng, num_annotators, per_item).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|n| (m, n)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn single_cluster_frequencies_follow_theta() {
        let hp = Hyperparams::new(1, 1, 1.0, 1.0, 1.0).unwrap();
        // 10^5 entries: 10_000 items x 10 annotators.
        let a = random_assignment(10_000, 10, 10, 1).unwrap();
        let (truth, m) = gen_graph(&hp, 10_000, 10, 4, &a, 2).unwrap();
        assert_eq!(m.len(), 100_000);
        let mut freq = [0.0; 4];
        for e in m.entries() {
            freq[e.label] += 1.0 / 100_000.0;
        }
        for p in 0..4 {
            assert!((freq[p] - truth.theta[0][0].probs()[p]).abs() < 0.01);
        }
    }

    #[test]
    fn huge_alpha_gives_uniform_theta() {
        let hp = Hyperparams::new(3, 2, 1e6, 2.0, 2.0).unwrap();
        let a = random_assignment(5, 4, 2, 0).unwrap();
        let (truth, _) = gen_graph(&hp, 5, 4, 5, &a, 9).unwrap();
        for row in &truth.theta {
            for d in row {
                assert!(d.probs().iter().all(|p| (p - 0.2).abs() < 0.01));
            }
        }
    }

    #[test]
    fn tiny_concentration_stays_on_simplex() {
        let mut rng = seeded(5);
        for _ in 0..200 {
            let d = sample_dirichlet(&mut rng, 1e-3, 6);
            assert!(LabelDistribution::new(d.probs().to_vec()).is_ok());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let hp = Hyperparams::new(2, 3, 2.0, 2.0, 2.0).unwrap();
        let a = random_assignment(20, 8, 3, 4).unwrap();
        let one = gen_graph(&hp, 20, 8, 3, &a, 77).unwrap();
        let two = gen_graph(&hp, 20, 8, 3, &a, 77).unwrap();
        assert_eq!(one, two);
        assert_eq!(a, random_assignment(20, 8, 3, 4).unwrap());
    }

    #[test]
    fn invalid_assignments_rejected() {
        let hp = Hyperparams::new(1, 1, 2.0, 2.0, 2.0).unwrap();
        assert!(gen_graph(&hp, 2, 2, 2, &[], 0).is_err());
        assert!(gen_graph(&hp, 2, 2, 2, &[(0, 0)], 0).is_err());
        assert!(random_assignment(2, 3, 4, 0).is_err());
        assert!(Hyperparams::new(0, 1, 1.0, 1.0, 1.0).is_err());
        assert!(Hyperparams::new(1, 1, -1.0, 1.0, 1.0).is_err());
        assert!(Hyperparams::new(1, 1, 0.5, 1.0, 1.0).unwrap().validate_for_em().is_err());
    }

    #[test]
    fn full_assignment_when_per_item_equals_n() {
        let a = random_assignment(3, 5, 5, 8).unwrap();
        let expected: Vec<_> = (0..3).flat_map(|m| (0..5).map(move |n| (m, n))).collect();
        assert_eq!(a, expected);
    }

    #[test]
    fn table_scale_assignment() {
        let a = random_assignment(2000, 1185, 10, 3).unwrap();
        assert_eq!(a.len(), 20_000);
        let distinct: HashSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 20_000);
        // Per-annotator load is Binomial(M, k/N); its mean is M*k/N.
        let mut load = vec![0usize; 1185];
        for &(_, n) in &a {
            load[n] += 1;
        }
        let mean = load.iter().sum::<usize>() as f64 / 1185.0;
        let expected = 2000.0 * 10.0 / 1185.0;
        assert!((mean - expected).abs() < 1e-9);
        let var = load.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / 1184.0;
        let binom_var = 2000.0 * (10.0 / 1185.0) * (1.0 - 10.0 / 1185.0);
        assert!((var / binom_var - 1.0).abs() < 0.15, "var {var} vs {binom_var}");
    }

    #[test]
    fn separation_floor_is_enforced() {
        let hp = Hyperparams::new(3, 2, 2.0, 2.0, 2.0).unwrap();
        let a = random_assignment(10, 5, 2, 0).unwrap();
        let opts = GenOptions { min_separation: Some(0.4), ..Default::default() };
        let (truth, _) = gen_graph_with(&hp, 10, 5, 5, &a, opts, 3).unwrap();
        assert!(min_pairwise_tv(&truth.theta, truth.omega.probs()) >= 0.4);
    }

    #[test]
    fn conditional_frequencies_pass_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        // One item cluster and one annotator cluster per cell; 10^4 draws per cell.
        let hp = Hyperparams::new(2, 2, 2.0, 2.0, 2.0).unwrap();
        let a = random_assignment(2000, 40, 40, 6).unwrap();
        let (truth, m) = gen_graph(&hp, 2000, 40, 4, &a, 12).unwrap();
        let mut counts = vec![[0.0f64; 4]; 4];
        for e in m.entries() {
            counts[truth.w[e.item] * 2 + truth.z[e.annotator]][e.label] += 1.0;
        }
        let crit = ChiSquared::new(3.0).unwrap().inverse_cdf(0.999);
        for (cell, c) in counts.iter().enumerate() {
            let n: f64 = c.iter().sum();
            if n < 10_000.0 {
                continue;
            }
            let theta = truth.theta[cell / 2][cell % 2].probs();
            let stat: f64 = (0..4).map(|p| (c[p] - n * theta[p]).powi(2) / (n * theta[p])).sum();
            assert!(stat < crit, "cell {cell}: chi2 {stat} >= {crit}");
        }
    }
}
