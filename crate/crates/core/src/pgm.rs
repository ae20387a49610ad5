//! The graph model's complete-data log-likelihood and the incremental
//! differences used by local search.
//!
//! The Dirichlet normalizing constants are dropped throughout, so
//!
//! ```text
//! ll = (α-1) Σ_{k,l,p} ln Θ_{k,l,p} + (γ-1) Σ_k ln ψ_k + Σ_m ln ψ_{w_m}
//!    + (τ-1) Σ_l ln Ω_l + Σ_n ln Ω_{z_n} + Σ_{(m,n)∈A} ln Θ_{w_m,z_n,Y_mn}
//! ```
//!
//! A zero probability under a log with a positive coefficient yields
//! `f64::NEG_INFINITY`; callers treat a non-finite value as a degenerate state.

use crate::data::{AnnotationMatrix, LabelDistribution};
use crate::error::{Error, Result};
use crate::genmodel::{GroundTruthModel, Hyperparams};

/// `c * ln(x)` with the convention that a zero coefficient contributes nothing.
#[inline]
pub(crate) fn xln(c: f64, x: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c * x.ln()
    }
}

/// Θ (K×L×P, row-major), ψ (K) and Ω (L).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    k: usize,
    l: usize,
    p: usize,
    theta: Vec<f64>,
    psi: Vec<f64>,
    omega: Vec<f64>,
}

impl ModelParams {
    pub fn new(theta: Vec<Vec<LabelDistribution>>, psi: LabelDistribution, omega: LabelDistribution) -> Result<Self> {
        let k = theta.len();
        let l = theta.first().map_or(0, Vec::len);
        let p = theta.first().and_then(|r| r.first()).map_or(0, LabelDistribution::len);
        if k == 0 || l == 0 || p == 0 {
            return Err(Error::invalid("Θ must be non-empty"));
        }
        if psi.len() != k || omega.len() != l {
            return Err(Error::invalid(format!(
                "ψ has {} entries and Ω {} for a {k}x{l} Θ",
                psi.len(),
                omega.len()
            )));
        }
        let mut flat = Vec::with_capacity(k * l * p);
        for row in &theta {
            if row.len() != l {
                return Err(Error::invalid("ragged Θ"));
            }
            for d in row {
                if d.len() != p {
                    return Err(Error::invalid("Θ rows disagree on P"));
                }
                flat.extend_from_slice(d.probs());
            }
        }
        Ok(Self { k, l, p, theta: flat, psi: psi.into_vec(), omega: omega.into_vec() })
    }

    /// Uniform Θ, ψ and Ω.
    pub fn uniform(k: usize, l: usize, p: usize) -> Self {
        Self {
            k,
            l,
            p,
            theta: vec![1.0 / p as f64; k * l * p],
            psi: vec![1.0 / k as f64; k],
            omega: vec![1.0 / l as f64; l],
        }
    }

    pub(crate) fn from_raw(k: usize, l: usize, p: usize, theta: Vec<f64>, psi: Vec<f64>, omega: Vec<f64>) -> Self {
        debug_assert_eq!(theta.len(), k * l * p);
        Self { k, l, p, theta, psi, omega }
    }

    pub fn num_item_clusters(&self) -> usize {
        self.k
    }

    pub fn num_annotator_clusters(&self) -> usize {
        self.l
    }

    pub fn num_labels(&self) -> usize {
        self.p
    }

    pub fn theta(&self, k: usize, l: usize) -> &[f64] {
        let start = (k * self.l + l) * self.p;
        &self.theta[start..start + self.p]
    }

    pub fn theta_flat(&self) -> &[f64] {
        &self.theta
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn set_theta(&mut self, k: usize, l: usize, dist: &[f64]) {
        let start = (k * self.l + l) * self.p;
        self.theta[start..start + self.p].copy_from_slice(dist);
    }

    pub fn set_psi(&mut self, psi: &[f64]) {
        self.psi.copy_from_slice(psi);
    }

    pub fn set_omega(&mut self, omega: &[f64]) {
        self.omega.copy_from_slice(omega);
    }

    /// Label distribution of item cluster `k` marginalized over annotator
    /// clusters: Σ_l Ω_l Θ_{k,l}.
    pub fn item_cluster_marginal(&self, k: usize) -> LabelDistribution {
        let mut out = vec![0.0; self.p];
        for l in 0..self.l {
            for (o, t) in out.iter_mut().zip(self.theta(k, l)) {
                *o += self.omega[l] * t;
            }
        }
        LabelDistribution::from_weights(out).expect("convex combination of distributions")
    }

    pub fn theta_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.k).map(|k| (0..self.l).map(|l| self.theta(k, l).to_vec()).collect()).collect()
    }
}

/// A fitted (or planted) graph model: hyperparameters, parameters and hard
/// cluster assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphModel {
    pub hp: Hyperparams,
    pub params: ModelParams,
    pub w: Vec<usize>,
    pub z: Vec<usize>,
}

impl GraphModel {
    pub fn from_ground_truth(hp: Hyperparams, truth: &GroundTruthModel) -> Result<Self> {
        let params = ModelParams::new(truth.theta.clone(), truth.psi.clone(), truth.omega.clone())?;
        Ok(Self { hp, params, w: truth.w.clone(), z: truth.z.clone() })
    }

    /// Checks that the model is shape-compatible with `matrix`.
    pub fn check_against(&self, matrix: &AnnotationMatrix) -> Result<()> {
        let p = &self.params;
        if p.k != self.hp.k || p.l != self.hp.l {
            return Err(Error::invalid("hyperparameter cluster counts disagree with Θ"));
        }
        if p.p != matrix.num_labels() {
            return Err(Error::invalid(format!(
                "model has {} labels, data has {}",
                p.p,
                matrix.num_labels()
            )));
        }
        if self.w.len() != matrix.num_items() || self.z.len() != matrix.num_annotators() {
            return Err(Error::invalid(format!(
                "model covers {} items / {} annotators, data has {} / {}",
                self.w.len(),
                self.z.len(),
                matrix.num_items(),
                matrix.num_annotators()
            )));
        }
        if self.w.iter().any(|&k| k >= p.k) || self.z.iter().any(|&l| l >= p.l) {
            return Err(Error::invalid("cluster assignment out of range"));
        }
        Ok(())
    }
}

/// Complete-data log-likelihood, evaluated term by term from the entries.
pub fn log_likelihood(model: &GraphModel, matrix: &AnnotationMatrix) -> f64 {
    let GraphModel { hp, params, w, z } = model;
    let mut ll = 0.0;
    ll += params.theta.iter().map(|&t| xln(hp.alpha - 1.0, t)).sum::<f64>();
    ll += params.psi.iter().map(|&v| xln(hp.gamma - 1.0, v)).sum::<f64>();
    ll += w.iter().map(|&k| params.psi[k].ln()).sum::<f64>();
    ll += params.omega.iter().map(|&v| xln(hp.tau - 1.0, v)).sum::<f64>();
    ll += z.iter().map(|&l| params.omega[l].ln()).sum::<f64>();
    ll += matrix
        .entries()
        .iter()
        .map(|e| params.theta(w[e.item], z[e.annotator])[e.label].ln())
        .sum::<f64>();
    ll
}

/// Working state for local search: the model, a view of the data, and
/// cached sufficient statistics.
///
/// `counts[(k*L + l)*P + p]` is the number of entries with label `p` whose
/// item is in cluster `k` and whose annotator is in cluster `l`.
#[derive(Debug, Clone)]
pub struct PgmState<'a> {
    matrix: &'a AnnotationMatrix,
    model: GraphModel,
    counts: Vec<u32>,
    item_cluster_sizes: Vec<u32>,
    annotator_cluster_sizes: Vec<u32>,
}

impl<'a> PgmState<'a> {
    pub fn new(matrix: &'a AnnotationMatrix, model: GraphModel) -> Result<Self> {
        model.check_against(matrix)?;
        let (counts, item_cluster_sizes, annotator_cluster_sizes) = recount(matrix, &model);
        Ok(Self { matrix, model, counts, item_cluster_sizes, annotator_cluster_sizes })
    }

    pub fn matrix(&self) -> &'a AnnotationMatrix {
        self.matrix
    }

    pub fn model(&self) -> &GraphModel {
        &self.model
    }

    pub fn into_model(self) -> GraphModel {
        self.model
    }

    pub fn params(&self) -> &ModelParams {
        &self.model.params
    }

    pub fn hp(&self) -> &Hyperparams {
        &self.model.hp
    }

    pub fn w(&self) -> &[usize] {
        &self.model.w
    }

    pub fn z(&self) -> &[usize] {
        &self.model.z
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    fn cell(&self, k: usize, l: usize) -> usize {
        (k * self.model.params.l + l) * self.model.params.p
    }

    /// True when the cached statistics equal a from-scratch recount.
    pub fn cache_is_consistent(&self) -> bool {
        let (c, i, a) = recount(self.matrix, &self.model);
        c == self.counts && i == self.item_cluster_sizes && a == self.annotator_cluster_sizes
    }

    /// Full log-likelihood recomputed from the entries.
    pub fn log_likelihood(&self) -> f64 {
        log_likelihood(&self.model, self.matrix)
    }

    /// Log-likelihood from the cached statistics, O(KLP).
    pub fn log_likelihood_cached(&self) -> f64 {
        let hp = &self.model.hp;
        let params = &self.model.params;
        let mut ll = 0.0;
        for (&t, &c) in params.theta.iter().zip(&self.counts) {
            ll += xln(hp.alpha - 1.0 + c as f64, t);
        }
        for (&v, &n) in params.psi.iter().zip(&self.item_cluster_sizes) {
            ll += xln(hp.gamma - 1.0 + n as f64, v);
        }
        for (&v, &n) in params.omega.iter().zip(&self.annotator_cluster_sizes) {
            ll += xln(hp.tau - 1.0 + n as f64, v);
        }
        ll
    }

    /// Change in log-likelihood from replacing Θ_{k,l} with `theta_new`.
    pub fn delta_theta(&self, k: usize, l: usize, theta_new: &[f64]) -> f64 {
        let a1 = self.model.hp.alpha - 1.0;
        let cell = self.cell(k, l);
        let old = self.model.params.theta(k, l);
        let mut d = 0.0;
        for p in 0..old.len() {
            let coeff = a1 + self.counts[cell + p] as f64;
            d += xln(coeff, theta_new[p]) - xln(coeff, old[p]);
        }
        nan_to_neg_inf(d)
    }

    /// Change in log-likelihood from replacing ψ. Includes the hidden
    /// assignment term Σ_m ln ψ_{w_m}.
    pub fn delta_psi(&self, psi_new: &[f64]) -> f64 {
        let g1 = self.model.hp.gamma - 1.0;
        let d = psi_new
            .iter()
            .zip(&self.model.params.psi)
            .zip(&self.item_cluster_sizes)
            .map(|((&new, &old), &n)| xln(g1 + n as f64, new) - xln(g1 + n as f64, old))
            .sum();
        nan_to_neg_inf(d)
    }

    /// The published form (γ-1) Σ_k ln(ψ^new_k / ψ^old_k), which leaves out
    /// the assignment term and so is not the true likelihood difference.
    pub fn delta_psi_literal(&self, psi_new: &[f64]) -> f64 {
        let g1 = self.model.hp.gamma - 1.0;
        let d = psi_new.iter().zip(&self.model.params.psi).map(|(&new, &old)| xln(g1, new) - xln(g1, old)).sum();
        nan_to_neg_inf(d)
    }

    pub fn delta_omega(&self, omega_new: &[f64]) -> f64 {
        let t1 = self.model.hp.tau - 1.0;
        let d = omega_new
            .iter()
            .zip(&self.model.params.omega)
            .zip(&self.annotator_cluster_sizes)
            .map(|((&new, &old), &n)| xln(t1 + n as f64, new) - xln(t1 + n as f64, old))
            .sum();
        nan_to_neg_inf(d)
    }

    pub fn delta_omega_literal(&self, omega_new: &[f64]) -> f64 {
        let t1 = self.model.hp.tau - 1.0;
        let d = omega_new.iter().zip(&self.model.params.omega).map(|(&new, &old)| xln(t1, new) - xln(t1, old)).sum();
        nan_to_neg_inf(d)
    }

    /// Change in log-likelihood from moving item `m` to cluster `k_new`.
    pub fn delta_w(&self, m: usize, k_new: usize) -> f64 {
        let k_old = self.model.w[m];
        if k_new == k_old {
            return 0.0;
        }
        let params = &self.model.params;
        let mut d = params.psi[k_new].ln() - params.psi[k_old].ln();
        for e in self.matrix.item_entries(m) {
            let l = self.model.z[e.annotator];
            d += params.theta(k_new, l)[e.label].ln() - params.theta(k_old, l)[e.label].ln();
        }
        nan_to_neg_inf(d)
    }

    /// Change in log-likelihood from moving annotator `n` to cluster `l_new`.
    pub fn delta_z(&self, n: usize, l_new: usize) -> f64 {
        let l_old = self.model.z[n];
        if l_new == l_old {
            return 0.0;
        }
        let params = &self.model.params;
        let mut d = params.omega[l_new].ln() - params.omega[l_old].ln();
        for e in self.matrix.annotator_entries(n) {
            let k = self.model.w[e.item];
            d += params.theta(k, l_new)[e.label].ln() - params.theta(k, l_old)[e.label].ln();
        }
        nan_to_neg_inf(d)
    }

    pub fn set_theta(&mut self, k: usize, l: usize, theta_new: &[f64]) {
        self.model.params.set_theta(k, l, theta_new);
    }

    pub fn set_psi(&mut self, psi_new: &[f64]) {
        self.model.params.set_psi(psi_new);
    }

    pub fn set_omega(&mut self, omega_new: &[f64]) {
        self.model.params.set_omega(omega_new);
    }

    pub fn set_w(&mut self, m: usize, k_new: usize) {
        let k_old = self.model.w[m];
        if k_old == k_new {
            return;
        }
        for e in self.matrix.item_entries(m) {
            let l = self.model.z[e.annotator];
            let p = self.model.params.p;
            let (lk, ll) = (self.model.params.l, l);
            self.counts[(k_old * lk + ll) * p + e.label] -= 1;
            self.counts[(k_new * lk + ll) * p + e.label] += 1;
        }
        self.item_cluster_sizes[k_old] -= 1;
        self.item_cluster_sizes[k_new] += 1;
        self.model.w[m] = k_new;
    }

    pub fn set_z(&mut self, n: usize, l_new: usize) {
        let l_old = self.model.z[n];
        if l_old == l_new {
            return;
        }
        let (lk, p) = (self.model.params.l, self.model.params.p);
        for &idx in self.matrix.annotator_entry_indices(n) {
            let e = self.matrix.entries()[idx];
            let k = self.model.w[e.item];
            self.counts[(k * lk + l_old) * p + e.label] -= 1;
            self.counts[(k * lk + l_new) * p + e.label] += 1;
        }
        self.annotator_cluster_sizes[l_old] -= 1;
        self.annotator_cluster_sizes[l_new] += 1;
        self.model.z[n] = l_new;
    }
}

fn nan_to_neg_inf(d: f64) -> f64 {
    if d.is_nan() {
        f64::NEG_INFINITY
    } else {
        d
    }
}

fn recount(matrix: &AnnotationMatrix, model: &GraphModel) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
    let ModelParams { k, l, p, .. } = model.params;
    let mut counts = vec![0u32; k * l * p];
    for e in matrix.entries() {
        counts[(model.w[e.item] * l + model.z[e.annotator]) * p + e.label] += 1;
    }
    let mut items = vec![0u32; k];
    for &c in &model.w {
        items[c] += 1;
    }
    let mut annotators = vec![0u32; l];
    for &c in &model.z {
        annotators[c] += 1;
    }
    (counts, items, annotators)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::genmodel::{gen_graph, random_assignment, sample_dirichlet};
    use crate::rng::{seeded, Rng};
    use approx::assert_relative_eq;
    use rand::Rng as _;

    /// Random small instance with a random (not planted) model.
    pub(crate) fn random_instance(seed: u64) -> (AnnotationMatrix, GraphModel) {
        let mut rng = seeded(seed);
        let m = rng.random_range(1..=20);
        let n = rng.random_range(1..=10);
        let k = rng.random_range(1..=3);
        let l = rng.random_range(1..=3);
        let p = rng.random_range(2..=4);
        let per_item = rng.random_range(1..=n);
        let hp = Hyperparams::new(k, l, rng.random_range(1.0..3.0), rng.random_range(1.0..3.0), rng.random_range(1.0..3.0))
            .unwrap();
        let a = random_assignment(m, n, per_item, rng.random()).unwrap();
        let (_, matrix) = gen_graph(&hp, m, n, p, &a, rng.random()).unwrap();
        let model = random_model(&mut rng, hp, m, n, p);
        (matrix, model)
    }

    pub(crate) fn random_model(rng: &mut Rng, hp: Hyperparams, m: usize, n: usize, p: usize) -> GraphModel {
        let theta = (0..hp.k).map(|_| (0..hp.l).map(|_| sample_dirichlet(rng, 1.5, p)).collect()).collect();
        let params = ModelParams::new(theta, sample_dirichlet(rng, 1.5, hp.k), sample_dirichlet(rng, 1.5, hp.l)).unwrap();
        let w = (0..m).map(|_| rng.random_range(0..hp.k)).collect();
        let z = (0..n).map(|_| rng.random_range(0..hp.l)).collect();
        GraphModel { hp, params, w, z }
    }

    #[test]
    fn degenerate_single_cluster_value() {
        let matrix = AnnotationMatrix::from_triples(2, 2, 3, [(0, 0, 0), (0, 1, 2), (1, 1, 1)]).unwrap();
        let hp = Hyperparams::new(1, 1, 1.0, 1.0, 1.0).unwrap();
        let model = GraphModel { hp, params: ModelParams::uniform(1, 1, 3), w: vec![0, 0], z: vec![0, 0] };
        assert_relative_eq!(log_likelihood(&model, &matrix), 3.0 * (1.0f64 / 3.0).ln(), max_relative = 1e-14);
    }

    #[test]
    fn small_instance_matches_term_by_term_sum() {
        // M=3, N=2, K=L=2, P=2 with explicit values.
        let matrix = AnnotationMatrix::from_triples(3, 2, 2, [(0, 0, 0), (0, 1, 1), (1, 0, 1), (2, 1, 0)]).unwrap();
        let hp = Hyperparams::new(2, 2, 2.0, 3.0, 1.5).unwrap();
        let d = |v: f64| LabelDistribution::new(vec![v, 1.0 - v]).unwrap();
        let params = ModelParams::new(
            vec![vec![d(0.9), d(0.6)], vec![d(0.2), d(0.3)]],
            d(0.7),
            d(0.4),
        )
        .unwrap();
        let model = GraphModel { hp, params, w: vec![0, 1, 0], z: vec![1, 0] };
        let ln = f64::ln;
        let prior_theta = 1.0 * (ln(0.9) + ln(0.1) + ln(0.6) + ln(0.4) + ln(0.2) + ln(0.8) + ln(0.3) + ln(0.7));
        let prior_psi = 2.0 * (ln(0.7) + ln(0.3));
        let assign_w = ln(0.7) + ln(0.3) + ln(0.7);
        let prior_omega = 0.5 * (ln(0.4) + ln(0.6));
        let assign_z = ln(0.6) + ln(0.4);
        // (0,0): Θ[0][1][0]=0.6; (0,1): Θ[0][0][1]=0.1; (1,0): Θ[1][1][1]=0.7; (2,1): Θ[0][0][0]=0.9
        let data = ln(0.6) + ln(0.1) + ln(0.7) + ln(0.9);
        let expected = prior_theta + prior_psi + assign_w + prior_omega + assign_z + data;
        assert_relative_eq!(log_likelihood(&model, &matrix), expected, max_relative = 1e-14);
        let state = PgmState::new(&matrix, model).unwrap();
        assert_relative_eq!(state.log_likelihood_cached(), expected, max_relative = 1e-14);
    }

    #[test]
    fn identity_moves_are_zero() {
        let (matrix, model) = random_instance(3);
        let state = PgmState::new(&matrix, model).unwrap();
        let t = state.params().theta(0, 0).to_vec();
        assert_eq!(state.delta_theta(0, 0, &t), 0.0);
        assert_eq!(state.delta_psi(&state.params().psi().to_vec()), 0.0);
        assert_eq!(state.delta_omega(&state.params().omega().to_vec()), 0.0);
        assert_eq!(state.delta_w(0, state.w()[0]), 0.0);
        assert_eq!(state.delta_z(0, state.z()[0]), 0.0);
    }

    #[test]
    fn empty_cell_with_flat_prior_has_zero_delta() {
        let matrix = AnnotationMatrix::from_triples(1, 1, 2, [(0, 0, 0)]).unwrap();
        let hp = Hyperparams::new(2, 1, 1.0, 1.0, 1.0).unwrap();
        let model = GraphModel { hp, params: ModelParams::uniform(2, 1, 2), w: vec![0], z: vec![0] };
        let state = PgmState::new(&matrix, model).unwrap();
        assert_eq!(state.delta_theta(1, 0, &[0.9, 0.1]), 0.0);
    }

    #[test]
    fn flat_gamma_uniform_psi_move_is_zero() {
        let (matrix, mut model) = random_instance(8);
        model.hp.gamma = 1.0;
        let k = model.hp.k;
        model.params.set_psi(&vec![1.0 / k as f64; k]);
        let state = PgmState::new(&matrix, model).unwrap();
        assert_eq!(state.delta_psi(&vec![1.0 / k as f64; k]), 0.0);
    }

    #[test]
    fn zero_probability_is_negative_infinity() {
        let matrix = AnnotationMatrix::from_triples(1, 1, 2, [(0, 0, 0)]).unwrap();
        let hp = Hyperparams::new(1, 1, 2.0, 1.0, 1.0).unwrap();
        let model = GraphModel { hp, params: ModelParams::uniform(1, 1, 2), w: vec![0], z: vec![0] };
        let state = PgmState::new(&matrix, model.clone()).unwrap();
        assert_eq!(state.delta_theta(0, 0, &[0.0, 1.0]), f64::NEG_INFINITY);
        let mut bad = model;
        bad.params.set_theta(0, 0, &[0.0, 1.0]);
        assert_eq!(log_likelihood(&bad, &matrix), f64::NEG_INFINITY);
    }

    #[test]
    fn literal_psi_delta_differs_from_likelihood_difference() {
        let (matrix, model) = random_instance(21);
        let state = PgmState::new(&matrix, model).unwrap();
        let k = state.hp().k;
        if k < 2 {
            return;
        }
        let mut rng = seeded(2);
        let new = sample_dirichlet(&mut rng, 2.0, k);
        let literal = state.delta_psi_literal(new.probs());
        let corrected = state.delta_psi(new.probs());
        assert!((literal - corrected).abs() > 1e-9);
    }

    #[test]
    fn relabeling_clusters_preserves_likelihood() {
        for seed in 0..50 {
            let (matrix, model) = random_instance(seed);
            let (k, l) = (model.hp.k, model.hp.l);
            let pk: Vec<usize> = (0..k).rev().collect();
            let pl: Vec<usize> = (0..l).map(|i| (i + 1) % l).collect();
            let mut permuted = model.clone();
            for a in 0..k {
                for b in 0..l {
                    permuted.params.set_theta(pk[a], pl[b], model.params.theta(a, b));
                }
            }
            let mut psi = vec![0.0; k];
            for a in 0..k {
                psi[pk[a]] = model.params.psi()[a];
            }
            let mut omega = vec![0.0; l];
            for b in 0..l {
                omega[pl[b]] = model.params.omega()[b];
            }
            permuted.params.set_psi(&psi);
            permuted.params.set_omega(&omega);
            permuted.w = model.w.iter().map(|&c| pk[c]).collect();
            permuted.z = model.z.iter().map(|&c| pl[c]).collect();
            assert_relative_eq!(
                log_likelihood(&model, &matrix),
                log_likelihood(&permuted, &matrix),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn delta_consistency_and_cache() {
        let mut moves = 0;
        for seed in 0..40 {
            let (matrix, model) = random_instance(seed);
            let mut state = PgmState::new(&matrix, model).unwrap();
            let mut rng = seeded(1000 + seed);
            for _ in 0..30 {
                let before = state.log_likelihood();
                let (delta, kind) = match rng.random_range(0..5) {
                    0 => {
                        let (k, l) = (rng.random_range(0..state.hp().k), rng.random_range(0..state.hp().l));
                        let new = sample_dirichlet(&mut rng, 2.0, state.params().num_labels());
                        let d = state.delta_theta(k, l, new.probs());
                        state.set_theta(k, l, new.probs());
                        (d, "theta")
                    }
                    1 => {
                        let new = sample_dirichlet(&mut rng, 2.0, state.hp().k);
                        let d = state.delta_psi(new.probs());
                        state.set_psi(new.probs());
                        (d, "psi")
                    }
                    2 => {
                        let new = sample_dirichlet(&mut rng, 2.0, state.hp().l);
                        let d = state.delta_omega(new.probs());
                        state.set_omega(new.probs());
                        (d, "omega")
                    }
                    3 => {
                        let m = rng.random_range(0..matrix.num_items());
                        let k = rng.random_range(0..state.hp().k);
                        let d = state.delta_w(m, k);
                        state.set_w(m, k);
                        (d, "w")
                    }
                    _ => {
                        let n = rng.random_range(0..matrix.num_annotators());
                        let l = rng.random_range(0..state.hp().l);
                        let d = state.delta_z(n, l);
                        state.set_z(n, l);
                        (d, "z")
                    }
                };
                let after = state.log_likelihood();
                let scale = before.abs().max(after.abs()).max(1.0);
                assert!(
                    ((after - before) - delta).abs() <= 1e-8 * scale,
                    "{kind}: delta {delta}, actual {}",
                    after - before
                );
                assert_relative_eq!(state.log_likelihood_cached(), after, max_relative = 1e-10);
                moves += 1;
            }
            assert!(state.cache_is_consistent());
        }
        assert!(moves >= 1000);
    }
}
