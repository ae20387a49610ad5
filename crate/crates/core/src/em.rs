//! EM for the graph model: a closed-form M-step for Θ, ψ, Ω and a loopy
//! belief-propagation E-step for the item and annotator cluster marginals.
//!
//! The hidden clusters form a pairwise model on the bipartite item-annotator
//! graph, with edge potential Θ_{k,l,Y_mn} on every labeled pair. Each edge
//! carries two cavity messages: the annotator's cluster posterior without the
//! edge's own evidence (sent to the item), and the item's cluster posterior
//! without that evidence (sent to the annotator).

use log::warn;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{argmax_label, kl_divergence, AnnotationMatrix};
use crate::error::{Error, Result};
use crate::genmodel::{sample_dirichlet, Hyperparams};
use crate::pgm::{xln, GraphModel, ModelParams};
use crate::rng::{derive_seed, seeded};

/// Row-stochastic responsibilities for items (M×K) and annotators (N×L).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftAssignments {
    pub w_soft: Vec<Vec<f64>>,
    pub z_soft: Vec<Vec<f64>>,
}

impl SoftAssignments {
    /// One-hot rows from hard assignments.
    pub fn from_hard(w: &[usize], k: usize, z: &[usize], l: usize) -> Self {
        let one_hot = |c: usize, n: usize| {
            let mut v = vec![0.0; n];
            v[c] = 1.0;
            v
        };
        Self {
            w_soft: w.iter().map(|&c| one_hot(c, k)).collect(),
            z_soft: z.iter().map(|&c| one_hot(c, l)).collect(),
        }
    }

    /// Rows drawn from a symmetric Dirichlet.
    pub fn random(num_items: usize, k: usize, num_annotators: usize, l: usize, concentration: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let w_soft = (0..num_items).map(|_| sample_dirichlet(&mut rng, concentration, k).into_vec()).collect();
        let z_soft = (0..num_annotators).map(|_| sample_dirichlet(&mut rng, concentration, l).into_vec()).collect();
        Self { w_soft, z_soft }
    }

    pub fn hard_w(&self) -> Vec<usize> {
        self.w_soft.iter().map(|r| argmax_label(r)).collect()
    }

    pub fn hard_z(&self) -> Vec<usize> {
        self.z_soft.iter().map(|r| argmax_label(r)).collect()
    }

    fn check(&self, matrix: &AnnotationMatrix, k: usize, l: usize) -> Result<()> {
        if self.w_soft.len() != matrix.num_items() || self.z_soft.len() != matrix.num_annotators() {
            return Err(Error::invalid("soft assignments do not match the matrix"));
        }
        if self.w_soft.iter().any(|r| r.len() != k) || self.z_soft.iter().any(|r| r.len() != l) {
            return Err(Error::invalid("soft assignment rows do not match K/L"));
        }
        Ok(())
    }
}

/// Per-edge cavity messages, indexed like [`AnnotationMatrix::entries`].
#[derive(Debug, Clone, PartialEq)]
pub struct MessageStore {
    k: usize,
    l: usize,
    /// `to_item[e*L + l]`: annotator cluster posterior excluding edge e.
    to_item: Vec<f64>,
    /// `to_annotator[e*K + k]`: item cluster posterior excluding edge e.
    to_annotator: Vec<f64>,
}

impl MessageStore {
    pub fn uniform(matrix: &AnnotationMatrix, k: usize, l: usize) -> Self {
        let e = matrix.len();
        Self { k, l, to_item: vec![1.0 / l as f64; e * l], to_annotator: vec![1.0 / k as f64; e * k] }
    }

    pub fn to_item(&self, edge: usize) -> &[f64] {
        &self.to_item[edge * self.l..(edge + 1) * self.l]
    }

    pub fn to_annotator(&self, edge: usize) -> &[f64] {
        &self.to_annotator[edge * self.k..(edge + 1) * self.k]
    }

    /// True when every stored message is a distribution.
    pub fn is_valid(&self) -> bool {
        let ok = |v: &[f64], n: usize| {
            v.chunks(n).all(|c| c.iter().all(|x| x.is_finite() && *x >= 0.0) && (c.iter().sum::<f64>() - 1.0).abs() < 1e-9)
        };
        ok(&self.to_item, self.l) && ok(&self.to_annotator, self.k)
    }
}

/// Pairwise edge beliefs b_e(k,l) ∝ r_e(k) q_e(l) Θ_{k,l,Y_e}, laid out as
/// `[e*K*L + k*L + l]`. Exact posteriors on trees once BP has converged.
pub fn edge_beliefs(matrix: &AnnotationMatrix, params: &ModelParams, store: &MessageStore) -> Vec<f64> {
    let (k, l) = (store.k, store.l);
    let mut out = vec![0.0; matrix.len() * k * l];
    for (e, entry) in matrix.entries().iter().enumerate() {
        let b = &mut out[e * k * l..(e + 1) * k * l];
        let (r, q) = (store.to_annotator(e), store.to_item(e));
        for kk in 0..k {
            for ll in 0..l {
                b[kk * l + ll] = r[kk] * q[ll] * params.theta(kk, ll)[entry.label];
            }
        }
        let total: f64 = b.iter().sum();
        if total > 0.0 {
            b.iter_mut().for_each(|v| *v /= total);
        } else {
            b.fill(1.0 / (k * l) as f64);
        }
    }
    out
}

/// Closed-form maximizer of the expected log-likelihood:
///
/// ```text
/// Θ_{k,l,p} = (α-1 + Σ_{A_p} w_mk z_nl) / (Pα - P + Σ_A w_mk z_nl)
/// ψ_k       = (γ-1 + Σ_m w_mk) / (Kγ - K + M)
/// Ω_l       = (τ-1 + Σ_n z_nl) / (Lτ - L + N)
/// ```
///
/// A Θ cell whose denominator vanishes (α = 1 and no responsibility mass) is
/// set to uniform with a warning.
pub fn m_step(matrix: &AnnotationMatrix, hp: &Hyperparams, soft: &SoftAssignments) -> Result<ModelParams> {
    m_step_impl(matrix, hp, soft, None)
}

/// As [`m_step`], but Θ uses pairwise edge beliefs from [`edge_beliefs`]
/// instead of the product w_mk z_nl.
pub fn m_step_pairwise(
    matrix: &AnnotationMatrix,
    hp: &Hyperparams,
    soft: &SoftAssignments,
    beliefs: &[f64],
) -> Result<ModelParams> {
    if beliefs.len() != matrix.len() * hp.k * hp.l {
        return Err(Error::LengthMismatch { expected: matrix.len() * hp.k * hp.l, got: beliefs.len() });
    }
    m_step_impl(matrix, hp, soft, Some(beliefs))
}

fn m_step_impl(
    matrix: &AnnotationMatrix,
    hp: &Hyperparams,
    soft: &SoftAssignments,
    beliefs: Option<&[f64]>,
) -> Result<ModelParams> {
    hp.validate_for_em()?;
    let (k, l, p) = (hp.k, hp.l, matrix.num_labels());
    soft.check(matrix, k, l)?;

    let mut stats = vec![0.0; k * l * p];
    for (idx, e) in matrix.entries().iter().enumerate() {
        for kk in 0..k {
            for ll in 0..l {
                let mass = match beliefs {
                    Some(b) => b[idx * k * l + kk * l + ll],
                    None => soft.w_soft[e.item][kk] * soft.z_soft[e.annotator][ll],
                };
                stats[(kk * l + ll) * p + e.label] += mass;
            }
        }
    }
    let mut theta = vec![0.0; k * l * p];
    for cell in 0..k * l {
        let s = &stats[cell * p..(cell + 1) * p];
        let denom = p as f64 * (hp.alpha - 1.0) + s.iter().sum::<f64>();
        let out = &mut theta[cell * p..(cell + 1) * p];
        if denom > 0.0 {
            for (o, &v) in out.iter_mut().zip(s) {
                *o = (hp.alpha - 1.0 + v) / denom;
            }
        } else {
            warn!("empty responsibility cell (k={}, l={}); using uniform Θ", cell / l + 1, cell % l + 1);
            out.fill(1.0 / p as f64);
        }
    }

    let column_sums = |rows: &[Vec<f64>], n: usize| {
        let mut sums = vec![0.0; n];
        for r in rows {
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
        }
        sums
    };
    let normalize = |sums: Vec<f64>, conc: f64| {
        let n = sums.len() as f64;
        let denom = n * (conc - 1.0) + sums.iter().sum::<f64>();
        if denom > 0.0 {
            sums.into_iter().map(|s| (conc - 1.0 + s) / denom).collect()
        } else {
            vec![1.0 / n; sums.len()]
        }
    };
    let psi = normalize(column_sums(&soft.w_soft, k), hp.gamma);
    let omega = normalize(column_sums(&soft.z_soft, l), hp.tau);
    Ok(ModelParams::from_raw(k, l, p, theta, psi, omega))
}

/// The expected complete-data log-likelihood under independent item and
/// annotator responsibilities (same dropped constants as
/// [`crate::pgm::log_likelihood`]).
pub fn expected_log_likelihood(
    matrix: &AnnotationMatrix,
    hp: &Hyperparams,
    params: &ModelParams,
    soft: &SoftAssignments,
) -> f64 {
    let mut ll = prior_and_cluster_terms(hp, params, soft);
    for e in matrix.entries() {
        for (k, &wv) in soft.w_soft[e.item].iter().enumerate() {
            for (l, &zv) in soft.z_soft[e.annotator].iter().enumerate() {
                ll += xln(wv * zv, params.theta(k, l)[e.label]);
            }
        }
    }
    ll
}

fn prior_and_cluster_terms(hp: &Hyperparams, params: &ModelParams, soft: &SoftAssignments) -> f64 {
    let mut ll = 0.0;
    ll += params.theta_flat().iter().map(|&t| xln(hp.alpha - 1.0, t)).sum::<f64>();
    ll += params.psi().iter().map(|&v| xln(hp.gamma - 1.0, v)).sum::<f64>();
    for row in &soft.w_soft {
        ll += row.iter().zip(params.psi()).map(|(&r, &v)| xln(r, v)).sum::<f64>();
    }
    ll += params.omega().iter().map(|&v| xln(hp.tau - 1.0, v)).sum::<f64>();
    for row in &soft.z_soft {
        ll += row.iter().zip(params.omega()).map(|(&r, &v)| xln(r, v)).sum::<f64>();
    }
    ll
}

/// [`expected_log_likelihood`] with the edge term taken under pairwise
/// beliefs.
pub fn expected_log_likelihood_pairwise(
    matrix: &AnnotationMatrix,
    hp: &Hyperparams,
    params: &ModelParams,
    soft: &SoftAssignments,
    beliefs: &[f64],
) -> f64 {
    let (k, l) = (hp.k, hp.l);
    let mut ll = prior_and_cluster_terms(hp, params, soft);
    for (idx, e) in matrix.entries().iter().enumerate() {
        for kk in 0..k {
            for ll_ in 0..l {
                ll += xln(beliefs[idx * k * l + kk * l + ll_], params.theta(kk, ll_)[e.label]);
            }
        }
    }
    ll
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpConfig {
    pub max_rounds: usize,
    /// Stop once Σ_m KL(w_new‖w_old) + Σ_n KL(z_new‖z_old) drops below this.
    pub tol: f64,
    /// Weight of the previous message in each update.
    pub damping: f64,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self { max_rounds: 10, tol: 1e-6, damping: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpStats {
    pub rounds: usize,
    pub residual: f64,
}

/// ln Σ exp(v).
fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights into `out`; all-zero mass falls back to uniform.
fn normalize_log(logw: &[f64], out: &mut [f64]) {
    let z = log_sum_exp(logw);
    if z.is_finite() {
        for (o, &lw) in out.iter_mut().zip(logw) {
            *o = (lw - z).exp();
        }
    } else {
        out.fill(1.0 / out.len() as f64);
    }
}

/// One side of a flooding half-round for a single variable.
///
/// `prior` holds ln prior per cluster; `edge_logs[i]` holds, per cluster, the
/// log of the edge factor summed against the incoming message. Returns the
/// marginal and one cavity distribution per edge.
fn node_update(prior: &[f64], edge_logs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let c = prior.len();
    let d = edge_logs.len();
    // Prefix/suffix sums avoid subtracting infinities for leave-one-out.
    let mut prefix = vec![prior.to_vec(); d + 1];
    for i in 0..d {
        for j in 0..c {
            prefix[i + 1][j] = prefix[i][j] + edge_logs[i][j];
        }
    }
    let mut suffix = vec![vec![0.0; c]; d + 1];
    for i in (0..d).rev() {
        for j in 0..c {
            suffix[i][j] = suffix[i + 1][j] + edge_logs[i][j];
        }
    }
    let mut marginal = vec![0.0; c];
    normalize_log(&prefix[d], &mut marginal);
    let mut cavities = Vec::with_capacity(d);
    let mut buf = vec![0.0; c];
    for i in 0..d {
        for j in 0..c {
            buf[j] = prefix[i][j] + suffix[i + 1][j];
        }
        let mut cav = vec![0.0; c];
        normalize_log(&buf, &mut cav);
        cavities.push(cav);
    }
    (marginal, cavities)
}

fn damp(old: &mut [f64], new: &[f64], damping: f64) {
    let mut total = 0.0;
    for (o, &n) in old.iter_mut().zip(new) {
        *o = damping * *o + (1.0 - damping) * n;
        total += *o;
    }
    for o in old.iter_mut() {
        *o /= total;
    }
}

fn ln_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.ln()).collect()
}

/// ln Σ_l Θ_{k,l,y} q(l) for every k.
fn item_edge_log(params: &ModelParams, label: usize, q: &[f64]) -> Vec<f64> {
    (0..params.num_item_clusters())
        .map(|k| (0..q.len()).map(|l| params.theta(k, l)[label] * q[l]).sum::<f64>().ln())
        .collect()
}

/// ln Σ_k Θ_{k,l,y} r(k) for every l.
fn annotator_edge_log(params: &ModelParams, label: usize, r: &[f64]) -> Vec<f64> {
    (0..params.num_annotator_clusters())
        .map(|l| (0..r.len()).map(|k| params.theta(k, l)[label] * r[k]).sum::<f64>().ln())
        .collect()
}

fn item_side(matrix: &AnnotationMatrix, params: &ModelParams, store: &MessageStore) -> Vec<(Vec<f64>, Vec<Vec<f64>>)> {
    let log_psi = ln_vec(params.psi());
    (0..matrix.num_items())
        .into_par_iter()
        .map(|m| {
            let edge_logs: Vec<Vec<f64>> = matrix
                .item_entry_range(m)
                .map(|e| item_edge_log(params, matrix.entries()[e].label, store.to_item(e)))
                .collect();
            node_update(&log_psi, &edge_logs)
        })
        .collect()
}

fn annotator_side(
    matrix: &AnnotationMatrix,
    params: &ModelParams,
    store: &MessageStore,
) -> Vec<(Vec<f64>, Vec<Vec<f64>>)> {
    let log_omega = ln_vec(params.omega());
    (0..matrix.num_annotators())
        .into_par_iter()
        .map(|n| {
            let edge_logs: Vec<Vec<f64>> = matrix
                .annotator_entry_indices(n)
                .iter()
                .map(|&e| annotator_edge_log(params, matrix.entries()[e].label, store.to_annotator(e)))
                .collect();
            node_update(&log_omega, &edge_logs)
        })
        .collect()
}

/// Loopy BP E-step. Messages in `store` are used as the starting point and
/// updated in place; each round first refreshes the item side from the
/// annotator messages, then the annotator side from the new item messages.
pub fn bp_e_step(
    matrix: &AnnotationMatrix,
    params: &ModelParams,
    store: &mut MessageStore,
    cfg: &BpConfig,
) -> Result<(SoftAssignments, BpStats)> {
    if params.num_labels() != matrix.num_labels() {
        return Err(Error::invalid("model and data disagree on the number of labels"));
    }
    if store.k != params.num_item_clusters() || store.l != params.num_annotator_clusters() || store.to_item.len() != matrix.len() * store.l
    {
        return Err(Error::invalid("message store does not match model and data"));
    }
    if !(0.0..1.0).contains(&cfg.damping) {
        return Err(Error::invalid("damping must lie in [0, 1)"));
    }

    // Marginals implied by the incoming messages, used as the first "old".
    let mut w: Vec<Vec<f64>> = item_side(matrix, params, store).into_iter().map(|(m, _)| m).collect();
    let mut z: Vec<Vec<f64>> = annotator_side(matrix, params, store).into_iter().map(|(m, _)| m).collect();
    let (k, l) = (store.k, store.l);

    let mut stats = BpStats { rounds: 0, residual: f64::INFINITY };
    for round in 0..cfg.max_rounds.max(1) {
        let items = item_side(matrix, params, store);
        let mut residual = 0.0;
        for (m, (marginal, cavities)) in items.into_iter().enumerate() {
            for (e, cav) in matrix.item_entry_range(m).zip(cavities) {
                damp(&mut store.to_annotator[e * k..(e + 1) * k], &cav, cfg.damping);
            }
            residual += kl_divergence(&marginal, &w[m])?;
            w[m] = marginal;
        }
        let annotators = annotator_side(matrix, params, store);
        for (n, (marginal, cavities)) in annotators.into_iter().enumerate() {
            for (&e, cav) in matrix.annotator_entry_indices(n).iter().zip(cavities) {
                damp(&mut store.to_item[e * l..(e + 1) * l], &cav, cfg.damping);
            }
            residual += kl_divergence(&marginal, &z[n])?;
            z[n] = marginal;
        }
        stats = BpStats { rounds: round + 1, residual };
        if residual < cfg.tol {
            break;
        }
    }
    Ok((SoftAssignments { w_soft: w, z_soft: z }, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_rounds: usize,
    /// Stop once the expected log-likelihood changes by less than this.
    pub tol: f64,
    pub bp: BpConfig,
    /// Concentration of the Dirichlet used to draw initial responsibilities.
    pub init_concentration: f64,
    /// Use pairwise edge beliefs in the Θ update and the objective instead of
    /// products of marginals. With exact beliefs this is textbook EM.
    pub pairwise_beliefs: bool,
    /// Independent initializations; the one with the highest final expected
    /// log-likelihood is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_rounds: 500, tol: 1e-6, bp: BpConfig::default(), init_concentration: 1.5, pairwise_beliefs: false, restarts: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmTraceRow {
    pub round: usize,
    pub expected_loglik: f64,
    pub bp_rounds: usize,
    pub bp_residual: f64,
}

#[derive(Debug, Clone)]
pub struct EmResult {
    /// Parameters with hard (argmax) assignments.
    pub model: GraphModel,
    pub soft: SoftAssignments,
    pub expected_loglik: f64,
    pub trace: Vec<EmTraceRow>,
}

/// Alternates M-step and BP E-step (M first) until convergence.
pub fn fit_em(matrix: &AnnotationMatrix, hp: &Hyperparams, cfg: &EmConfig) -> Result<EmResult> {
    hp.validate_for_em()?;
    if cfg.restarts == 0 || cfg.max_rounds == 0 {
        return Err(Error::invalid("EM needs at least one restart and one round"));
    }
    let runs: Vec<EmResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let init = SoftAssignments::random(
                matrix.num_items(),
                hp.k,
                matrix.num_annotators(),
                hp.l,
                cfg.init_concentration,
                derive_seed(cfg.seed, r as u64),
            );
            fit_em_from(matrix, hp, cfg, init)
        })
        .collect::<Result<_>>()?;
    let mut best: Option<EmResult> = None;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.expected_loglik > b.expected_loglik) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// EM from given initial responsibilities.
pub fn fit_em_from(
    matrix: &AnnotationMatrix,
    hp: &Hyperparams,
    cfg: &EmConfig,
    init: SoftAssignments,
) -> Result<EmResult> {
    let mut soft = init;
    let mut store = MessageStore::uniform(matrix, hp.k, hp.l);
    let mut beliefs: Option<Vec<f64>> = None;
    let mut trace: Vec<EmTraceRow> = Vec::new();
    let mut params = m_step(matrix, hp, &soft)?;
    for round in 0..cfg.max_rounds {
        params = match &beliefs {
            Some(b) => m_step_pairwise(matrix, hp, &soft, b)?,
            None => m_step(matrix, hp, &soft)?,
        };
        let (next, stats) = bp_e_step(matrix, &params, &mut store, &cfg.bp)?;
        soft = next;
        let ell = if cfg.pairwise_beliefs {
            let b = edge_beliefs(matrix, &params, &store);
            let ell = expected_log_likelihood_pairwise(matrix, hp, &params, &soft, &b);
            beliefs = Some(b);
            ell
        } else {
            expected_log_likelihood(matrix, hp, &params, &soft)
        };
        if ell.is_nan() {
            return Err(Error::NonFinite(format!("expected log-likelihood at EM round {round}")));
        }
        let converged = trace.last().is_some_and(|prev: &EmTraceRow| (ell - prev.expected_loglik).abs() < cfg.tol);
        trace.push(EmTraceRow { round, expected_loglik: ell, bp_rounds: stats.rounds, bp_residual: stats.residual });
        if converged {
            break;
        }
    }
    let model = GraphModel { hp: *hp, params, w: soft.hard_w(), z: soft.hard_z() };
    let expected_loglik = trace.last().map_or(f64::NEG_INFINITY, |r| r.expected_loglik);
    Ok(EmResult { model, soft, expected_loglik, trace })
}

/// Random responsibilities that are uniform over all but a random subset of
/// rows; used by property tests.
#[doc(hidden)]
pub fn random_soft(matrix: &AnnotationMatrix, k: usize, l: usize, seed: u64) -> SoftAssignments {
    let mut rng = seeded(seed);
    let conc = rng.random_range(0.3..3.0);
    SoftAssignments::random(matrix.num_items(), k, matrix.num_annotators(), l, conc, rng.random())
}
