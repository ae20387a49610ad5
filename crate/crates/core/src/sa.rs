//! Simulated annealing over the graph model's parameters and hidden
//! assignments.
//!
//! Each outer iteration sweeps every Θ_{k,l}, then ψ, then Ω, then every
//! item cluster w_m and every annotator cluster z_n. A proposal that raises
//! the log-likelihood is always taken; one that lowers it by |δ| is taken
//! with probability exp(δ / T(t)). The best state seen at the top of any
//! outer iteration is returned.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::AnnotationMatrix;
use crate::error::{Error, Result};
use crate::genmodel::{sample_categorical, sample_dirichlet, sample_dirichlet_vec, Hyperparams};
use crate::pgm::{log_likelihood, GraphModel, ModelParams, PgmState};
use crate::rng::{derive_seed, seeded, Rng};

/// Temperature as a function of the outer iteration `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// T(t) = 1 / (t + 1).
    Inverse,
    /// T(t) = initial * rate^t.
    Geometric { initial: f64, rate: f64 },
    Constant { temperature: f64 },
    /// Greedy hill climbing: only improvements are accepted.
    Zero,
}

impl Schedule {
    pub fn temperature(&self, t: usize) -> f64 {
        match *self {
            Schedule::Inverse => 1.0 / (t as f64 + 1.0),
            Schedule::Geometric { initial, rate } => initial * rate.powi(t as i32),
            Schedule::Constant { temperature } => temperature,
            Schedule::Zero => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Inverse | Schedule::Zero => true,
            Schedule::Geometric { initial, rate } => initial > 0.0 && rate > 0.0 && rate <= 1.0,
            Schedule::Constant { temperature } => temperature > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("temperatures must stay positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealConfig {
    pub max_iters: usize,
    pub schedule: Schedule,
    /// Base concentration c of the local Dirichlet proposals
    /// Dir(c_t · current + prior).
    pub proposal_concentration: f64,
    /// Grow the proposal concentration as c_t = c · (t + 1) so that late
    /// proposals are local enough to refine continuous parameters.
    pub sharpen_proposals: bool,
    /// Stop when the best log-likelihood improved by less than `tol` over
    /// the last `window` outer iterations.
    pub window: usize,
    pub tol: f64,
    pub restarts: usize,
    /// Use the published ψ/Ω differences, which omit the assignment terms.
    pub literal_deltas: bool,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            schedule: Schedule::Inverse,
            proposal_concentration: 50.0,
            sharpen_proposals: true,
            window: 25,
            tol: 1e-6,
            restarts: 5,
            literal_deltas: false,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be at least 1"));
        }
        if !(self.proposal_concentration > 0.0) {
            return Err(Error::invalid("proposal concentration must be positive"));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loglik: f64,
    pub best_loglik: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct AnnealResult {
    pub model: GraphModel,
    /// Log-likelihood of `model`, recomputed from scratch.
    pub best_loglik: f64,
    pub trace: Vec<TraceRow>,
    /// Index of the restart that produced `model`.
    pub restart: usize,
}

/// Runs `cfg.restarts` independent chains (in parallel) and keeps the best.
pub fn anneal(matrix: &AnnotationMatrix, hp: &Hyperparams, cfg: &AnnealConfig) -> Result<AnnealResult> {
    hp.validate()?;
    cfg.validate()?;
    let results: Vec<AnnealResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut res = anneal_chain(matrix, hp, cfg, derive_seed(cfg.seed, r as u64))?;
            res.restart = r;
            Ok(res)
        })
        .collect::<Result<_>>()?;
    // Ties go to the lowest restart index.
    let mut best: Option<AnnealResult> = None;
    for res in results {
        if best.as_ref().is_none_or(|b| res.best_loglik > b.best_loglik) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Draws Θ, ψ, Ω from their priors and w, z from ψ and Ω.
pub fn init_from_prior(rng: &mut Rng, matrix: &AnnotationMatrix, hp: &Hyperparams) -> GraphModel {
    let p = matrix.num_labels();
    let theta = (0..hp.k).map(|_| (0..hp.l).map(|_| sample_dirichlet(rng, hp.alpha, p)).collect()).collect();
    let psi = sample_dirichlet(rng, hp.gamma, hp.k);
    let omega = sample_dirichlet(rng, hp.tau, hp.l);
    let w = (0..matrix.num_items()).map(|_| sample_categorical(rng, psi.probs())).collect();
    let z = (0..matrix.num_annotators()).map(|_| sample_categorical(rng, omega.probs())).collect();
    let params = ModelParams::new(theta, psi, omega).expect("prior draws have consistent shapes");
    GraphModel { hp: *hp, params, w, z }
}

/// A single annealing chain.
pub fn anneal_chain(
    matrix: &AnnotationMatrix,
    hp: &Hyperparams,
    cfg: &AnnealConfig,
    seed: u64,
) -> Result<AnnealResult> {
    let mut rng = seeded(seed);
    let init = init_from_prior(&mut rng, matrix, hp);
    let mut state = PgmState::new(matrix, init)?;
    let mut best_model = state.model().clone();
    let mut best = f64::NEG_INFINITY;
    let mut trace: Vec<TraceRow> = Vec::new();

    for t in 0..cfg.max_iters {
        let ll = state.log_likelihood_cached();
        if ll > best || trace.is_empty() {
            best = ll;
            best_model = state.model().clone();
        }
        let temperature = cfg.schedule.temperature(t);
        trace.push(TraceRow { iter: t, loglik: ll, best_loglik: best, temperature });
        if t >= cfg.window && best - trace[t - cfg.window].best_loglik < cfg.tol {
            break;
        }
        let conc = if cfg.sharpen_proposals {
            cfg.proposal_concentration * (t as f64 + 1.0)
        } else {
            cfg.proposal_concentration
        };
        sweep(&mut state, &mut rng, cfg, temperature, conc);
    }
    // Account for the last sweep too.
    let ll = state.log_likelihood_cached();
    if ll > best {
        best_model = state.model().clone();
    }

    let best_loglik = log_likelihood(&best_model, matrix);
    Ok(AnnealResult { model: best_model, best_loglik, trace, restart: 0 })
}

fn accept(rng: &mut Rng, delta: f64, temperature: f64) -> bool {
    if delta > 0.0 {
        return true;
    }
    if temperature <= 0.0 || !delta.is_finite() {
        return false;
    }
    rng.random::<f64>() < (delta / temperature).exp()
}

fn local_proposal(rng: &mut Rng, current: &[f64], conc: f64, prior: f64) -> Vec<f64> {
    let c: Vec<f64> = current.iter().map(|v| conc * v + prior).collect();
    sample_dirichlet_vec(rng, &c).into_vec()
}

fn sweep(state: &mut PgmState<'_>, rng: &mut Rng, cfg: &AnnealConfig, temperature: f64, conc: f64) {
    let hp = *state.hp();
    for k in 0..hp.k {
        for l in 0..hp.l {
            let proposal = local_proposal(rng, state.params().theta(k, l), conc, hp.alpha);
            let delta = state.delta_theta(k, l, &proposal);
            if accept(rng, delta, temperature) {
                state.set_theta(k, l, &proposal);
            }
        }
    }

    let proposal = local_proposal(rng, state.params().psi(), conc, hp.gamma);
    let delta = if cfg.literal_deltas { state.delta_psi_literal(&proposal) } else { state.delta_psi(&proposal) };
    if accept(rng, delta, temperature) {
        state.set_psi(&proposal);
    }

    let proposal = local_proposal(rng, state.params().omega(), conc, hp.tau);
    let delta =
        if cfg.literal_deltas { state.delta_omega_literal(&proposal) } else { state.delta_omega(&proposal) };
    if accept(rng, delta, temperature) {
        state.set_omega(&proposal);
    }

    if hp.k > 1 {
        for m in 0..state.matrix().num_items() {
            let k_new = other_cluster(rng, state.w()[m], hp.k);
            let delta = state.delta_w(m, k_new);
            if accept(rng, delta, temperature) {
                state.set_w(m, k_new);
            }
        }
    }
    if hp.l > 1 {
        for n in 0..state.matrix().num_annotators() {
            let l_new = other_cluster(rng, state.z()[n], hp.l);
            let delta = state.delta_z(n, l_new);
            if accept(rng, delta, temperature) {
                state.set_z(n, l_new);
            }
        }
    }
}

/// Uniform draw from `0..count` excluding `current`.
fn other_cluster(rng: &mut Rng, current: usize, count: usize) -> usize {
    let c = rng.random_range(0..count - 1);
    if c >= current {
        c + 1
    } else {
        c
    }
}
