//! Neural label-distribution model.
//!
//! An item encoder and an annotator embedding table feed a shared encoder
//! with a residual layer; three softmax heads predict the annotator's label,
//! the item's label distribution and the annotator's label distribution.

mod ensemble;
mod infer;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{argmax_label, AnnotationMatrix, LabelDistribution};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

pub use ensemble::{aggregate, ensemble_decode, predict_item, Aggregation, EnsembleOutput, EnsembleRoute};
pub use infer::{embedding_gradient_check, embedding_kl_and_grad, infer_annotator, InferenceConfig, InferenceResult};
pub use train::{build_samples, mean_loss, train, Sample, TrainConfig, TrainReport};

/// How the item and annotator codes are combined before the shared layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Concat,
    /// Elementwise sum; needs J_I = J_A.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Feature dimension.
    pub j: usize,
    pub j_i: usize,
    pub j_a: usize,
    pub j_p: usize,
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub combine: Combine,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if [self.j, self.j_i, self.j_a, self.j_p, self.n, self.p].contains(&0) {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if self.combine == Combine::Sum && self.j_i != self.j_a {
            return Err(Error::invalid("sum combination needs J_I = J_A"));
        }
        Ok(())
    }

    /// Width of the combined code.
    pub fn combined(&self) -> usize {
        match self.combine {
            Combine::Concat => self.j_i + self.j_a,
            Combine::Sum => self.j_i,
        }
    }

    fn shapes(&self) -> [(usize, usize); NUM_TENSORS] {
        let (c, jp, p) = (self.combined(), self.j_p, self.p);
        [
            (self.j_i, self.j),
            (self.j_i, 1),
            (self.j_a, self.n),
            (jp, c),
            (jp, 1),
            (jp, jp),
            (jp, 1),
            (p, jp),
            (p, 1),
            (p, jp),
            (p, 1),
            (p, jp),
            (p, 1),
        ]
    }
}

const NUM_TENSORS: usize = 13;
pub const TENSOR_NAMES: [&str; NUM_TENSORS] =
    ["w_i", "b_i", "w_a", "w_p", "b_p", "w_e", "b_e", "w_y", "b_y", "w_yi", "b_yi", "w_ya", "b_ya"];
const W_I: usize = 0;
const B_I: usize = 1;
const W_A: usize = 2;
const W_P: usize = 3;
const B_P: usize = 4;
const W_E: usize = 5;
const B_E: usize = 6;
const W_Y: usize = 7;
const B_Y: usize = 8;
const W_YI: usize = 9;
const B_YI: usize = 10;
const W_YA: usize = 11;
const B_YA: usize = 12;
const HEADS: [(usize, usize); 3] = [(W_Y, B_Y), (W_YI, B_YI), (W_YA, B_YA)];

/// All weights in one flat buffer; see [`TENSOR_NAMES`] for the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralParams {
    dims: Dims,
    offsets: [usize; NUM_TENSORS + 1],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    dims: Dims,
    tensors: BTreeMap<String, Tensor>,
}

impl Serialize for NeuralParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let shapes = self.dims.shapes();
        let tensors = TENSOR_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let (rows, cols) = shapes[i];
                (name.to_string(), Tensor { rows, cols, data: self.tensor(i).to_vec() })
            })
            .collect();
        Checkpoint { dims: self.dims, tensors }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for NeuralParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let ck = Checkpoint::deserialize(d)?;
        let mut params = NeuralParams::zeros(ck.dims).map_err(D::Error::custom)?;
        let shapes = ck.dims.shapes();
        for (i, name) in TENSOR_NAMES.iter().enumerate() {
            let t = ck.tensors.get(*name).ok_or_else(|| D::Error::custom(format!("missing tensor {name}")))?;
            if (t.rows, t.cols) != shapes[i] || t.data.len() != t.rows * t.cols {
                return Err(D::Error::custom(format!("tensor {name} has the wrong shape")));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(D::Error::custom(format!("tensor {name} has non-finite values")));
            }
            params.tensor_mut(i).copy_from_slice(&t.data);
        }
        Ok(params)
    }
}

/// Orthonormal rows (if rows ≤ cols) or columns, from Gaussian draws.
fn orthogonal(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let (count, len) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols { basis[r][c] } else { basis[c][r] };
        }
    }
    out
}

fn softsign(v: f64) -> f64 {
    v / (1.0 + v.abs())
}

fn softsign_grad(v: f64) -> f64 {
    let d = 1.0 + v.abs();
    1.0 / (d * d)
}

/// out = W x + b (b optional), W row-major rows × x.len().
fn affine(w: &[f64], x: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let cols = x.len();
    w.chunks(cols)
        .enumerate()
        .map(|(r, row)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b.map_or(0.0, |b| b[r]))
        .collect()
}

/// out += Wᵀ g.
fn affine_t_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (row, &gr) in w.chunks(cols).zip(g) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * gr;
        }
    }
}

/// W += g xᵀ.
fn outer_acc(w: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (row, &gr) in w.chunks_mut(cols).zip(g) {
        for (wv, &xv) in row.iter_mut().zip(x) {
            *wv += gr * xv;
        }
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Which annotator code enters the network.
#[derive(Debug, Clone, Copy)]
pub(crate) enum AnnotatorCode<'a> {
    Column(usize),
    Free(&'a [f64]),
}

/// Inverted-dropout multipliers for z_P and z_E.
#[derive(Debug, Clone)]
pub(crate) struct Masks {
    pub p: Vec<f64>,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub z_i: Vec<f64>,
    pub z_a: Vec<f64>,
    pub z_p: Vec<f64>,
    pub z_e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub z_y: LabelDistribution,
    pub z_yi: LabelDistribution,
    pub z_ya: LabelDistribution,
}

/// Training targets for one (item, annotator) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    /// The annotator's label.
    pub y: usize,
    pub y_i: LabelDistribution,
    pub y_a: LabelDistribution,
}

impl Targets {
    pub fn one_hot(&self) -> LabelDistribution {
        LabelDistribution::one_hot(self.y_i.len(), self.y)
    }
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    z_i: Vec<f64>,
    c: Vec<f64>,
    h1: Vec<f64>,
    u_p: Vec<f64>,
    /// z_P after dropout.
    zp: Vec<f64>,
    u_e: Vec<f64>,
    ze: Vec<f64>,
    log_probs: [Vec<f64>; 3],
}

impl NeuralParams {
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let shapes = dims.shapes();
        let mut offsets = [0; NUM_TENSORS + 1];
        for i in 0..NUM_TENSORS {
            offsets[i + 1] = offsets[i] + shapes[i].0 * shapes[i].1;
        }
        Ok(Self { dims, offsets, data: vec![0.0; offsets[NUM_TENSORS]] })
    }

    /// Orthogonal weight matrices, zero biases.
    pub fn init(dims: Dims, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(dims)?;
        let mut rng = seeded(seed);
        let shapes = dims.shapes();
        for i in [W_I, W_A, W_P, W_E, W_Y, W_YI, W_YA] {
            let (r, c) = shapes[i];
            let w = orthogonal(&mut rng, r, c);
            params.tensor_mut(i).copy_from_slice(&w);
        }
        Ok(params)
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The flat parameter buffer.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Name and position of flat index `i`.
    pub fn describe(&self, i: usize) -> String {
        let t = (0..NUM_TENSORS).find(|&t| i < self.offsets[t + 1]).unwrap_or(NUM_TENSORS - 1);
        format!("{}[{}]", TENSOR_NAMES[t], i - self.offsets[t])
    }

    fn tensor(&self, i: usize) -> &[f64] {
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Annotator `a`'s column of W_A.
    pub fn annotator_embedding(&self, a: usize) -> Vec<f64> {
        let n = self.dims.n;
        self.tensor(W_A).iter().skip(a).step_by(n).copied().collect()
    }

    fn check_input(&self, x: &[f64], code: AnnotatorCode<'_>) -> Result<()> {
        if x.len() != self.dims.j {
            return Err(Error::LengthMismatch { expected: self.dims.j, got: x.len() });
        }
        match code {
            AnnotatorCode::Column(a) if a >= self.dims.n => {
                Err(Error::invalid(format!("annotator {} out of range 1..={}", a + 1, self.dims.n)))
            }
            AnnotatorCode::Free(z) if z.len() != self.dims.j_a => {
                Err(Error::LengthMismatch { expected: self.dims.j_a, got: z.len() })
            }
            _ => Ok(()),
        }
    }

    fn combine(&self, z_i: &[f64], z_a: &[f64]) -> Vec<f64> {
        match self.dims.combine {
            Combine::Concat => z_i.iter().chain(z_a).copied().collect(),
            Combine::Sum => z_i.iter().zip(z_a).map(|(a, b)| a + b).collect(),
        }
    }

    fn code_vector(&self, code: AnnotatorCode<'_>) -> Vec<f64> {
        match code {
            AnnotatorCode::Column(a) => self.annotator_embedding(a),
            AnnotatorCode::Free(z) => z.to_vec(),
        }
    }

    /// Runs the shared encoder from a combined code onwards.
    fn encode_from(&self, z_i: Vec<f64>, z_a: &[f64], masks: Option<&Masks>) -> Trace {
        let c = self.combine(&z_i, z_a);
        let h1: Vec<f64> = c.iter().map(|&v| softsign(v)).collect();
        let u_p = affine(self.tensor(W_P), &h1, Some(self.tensor(B_P)));
        let mut zp: Vec<f64> = u_p.iter().map(|&v| softsign(v)).collect();
        if let Some(m) = masks {
            zp.iter_mut().zip(&m.p).for_each(|(v, k)| *v *= k);
        }
        let mut u_e = affine(self.tensor(W_E), &zp, Some(self.tensor(B_E)));
        u_e.iter_mut().zip(&zp).for_each(|(u, z)| *u += z);
        let mut ze: Vec<f64> = u_e.iter().map(|&v| softsign(v)).collect();
        if let Some(m) = masks {
            ze.iter_mut().zip(&m.e).for_each(|(v, k)| *v *= k);
        }
        let log_probs = HEADS.map(|(w, b)| log_softmax(&affine(self.tensor(w), &ze, Some(self.tensor(b)))));
        Trace { z_i, c, h1, u_p, zp, u_e, ze, log_probs }
    }

    pub(crate) fn run(&self, x: &[f64], code: AnnotatorCode<'_>, masks: Option<&Masks>) -> Trace {
        let z_i = affine(self.tensor(W_I), x, Some(self.tensor(B_I)));
        let z_a = self.code_vector(code);
        self.encode_from(z_i, &z_a, masks)
    }

    /// Encoder activations for item features `x` and annotator `a` (0-based).
    pub fn encode(&self, x: &[f64], a: usize) -> Result<Encoded> {
        self.check_input(x, AnnotatorCode::Column(a))?;
        let t = self.run(x, AnnotatorCode::Column(a), None);
        let z_p = t.u_p.iter().map(|&v| softsign(v)).collect();
        Ok(Encoded { z_i: t.z_i, z_a: self.annotator_embedding(a), z_p, z_e: t.ze })
    }

    /// The three heads applied to an encoding.
    pub fn decode(&self, z_e: &[f64]) -> Result<Decoded> {
        if z_e.len() != self.dims.j_p {
            return Err(Error::LengthMismatch { expected: self.dims.j_p, got: z_e.len() });
        }
        let [y, yi, ya] =
            HEADS.map(|(w, b)| log_softmax(&affine(self.tensor(w), z_e, Some(self.tensor(b)))));
        decoded_from_logs(&y, &yi, &ya)
    }

    /// encode then decode, without dropout.
    pub fn forward(&self, x: &[f64], a: usize) -> Result<Decoded> {
        self.check_input(x, AnnotatorCode::Column(a))?;
        let t = self.run(x, AnnotatorCode::Column(a), None);
        let [y, yi, ya] = &t.log_probs;
        decoded_from_logs(y, yi, ya)
    }

    /// Multi-objective loss for one sample, without dropout.
    pub fn loss(&self, x: &[f64], a: usize, targets: &Targets) -> Result<f64> {
        self.check_input(x, AnnotatorCode::Column(a))?;
        check_targets(targets, self.dims.p)?;
        Ok(sample_loss(&self.run(x, AnnotatorCode::Column(a), None), targets))
    }

    /// Loss and gradient for one sample, without dropout. The gradient has the
    /// flat layout of [`NeuralParams::as_slice`].
    pub fn loss_and_grad(&self, x: &[f64], a: usize, targets: &Targets) -> Result<(f64, Vec<f64>)> {
        self.check_input(x, AnnotatorCode::Column(a))?;
        check_targets(targets, self.dims.p)?;
        let trace = self.run(x, AnnotatorCode::Column(a), None);
        let mut grad = vec![0.0; self.len()];
        let loss = sample_loss(&trace, targets);
        self.backward(x, AnnotatorCode::Column(a), &trace, &head_deltas(&trace, targets), None, &mut grad);
        Ok((loss, grad))
    }

    /// Accumulates parameter gradients into `grad` (skipped when empty) and
    /// returns the gradient with respect to the annotator code.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        code: AnnotatorCode<'_>,
        t: &Trace,
        deltas: &[Vec<f64>; 3],
        masks: Option<&Masks>,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let d = &self.dims;
        let with_params = !grad.is_empty();
        let off = self.offsets;
        let mut g_ze = vec![0.0; d.j_p];
        for (&(w, b), delta) in HEADS.iter().zip(deltas) {
            affine_t_acc(self.tensor(w), delta, &mut g_ze);
            if with_params {
                outer_acc(&mut grad[off[w]..off[w + 1]], delta, &t.ze);
                grad[off[b]..off[b + 1]].iter_mut().zip(delta).for_each(|(g, v)| *g += v);
            }
        }
        if let Some(m) = masks {
            g_ze.iter_mut().zip(&m.e).for_each(|(g, k)| *g *= k);
        }
        let g_ue: Vec<f64> = g_ze.iter().zip(&t.u_e).map(|(g, &u)| g * softsign_grad(u)).collect();
        let mut g_zp = g_ue.clone();
        affine_t_acc(self.tensor(W_E), &g_ue, &mut g_zp);
        if with_params {
            outer_acc(&mut grad[off[W_E]..off[W_E + 1]], &g_ue, &t.zp);
            grad[off[B_E]..off[B_E + 1]].iter_mut().zip(&g_ue).for_each(|(g, v)| *g += v);
        }
        if let Some(m) = masks {
            g_zp.iter_mut().zip(&m.p).for_each(|(g, k)| *g *= k);
        }
        let g_up: Vec<f64> = g_zp.iter().zip(&t.u_p).map(|(g, &u)| g * softsign_grad(u)).collect();
        let mut g_h1 = vec![0.0; t.h1.len()];
        affine_t_acc(self.tensor(W_P), &g_up, &mut g_h1);
        if with_params {
            outer_acc(&mut grad[off[W_P]..off[W_P + 1]], &g_up, &t.h1);
            grad[off[B_P]..off[B_P + 1]].iter_mut().zip(&g_up).for_each(|(g, v)| *g += v);
        }
        let g_c: Vec<f64> = g_h1.iter().zip(&t.c).map(|(g, &c)| g * softsign_grad(c)).collect();
        let (g_zi, g_za) = match d.combine {
            Combine::Concat => (g_c[..d.j_i].to_vec(), g_c[d.j_i..].to_vec()),
            Combine::Sum => (g_c.clone(), g_c),
        };
        if with_params {
            outer_acc(&mut grad[off[W_I]..off[W_I + 1]], &g_zi, x);
            grad[off[B_I]..off[B_I + 1]].iter_mut().zip(&g_zi).for_each(|(g, v)| *g += v);
            if let AnnotatorCode::Column(a) = code {
                let w_a = &mut grad[off[W_A]..off[W_A + 1]];
                for (r, g) in g_za.iter().enumerate() {
                    w_a[r * d.n + a] += g;
                }
            }
        }
        g_za
    }
}

fn decoded_from_logs(y: &[f64], yi: &[f64], ya: &[f64]) -> Result<Decoded> {
    let dist = |l: &[f64]| LabelDistribution::from_log_weights(l);
    Ok(Decoded { z_y: dist(y)?, z_yi: dist(yi)?, z_ya: dist(ya)? })
}

fn check_targets(t: &Targets, p: usize) -> Result<()> {
    if t.y >= p || t.y_i.len() != p || t.y_a.len() != p {
        return Err(Error::invalid("targets do not match the number of labels"));
    }
    Ok(())
}

/// Σ_p t_p (ln t_p − log_q_p), with 0·ln 0 = 0.
fn kl_from_logs(t: &[f64], log_q: &[f64]) -> f64 {
    t.iter().zip(log_q).filter(|(tp, _)| **tp > 0.0).map(|(tp, lq)| tp * (tp.ln() - lq)).sum()
}

fn sample_loss(t: &Trace, targets: &Targets) -> f64 {
    -t.log_probs[0][targets.y]
        + kl_from_logs(targets.y_i.probs(), &t.log_probs[1])
        + kl_from_logs(targets.y_a.probs(), &t.log_probs[2])
}

/// d loss / d logits for the three heads.
fn head_deltas(t: &Trace, targets: &Targets) -> [Vec<f64>; 3] {
    let soft = |l: &[f64]| l.iter().map(|v| v.exp()).collect::<Vec<f64>>();
    let mut dy = soft(&t.log_probs[0]);
    dy[targets.y] -= 1.0;
    let mut dyi = soft(&t.log_probs[1]);
    dyi.iter_mut().zip(targets.y_i.probs()).for_each(|(d, y)| *d -= y);
    let mut dya = soft(&t.log_probs[2]);
    dya.iter_mut().zip(targets.y_a.probs()).for_each(|(d, y)| *d -= y);
    [dy, dyi, dya]
}

/// Largest relative error between the analytic gradient and central
/// differences, over every parameter. Returns the error and the parameter.
pub fn gradient_check(params: &NeuralParams, x: &[f64], a: usize, targets: &Targets, h: f64) -> Result<(f64, String)> {
    let (_, grad) = params.loss_and_grad(x, a, targets)?;
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = probe.loss(x, a, targets)?;
        probe.data[i] = orig - h;
        let down = probe.loss(x, a, targets)?;
        probe.data[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = relative_error(fd, grad[i]);
        if err > worst.0 {
            worst = (err, params.describe(i));
        }
    }
    Ok(worst)
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Per-label empirical distribution of one annotator's labels within `items`.
pub(crate) fn annotator_dists(matrix: &AnnotationMatrix, items: &[usize]) -> Vec<Option<LabelDistribution>> {
    let p = matrix.num_labels();
    let mut counts = vec![vec![0.0; p]; matrix.num_annotators()];
    for &m in items {
        for e in matrix.item_entries(m) {
            counts[e.annotator][e.label] += 1.0;
        }
    }
    counts.into_iter().map(|c| LabelDistribution::from_weights(c).ok()).collect()
}

/// Argmax of the aggregated per-annotator label predictions.
pub fn predict_label(dist: &LabelDistribution) -> usize {
    argmax_label(dist.probs())
}

/// −(1/N) ln of the likelihood of a fixed label sequence with histogram
/// `counts` under `q`, i.e. the cross-entropy of the empirical distribution.
pub fn sequence_nll_rate(counts: &[u64], q: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    -counts.iter().zip(q).filter(|(c, _)| **c > 0).map(|(&c, qi)| c as f64 * qi.ln()).sum::<f64>() / n as f64
}

/// −(1/N) ln of the multinomial pmf of `counts` under `q`.
pub fn multinomial_nll_rate(counts: &[u64], q: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    -crate::data::multinomial_log_pmf(counts, q) / n as f64
}
