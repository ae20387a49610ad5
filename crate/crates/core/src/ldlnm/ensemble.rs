use serde::{Deserialize, Serialize};

use super::{decoded_from_logs, softsign, affine, log_softmax, AnnotatorCode, Decoded, NeuralParams, B_E, HEADS, W_E};
use crate::data::{argmax_label, LabelDistribution};
use crate::error::{Error, Result};

/// How the per-annotator columns are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRoute {
    /// A full forward pass per annotator.
    #[default]
    PerAnnotator,
    /// z = φ(W_A + z_I) column-wise, then z_E = φ(W_E z + b_E + z); the
    /// shared W_P layer is skipped. Needs J_I = J_A = J_P.
    Literal,
}

/// How columns are reduced to one distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the z_y columns.
    #[default]
    Expectation,
    /// Share of columns whose z_y argmax is each label.
    ModeOfArgmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    /// Annotator index of each column.
    pub annotators: Vec<usize>,
    pub columns: Vec<Decoded>,
    pub z_y: LabelDistribution,
    pub z_yi: LabelDistribution,
    pub z_ya: LabelDistribution,
}

fn mean_of(dists: impl Iterator<Item = LabelDistribution>, p: usize) -> Result<LabelDistribution> {
    let mut acc = vec![0.0; p];
    let mut n = 0.0;
    for d in dists {
        acc.iter_mut().zip(d.probs()).for_each(|(a, v)| *a += v);
        n += 1.0;
    }
    LabelDistribution::new(acc.into_iter().map(|v| v / n).collect())
}

/// Decodes item features against a set of annotators (all of them when
/// `annotators` is `None`).
pub fn ensemble_decode(
    params: &NeuralParams,
    x: &[f64],
    route: EnsembleRoute,
    annotators: Option<&[usize]>,
) -> Result<EnsembleOutput> {
    let d = *params.dims();
    let all: Vec<usize> = (0..d.n).collect();
    let annotators = annotators.unwrap_or(&all).to_vec();
    if annotators.is_empty() {
        return Err(Error::invalid("ensemble over no annotators"));
    }
    params.check_input(x, AnnotatorCode::Column(0))?;
    if let Some(&bad) = annotators.iter().find(|&&a| a >= d.n) {
        return Err(Error::invalid(format!("annotator {} out of range", bad + 1)));
    }
    let columns = match route {
        EnsembleRoute::PerAnnotator => annotators
            .iter()
            .map(|&a| {
                let t = params.run(x, AnnotatorCode::Column(a), None);
                let [y, yi, ya] = &t.log_probs;
                decoded_from_logs(y, yi, ya)
            })
            .collect::<Result<Vec<_>>>()?,
        EnsembleRoute::Literal => {
            if d.j_i != d.j_a || d.j_a != d.j_p {
                return Err(Error::invalid("the literal ensemble needs J_I = J_A = J_P"));
            }
            let z_i = affine(params.tensor(super::W_I), x, Some(params.tensor(super::B_I)));
            annotators
                .iter()
                .map(|&a| {
                    let z: Vec<f64> =
                        params.annotator_embedding(a).iter().zip(&z_i).map(|(w, zi)| softsign(w + zi)).collect();
                    let mut u = affine(params.tensor(W_E), &z, Some(params.tensor(B_E)));
                    u.iter_mut().zip(&z).for_each(|(u, z)| *u += z);
                    let ze: Vec<f64> = u.iter().map(|&v| softsign(v)).collect();
                    let [y, yi, ya] =
                        HEADS.map(|(w, b)| log_softmax(&affine(params.tensor(w), &ze, Some(params.tensor(b)))));
                    decoded_from_logs(&y, &yi, &ya)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let z_y = mean_of(columns.iter().map(|c| c.z_y.clone()), d.p)?;
    let z_yi = mean_of(columns.iter().map(|c| c.z_yi.clone()), d.p)?;
    let z_ya = mean_of(columns.iter().map(|c| c.z_ya.clone()), d.p)?;
    Ok(EnsembleOutput { annotators, columns, z_y, z_yi, z_ya })
}

/// Reduces the z_y columns of an ensemble to one distribution.
pub fn aggregate(out: &EnsembleOutput, how: Aggregation) -> Result<LabelDistribution> {
    match how {
        Aggregation::Expectation => Ok(out.z_y.clone()),
        Aggregation::ModeOfArgmax => {
            let mut votes = vec![0.0; out.z_y.len()];
            for c in &out.columns {
                votes[argmax_label(c.z_y.probs())] += 1.0;
            }
            LabelDistribution::from_weights(votes)
        }
    }
}

/// Item-level prediction from the annotators in `annotators`.
pub fn predict_item(
    params: &NeuralParams,
    x: &[f64],
    annotators: Option<&[usize]>,
    route: EnsembleRoute,
    how: Aggregation,
) -> Result<LabelDistribution> {
    aggregate(&ensemble_decode(params, x, route, annotators)?, how)
}
