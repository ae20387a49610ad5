//! Sparse annotations, label distributions and dataset splits.
//!
//! Labels and ids are 0-based inside the crate. The CSV/JSON readers in
//! [`crate::io`] convert from the 1-based external convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for simplex membership checks.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Weight of the uniform mixture applied to the second argument of
/// [`kl_divergence`] so that one-hot predictions give finite values.
pub const KL_SMOOTHING: f64 = 1e-9;

/// A probability vector over `P` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    /// Validates that `probs` lies on the simplex.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty label distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(format!("negative or non-finite probability in {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!("negative or non-finite weight in {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("weights have zero total mass"));
        }
        Ok(Self(weights.into_iter().map(|w| w / total).collect()))
    }

    /// Normalizes log-weights with the max-subtraction trick.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::invalid("log-weights have zero total mass"));
        }
        Self::from_weights(log_weights.iter().map(|lw| (lw - max).exp()).collect())
    }

    pub fn uniform(num_labels: usize) -> Self {
        Self(vec![1.0 / num_labels as f64; num_labels])
    }

    pub fn one_hot(num_labels: usize, label: usize) -> Self {
        let mut probs = vec![0.0; num_labels];
        probs[label] = 1.0;
        Self(probs)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Total-variation distance.
    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(value: LabelDistribution) -> Self {
        value.0
    }
}

impl AsRef<[f64]> for LabelDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// One observed label: annotator `annotator` gave `label` to `item`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Annotation {
    pub item: usize,
    pub annotator: usize,
    pub label: usize,
}

/// Sparse item x annotator label matrix.
///
/// Entries are stored sorted by (item, annotator). Two adjacency indices give
/// the entries of each item and of each annotator.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMatrix {
    num_items: usize,
    num_annotators: usize,
    num_labels: usize,
    entries: Vec<Annotation>,
    item_offsets: Vec<usize>,
    by_annotator: Vec<Vec<usize>>,
}

impl AnnotationMatrix {
    pub fn new(
        num_items: usize,
        num_annotators: usize,
        num_labels: usize,
        mut entries: Vec<Annotation>,
    ) -> Result<Self> {
        if num_items == 0 || num_annotators == 0 || num_labels == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        for e in &entries {
            if e.item >= num_items || e.annotator >= num_annotators {
                return Err(Error::invalid(format!(
                    "entry ({}, {}) outside a {num_items}x{num_annotators} matrix",
                    e.item + 1,
                    e.annotator + 1
                )));
            }
            if e.label >= num_labels {
                return Err(Error::invalid(format!(
                    "label {} outside 1..={num_labels}",
                    e.label + 1
                )));
            }
        }
        entries.sort_unstable();
        if let Some(w) = entries
            .windows(2)
            .find(|w| w[0].item == w[1].item && w[0].annotator == w[1].annotator)
        {
            return Err(Error::invalid(format!(
                "annotator {} labels item {} more than once",
                w[0].annotator + 1,
                w[0].item + 1
            )));
        }

        let mut item_offsets = vec![0; num_items + 1];
        for e in &entries {
            item_offsets[e.item + 1] += 1;
        }
        for m in 0..num_items {
            if item_offsets[m + 1] == 0 {
                return Err(Error::UndefinedDistribution { item: m });
            }
            item_offsets[m + 1] += item_offsets[m];
        }
        let mut by_annotator = vec![Vec::new(); num_annotators];
        for (idx, e) in entries.iter().enumerate() {
            by_annotator[e.annotator].push(idx);
        }

        Ok(Self { num_items, num_annotators, num_labels, entries, item_offsets, by_annotator })
    }

    /// Builds a matrix from (item, annotator, label) triples.
    pub fn from_triples(
        num_items: usize,
        num_annotators: usize,
        num_labels: usize,
        triples: impl IntoIterator<Item = (usize, usize, usize)>,
    ) -> Result<Self> {
        let entries = triples
            .into_iter()
            .map(|(item, annotator, label)| Annotation { item, annotator, label })
            .collect();
        Self::new(num_items, num_annotators, num_labels, entries)
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_annotators(&self) -> usize {
        self.num_annotators
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// All entries (the assignment set A together with the labels).
    pub fn entries(&self) -> &[Annotation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn item_entries(&self, item: usize) -> &[Annotation] {
        &self.entries[self.item_offsets[item]..self.item_offsets[item + 1]]
    }

    /// Indices into [`Self::entries`] of the labels given by `annotator`.
    pub fn annotator_entry_indices(&self, annotator: usize) -> &[usize] {
        &self.by_annotator[annotator]
    }

    pub fn annotator_entries(&self, annotator: usize) -> impl Iterator<Item = &Annotation> + '_ {
        self.by_annotator[annotator].iter().map(move |&i| &self.entries[i])
    }

    /// Range of entry indices belonging to `item`.
    pub fn item_entry_range(&self, item: usize) -> std::ops::Range<usize> {
        self.item_offsets[item]..self.item_offsets[item + 1]
    }

    /// The assignment set A as (item, annotator) pairs.
    pub fn assignments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|e| (e.item, e.annotator))
    }

    /// The slice A_p: assignments whose label is `label`.
    pub fn assignments_with_label(&self, label: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().filter(move |e| e.label == label).map(|e| (e.item, e.annotator))
    }

    pub fn label(&self, item: usize, annotator: usize) -> Option<usize> {
        self.item_entries(item)
            .binary_search_by_key(&annotator, |e| e.annotator)
            .ok()
            .map(|i| self.item_entries(item)[i].label)
    }

    /// Keeps only `items` (re-indexed 0..items.len() in the given order).
    /// Annotator ids and the label count are unchanged.
    pub fn restrict_items(&self, items: &[usize]) -> Result<Self> {
        let mut entries = Vec::new();
        for (new_item, &item) in items.iter().enumerate() {
            if item >= self.num_items {
                return Err(Error::invalid(format!("item {} out of range", item + 1)));
            }
            entries.extend(self.item_entries(item).iter().map(|e| Annotation { item: new_item, ..*e }));
        }
        Self::new(items.len(), self.num_annotators, self.num_labels, entries)
    }

    /// Empirical distribution of all labels given by `annotator`, or `None`
    /// for an annotator without labels.
    pub fn annotator_dist(&self, annotator: usize) -> Option<LabelDistribution> {
        let labels: Vec<usize> = self.annotator_entries(annotator).map(|e| e.label).collect();
        label_histogram(&labels, self.num_labels).ok()
    }
}

/// Normalized histogram of `labels` over `num_labels` classes.
pub fn label_histogram(labels: &[usize], num_labels: usize) -> Result<LabelDistribution> {
    if labels.is_empty() {
        return Err(Error::UndefinedDistribution { item: usize::MAX });
    }
    let mut counts = vec![0.0; num_labels];
    for &l in labels {
        if l >= num_labels {
            return Err(Error::invalid(format!("label {} outside 1..={num_labels}", l + 1)));
        }
        counts[l] += 1.0;
    }
    let n = labels.len() as f64;
    Ok(LabelDistribution(counts.into_iter().map(|c| c / n).collect()))
}

/// The gold-standard label distribution `f_dist` of one item.
pub fn empirical_dist(matrix: &AnnotationMatrix, item: usize) -> Result<LabelDistribution> {
    if item >= matrix.num_items() {
        return Err(Error::UndefinedDistribution { item });
    }
    let labels: Vec<usize> = matrix.item_entries(item).iter().map(|e| e.label).collect();
    label_histogram(&labels, matrix.num_labels()).map_err(|e| match e {
        Error::UndefinedDistribution { .. } => Error::UndefinedDistribution { item },
        other => other,
    })
}

/// Index of the largest component; ties go to the lowest index.
pub fn argmax_label(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate().skip(1) {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

/// KL(p || q) in nats.
///
/// `q` is mixed with the uniform distribution at weight [`KL_SMOOTHING`]
/// before taking logs; `p` is used as is with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { expected: p.len(), got: q.len() });
    }
    let uniform = KL_SMOOTHING / q.len() as f64;
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / ((1.0 - KL_SMOOTHING) * qi + uniform)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Rounds `n·p` to non-negative integers summing to `n` (largest remainder,
/// ties to the lower index).
pub fn round_counts(p: &[f64], n: u64) -> Vec<u64> {
    let scaled: Vec<f64> = p.iter().map(|&x| x.max(0.0) * n as f64).collect();
    let mut counts: Vec<u64> = scaled.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| (scaled[b] - scaled[b].floor()).total_cmp(&(scaled[a] - scaled[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(n.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

/// ln of the multinomial pmf of `counts` under `q`.
pub fn multinomial_log_pmf(counts: &[u64], q: &[f64]) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let n: u64 = counts.iter().sum();
    let mut out = ln_gamma(n as f64 + 1.0);
    for (&c, &qi) in counts.iter().zip(q) {
        out -= ln_gamma(c as f64 + 1.0);
        if c > 0 {
            out += c as f64 * qi.ln();
        }
    }
    out
}

/// Train / dev / test partition of item indices plus optional features.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    features: Option<Vec<Vec<f64>>>,
}

impl DatasetSplit {
    /// Checks that the three partitions are disjoint and cover `0..num_items`,
    /// and that every feature row has the same length.
    pub fn new(
        num_items: usize,
        train: Vec<usize>,
        dev: Vec<usize>,
        test: Vec<usize>,
        features: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let mut seen = vec![false; num_items];
        for &i in train.iter().chain(&dev).chain(&test) {
            if i >= num_items {
                return Err(Error::invalid(format!("split item {} out of range", i + 1)));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("item {} appears in two partitions", i + 1)));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("item {} is in no partition", missing + 1)));
        }
        if let Some(rows) = &features {
            if rows.len() != num_items {
                return Err(Error::LengthMismatch { expected: num_items, got: rows.len() });
            }
            let dim = rows.first().map_or(0, Vec::len);
            if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
                return Err(Error::invalid(format!(
                    "feature row for item {} has {} columns, expected {dim}",
                    bad + 1,
                    rows[bad].len()
                )));
            }
        }
        Ok(Self { train, dev, test, features })
    }

    /// Random 50/25/25 partition.
    pub fn random(num_items: usize, features: Option<Vec<Vec<f64>>>, seed: u64) -> Result<Self> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..num_items).collect();
        order.shuffle(&mut crate::rng::seeded(seed));
        let n_train = num_items / 2;
        let n_dev = num_items / 4;
        let mut train = order[..n_train].to_vec();
        let mut dev = order[n_train..n_train + n_dev].to_vec();
        let mut test = order[n_train + n_dev..].to_vec();
        train.sort_unstable();
        dev.sort_unstable();
        test.sort_unstable();
        Self::new(num_items, train, dev, test, features)
    }

    pub fn features(&self) -> Option<&[Vec<f64>]> {
        self.features.as_deref()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.as_ref().and_then(|f| f.first().map(Vec::len))
    }

    pub fn with_features(self, features: Vec<Vec<f64>>) -> Result<Self> {
        let n = self.train.len() + self.dev.len() + self.test.len();
        Self::new(n, self.train, self.dev, self.test, Some(features))
    }
}
