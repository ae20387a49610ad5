//! Experiment orchestration: load or generate data, fit the graph model on
//! the training items, snap, train the supervised learner, select (K, L) on
//! the dev split and report test metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{empirical_dist, AnnotationMatrix, DatasetSplit, LabelDistribution};
use crate::em::{fit_em, EmConfig};
use crate::error::{Error, Result};
use crate::genmodel::{gen_graph_with, random_assignment, GenOptions, GroundTruthModel, Hyperparams};
use crate::io::{self, Predictions, Shape};
use crate::ldlnm::{self, Aggregation, Combine, Dims, EnsembleRoute, NeuralParams};
use crate::pgm::GraphModel;
use crate::pipeline::{self, evaluate, Kernel, KlDirection, Metrics, SupervisedModel};
use crate::rng::{derive_seed, seeded};
use crate::sa::{anneal, AnnealConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sa,
    #[default]
    Em,
    Ldlnm,
    /// Plain supervised learning on the empirical distributions.
    None,
}

/// Annotation data read from disk. Relative paths are resolved against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSource {
    pub annotations: PathBuf,
    pub features: PathBuf,
    /// A random 50/25/25 split is drawn when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_labels: Option<usize>,
}

/// A planted dataset: the generative process plus features drawn around a
/// per-cluster mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub k: usize,
    pub l: usize,
    pub items: usize,
    pub annotators: usize,
    pub per_item: usize,
    pub labels: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Minimum total variation between item-cluster marginals.
    pub min_separation: Option<f64>,
    pub feature_dim: usize,
    /// Standard deviation of the cluster means.
    pub mean_scale: f64,
    /// Standard deviation of the per-item noise around its cluster mean.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            k: 3,
            l: 2,
            items: 200,
            annotators: 50,
            per_item: 10,
            labels: 4,
            alpha: 2.0,
            gamma: 2.0,
            tau: 2.0,
            min_separation: Some(0.5),
            feature_dim: 8,
            mean_scale: 1.0,
            noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub k: Vec<usize>,
    pub l: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self { k: (3..=20).collect(), l: (3..=20).collect() }
    }
}

impl Grid {
    pub fn single(k: usize, l: usize) -> Self {
        Self { k: vec![k], l: vec![l] }
    }

    /// Cells in (K, L) order, duplicates removed.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut k = self.k.clone();
        let mut l = self.l.clone();
        k.sort_unstable();
        k.dedup();
        l.sort_unstable();
        l.dedup();
        k.iter().flat_map(|&a| l.iter().map(move |&b| (a, b))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Prior {
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Self { alpha: 2.0, gamma: 2.0, tau: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdlnmSettings {
    pub j_p: usize,
    pub combine: Combine,
    pub train: ldlnm::TrainConfig,
    pub route: EnsembleRoute,
    pub aggregation: Aggregation,
}

impl Default for LdlnmSettings {
    fn default() -> Self {
        Self {
            j_p: 32,
            combine: Combine::Concat,
            train: ldlnm::TrainConfig::default(),
            route: EnsembleRoute::PerAnnotator,
            aggregation: Aggregation::Expectation,
        }
    }
}

/// Everything a pipeline run needs. For `ldlnm` the grid's K and L are the
/// item and annotator code widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub kl_direction: KlDirection,
    pub kernel: Kernel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<FileSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    pub grid: Grid,
    pub prior: Prior,
    pub anneal: AnnealConfig,
    pub em: EmConfig,
    pub supervised: pipeline::TrainConfig,
    pub ldlnm: LdlnmSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Em,
            seed: 0,
            output_dir: None,
            kl_direction: KlDirection::PredictionFirst,
            kernel: Kernel::default(),
            data: None,
            synthetic: Some(SyntheticConfig::default()),
            grid: Grid::default(),
            prior: Prior::default(),
            anneal: AnnealConfig::default(),
            em: EmConfig::default(),
            supervised: pipeline::TrainConfig::default(),
            ldlnm: LdlnmSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML config, resolving data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(d) = cfg.data.as_mut() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut d.annotations);
            fix(&mut d.features);
            if let Some(s) = d.splits.as_mut() {
                fix(s);
            }
        }
        if let Some(out) = cfg.output_dir.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => return Err(Error::invalid("give either [data] or [synthetic], not both")),
            (None, None) => return Err(Error::invalid("no data source: add a [data] or [synthetic] section")),
            (Some(d), None) => {
                for p in std::iter::once(&d.annotations).chain([&d.features]).chain(d.splits.as_ref()) {
                    if !p.exists() {
                        return Err(Error::invalid(format!("{} does not exist", p.display())));
                    }
                }
            }
            (None, Some(s)) => {
                if s.feature_dim == 0 || s.items < 4 || s.labels == 0 {
                    return Err(Error::invalid("synthetic data needs features, at least 4 items and 1 label"));
                }
                if !(s.noise >= 0.0 && s.mean_scale >= 0.0) {
                    return Err(Error::invalid("synthetic noise and mean scale must be non-negative"));
                }
                Hyperparams::new(s.k, s.l, s.alpha, s.gamma, s.tau)?;
            }
        }
        if self.method != Method::None && self.grid.cells().is_empty() {
            return Err(Error::invalid("the K/L grid is empty"));
        }
        if self.grid.cells().iter().any(|&(k, l)| k == 0 || l == 0) {
            return Err(Error::invalid("grid values must be at least 1"));
        }
        let hp = Hyperparams::new(1, 1, self.prior.alpha, self.prior.gamma, self.prior.tau)?;
        match self.method {
            Method::Sa => self.anneal.validate()?,
            Method::Em => hp.validate_for_em()?,
            Method::Ldlnm => {
                self.ldlnm.train.validate()?;
                if self.ldlnm.j_p == 0 {
                    return Err(Error::invalid("ldlnm.j_p must be positive"));
                }
            }
            Method::None => {}
        }
        Ok(())
    }
}

/// Loaded or generated data.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub matrix: AnnotationMatrix,
    pub features: Vec<Vec<f64>>,
    pub split: DatasetSplit,
    /// Present for generated data.
    pub truth: Option<(Hyperparams, GroundTruthModel)>,
}

/// Samples annotations from the generative process and one feature vector
/// per item around its cluster's mean.
pub fn generate_dataset(s: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    let hp = Hyperparams::new(s.k, s.l, s.alpha, s.gamma, s.tau)?;
    let pairs = random_assignment(s.items, s.annotators, s.per_item, derive_seed(seed, 0))?;
    let opts = GenOptions { min_separation: s.min_separation, ..GenOptions::default() };
    let (truth, matrix) = gen_graph_with(&hp, s.items, s.annotators, s.labels, &pairs, opts, derive_seed(seed, 1))?;
    let features = synthetic_features(&truth.w, s.k, s.feature_dim, s.mean_scale, s.noise, derive_seed(seed, 2))?;
    let split = DatasetSplit::random(s.items, None, derive_seed(seed, 3))?;
    Ok(Dataset { matrix, features, split, truth: Some((hp, truth)) })
}

/// x_m = μ_{w_m} + ε with μ_k ~ N(0, scale²) and ε ~ N(0, noise²).
pub fn synthetic_features(
    w: &[usize],
    k: usize,
    dim: usize,
    scale: f64,
    noise: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = seeded(seed);
    let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()));
    let (means_dist, noise_dist) = (normal(scale)?, normal(noise)?);
    let means: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| means_dist.sample(&mut rng)).collect()).collect();
    Ok(w.iter().map(|&c| means[c].iter().map(|mu| mu + noise_dist.sample(&mut rng)).collect()).collect())
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match (&cfg.data, &cfg.synthetic) {
        (Some(d), _) => {
            let shape = Shape { labels: d.num_labels, ..Shape::default() };
            let mut matrix = io::read_annotations(&d.annotations, shape)?;
            let features = io::read_features(&d.features)?;
            if features.len() < matrix.num_items() {
                return Err(Error::invalid(format!(
                    "{} feature rows for {} items",
                    features.len(),
                    matrix.num_items()
                )));
            }
            if features.len() > matrix.num_items() {
                let shape = Shape { items: Some(features.len()), labels: Some(matrix.num_labels()), ..shape };
                matrix = io::read_annotations(&d.annotations, shape)?;
            }
            let split = match &d.splits {
                Some(p) => io::read_splits(p, matrix.num_items(), None)?,
                None => DatasetSplit::random(matrix.num_items(), None, cfg.seed)?,
            };
            Ok(Dataset { matrix, features, split, truth: None })
        }
        (None, Some(s)) => generate_dataset(s, cfg.seed),
        (None, None) => Err(Error::invalid("no data source")),
    }
}

fn rows(features: &[Vec<f64>], items: &[usize]) -> Vec<Vec<f64>> {
    items.iter().map(|&m| features[m].clone()).collect()
}

/// Empirical label distributions of `items`.
pub fn empirical_targets(matrix: &AnnotationMatrix, items: &[usize]) -> Result<Vec<LabelDistribution>> {
    items.iter().map(|&m| empirical_dist(matrix, m)).collect()
}

/// Unsnapped h_raw for each item.
pub fn raw_predictions(sup: &SupervisedModel, features: &[Vec<f64>], items: &[usize]) -> Result<Predictions> {
    items.iter().map(|&m| Ok((m, sup.predict_raw(&features[m])?))).collect()
}

/// Snapped h_dist for each item.
pub fn snapped_predictions(
    sup: &SupervisedModel,
    model: &GraphModel,
    features: &[Vec<f64>],
    items: &[usize],
    kernel: Kernel,
) -> Result<Predictions> {
    items.iter().map(|&m| Ok((m, pipeline::predict(sup, &model.params, &features[m], kernel)?.h_dist))).collect()
}

/// Item-level network predictions, aggregated over the annotators who
/// labeled the item (all annotators when nobody did).
pub fn ldlnm_predictions(
    params: &NeuralParams,
    matrix: &AnnotationMatrix,
    features: &[Vec<f64>],
    items: &[usize],
    settings: &LdlnmSettings,
) -> Result<Predictions> {
    items
        .par_iter()
        .map(|&m| {
            let present: Vec<usize> = matrix.item_entries(m).iter().map(|e| e.annotator).collect();
            let who = (!present.is_empty()).then_some(present.as_slice());
            Ok((m, ldlnm::predict_item(params, &features[m], who, settings.route, settings.aggregation)?))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// Fits the graph model on the training items only; `w` follows
/// `split.train` order.
pub fn fit_graph(
    matrix: &AnnotationMatrix,
    train: &[usize],
    hp: &Hyperparams,
    method: Method,
    anneal_cfg: &AnnealConfig,
    em_cfg: &EmConfig,
    seed: u64,
) -> Result<GraphModel> {
    let sub = matrix.restrict_items(train)?;
    match method {
        Method::Sa => Ok(anneal(&sub, hp, &AnnealConfig { seed, ..anneal_cfg.clone() })?.model),
        Method::Em => Ok(fit_em(&sub, hp, &EmConfig { seed, ..em_cfg.clone() })?.model),
        _ => Err(Error::invalid("not a graph-model method")),
    }
}

/// One fitted grid cell.
#[derive(Debug, Clone)]
pub enum Fitted {
    Graph { model: GraphModel, supervised: SupervisedModel },
    Network(NeuralParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub k: usize,
    pub l: usize,
    pub dev: Metrics,
    pub test: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub k: usize,
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: Method,
    pub seed: u64,
    /// Cell with the lowest dev mean KL; absent for `none`.
    pub selected: Option<Selection>,
    /// Test metrics of the selected cell (of the baseline for `none`).
    pub test: Metrics,
    /// Supervised learner trained on the unsnapped empirical distributions.
    pub baseline: Metrics,
    pub grid: Vec<CellReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: Report,
    /// Test predictions of the selected cell.
    pub predictions: Predictions,
    pub fitted: Option<Fitted>,
}

struct CellOutcome {
    report: CellReport,
    predictions: Predictions,
    fitted: Fitted,
}

fn cell_seed(seed: u64, k: usize, l: usize) -> u64 {
    derive_seed(seed, ((k as u64) << 32) | l as u64)
}

fn run_cell(cfg: &ExperimentConfig, data: &Dataset, k: usize, l: usize) -> Result<CellOutcome> {
    let seed = cell_seed(cfg.seed, k, l);
    let split = &data.split;
    let (dev_preds, test_preds, fitted) = match cfg.method {
        Method::Sa | Method::Em => {
            let hp = Hyperparams::new(k, l, cfg.prior.alpha, cfg.prior.gamma, cfg.prior.tau)?;
            let model = fit_graph(&data.matrix, &split.train, &hp, cfg.method, &cfg.anneal, &cfg.em, seed)
                .map_err(|e| e.in_stage("fit"))?;
            let snapped = pipeline::snap_labels(&model.params, &model.w).map_err(|e| e.in_stage("snap"))?;
            let (sup, _) = pipeline::train_supervised(&rows(&data.features, &split.train), &snapped, &cfg.supervised)
                .map_err(|e| e.in_stage("train"))?;
            let predict = |items: &[usize]| {
                snapped_predictions(&sup, &model, &data.features, items, cfg.kernel).map_err(|e| e.in_stage("predict"))
            };
            (predict(&split.dev)?, predict(&split.test)?, Fitted::Graph { model, supervised: sup })
        }
        Method::Ldlnm => {
            let dims = Dims {
                j: data.features[0].len(),
                j_i: k,
                j_a: l,
                j_p: cfg.ldlnm.j_p,
                n: data.matrix.num_annotators(),
                p: data.matrix.num_labels(),
                combine: cfg.ldlnm.combine,
            };
            let mut params = NeuralParams::init(dims, derive_seed(seed, 0)).map_err(|e| e.in_stage("train"))?;
            let samples = ldlnm::build_samples(&data.matrix, &split.train).map_err(|e| e.in_stage("train"))?;
            let tcfg = ldlnm::TrainConfig { seed: derive_seed(seed, 1), ..cfg.ldlnm.train };
            ldlnm::train(&mut params, &data.features, &samples, &tcfg).map_err(|e| e.in_stage("train"))?;
            let predict = |items: &[usize]| {
                ldlnm_predictions(&params, &data.matrix, &data.features, items, &cfg.ldlnm)
                    .map_err(|e| e.in_stage("predict"))
            };
            (predict(&split.dev)?, predict(&split.test)?, Fitted::Network(params))
        }
        Method::None => return Err(Error::invalid("no grid for the plain baseline")),
    };
    let eval = |p: &Predictions, items: &[usize]| {
        evaluate(p, &data.matrix, items, cfg.kl_direction).map_err(|e| e.in_stage("evaluate"))
    };
    let report = CellReport { k, l, dev: eval(&dev_preds, &split.dev)?, test: eval(&test_preds, &split.test)? };
    info!("K={k} L={l}: dev mean KL {:.6}, test mean KL {:.6}", report.dev.mean_kl, report.test.mean_kl);
    Ok(CellOutcome { report, predictions: test_preds, fitted })
}

/// Trains the supervised learner on unsnapped targets and scores it on test.
pub fn run_baseline(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Metrics, Predictions, SupervisedModel)> {
    let split = &data.split;
    let targets = empirical_targets(&data.matrix, &split.train).map_err(|e| e.in_stage("baseline"))?;
    let (sup, _) = pipeline::train_supervised(&rows(&data.features, &split.train), &targets, &cfg.supervised)
        .map_err(|e| e.in_stage("baseline"))?;
    let preds = raw_predictions(&sup, &data.features, &split.test).map_err(|e| e.in_stage("baseline"))?;
    let metrics = evaluate(&preds, &data.matrix, &split.test, cfg.kl_direction).map_err(|e| e.in_stage("baseline"))?;
    Ok((metrics, preds, sup))
}

fn check_dataset(data: &Dataset) -> Result<()> {
    if data.features.len() != data.matrix.num_items() {
        return Err(Error::LengthMismatch { expected: data.matrix.num_items(), got: data.features.len() });
    }
    for part in [&data.split.train, &data.split.dev, &data.split.test] {
        if part.is_empty() {
            return Err(Error::invalid("train, dev and test splits must all be non-empty"));
        }
    }
    Ok(())
}

/// Runs the grid on an already loaded dataset. Cells are fitted in parallel
/// and reduced in (K, L) order; ties on dev mean KL go to the smaller K,
/// then the smaller L.
pub fn run_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<PipelineOutcome> {
    check_dataset(data).map_err(|e| e.in_stage("load"))?;
    let (baseline, baseline_preds, _) = run_baseline(cfg, data)?;
    if cfg.method == Method::None {
        let report = Report { method: cfg.method, seed: cfg.seed, selected: None, test: baseline, baseline, grid: vec![] };
        return Ok(PipelineOutcome { report, predictions: baseline_preds, fitted: None });
    }
    let cells: Vec<CellOutcome> =
        cfg.grid.cells().into_par_iter().map(|(k, l)| run_cell(cfg, data, k, l)).collect::<Result<_>>()?;
    let mut best = 0;
    for (i, c) in cells.iter().enumerate() {
        if c.report.dev.mean_kl < cells[best].report.dev.mean_kl {
            best = i;
        }
    }
    let grid: Vec<CellReport> = cells.iter().map(|c| c.report).collect();
    let chosen = cells.into_iter().nth(best).expect("non-empty grid");
    let report = Report {
        method: cfg.method,
        seed: cfg.seed,
        selected: Some(Selection { k: chosen.report.k, l: chosen.report.l }),
        test: chosen.report.test,
        baseline,
        grid,
    };
    Ok(PipelineOutcome { report, predictions: chosen.predictions, fitted: Some(chosen.fitted) })
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg).map_err(|e| e.in_stage("load"))?;
    run_on(cfg, &data)
}

/// Writes `report.json`, `config.toml`, `predictions.csv` and `grid.csv`
/// into `dir`.
pub fn write_outcome(dir: &Path, cfg: &ExperimentConfig, outcome: &PipelineOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_json(&dir.join("report.json"), &outcome.report)?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    io::write_predictions(&dir.join("predictions.csv"), &outcome.predictions)?;
    #[derive(Serialize)]
    struct Row {
        k: usize,
        l: usize,
        dev_mean_kl: f64,
        dev_accuracy: f64,
        test_mean_kl: f64,
        test_accuracy: f64,
    }
    let rows: Vec<Row> = outcome
        .report
        .grid
        .iter()
        .map(|c| Row {
            k: c.k,
            l: c.l,
            dev_mean_kl: c.dev.mean_kl,
            dev_accuracy: c.dev.accuracy,
            test_mean_kl: c.test.mean_kl,
            test_accuracy: c.test.accuracy,
        })
        .collect();
    io::write_csv_rows(&dir.join("grid.csv"), &rows)
}

/// Per-item mean KL of predictions against reference distributions, in the
/// given direction.
pub fn mean_kl_against(
    predictions: &Predictions,
    reference: &BTreeMap<usize, LabelDistribution>,
    direction: KlDirection,
) -> Result<f64> {
    let mut total = 0.0;
    for (m, r) in reference {
        let p = predictions.get(m).ok_or_else(|| Error::MissingPredictions(vec![m + 1]))?;
        total += match direction {
            KlDirection::PredictionFirst => crate::data::kl_divergence(p.probs(), r.probs())?,
            KlDirection::GoldFirst => crate::data::kl_divergence(r.probs(), p.probs())?,
        };
    }
    Ok(total / reference.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            seed: 3,
            synthetic: Some(SyntheticConfig { items: 60, annotators: 20, per_item: 5, ..SyntheticConfig::default() }),
            grid: Grid { k: vec![3, 2], l: vec![2] },
            anneal: AnnealConfig { max_iters: 200, restarts: 2, ..AnnealConfig::default() },
            ldlnm: LdlnmSettings {
                j_p: 8,
                train: ldlnm::TrainConfig { epochs: 5, ..ldlnm::TrainConfig::default() },
                ..LdlnmSettings::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn grid_cells_are_sorted_and_deduplicated() {
        let g = Grid { k: vec![4, 3, 4], l: vec![2, 1] };
        assert_eq!(g.cells(), vec![(3, 1), (3, 2), (4, 1), (4, 2)]);
        assert_eq!(Grid::default().cells().len(), 18 * 18);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = small(Method::Sa);
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_toml_gets_defaults() {
        let cfg: ExperimentConfig = toml::from_str("method = \"sa\"\n[synthetic]\nitems = 40\n").unwrap();
        assert_eq!(cfg.prior, Prior { alpha: 2.0, gamma: 2.0, tau: 2.0 });
        assert_eq!(cfg.grid, Grid::default());
        assert_eq!(cfg.synthetic.unwrap().items, 40);
        cfg.validate().unwrap();
    }

    #[test]
    fn file_configs_resolve_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(&SyntheticConfig { items: 40, annotators: 10, per_item: 3, ..Default::default() }, 1)
            .unwrap();
        io::write_annotations(&dir.path().join("a.csv"), &data.matrix).unwrap();
        io::write_features(&dir.path().join("f.csv"), &data.features).unwrap();
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, "method = \"none\"\n[data]\nannotations = \"a.csv\"\nfeatures = \"f.csv\"\n").unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        assert!(cfg.synthetic.is_none());
        assert_eq!(cfg.data.as_ref().unwrap().annotations, dir.path().join("a.csv"));
        let loaded = load_dataset(&cfg).unwrap();
        assert_eq!(loaded.matrix.num_items(), 40);
        assert_eq!(loaded.features, data.features);
        run_on(&cfg, &loaded).unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut both = small(Method::Em);
        both.data = Some(FileSource {
            annotations: "a.csv".into(),
            features: "f.csv".into(),
            splits: None,
            num_labels: None,
        });
        assert!(both.validate().unwrap_err().is_validation());
        let mut missing = both.clone();
        missing.synthetic = None;
        assert!(missing.validate().unwrap_err().to_string().contains("does not exist"));
        let mut empty = small(Method::Em);
        empty.grid.k.clear();
        assert!(empty.validate().is_err());
        let mut weak = small(Method::Em);
        weak.prior.alpha = 0.5;
        assert!(weak.validate().is_err());
    }

    #[test]
    fn features_follow_clusters() {
        let w = vec![0, 1, 0, 1];
        let f = synthetic_features(&w, 2, 3, 5.0, 0.0, 1).unwrap();
        assert_eq!(f[0], f[2]);
        assert_eq!(f[1], f[3]);
        assert_ne!(f[0], f[1]);
    }

    #[test]
    fn plain_baseline_has_no_grid() {
        let out = run_pipeline(&small(Method::None)).unwrap();
        assert!(out.report.selected.is_none());
        assert_eq!(out.report.test, out.report.baseline);
        assert_eq!(out.predictions.len(), 15);
    }

    #[test]
    fn selection_minimizes_dev_kl() {
        for method in [Method::Sa, Method::Em, Method::Ldlnm] {
            let out = run_pipeline(&small(method)).unwrap();
            let r = &out.report;
            assert_eq!(r.grid.iter().map(|c| (c.k, c.l)).collect::<Vec<_>>(), vec![(2, 2), (3, 2)]);
            let sel = r.selected.unwrap();
            let best = r.grid.iter().find(|c| c.k == sel.k && c.l == sel.l).unwrap();
            assert!(r.grid.iter().all(|c| c.dev.mean_kl >= best.dev.mean_kl));
            assert_eq!(r.test, best.test);
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let a = run_pipeline(&small(Method::Em)).unwrap();
        let b = run_pipeline(&small(Method::Em)).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let mut cfg = small(Method::Ldlnm);
        cfg.ldlnm.combine = Combine::Sum;
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(err.to_string().starts_with("train failed"), "{err}");
        assert!(err.is_validation());
    }
}
