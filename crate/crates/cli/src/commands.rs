use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

use crowdldl::data::{empirical_dist, AnnotationMatrix};
use crowdldl::em::{fit_em, BpConfig, EmConfig};
use crowdldl::experiment::{self, ExperimentConfig, Fitted, Grid, SyntheticConfig};
use crowdldl::io::{self, ModelFile, Predictions, Shape};
use crowdldl::ldlnm::{self, Aggregation, Combine, Dims, EnsembleRoute, InferenceConfig, NeuralParams};
use crowdldl::pipeline::{self, Kernel, KlDirection, SupervisedModel};
use crowdldl::rng::derive_seed;
use crowdldl::sa::{anneal, AnnealConfig, Schedule};
use crowdldl::Hyperparams;

use crate::*;

/// Bad command-line usage that clap cannot catch on its own.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::FitSa(a) => fit_sa(a),
        Command::FitEm(a) => fit_em_cmd(a),
        Command::Snap(a) => snap(a),
        Command::Train(a) => train(a),
        Command::TrainLdlnm(a) => train_ldlnm(a),
        Command::InferAnnotator(a) => infer(a),
        Command::Predict(a) => predict(a),
        Command::PredictLdlnm(a) => predict_ldlnm(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Pipeline(a) => pipeline_cmd(a),
        Command::Grid(a) => grid(a),
    }
}

fn read_matrix(path: &Path, num_labels: Option<usize>, num_items: Option<usize>) -> Result<AnnotationMatrix> {
    let shape = Shape { items: num_items, labels: num_labels, ..Shape::default() };
    Ok(io::read_annotations(path, shape)?)
}

fn select_items(sel: &ItemSelection, num_items: usize) -> Result<Vec<usize>> {
    match (sel.part, &sel.splits) {
        (Part::All, _) => Ok((0..num_items).collect()),
        (_, None) => Err(usage("--part needs --splits")),
        (part, Some(path)) => {
            let split = io::read_splits(path, num_items, None)?;
            Ok(match part {
                Part::Train => split.train,
                Part::Dev => split.dev,
                Part::Test => split.test,
                Part::All => unreachable!(),
            })
        }
    }
}

fn train_items(splits: &Option<PathBuf>, num_items: usize) -> Result<Vec<usize>> {
    match splits {
        Some(p) => Ok(io::read_splits(p, num_items, None)?.train),
        None => Ok((0..num_items).collect()),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let s = SyntheticConfig {
        k: a.k,
        l: a.l,
        items: a.items,
        annotators: a.annotators,
        per_item: a.per_item,
        labels: a.labels,
        alpha: a.alpha,
        gamma: a.gamma,
        tau: a.tau,
        min_separation: a.min_separation,
        feature_dim: a.feature_dim,
        mean_scale: a.mean_scale,
        noise: a.noise,
    };
    let data = experiment::generate_dataset(&s, a.seed.seed)?;
    let (hp, truth) = data.truth.as_ref().expect("generated data has a truth");
    io::write_annotations(&a.out_dir.join("annotations.csv"), &data.matrix)?;
    io::write_features(&a.out_dir.join("features.csv"), &data.features)?;
    io::write_splits(&a.out_dir.join("splits.json"), &data.split)?;
    io::write_json(&a.out_dir.join("truth.json"), &ModelFile::from_truth(*hp, truth))?;
    Ok(())
}

struct GraphInput {
    sub: AnnotationMatrix,
    items: Vec<usize>,
    hp: Hyperparams,
}

fn graph_input(fit: &GraphFitArgs) -> Result<GraphInput> {
    let matrix = read_matrix(&fit.input.annotations, fit.input.num_labels, None)?;
    let items = train_items(&fit.splits, matrix.num_items())?;
    let sub = matrix.restrict_items(&items)?;
    let hp = Hyperparams::new(fit.k, fit.l, fit.alpha, fit.gamma, fit.tau)?;
    Ok(GraphInput { sub, items, hp })
}

fn fit_sa(a: FitSaArgs) -> Result<()> {
    let g = graph_input(&a.fit)?;
    let cfg = AnnealConfig {
        max_iters: a.max_iters,
        schedule: match a.schedule {
            ScheduleArg::Inverse => Schedule::Inverse,
            ScheduleArg::Zero => Schedule::Zero,
        },
        restarts: a.fit.restarts,
        literal_deltas: a.literal_deltas,
        seed: a.fit.seed.seed,
        ..AnnealConfig::default()
    };
    let res = anneal(&g.sub, &g.hp, &cfg)?;
    io::write_json(&a.fit.out, &ModelFile::from_model(&res.model).with_items(&g.items))?;
    if let Some(t) = &a.fit.trace {
        io::write_csv_rows(t, &res.trace)?;
    }
    Ok(())
}

fn fit_em_cmd(a: FitEmArgs) -> Result<()> {
    let g = graph_input(&a.fit)?;
    let cfg = EmConfig {
        max_rounds: a.max_rounds,
        bp: BpConfig { max_rounds: a.bp_rounds, damping: a.damping, ..BpConfig::default() },
        pairwise_beliefs: a.pairwise,
        restarts: a.fit.restarts,
        seed: a.fit.seed.seed,
        ..EmConfig::default()
    };
    let res = fit_em(&g.sub, &g.hp, &cfg)?;
    let file = ModelFile::from_model(&res.model).with_items(&g.items).with_soft(&res.soft);
    io::write_json(&a.fit.out, &file)?;
    if let Some(t) = &a.fit.trace {
        io::write_csv_rows(t, &res.trace)?;
    }
    Ok(())
}

fn snap(a: SnapArgs) -> Result<()> {
    let file: ModelFile = io::read_json(&a.model)?;
    let model = file.to_model()?;
    let snapped = pipeline::snap_labels(&model.params, &model.w)?;
    let preds: Predictions = file.item_ids()?.into_iter().zip(snapped).collect();
    io::write_predictions(&a.out, &preds)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let features = io::read_features(&a.features)?;
    let (items, targets) = match (&a.targets, &a.annotations) {
        (Some(t), _) => {
            let targets = io::read_predictions(t)?;
            let keep = match a.items.part {
                Part::All => None,
                _ => Some(select_items(&a.items, features.len())?),
            };
            targets.into_iter().filter(|(m, _)| keep.as_ref().is_none_or(|k| k.contains(m))).unzip()
        }
        (None, Some(ann)) => {
            let matrix = read_matrix(ann, a.num_labels, Some(features.len()))?;
            let items = select_items(&a.items, features.len())?;
            let targets = experiment::empirical_targets(&matrix, &items)?;
            (items, targets)
        }
        (None, None) => return Err(usage("give --targets or --annotations")),
    };
    let items: Vec<usize> = items;
    if items.is_empty() {
        return Err(usage("no training items"));
    }
    if let Some(&m) = items.iter().find(|&&m| m >= features.len()) {
        return Err(usage(format!("no features for item {}", m + 1)));
    }
    let rows: Vec<Vec<f64>> = items.iter().map(|&m| features[m].clone()).collect();
    let cfg = pipeline::TrainConfig { max_epochs: a.max_epochs, l2: a.l2, ..pipeline::TrainConfig::default() };
    let (model, _) = pipeline::train_supervised(&rows, &targets, &cfg)?;
    io::write_json(&a.out, &model)?;
    Ok(())
}

fn kernel(arg: KernelArg, n: f64) -> Result<Kernel> {
    Ok(match arg {
        KernelArg::Marginal => Kernel::Marginal { n },
        KernelArg::GeometricMean => Kernel::GeometricMean,
        KernelArg::ExpNegKl => Kernel::ExpNegKl,
        KernelArg::Multinomial => {
            if !(n >= 1.0 && n.fract() == 0.0) {
                return Err(usage("the multinomial kernel needs a whole --kernel-n ≥ 1"));
            }
            Kernel::Multinomial { n: n as u64 }
        }
    })
}

fn predict(a: PredictArgs) -> Result<()> {
    let sup: SupervisedModel = io::read_json(&a.supervised)?;
    let features = io::read_features(&a.features)?;
    let items = select_items(&a.items, features.len())?;
    let preds = match &a.model {
        Some(path) => {
            let model = io::read_json::<ModelFile>(path)?.to_model()?;
            experiment::snapped_predictions(&sup, &model, &features, &items, kernel(a.kernel, a.kernel_n)?)?
        }
        None => experiment::raw_predictions(&sup, &features, &items)?,
    };
    io::write_predictions(&a.out, &preds)?;
    Ok(())
}

fn train_ldlnm(a: TrainLdlnmArgs) -> Result<()> {
    let features = io::read_features(&a.features)?;
    let matrix = read_matrix(&a.input.annotations, a.input.num_labels, Some(features.len()))?;
    let items = train_items(&a.splits, matrix.num_items())?;
    let dims = Dims {
        j: features.first().map_or(0, Vec::len),
        j_i: a.j_i,
        j_a: a.j_a,
        j_p: a.j_p,
        n: matrix.num_annotators(),
        p: matrix.num_labels(),
        combine: match a.combine {
            CombineArg::Concat => Combine::Concat,
            CombineArg::Sum => Combine::Sum,
        },
    };
    let seed = a.seed.seed;
    let mut params = NeuralParams::init(dims, derive_seed(seed, 0))?;
    let samples = ldlnm::build_samples(&matrix, &items)?;
    let cfg = ldlnm::TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        dropout: a.dropout,
        seed: derive_seed(seed, 1),
        ..ldlnm::TrainConfig::default()
    };
    let report = ldlnm::train(&mut params, &features, &samples, &cfg)?;
    io::write_json(&a.out, &params)?;
    if let Some(t) = &a.trace {
        #[derive(Serialize)]
        struct Row {
            epoch: usize,
            loss: f64,
        }
        let rows: Vec<Row> =
            report.epoch_losses.iter().enumerate().map(|(i, &loss)| Row { epoch: i + 1, loss }).collect();
        io::write_csv_rows(t, &rows)?;
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn infer(a: InferArgs) -> Result<()> {
    let params: NeuralParams = io::read_json(&a.checkpoint)?;
    let features = io::read_features(&a.features)?;
    let matrix = read_matrix(&a.input.annotations, a.input.num_labels, Some(features.len()))?;
    let item = a.item.checked_sub(1).filter(|&m| m < features.len()).ok_or_else(|| usage("--item out of range"))?;
    let y_i = empirical_dist(&matrix, item)?;
    let cfg = InferenceConfig {
        beta: a.beta,
        decay: a.decay,
        steps: a.steps,
        sigma_a: a.sigma_a,
        tol: a.tol,
        seed: a.seed.seed,
    };
    let res = ldlnm::infer_annotator(&params, &features[item], &y_i, &cfg)?;
    let sims: Vec<f64> = (0..params.dims().n).map(|n| cosine(&res.z_a, &params.annotator_embedding(n))).collect();
    let nearest = (0..sims.len()).fold(0, |best, n| if sims[n] > sims[best] { n } else { best });
    #[derive(Serialize)]
    struct Out {
        item: usize,
        z_a: Vec<f64>,
        initial_kl: f64,
        final_kl: f64,
        steps: usize,
        nearest_annotator: usize,
        cosine: f64,
    }
    let out = Out {
        item: a.item,
        initial_kl: res.initial_kl,
        final_kl: res.final_kl,
        steps: res.steps,
        nearest_annotator: nearest + 1,
        cosine: sims[nearest],
        z_a: res.z_a,
    };
    io::write_json(&a.out, &out)?;
    Ok(())
}

fn predict_ldlnm(a: PredictLdlnmArgs) -> Result<()> {
    let params: NeuralParams = io::read_json(&a.checkpoint)?;
    let features = io::read_features(&a.features)?;
    let items = select_items(&a.items, features.len())?;
    let settings = experiment::LdlnmSettings {
        route: match a.route {
            RouteArg::PerAnnotator => EnsembleRoute::PerAnnotator,
            RouteArg::Literal => EnsembleRoute::Literal,
        },
        aggregation: match a.aggregation {
            AggregationArg::Expectation => Aggregation::Expectation,
            AggregationArg::ModeOfArgmax => Aggregation::ModeOfArgmax,
        },
        ..experiment::LdlnmSettings::default()
    };
    let preds = match &a.annotations {
        Some(ann) => {
            let matrix = read_matrix(ann, a.num_labels, Some(features.len()))?;
            experiment::ldlnm_predictions(&params, &matrix, &features, &items, &settings)?
        }
        None => items
            .iter()
            .map(|&m| Ok((m, ldlnm::predict_item(&params, &features[m], None, settings.route, settings.aggregation)?)))
            .collect::<crowdldl::Result<Predictions>>()?,
    };
    io::write_predictions(&a.out, &preds)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let preds = io::read_predictions(&a.predictions)?;
    let matrix = read_matrix(&a.input.annotations, a.input.num_labels, None)?;
    let items = select_items(&a.items, matrix.num_items())?;
    let direction = match a.direction {
        DirectionArg::PredictionFirst => KlDirection::PredictionFirst,
        DirectionArg::GoldFirst => KlDirection::GoldFirst,
    };
    let metrics = pipeline::evaluate(&preds, &matrix, &items, direction)?;
    match &a.out {
        Some(p) => io::write_json(p, &metrics)?,
        None => println!("{}", serde_json::to_string_pretty(&metrics)?),
    }
    Ok(())
}

fn parse_values(s: &str) -> Result<Vec<usize>> {
    let bad = || usage(format!("cannot read {s:?}; use a list like 3,5,8 or a range like 3..20"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

fn run_experiment(mut cfg: ExperimentConfig, out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = out_dir {
        cfg.output_dir = Some(d);
    }
    let dir = cfg.output_dir.clone().ok_or_else(|| usage("no output directory: set output_dir or pass --out-dir"))?;
    cfg.validate()?;
    let outcome = experiment::run_pipeline(&cfg)?;
    experiment::write_outcome(&dir, &cfg, &outcome)?;
    match &outcome.fitted {
        Some(Fitted::Graph { model, supervised }) => {
            let data = experiment::load_dataset(&cfg)?;
            let file = ModelFile::from_model(model).with_items(&data.split.train);
            io::write_json(&dir.join("model.json"), &file)?;
            io::write_json(&dir.join("supervised.json"), supervised)?;
        }
        Some(Fitted::Network(params)) => io::write_json(&dir.join("checkpoint.json"), params)?,
        None => {}
    }
    println!("{}", serde_json::to_string_pretty(&outcome.report.test)?);
    Ok(())
}

fn pipeline_cmd(a: PipelineArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let (Some(k), Some(l)) = (a.k, a.l) {
        cfg.grid = Grid::single(k, l);
    }
    run_experiment(cfg, a.out_dir, a.seed)
}

fn grid(a: GridArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(k) = &a.k {
        cfg.grid.k = parse_values(k)?;
    }
    if let Some(l) = &a.l {
        cfg.grid.l = parse_values(l)?;
    }
    run_experiment(cfg, a.out_dir, a.seed)
}
