use std::collections::BTreeMap;

use crowdldl::data::LabelDistribution;
use crowdldl::experiment::{
    generate_dataset, load_dataset, mean_kl_against, run_baseline, run_on, write_outcome, ExperimentConfig, FileSource,
    Grid, Method, SyntheticConfig,
};
use crowdldl::io::{self, ModelFile, Shape};
use crowdldl::pipeline::KlDirection;

fn planted(seed: u64) -> (f64, f64) {
    let cfg = ExperimentConfig { seed, grid: Grid::single(3, 2), ..ExperimentConfig::default() };
    let data = generate_dataset(&SyntheticConfig::default(), seed).unwrap();
    let (_, truth) = data.truth.clone().unwrap();
    let reference: BTreeMap<usize, LabelDistribution> =
        data.split.test.iter().map(|&m| (m, truth.item_cluster_marginal(truth.w[m]))).collect();
    let snapped = run_on(&cfg, &data).unwrap();
    let (_, raw, _) = run_baseline(&cfg, &data).unwrap();
    (
        mean_kl_against(&snapped.predictions, &reference, KlDirection::PredictionFirst).unwrap(),
        mean_kl_against(&raw, &reference, KlDirection::PredictionFirst).unwrap(),
    )
}

#[test]
fn snapping_moves_predictions_toward_the_planted_marginals() {
    let runs: Vec<(f64, f64)> = (0..3).map(planted).collect();
    let snapped: f64 = runs.iter().map(|r| r.0).sum();
    let raw: f64 = runs.iter().map(|r| r.1).sum();
    assert!(snapped < raw, "snapped {snapped} vs raw {raw}: {runs:?}");
}

#[test]
fn files_round_trip_and_drive_a_file_based_run() {
    let dir = tempfile::tempdir().unwrap();
    let s = SyntheticConfig { items: 60, annotators: 15, per_item: 4, ..SyntheticConfig::default() };
    let data = generate_dataset(&s, 9).unwrap();
    io::write_annotations(&dir.path().join("a.csv"), &data.matrix).unwrap();
    io::write_features(&dir.path().join("f.csv"), &data.features).unwrap();
    io::write_splits(&dir.path().join("s.json"), &data.split).unwrap();
    let (hp, truth) = data.truth.clone().unwrap();
    io::write_json(&dir.path().join("truth.json"), &ModelFile::from_truth(hp, &truth)).unwrap();

    let shape = Shape { items: Some(60), annotators: Some(15), labels: Some(4) };
    let matrix = io::read_annotations(&dir.path().join("a.csv"), shape).unwrap();
    assert_eq!(matrix.entries(), data.matrix.entries());
    assert_eq!(io::read_features(&dir.path().join("f.csv")).unwrap(), data.features);
    let split = io::read_splits(&dir.path().join("s.json"), 60, None).unwrap();
    assert_eq!((split.train.clone(), split.dev.clone(), split.test.clone()), (data.split.train.clone(), data.split.dev.clone(), data.split.test.clone()));
    let back: ModelFile = io::read_json(&dir.path().join("truth.json")).unwrap();
    let model = back.to_model().unwrap();
    assert_eq!(model.w, truth.w);
    assert_eq!(model.params.theta_flat(), crowdldl::pgm::GraphModel::from_ground_truth(hp, &truth).unwrap().params.theta_flat());

    std::fs::write(
        dir.path().join("run.toml"),
        "method = \"sa\"\nseed = 4\noutput_dir = \"out\"\n[data]\nannotations = \"a.csv\"\nfeatures = \"f.csv\"\nsplits = \"s.json\"\nnum_labels = 4\n[grid]\nk = [2, 3]\nl = [1, 2]\n[anneal]\nmax_iters = 200\nrestarts = 2\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&dir.path().join("run.toml")).unwrap();
    assert!(cfg.synthetic.is_none());
    assert_eq!(cfg.method, Method::Sa);
    let loaded = load_dataset(&cfg).unwrap();
    assert_eq!(loaded.matrix.entries(), data.matrix.entries());
    let outcome = run_on(&cfg, &loaded).unwrap();
    assert_eq!(outcome.report.grid.len(), 4);
    let best = outcome
        .report
        .grid
        .iter()
        .min_by(|a, b| a.dev.mean_kl.total_cmp(&b.dev.mean_kl))
        .unwrap();
    let chosen = outcome.report.selected.unwrap();
    assert_eq!((chosen.k, chosen.l), (best.k, best.l));
    assert_eq!(outcome.predictions.len(), loaded.split.test.len());

    let out = cfg.output_dir.clone().unwrap();
    write_outcome(&out, &cfg, &outcome).unwrap();
    let preds = io::read_predictions(&out.join("predictions.csv")).unwrap();
    assert_eq!(preds, outcome.predictions);
    let archived = ExperimentConfig::load(&out.join("config.toml"));
    // the archived config has absolute paths, so it loads from anywhere
    assert_eq!(archived.unwrap().data, cfg.data);
    let report: serde_json::Value = io::read_json(&out.join("report.json")).unwrap();
    assert_eq!(report["method"], "sa");
    let grid = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 5);
}

#[test]
fn config_rejects_two_data_sources_and_missing_files() {
    let mut cfg = ExperimentConfig {
        data: Some(FileSource {
            annotations: "nope.csv".into(),
            features: "nope.csv".into(),
            splits: None,
            num_labels: None,
        }),
        ..ExperimentConfig::default()
    };
    assert!(cfg.validate().unwrap_err().is_validation());
    cfg.synthetic = None;
    assert!(cfg.validate().unwrap_err().is_validation());
}
