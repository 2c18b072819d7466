use llhmc::baselines::FittedMethod;
use llhmc::dataset::{
    load_latent_dataset, load_regression_dataset, save_latent_dataset, save_regression_dataset, RegressionDataset,
};
use llhmc::harness::config::{parse_override, ExperimentConfig, OodConfig, OodMode};
use llhmc::harness::curve::sample_curve;
use llhmc::harness::experiment::{fit_predictor, multi_start_run, run_experiment, Predictor};
use llhmc::harness::grid::{grid_search, summarize, GridSpec};
use llhmc::harness::heatmap::uncertainty_grid;
use llhmc::harness::scenario::build_ood_scenario;
use llhmc::harness::RecordStore;
use llhmc::linalg::Matrix;
use llhmc::metrics::evaluate;
use llhmc::model::LastLayerClassifier;
use llhmc::rng::RngState;
use llhmc::sampler::{ChainDraws, PosteriorSampleSet, SamplerConfig};
use llhmc::toydata::{gaussian_clusters, make_grid};

fn config(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<_> = overrides.iter().map(|s| parse_override(s).unwrap()).collect();
    ExperimentConfig::parse("", &o).unwrap()
}

fn clusters(method: &str) -> ExperimentConfig {
    config(&[
        &format!("method={method}"),
        "data.kind=clusters",
        "data.per_class=60",
        "data.dim=4",
        "data.num_classes=3",
        "backbone.enabled=false",
        "sampler.burn_in=30",
        "sampler.samples=20",
    ])
}

fn moons(method: &str) -> ExperimentConfig {
    config(&[
        &format!("method={method}"),
        "data.kind=two_moons",
        "data.n_train=100",
        "data.n_test=60",
        "backbone.hidden=[8]",
        "backbone.optimizer.epochs=30",
        "sampler.burn_in=30",
        "sampler.samples=20",
    ])
}

#[test]
fn grid_runs_every_cell_seed_pair_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let store = RecordStore::open(dir.path()).unwrap();
    let spec = GridSpec::default().axis("prior_std", vec![0.5.into(), 1.0.into(), 2.0.into()]);
    let base = clusters("llhmc");
    let first = grid_search(&base, &spec, &[0, 1], Some(&store)).unwrap();
    assert!(first.failures.is_empty());
    assert_eq!(first.records.len(), 6);
    let csv = std::fs::read_to_string(store.csv_path()).unwrap();
    assert_eq!(csv.lines().count(), 7);

    let second = grid_search(&base, &spec, &[0, 1], Some(&store)).unwrap();
    assert_eq!(second.records, first.records);
    assert_eq!(std::fs::read_to_string(store.csv_path()).unwrap(), csv);

    let reloaded = summarize(&store.load_all().unwrap()).unwrap();
    let summary = first.summary.unwrap();
    assert_eq!(reloaded, summary);
    assert_eq!(
        serde_json::to_string(&reloaded).unwrap(),
        serde_json::to_string(&summary).unwrap()
    );
    assert_eq!(summary.per_seed_best.len(), 2);
}

#[test]
fn records_are_recreatable_from_their_config() {
    let base = clusters("bbb");
    let record = run_experiment(&base, 3).unwrap();
    let again = run_experiment(&record.config, record.seed).unwrap();
    assert_eq!(again.without_timing(), record.without_timing());
    assert_eq!(record.run_hash, base.run_hash(3));
}

#[test]
fn member_counts_and_rhat_per_parameter() {
    let map = run_experiment(&clusters("map"), 0).unwrap();
    assert_eq!(map.num_members, 1);
    assert!(map.diagnostics.is_none());

    let mut cfg = clusters("llhmc");
    cfg.sampler.chains = 2;
    let r = run_experiment(&cfg, 0).unwrap();
    let d = r.diagnostics.unwrap();
    // 3 classes x (4 features + bias)
    assert_eq!(d.rhat.len(), 15);
    assert_eq!(d.ess.len(), 15);
    assert_eq!(d.rhat_histogram.iter().map(|b| b.count).sum::<usize>(), 15);
    assert_eq!(r.num_members, 20);
}

#[test]
fn multi_start_reduces_to_single_run_and_counts_chains() {
    let mut cfg = moons("llhmc");
    let single = multi_start_run(&cfg, &[4], 4).unwrap();
    assert_eq!(
        single.without_timing(),
        run_experiment(&cfg, 4).unwrap().without_timing()
    );

    cfg.sampler.chains = 2;
    let multi = multi_start_run(&cfg, &[10, 11], 4).unwrap();
    let d = multi.diagnostics.unwrap();
    assert_eq!(d.step_sizes.len(), 4);
    assert_eq!(multi.feature_hashes.len(), 2);
    assert_ne!(multi.feature_hashes[0], multi.feature_hashes[1]);
    assert_eq!(multi.backbone_seeds, vec![10, 11]);
    assert_eq!(multi.num_members, 40);
}

#[test]
fn ood_scenario_never_leaks_removed_rows() {
    let mut rng = RngState::new(5).rng();
    let train = gaussian_clusters(30, 5, 5, 3.0, &mut rng).unwrap();
    // make class 2 the rarest
    let keep: Vec<usize> = (0..train.len())
        .filter(|&i| train.labels()[i] != 2 || i % 3 == 0)
        .collect();
    let train = train.subset(&keep);
    let test = gaussian_clusters(10, 5, 5, 3.0, &mut rng).unwrap();
    for mode in [OodMode::Min, OodMode::Max] {
        let s = build_ood_scenario(&train, &test, &OodConfig { mode, threshold: None }).unwrap();
        let removed = s.removed.clone();
        assert_eq!(removed.len(), 1);
        if mode == OodMode::Min {
            assert_eq!(removed, vec![2]);
        }
        let is_removed_row = |row: &[f64]| {
            train
                .features()
                .iter_rows()
                .zip(train.labels())
                .chain(test.features().iter_rows().zip(test.labels()))
                .any(|(r, y)| removed.contains(y) && r == row)
        };
        assert!(s.train.features().iter_rows().all(|r| !is_removed_row(r)));
        assert!(s.test.features().iter_rows().all(|r| !is_removed_row(r)));
        assert!(s.ood.iter_rows().all(is_removed_row));
        let n_removed = train
            .labels()
            .iter()
            .chain(test.labels())
            .filter(|y| removed.contains(y))
            .count();
        assert_eq!(s.ood.rows(), n_removed);
        assert_eq!(s.train.len() + s.test.len() + s.ood.rows(), train.len() + test.len());
        assert_eq!(s.train.num_classes(), 4);
    }
}

#[test]
fn curve_endpoint_matches_full_evaluation() {
    let cfg = clusters("llhmc");
    let (predictor, data) = fit_predictor(&cfg, 2).unwrap();
    let set = predictor.sample_set().unwrap();
    let feats = predictor.features(data.test.features()).unwrap();
    let curve = sample_curve(set, &feats, data.test.labels(), None).unwrap();
    assert_eq!(curve.len(), 20);
    let full = evaluate(&set.predict(&feats).unwrap(), data.test.labels()).unwrap();
    assert!((curve.last().unwrap().f1 - full.f1).abs() < 1e-9);
}

#[test]
fn identical_draws_give_a_flat_curve() {
    let data = gaussian_clusters(20, 3, 3, 2.0, &mut RngState::new(6).rng()).unwrap();
    let theta: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let chain = ChainDraws {
        draws: vec![theta; 6],
        stats: Vec::new(),
        step_size: 0.1,
    };
    let set = PosteriorSampleSet {
        config: SamplerConfig::default(),
        dim: 12,
        chains: vec![chain.clone(), chain],
    };
    let ood = Matrix::from_rows(&[vec![5.0, 5.0, 5.0], vec![-4.0, 0.0, 1.0]]).unwrap();
    let curve = sample_curve(&set, data.features(), data.labels(), Some(&ood)).unwrap();
    assert_eq!(curve.len(), 12);
    assert!(curve.iter().all(|p| p.f1 == curve[0].f1));
    assert!(curve
        .iter()
        .all(|p| (p.pr_auc.unwrap() - curve[0].pr_auc.unwrap()).abs() < 1e-12));
}

#[test]
fn heatmap_covers_the_grid_and_uniform_model_is_flat() {
    let grid = make_grid((-1.0, 1.0), (-1.0, 1.0), 3).unwrap();
    let uniform = Predictor::LastLayer {
        backbone: None,
        method: FittedMethod::Map(LastLayerClassifier::zeros(2, 2)),
    };
    let cells = uncertainty_grid(&uniform, &grid, None, RngState::new(0)).unwrap();
    assert_eq!(cells.len(), 9);
    for c in &cells {
        assert!((c.entropy - 2f64.ln()).abs() < 1e-15);
        assert_eq!(c.entropy_norm, 0.0);
        assert_eq!(c.p1, 0.5);
    }

    let (predictor, _) = fit_predictor(&moons("map"), 1).unwrap();
    let cells = uncertainty_grid(
        &predictor,
        &make_grid((-2.0, 3.0), (-1.5, 2.0), 10).unwrap(),
        None,
        RngState::new(0),
    )
    .unwrap();
    assert_eq!(cells.len(), 100);
    let lo = cells.iter().map(|c| c.entropy_norm).fold(f64::INFINITY, f64::min);
    let hi = cells.iter().map(|c| c.entropy_norm).fold(0.0, f64::max);
    assert_eq!((lo, hi), (0.0, 1.0));
}

#[test]
fn datasets_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let latent = gaussian_clusters(7, 3, 3, 1.0, &mut RngState::new(7).rng()).unwrap();
    let path = dir.path().join("latent.csv");
    save_latent_dataset(&latent, &path).unwrap();
    assert_eq!(load_latent_dataset(&path).unwrap(), latent);

    let inputs = Matrix::from_rows(&[vec![0.1], vec![-1.0 / 3.0], vec![1e-300]]).unwrap();
    let reg = RegressionDataset::new(inputs, vec![std::f64::consts::PI, -2.5, 0.0]).unwrap();
    let path = dir.path().join("reg.csv");
    save_regression_dataset(&reg, &path).unwrap();
    assert_eq!(load_regression_dataset(&path).unwrap(), reg);
}

#[test]
fn predictions_are_reproducible_for_equal_seeds() {
    let cfg = clusters("subensemble");
    let (a, data) = fit_predictor(&cfg, 8).unwrap();
    let (b, _) = fit_predictor(&cfg, 8).unwrap();
    assert_eq!(a, b);
    let pa = a.predict(data.test.features(), Some(3), RngState::new(1)).unwrap();
    let pb = b.predict(data.test.features(), Some(3), RngState::new(1)).unwrap();
    assert_eq!(pa, pb);
}
