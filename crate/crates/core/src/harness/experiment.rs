//! End-to-end runs: data, backbone, method fit, prediction, evaluation and
//! diagnostics.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{train_mlp, MlpSpec, Task, TaskData, TrainedMlp};
use crate::baselines::{
    fit_bbb_last_layer, fit_gda, fit_map_softmax, fit_sub_ensemble, gda_scores, select_draws, FittedMethod,
};
use crate::dataset::{load_latent_dataset_with_manifest, LatentDataset};
use crate::error::{Error, Result};
use crate::harness::config::{DataSource, ExperimentConfig, MethodTag};
use crate::harness::scenario::build_ood_scenario;
use crate::linalg::Matrix;
use crate::metrics::{effective_sample_size, evaluate, gelman_rhat, roc_pr_fpr95, EvaluationReport, OodReport};
use crate::model::{posterior_target_classification, posterior_target_full_network, PredictiveBundle};
use crate::rng::RngState;
use crate::sampler::{prior_inits, run_chains, PosteriorSampleSet};
use crate::toydata::{gaussian_clusters, two_moons};

/// Stream ids under a run or data seed.
pub(crate) mod stream {
    pub const DATA: u64 = 1;
    pub const BACKBONE: u64 = 2;
    pub const FIT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SAMPLER: u64 = 5;
    pub const PREDICT: u64 = 6;
}

/// Inputs of one run, before any backbone.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: LatentDataset,
    pub test: LatentDataset,
    /// OOD inputs when a scenario is configured.
    pub ood: Option<Matrix>,
    pub removed_classes: Vec<usize>,
}

fn rebuild_k(d: LatentDataset, k: usize) -> Result<LatentDataset> {
    if d.num_classes() == k {
        return Ok(d);
    }
    LatentDataset::new(d.features().clone(), d.labels().to_vec(), k)
}

fn load_classification(config: &ExperimentConfig, seed: u64) -> Result<(LatentDataset, LatentDataset)> {
    let root = RngState::new(config.data.seed.unwrap_or(seed)).split(stream::DATA);
    match &config.data.source {
        DataSource::TwoMoons { n_train, n_test, noise } => Ok((
            two_moons(*n_train, *noise, &mut root.split(0).rng())?,
            two_moons(*n_test, *noise, &mut root.split(1).rng())?,
        )),
        DataSource::Clusters {
            per_class,
            dim,
            num_classes,
            separation,
            test_fraction,
        } => {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "test_fraction must lie in (0, 1), got {test_fraction}"
                )));
            }
            let all = gaussian_clusters(*per_class, *dim, *num_classes, *separation, &mut root.split(0).rng())?;
            let mut perm: Vec<usize> = (0..all.len()).collect();
            perm.shuffle(&mut root.split(1).rng());
            let n_test = ((all.len() as f64) * test_fraction).round() as usize;
            let mut test_rows = perm[..n_test].to_vec();
            let mut train_rows = perm[n_test..].to_vec();
            test_rows.sort_unstable();
            train_rows.sort_unstable();
            Ok((all.subset(&train_rows), all.subset(&test_rows)))
        }
        DataSource::Files { train, test } => {
            let (tr, _) = load_latent_dataset_with_manifest(train)?;
            let (te, _) = load_latent_dataset_with_manifest(test)?;
            let k = tr.num_classes().max(te.num_classes());
            Ok((rebuild_k(tr, k)?, rebuild_k(te, k)?))
        }
        DataSource::Split { path } => {
            let (all, manifest) = load_latent_dataset_with_manifest(path)?;
            let splits = manifest
                .and_then(|m| m.splits)
                .ok_or_else(|| Error::Config(format!("{} has no manifest splits", path.display())))?;
            Ok((all.subset(&splits.train), all.subset(&splits.test)))
        }
        DataSource::Sinusoid(_) => Err(Error::Config(
            "the sinusoid source is a regression toy; use it for uncertainty bands only".into(),
        )),
    }
}

/// Train/test inputs of a run, with the configured OOD scenario applied.
pub fn load_experiment_data(config: &ExperimentConfig, seed: u64) -> Result<ExperimentData> {
    let (train, test) = load_classification(config, seed)?;
    match &config.ood {
        None => Ok(ExperimentData {
            train,
            test,
            ood: None,
            removed_classes: Vec::new(),
        }),
        Some(ood) => {
            let s = build_ood_scenario(&train, &test, ood)?;
            Ok(ExperimentData {
                train: s.train,
                test: s.test,
                ood: Some(s.ood),
                removed_classes: s.removed,
            })
        }
    }
}

/// A fitted method together with the backbone feeding it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predictor {
    LastLayer {
        backbone: Option<TrainedMlp>,
        method: FittedMethod,
    },
    FullNetwork {
        spec: MlpSpec,
        samples: PosteriorSampleSet,
    },
}

impl Predictor {
    pub fn method_name(&self) -> &'static str {
        match self {
            Predictor::LastLayer { method, .. } => method.name(),
            Predictor::FullNetwork { .. } => "full_hmc",
        }
    }

    pub fn sample_set(&self) -> Option<&PosteriorSampleSet> {
        match self {
            Predictor::LastLayer {
                method: FittedMethod::Llhmc(s),
                ..
            } => Some(s),
            Predictor::FullNetwork { samples, .. } => Some(samples),
            _ => None,
        }
    }

    /// Width of the raw inputs when a backbone fixes it.
    pub fn input_width(&self) -> Option<usize> {
        match self {
            Predictor::LastLayer { backbone, .. } => backbone.as_ref().map(|b| b.spec().input_width()),
            Predictor::FullNetwork { spec, .. } => Some(spec.input_width()),
        }
    }

    pub fn features(&self, inputs: &Matrix) -> Result<Matrix> {
        match self {
            Predictor::LastLayer { backbone: Some(b), .. } => b.extract_features(inputs),
            _ => Ok(inputs.clone()),
        }
    }

    /// Predictive bundle over `inputs` (see [`FittedMethod::predict`] for
    /// `n_members`).
    pub fn predict(&self, inputs: &Matrix, n_members: Option<usize>, rng: RngState) -> Result<PredictiveBundle> {
        let mut rng = rng.rng();
        match self {
            Predictor::LastLayer { method, .. } => method.predict(&self.features(inputs)?, n_members, &mut rng),
            Predictor::FullNetwork { spec, samples } => {
                let draws = select_draws(samples, n_members.unwrap_or(samples.total_draws()), &mut rng)?;
                let members = draws
                    .into_iter()
                    .map(|d| TrainedMlp::from_flat(spec.clone(), d)?.predict_proba(inputs))
                    .collect::<Result<Vec<_>>>()?;
                PredictiveBundle::from_members(members)
            }
        }
    }

    /// Log feature density under a GDA fit; `None` for other methods.
    pub fn log_density(&self, inputs: &Matrix) -> Result<Option<Vec<f64>>> {
        match self {
            Predictor::LastLayer {
                method: FittedMethod::Gda(g),
                ..
            } => Ok(Some(gda_scores(g, &self.features(inputs)?)?.log_density)),
            _ => Ok(None),
        }
    }
}

pub fn hash_matrix(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// One start: backbone (seeded by `backbone_seed`) plus the fitted method
/// (seeded by `(run_seed, start)`).
#[derive(Clone, Debug)]
pub struct FittedStart {
    pub predictor: Predictor,
    pub feature_hash: String,
}

pub fn fit_start(
    config: &ExperimentConfig,
    train: &LatentDataset,
    backbone_seed: u64,
    run_seed: u64,
    start: usize,
) -> Result<FittedStart> {
    let prior = config.prior()?;
    let backbone = if config.backbone.enabled {
        let spec = MlpSpec::with_hidden(
            train.dim(),
            &config.backbone.hidden,
            train.num_classes(),
            config.backbone.activation,
            Task::Classification,
        )?;
        let rng = RngState::new(backbone_seed).split(stream::BACKBONE);
        let (mlp, _) = train_mlp(
            TaskData::Classification(train),
            spec,
            &config.backbone.optimizer,
            &mut rng.rng(),
        )
        .map_err(|e| e.in_phase("backbone training"))?;
        Some(mlp)
    } else {
        None
    };
    let features = match &backbone {
        Some(b) => train.with_features(b.extract_features(train.features())?)?,
        None => train.clone(),
    };
    let feature_hash = hash_matrix(features.features());
    let fit_rng = RngState::new(run_seed).split(stream::FIT).split(start as u64);
    let sampler_cfg = || {
        let mut c = config.sampler.clone();
        c.seed = fit_rng.split(stream::SAMPLER).stream();
        c
    };
    let fit = || -> Result<Predictor> {
        let method = match config.method {
            MethodTag::Llhmc => {
                let target = posterior_target_classification(&features, prior);
                let dim = crate::model::last_layer_dim(features.num_classes(), features.dim());
                let inits = prior_inits(&prior, dim, config.sampler.chains, fit_rng.split(stream::INIT));
                FittedMethod::Llhmc(run_chains(&target, &sampler_cfg(), &inits)?)
            }
            MethodTag::FullHmc => {
                let mlp = backbone.as_ref().expect("validated: full_hmc has a backbone");
                let target = posterior_target_full_network(
                    mlp.spec(),
                    TaskData::Classification(train),
                    prior,
                    config.noise_std,
                    config.full_hmc.max_dim,
                )?;
                let inits = vec![mlp.to_flat(); config.sampler.chains];
                return Ok(Predictor::FullNetwork {
                    spec: mlp.spec().clone(),
                    samples: run_chains(&target, &sampler_cfg(), &inits)?,
                });
            }
            MethodTag::Map => FittedMethod::Map(fit_map_softmax(
                &features,
                &prior,
                &config.map.optimizer,
                &mut fit_rng.rng(),
            )?),
            MethodTag::Bbb => FittedMethod::Bbb(fit_bbb_last_layer(
                &features,
                &prior,
                &config.bbb.optimizer,
                &config.bbb.bbb,
                &mut fit_rng.rng(),
            )?),
            MethodTag::Subensemble => FittedMethod::Subensemble(fit_sub_ensemble(
                &features,
                config.subensemble.members,
                &prior,
                &config.subensemble.optimizer,
                fit_rng,
            )?),
            MethodTag::Gda => FittedMethod::Gda(fit_gda(&features, &config.gda)?),
        };
        Ok(Predictor::LastLayer {
            backbone: backbone.clone(),
            method,
        })
    };
    let predictor = fit().map_err(|e| e.in_phase("method fit"))?;
    Ok(FittedStart {
        predictor,
        feature_hash,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    /// Exclusive upper edge; `None` for the open last bin.
    pub hi: Option<f64>,
    pub count: usize,
}

const RHAT_EDGES: [f64; 6] = [1.0, 1.01, 1.05, 1.1, 1.5, 2.0];

/// Bins `[e_i, e_{i+1})` plus an open bin above the last edge. Values below
/// the first edge fall in the first bin.
fn histogram(values: &[f64], edges: &[f64]) -> Vec<HistogramBin> {
    let mut bins: Vec<HistogramBin> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| HistogramBin {
            lo,
            hi: edges.get(i + 1).copied(),
            count: 0,
        })
        .collect();
    for &v in values {
        let i = edges.iter().rposition(|&e| v >= e).unwrap_or(0);
        bins[i].count += 1;
    }
    bins
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Per-parameter ESS summed over the chains of each start; starts are
    /// concatenated.
    pub ess: Vec<f64>,
    /// Parameters whose ESS is undefined (a constant trace).
    pub ess_undefined: usize,
    /// Per-parameter R-hat of each start with at least two chains,
    /// concatenated. Chains are truncated to the shortest one.
    pub rhat: Vec<f64>,
    pub rhat_histogram: Vec<HistogramBin>,
    pub divergences: usize,
    pub mean_accept_stat: f64,
    pub step_sizes: Vec<f64>,
}

pub fn diagnostics(sets: &[&PosteriorSampleSet]) -> Diagnostics {
    let mut ess = Vec::new();
    let mut ess_undefined = 0;
    let mut rhat = Vec::new();
    for set in sets {
        let shortest = set.chains.iter().map(|c| c.draws.len()).min().unwrap_or(0);
        for i in 0..set.dim {
            let traces: Vec<Vec<f64>> = (0..set.num_chains()).map(|c| set.trace(c, i)).collect();
            let per_chain: Result<Vec<f64>> = traces.iter().map(|t| effective_sample_size(t)).collect();
            match per_chain {
                Ok(v) => ess.push(v.iter().sum()),
                Err(_) => ess_undefined += 1,
            }
            if set.num_chains() >= 2 && shortest >= 2 {
                let cut: Vec<&[f64]> = traces.iter().map(|t| &t[..shortest]).collect();
                if let Ok(r) = gelman_rhat(&cut) {
                    rhat.push(r);
                }
            }
        }
    }
    let accepts: Vec<f64> = sets.iter().map(|s| s.mean_accept_stat()).collect();
    Diagnostics {
        ess,
        ess_undefined,
        rhat_histogram: histogram(&rhat, &RHAT_EDGES),
        rhat,
        divergences: sets.iter().map(|s| s.divergences()).sum(),
        mean_accept_stat: accepts.iter().sum::<f64>() / accepts.len().max(1) as f64,
        step_sizes: sets.iter().flat_map(|s| s.chains.iter().map(|c| c.step_size)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_hash: String,
    /// Grid cell key; empty outside grid searches.
    pub cell: String,
    pub seed: u64,
    pub method: MethodTag,
    pub config: ExperimentConfig,
    pub evaluation: EvaluationReport,
    pub ood: Option<OodReport>,
    pub num_members: usize,
    pub diagnostics: Option<Diagnostics>,
    pub backbone_seeds: Vec<u64>,
    pub feature_hashes: Vec<String>,
    pub removed_classes: Vec<usize>,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    /// Copy with the wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }
}

fn stack(a: &Matrix, b: Option<&Matrix>) -> Result<Matrix> {
    match b {
        None => Ok(a.clone()),
        Some(b) => {
            let mut data = a.as_slice().to_vec();
            data.extend_from_slice(b.as_slice());
            Matrix::from_vec(a.rows() + b.rows(), a.cols(), data)
        }
    }
}

fn split_bundle(bundle: PredictiveBundle, at: usize) -> Result<(PredictiveBundle, PredictiveBundle)> {
    let n = bundle.len();
    let head: Vec<usize> = (0..at).collect();
    let tail: Vec<usize> = (at..n).collect();
    let (a, b): (Vec<Matrix>, Vec<Matrix>) = bundle
        .members
        .iter()
        .map(|m| (m.select_rows(&head), m.select_rows(&tail)))
        .unzip();
    Ok((PredictiveBundle::from_members(a)?, PredictiveBundle::from_members(b)?))
}

/// Runs one backbone per seed in `backbone_seeds`, fits the method on each
/// start's features and averages member probabilities across starts.
pub fn multi_start_run(config: &ExperimentConfig, backbone_seeds: &[u64], seed: u64) -> Result<RunRecord> {
    config.validate()?;
    if backbone_seeds.is_empty() {
        return Err(Error::Config("at least one backbone seed is required".into()));
    }
    let started = Instant::now();
    let data = load_experiment_data(config, seed).map_err(|e| e.in_phase("data"))?;
    let inputs = stack(data.test.features(), data.ood.as_ref())?;
    let n_test = data.test.len();
    let mut test_bundles = Vec::new();
    let mut ood_bundles = Vec::new();
    let mut densities: Vec<Vec<f64>> = Vec::new();
    let mut fitted = Vec::new();
    for (s, &b) in backbone_seeds.iter().enumerate() {
        let start = fit_start(config, &data.train, b, seed, s)?;
        let rng = RngState::new(seed).split(stream::PREDICT).split(s as u64);
        let bundle = start
            .predictor
            .predict(&inputs, config.n_members, rng)
            .map_err(|e| e.in_phase("prediction"))?;
        let (t, o) = split_bundle(bundle, n_test)?;
        test_bundles.push(t);
        ood_bundles.push(o);
        if let Some(d) = start.predictor.log_density(&inputs)? {
            densities.push(d);
        }
        fitted.push(start);
    }
    let num_members = test_bundles.iter().map(|b| b.num_members()).sum();
    let test_bundle = PredictiveBundle::concat(test_bundles)?;
    let evaluation = evaluate(&test_bundle, data.test.labels()).map_err(|e| e.in_phase("evaluation"))?;
    let ood = match &data.ood {
        None => None,
        Some(ood_inputs) => {
            let scores: Vec<f64> = if densities.is_empty() {
                let ood_bundle = PredictiveBundle::concat(ood_bundles)?;
                test_bundle.entropy.iter().chain(&ood_bundle.entropy).copied().collect()
            } else {
                (0..inputs.rows())
                    .map(|i| -densities.iter().map(|d| d[i]).sum::<f64>() / densities.len() as f64)
                    .collect()
            };
            let flags: Vec<bool> = (0..n_test + ood_inputs.rows()).map(|i| i >= n_test).collect();
            Some(roc_pr_fpr95(&scores, &flags).map_err(|e| e.in_phase("evaluation"))?)
        }
    };
    let sets: Vec<&PosteriorSampleSet> = fitted.iter().filter_map(|f| f.predictor.sample_set()).collect();
    Ok(RunRecord {
        run_hash: config.run_hash(seed),
        cell: String::new(),
        seed,
        method: config.method,
        config: config.cell(),
        evaluation,
        ood,
        num_members,
        diagnostics: (!sets.is_empty()).then(|| diagnostics(&sets)),
        backbone_seeds: backbone_seeds.to_vec(),
        feature_hashes: fitted.into_iter().map(|f| f.feature_hash).collect(),
        removed_classes: data.removed_classes,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Single run: the configured starts, or one start seeded by `seed`.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    multi_start_run(config, &config.start_seeds(seed), seed)
}

/// Fits the configured method on the training split of `seed` (first start
/// only).
pub fn fit_predictor(config: &ExperimentConfig, seed: u64) -> Result<(Predictor, ExperimentData)> {
    config.validate()?;
    let data = load_experiment_data(config, seed).map_err(|e| e.in_phase("data"))?;
    let b = config.start_seeds(seed)[0];
    let start = fit_start(config, &data.train, b, seed, 0)?;
    Ok((start.predictor, data))
}
