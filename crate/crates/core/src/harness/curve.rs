//! Performance as a function of the number of dependent posterior draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, MethodTag};
use crate::harness::experiment::fit_predictor;
use crate::linalg::{argmax, Matrix};
use crate::metrics::{accuracy_and_macro_f1, predictive_entropy, roc_pr_fpr95};
use crate::model::softmax_probs;
use crate::sampler::PosteriorSampleSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub samples: usize,
    pub f1: f64,
    pub pr_auc: Option<f64>,
}

/// Evaluates the bundle of the first `s` draws for every `s`, taking draws
/// round-robin across chains. `ood` adds entropy-based PR-AUC.
pub fn sample_curve(
    set: &PosteriorSampleSet,
    features: &Matrix,
    labels: &[usize],
    ood: Option<&Matrix>,
) -> Result<Vec<CurvePoint>> {
    let draws = set.interleaved_draws();
    if draws.is_empty() {
        return Err(Error::InvalidArgument("no draws".into()));
    }
    let inputs = match ood {
        None => features.clone(),
        Some(o) => {
            let mut data = features.as_slice().to_vec();
            data.extend_from_slice(o.as_slice());
            Matrix::from_vec(features.rows() + o.rows(), features.cols(), data)?
        }
    };
    let n_id = features.rows();
    let flags: Vec<bool> = (0..inputs.rows()).map(|i| i >= n_id).collect();
    let mut sum = Matrix::zeros(inputs.rows(), 0);
    let mut points = Vec::with_capacity(draws.len());
    for (s, d) in draws.iter().enumerate() {
        let probs = softmax_probs(d, &inputs)?;
        if s == 0 {
            sum = Matrix::zeros(probs.rows(), probs.cols());
        }
        for (a, b) in sum.as_mut_slice().iter_mut().zip(probs.as_slice()) {
            *a += b;
        }
        let count = (s + 1) as f64;
        let mut mean = sum.clone();
        mean.as_mut_slice().iter_mut().for_each(|v| *v /= count);
        let predicted: Vec<usize> = (0..n_id).map(|i| argmax(mean.row(i))).collect();
        let (_, f1) = accuracy_and_macro_f1(&predicted, labels, mean.cols())?;
        let pr_auc = match ood {
            None => None,
            Some(_) => {
                let scores = mean.iter_rows().map(predictive_entropy).collect::<Result<Vec<_>>>()?;
                Some(roc_pr_fpr95(&scores, &flags)?.pr_auc)
            }
        };
        points.push(CurvePoint {
            samples: s + 1,
            f1,
            pr_auc,
        });
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub samples: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub pr_auc_mean: Option<f64>,
    pub pr_auc_std: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Mean and sample standard deviation across seeds at each draw count
/// (standard deviation 0 for a single seed).
pub fn aggregate_curves(curves: &[Vec<CurvePoint>]) -> Result<Vec<CurveRow>> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    if len == 0 {
        return Err(Error::InvalidArgument("no curve points to aggregate".into()));
    }
    Ok((0..len)
        .map(|s| {
            let (f1_mean, f1_std) = mean_std(&curves.iter().map(|c| c[s].f1).collect::<Vec<_>>());
            let prs: Vec<f64> = curves.iter().filter_map(|c| c[s].pr_auc).collect();
            let (pr_auc_mean, pr_auc_std) = if prs.len() == curves.len() {
                let (m, sd) = mean_std(&prs);
                (Some(m), Some(sd))
            } else {
                (None, None)
            };
            CurveRow {
                samples: s + 1,
                f1_mean,
                f1_std,
                pr_auc_mean,
                pr_auc_std,
            }
        })
        .collect())
}

/// Runs LL-HMC once per seed and builds the aggregated dependent-sample
/// curve on the test split (plus OOD inputs when a scenario is configured).
pub fn dependent_sample_curve(config: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<CurveRow>> {
    if config.method != MethodTag::Llhmc {
        return Err(Error::Config("dependent-sample curves need method = \"llhmc\"".into()));
    }
    if config.sampler.samples < 2 {
        return Err(Error::Config("dependent-sample curves need at least 2 samples".into()));
    }
    let curves = seeds
        .iter()
        .map(|&seed| {
            let (predictor, data) = fit_predictor(config, seed)?;
            let set = predictor.sample_set().expect("llhmc has samples");
            let feats = predictor.features(data.test.features())?;
            let ood = data.ood.as_ref().map(|o| predictor.features(o)).transpose()?;
            sample_curve(set, &feats, data.test.labels(), ood.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_curves(&curves)
}

pub fn write_curve_csv(rows: &[CurveRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let to_err = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(["samples", "f1_mean", "f1_std", "pr_auc_mean", "pr_auc_std"])
        .map_err(to_err)?;
    for r in rows {
        w.write_record([
            r.samples.to_string(),
            r.f1_mean.to_string(),
            r.f1_std.to_string(),
            opt(r.pr_auc_mean),
            opt(r.pr_auc_std),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
