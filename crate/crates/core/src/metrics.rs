//! Classification, calibration, uncertainty-quality, MCMC-diagnostic and
//! OOD-detection metrics. Entropies are in nats; accuracy and F1 are
//! percentages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictiveBundle;

const DIST_TOL: f64 = 1e-9;

/// Shannon entropy `-sum p ln p` of one distribution row.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(p >= -DIST_TOL)) || (total - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidArgument(format!(
            "not a probability distribution (sum {total})"
        )));
    }
    Ok(-probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// `2 s / sqrt(n)` with the `n - 1` sample standard deviation.
pub fn two_sem(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!("2SEM needs at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(2.0 * var.sqrt() / (n as f64).sqrt())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sizes of `bins` contiguous equal-count ranges over `n` items; the first
/// `n % bins` ranges hold one extra item.
fn bin_sizes(n: usize, bins: usize) -> impl Iterator<Item = usize> {
    let base = n / bins;
    let extra = n % bins;
    (0..bins).map(move |r| base + usize::from(r < extra))
}

/// Adaptive calibration error over `probs` (`N x K` mean predictive) with
/// `bins` equal-count ranges per class.
pub fn adaptive_calibration_error(probs: &crate::linalg::Matrix, labels: &[usize], bins: usize) -> Result<f64> {
    let n = probs.rows();
    let k = probs.cols();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} prediction rows, {} labels",
            labels.len()
        )));
    }
    if bins == 0 || n < bins {
        return Err(Error::UndefinedMetric(format!(
            "ACE with {bins} bins needs at least {bins} instances, got {n}"
        )));
    }
    let mut total = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for class in 0..k {
        order.sort_by(|&a, &b| probs.get(a, class).total_cmp(&probs.get(b, class)));
        let mut start = 0;
        for size in bin_sizes(n, bins) {
            let cell = &order[start..start + size];
            start += size;
            let hits = cell.iter().filter(|&&i| labels[i] == class).count() as f64;
            let conf: f64 = cell.iter().map(|&i| probs.get(i, class)).sum();
            total += (hits - conf).abs() / size as f64;
        }
    }
    Ok(total / (k * bins) as f64)
}

/// Relative area under the lifted curve. The sweep visits instances in order
/// of increasing uncertainty; `A(q_i)` is the accuracy over every instance
/// whose uncertainty is at most the i-th smallest value (tied instances enter
/// together) and the baseline is the overall accuracy.
pub fn raulc(uncertainties: &[f64], correct: &[bool]) -> Result<f64> {
    let n = uncertainties.len();
    if correct.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} uncertainties, {} flags",
            correct.len()
        )));
    }
    if n < 2 {
        return Err(Error::UndefinedMetric("rAULC needs at least 2 instances".into()));
    }
    let hits = correct.iter().filter(|&&c| c).count();
    if hits == 0 {
        return Err(Error::UndefinedMetric(
            "rAULC is undefined when every prediction is wrong".into(),
        ));
    }
    let overall = hits as f64 / n as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]));
    let mut sum = 0.0;
    let mut i = 0;
    while i < n {
        // group of tied uncertainties
        let mut j = i;
        while j < n && uncertainties[order[j]] == uncertainties[order[i]] {
            j += 1;
        }
        let covered = order[..j].iter().filter(|&&o| correct[o]).count() as f64;
        let acc = covered / j as f64;
        sum += (j - i) as f64 * acc / overall;
        i = j;
    }
    Ok(-1.0 + sum / n as f64)
}

/// `N / (1 + 2 sum_k (1 - k/N) R_k)` over the given autocorrelations
/// `R_1, R_2, ...`, stopping at the first negative one and clamped to `(0, N]`.
pub fn ess_from_autocorrelations(n: usize, rhos: &[f64]) -> f64 {
    let nf = n as f64;
    let mut s = 0.0;
    for (idx, &r) in rhos.iter().enumerate() {
        if r < 0.0 {
            break;
        }
        let k = (idx + 1) as f64;
        s += (1.0 - k / nf) * r;
    }
    (nf / (1.0 + 2.0 * s)).clamp(f64::MIN_POSITIVE, nf)
}

/// Normalized autocorrelations `R_1 .. R_{N-1}` with the biased (divide by
/// `N`) autocovariance estimator.
pub fn autocorrelations(chain: &[f64]) -> Result<Vec<f64>> {
    let n = chain.len();
    let m = mean(chain);
    let c0 = chain.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return Err(Error::UndefinedMetric("autocorrelation of a constant chain".into()));
    }
    Ok((1..n)
        .map(|k| {
            let ck: f64 = (0..n - k).map(|t| (chain[t] - m) * (chain[t + k] - m)).sum::<f64>() / n as f64;
            ck / c0
        })
        .collect())
}

pub fn effective_sample_size(chain: &[f64]) -> Result<f64> {
    if chain.len() < 4 {
        return Err(Error::UndefinedMetric(format!(
            "ESS needs at least 4 draws, got {}",
            chain.len()
        )));
    }
    let rhos = autocorrelations(chain)?;
    Ok(ess_from_autocorrelations(chain.len(), &rhos))
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// `(E[Var(X | chain)] + Var(E[X | chain])) / E[Var(X | chain)]` with
/// `n - 1` sample variances throughout.
pub fn gelman_rhat<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::UndefinedMetric("R-hat needs at least 2 chains".into()));
    }
    let len = chains[0].as_ref().len();
    if len < 2 || chains.iter().any(|c| c.as_ref().len() != len) {
        return Err(Error::UndefinedMetric(
            "R-hat needs equal-length chains of at least 2 draws".into(),
        ));
    }
    let within = mean(&chains.iter().map(|c| sample_variance(c.as_ref())).collect::<Vec<_>>());
    if !(within > 0.0) {
        return Err(Error::UndefinedMetric("R-hat with zero within-chain variance".into()));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c.as_ref())).collect();
    Ok((within + sample_variance(&means)) / within)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub fpr95: f64,
}

/// Scores are larger for inputs that look more out-of-distribution.
pub fn roc_pr_fpr95(scores: &[f64], is_ood: &[bool]) -> Result<OodReport> {
    if scores.len() != is_ood.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores, {} flags",
            scores.len(),
            is_ood.len()
        )));
    }
    let n_ood = is_ood.iter().filter(|&&o| o).count();
    let n_id = scores.len() - n_ood;
    if n_ood == 0 || n_id == 0 {
        return Err(Error::UndefinedMetric(
            "OOD metrics need both ID and OOD instances".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN OOD score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Mann-Whitney with midranks for ties.
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        rank_sum_ood += midrank * order[i..j].iter().filter(|&&o| is_ood[o]).count() as f64;
        i = j;
    }
    let roc_auc = (rank_sum_ood - (n_ood * (n_ood + 1)) as f64 / 2.0) / (n_ood * n_id) as f64;

    // Average precision over distinct thresholds, highest score first.
    let mut pr_auc = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut j = order.len();
    while j > 0 {
        let mut i = j;
        while i > 0 && scores[order[i - 1]] == scores[order[j - 1]] {
            i -= 1;
        }
        tp += order[i..j].iter().filter(|&&o| is_ood[o]).count();
        seen += j - i;
        let recall = tp as f64 / n_ood as f64;
        pr_auc += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        j = i;
    }

    // Smallest ID-score threshold accepting at least 95% of ID instances.
    let mut id_scores: Vec<f64> = order.iter().filter(|&&o| !is_ood[o]).map(|&o| scores[o]).collect();
    id_scores.sort_by(f64::total_cmp);
    let needed = (0.95 * n_id as f64 - 1e-9).ceil().max(1.0) as usize;
    let threshold = id_scores[needed - 1];
    let fp = scores
        .iter()
        .zip(is_ood)
        .filter(|&(&s, &o)| o && s <= threshold)
        .count();
    Ok(OodReport {
        roc_auc,
        pr_auc,
        fpr95: fp as f64 / n_ood as f64,
    })
}

/// Accuracy and macro-averaged F1, both in percent. Classes with no true
/// and no predicted instances contribute an F1 of 0.
pub fn accuracy_and_macro_f1(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<(f64, f64)> {
    if predicted.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label out of range for {num_classes} classes"
            )));
        }
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let acc = 100.0 * tp.iter().sum::<usize>() as f64 / truth.len() as f64;
    let f1: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum::<f64>()
        / num_classes as f64;
    Ok((acc, 100.0 * f1))
}

pub const ACE_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub f1: f64,
    pub ace: f64,
    /// `None` when every prediction is wrong.
    pub raulc: Option<f64>,
    pub mean_entropy: f64,
}

/// Scores a predictive bundle against true labels; entropy is the
/// uncertainty for rAULC.
pub fn evaluate(bundle: &PredictiveBundle, labels: &[usize]) -> Result<EvaluationReport> {
    let predicted = bundle.predicted_labels();
    let (accuracy, f1) = accuracy_and_macro_f1(&predicted, labels, bundle.num_classes())?;
    let bins = ACE_BINS.min(labels.len());
    let ace = adaptive_calibration_error(&bundle.mean, labels, bins)?;
    let correct: Vec<bool> = predicted.iter().zip(labels).map(|(p, t)| p == t).collect();
    let raulc = match raulc(&bundle.entropy, &correct) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvaluationReport {
        accuracy,
        f1,
        ace,
        raulc,
        mean_entropy: mean(&bundle.entropy),
    })
}

/// Mean over runs with its 2SEM (absent for a single run).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub two_sem: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Summary {
            mean: mean(values),
            two_sem: two_sem(values).ok(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedReport {
    pub accuracy: Summary,
    pub f1: Summary,
    pub ace: Summary,
    /// Over the runs where rAULC was defined.
    pub raulc: Option<Summary>,
    pub mean_entropy: Summary,
}

pub fn aggregate(reports: &[EvaluationReport]) -> Result<AggregatedReport> {
    if reports.is_empty() {
        return Err(Error::UndefinedMetric("nothing to aggregate".into()));
    }
    let col = |f: fn(&EvaluationReport) -> f64| Summary::of(&reports.iter().map(f).collect::<Vec<_>>());
    let raulcs: Vec<f64> = reports.iter().filter_map(|r| r.raulc).collect();
    Ok(AggregatedReport {
        accuracy: col(|r| r.accuracy),
        f1: col(|r| r.f1),
        ace: col(|r| r.ace),
        raulc: (!raulcs.is_empty()).then(|| Summary::of(&raulcs)),
        mean_entropy: col(|r| r.mean_entropy),
    })
}
