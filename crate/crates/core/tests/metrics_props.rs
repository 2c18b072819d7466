use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use llhmc::linalg::Matrix;
use llhmc::metrics::{
    accuracy_and_macro_f1, adaptive_calibration_error, effective_sample_size, gelman_rhat, predictive_entropy, raulc,
    roc_pr_fpr95, two_sem,
};
use llhmc::rng::RngState;

fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngState::new(seed).rng();
    let scale = (1.0 - phi * phi).sqrt();
    let mut x = rng.sample::<f64, _>(StandardNormal);
    (0..n)
        .map(|_| {
            x = phi * x + scale * rng.sample::<f64, _>(StandardNormal);
            x
        })
        .collect()
}

#[test]
fn ess_decreases_with_autoregression() {
    let ess: Vec<f64> = [0.0, 0.5, 0.9]
        .iter()
        .map(|&phi| effective_sample_size(&ar1(phi, 5000, 3)).unwrap())
        .collect();
    assert!(ess[0] > ess[1] && ess[1] > ess[2], "{ess:?}");
    let white = effective_sample_size(&ar1(0.0, 1000, 4)).unwrap();
    assert!((800.0..=1000.0).contains(&white), "{white}");
}

#[test]
fn two_sem_uses_sample_deviation() {
    // values 1..4: sample variance 5/3
    let expected = 2.0 * (5.0f64 / 3.0).sqrt() / 2.0;
    assert!((two_sem(&[1.0, 2.0, 3.0, 4.0]).unwrap() - expected).abs() < 1e-15);
    assert!(two_sem(&[1.0]).is_err());
}

/// Pairwise Mann-Whitney count with ties scored one half.
fn auc_oracle(scores: &[f64], ood: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (s_o, _) in scores.iter().zip(ood).filter(|(_, &o)| o) {
        for (s_i, _) in scores.iter().zip(ood).filter(|(_, &o)| !o) {
            pairs += 1.0;
            wins += if s_o > s_i {
                1.0
            } else if s_o == s_i {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn f1_oracle(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut conf = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        conf[t][p] += 1;
    }
    let f1s: Vec<f64> = (0..k)
        .map(|c| {
            let tp = conf[c][c] as f64;
            let pred_c: f64 = (0..k).map(|t| conf[t][c] as f64).sum();
            let true_c: f64 = conf[c].iter().sum::<usize>() as f64;
            if pred_c + true_c == 0.0 {
                0.0
            } else {
                2.0 * tp / (pred_c + true_c)
            }
        })
        .collect();
    100.0 * f1s.iter().sum::<f64>() / k as f64
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(prop_oneof![-3.0f64..3.0, (-3i32..3).prop_map(f64::from)], n),
            proptest::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn entropy_lies_between_zero_and_log_k(w in proptest::collection::vec(0.0f64..1.0, 1..8)) {
        prop_assume!(w.iter().sum::<f64>() > 1e-6);
        let p = normalize(&w);
        let h = predictive_entropy(&p).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn ace_is_permutation_invariant(
        raw in proptest::collection::vec(0.01f64..1.0, 12 * 3),
        labels in proptest::collection::vec(0usize..3, 12),
        seed in any::<u64>(),
    ) {
        let rows: Vec<Vec<f64>> = raw.chunks(3).map(normalize).collect();
        for c in 0..3 {
            let mut col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            col.sort_by(f64::total_cmp);
            prop_assume!(col.windows(2).all(|w| w[0] < w[1]));
        }
        let mut perm: Vec<usize> = (0..12).collect();
        let mut rng = RngState::new(seed).rng();
        for i in (1..12).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let a = adaptive_calibration_error(&Matrix::from_rows(&rows).unwrap(), &labels, 3).unwrap();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let shuffled_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let b = adaptive_calibration_error(&Matrix::from_rows(&shuffled).unwrap(), &shuffled_labels, 3).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ood_metrics_depend_only_on_score_order((scores, ood) in labelled_scores()) {
        prop_assume!(ood.iter().any(|&o| o) && ood.iter().any(|&o| !o));
        let transformed: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 - 7.0).collect();
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                prop_assume!((scores[i] < scores[j]) == (transformed[i] < transformed[j]));
            }
        }
        let a = roc_pr_fpr95(&scores, &ood).unwrap();
        let b = roc_pr_fpr95(&transformed, &ood).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((a.roc_auc - auc_oracle(&scores, &ood)).abs() < 1e-12);
    }

    #[test]
    fn constant_uncertainty_has_zero_raulc(
        u in -5.0f64..5.0,
        correct in proptest::collection::vec(any::<bool>(), 2..50),
    ) {
        prop_assume!(correct.iter().any(|&c| c));
        let r = raulc(&vec![u; correct.len()], &correct).unwrap();
        prop_assert!(r.abs() <= 1e-12);
    }

    #[test]
    fn identical_chains_have_unit_rhat(chain in proptest::collection::vec(-10.0f64..10.0, 2..60), m in 2usize..5) {
        let mean = chain.iter().sum::<f64>() / chain.len() as f64;
        prop_assume!(chain.iter().any(|&x| (x - mean).abs() > 1e-6));
        let chains = vec![chain; m];
        prop_assert_eq!(gelman_rhat(&chains).unwrap(), 1.0);
    }

    #[test]
    fn ess_is_positive_and_at_most_n(chain in proptest::collection::vec(-10.0f64..10.0, 4..200)) {
        let mean = chain.iter().sum::<f64>() / chain.len() as f64;
        prop_assume!(chain.iter().any(|&x| (x - mean).abs() > 1e-6));
        let ess = effective_sample_size(&chain).unwrap();
        prop_assert!(ess > 0.0 && ess <= chain.len() as f64);
    }

    #[test]
    fn macro_f1_matches_confusion_matrix(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..40),
    ) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let (acc, f1) = accuracy_and_macro_f1(&pred, &truth, 4).unwrap();
        let hits = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        prop_assert!((acc - 100.0 * hits as f64 / truth.len() as f64).abs() < 1e-12);
        prop_assert!((f1 - f1_oracle(&pred, &truth, 4)).abs() < 1e-9);
    }
}
