use proptest::prelude::*;

use llhmc::model::{DifferentiableTarget, GaussianPrior, GaussianTarget};
use llhmc::rng::RngState;
use llhmc::sampler::{hamiltonian, leapfrog, prior_inits, run_chains, PhasePoint, SamplerConfig, StepSizeInit};

fn cfg(burn_in: usize, samples: usize, chains: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        burn_in,
        samples,
        chains,
        target_accept: 0.8,
        max_tree_depth: 10,
        init_step_size: StepSizeInit::Auto,
        seed,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Zero-mean bivariate Gaussian with unit variances and correlation `rho`.
struct Correlated {
    rho: f64,
}

impl DifferentiableTarget for Correlated {
    fn dim(&self) -> usize {
        2
    }

    fn logp_and_grad(&self, t: &[f64], g: &mut [f64]) -> f64 {
        let det = 1.0 - self.rho * self.rho;
        let (a, b) = (t[0], t[1]);
        let q = (a * a - 2.0 * self.rho * a * b + b * b) / det;
        g[0] = -(a - self.rho * b) / det;
        g[1] = -(b - self.rho * a) / det;
        -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
    }
}

// Abramowitz-Stegun 7.1.26, absolute error below 1.5e-7.
fn normal_cdf(x: f64) -> f64 {
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * z);
    let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-z * z).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

fn ks_statistic(draws: &[f64]) -> f64 {
    let mut xs = draws.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn standard_normal_2d_moments() {
    let target = GaussianTarget::standard(2);
    let set = run_chains(&target, &cfg(500, 2000, 1, 11), &[vec![0.5, -0.5]]).unwrap();
    for i in 0..2 {
        let tr = set.trace(0, i);
        assert!(mean(&tr).abs() < 0.1, "mean {}", mean(&tr));
        assert!((var(&tr) - 1.0).abs() < 0.15, "var {}", var(&tr));
    }
}

#[test]
fn standard_normal_1d_kolmogorov_smirnov() {
    let target = GaussianTarget::standard(1);
    let set = run_chains(&target, &cfg(500, 2000, 1, 3), &[vec![0.0]]).unwrap();
    let ks = ks_statistic(&set.trace(0, 0));
    assert!(ks < 0.05, "KS statistic {ks}");
}

#[test]
fn correlated_gaussian_moments_and_acceptance() {
    let target = Correlated { rho: 0.9 };
    let set = run_chains(&target, &cfg(1000, 4000, 1, 7), &[vec![0.0, 0.0]]).unwrap();
    let (a, b) = (set.trace(0, 0), set.trace(0, 1));
    let (ma, mb) = (mean(&a), mean(&b));
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64;
    assert!(ma.abs() < 0.15 && mb.abs() < 0.15, "means {ma} {mb}");
    assert!((var(&a) - 1.0).abs() < 0.2 && (var(&b) - 1.0).abs() < 0.2);
    assert!((cov - 0.9).abs() < 0.1, "covariance {cov}");
    let acc = set.mean_accept_stat();
    assert!((acc - 0.8).abs() <= 0.15, "mean acceptance {acc}");
}

#[test]
fn acceptance_tracks_target_on_gaussians() {
    for delta in [0.6, 0.8] {
        let mut c = cfg(500, 500, 1, 21);
        c.target_accept = delta;
        let set = run_chains(&GaussianTarget::standard(5), &c, &[vec![0.0; 5]]).unwrap();
        let acc = set.mean_accept_stat();
        assert!((acc - delta).abs() <= 0.15, "delta {delta} acceptance {acc}");
    }
}

#[test]
fn two_chains_split_total_samples_and_are_deterministic() {
    let target = GaussianTarget::standard(3);
    let prior = GaussianPrior::new(1.0).unwrap();
    let inits = prior_inits(&prior, 3, 2, RngState::new(4));
    let c = cfg(50, 50, 2, 9);
    let a = run_chains(&target, &c, &inits).unwrap();
    let b = run_chains(&target, &c, &inits).unwrap();
    assert_eq!(a.chains.iter().map(|c| c.draws.len()).collect::<Vec<_>>(), vec![25, 25]);
    assert_eq!(a, b);
    assert_ne!(a.chains[0].draws, a.chains[1].draws);
    let odd = run_chains(&target, &cfg(10, 7, 2, 9), &inits).unwrap();
    assert_eq!(odd.chains.iter().map(|c| c.draws.len()).collect::<Vec<_>>(), vec![4, 3]);
    let other = run_chains(&target, &cfg(50, 50, 2, 10), &inits).unwrap();
    assert_ne!(a, other);
}

#[test]
fn draws_and_stats_are_consistent() {
    let set = run_chains(
        &GaussianTarget::standard(2),
        &cfg(20, 30, 3, 1),
        &vec![vec![0.1, 0.2]; 3],
    )
    .unwrap();
    for chain in &set.chains {
        assert_eq!(chain.draws.len(), chain.stats.len());
        assert!(chain.draws.iter().flatten().all(|v| v.is_finite()));
        assert!(chain.stats.iter().all(|s| s.step_size == chain.step_size));
        assert!(chain.stats.iter().all(|s| s.tree_depth <= 10));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn leapfrog_reverses_to_machine_precision(
        theta in proptest::collection::vec(-3.0f64..3.0, 4),
        p in proptest::collection::vec(-3.0f64..3.0, 4),
        eps in 0.01f64..0.5,
    ) {
        let target = GaussianTarget { mean: vec![0.3, -0.2, 0.0, 1.0], std: vec![1.0, 0.5, 2.0, 1.5] };
        let start = PhasePoint { theta: theta.clone(), p };
        let fwd = leapfrog(&target, &start, eps, 1.0).unwrap();
        let back = leapfrog(&target, &fwd, eps, -1.0).unwrap();
        for (a, b) in back.theta.iter().zip(&start.theta).chain(back.p.iter().zip(&start.p)) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let de = (hamiltonian(&target, &fwd) - hamiltonian(&target, &start)).abs();
        prop_assert!(de.is_finite());
    }

    #[test]
    fn per_chain_counts_differ_by_at_most_one(samples in 1usize..200, chains in 1usize..8) {
        prop_assume!(samples >= chains);
        let counts = cfg(0, samples, chains, 0).samples_per_chain();
        prop_assert_eq!(counts.iter().sum::<usize>(), samples);
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }
}
