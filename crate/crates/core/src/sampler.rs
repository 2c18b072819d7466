//! No-U-Turn Hamiltonian Monte Carlo with dual-averaging step-size
//! adaptation, identity mass matrix and slice-based leaf selection.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sq, Matrix};
use crate::model::{predict_proba, DifferentiableTarget, GaussianPrior, PredictiveBundle};
use crate::rng::RngState;

/// Energy error (nats) beyond which a leaf counts as divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;

const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSizeInit {
    Auto,
    Fixed(f64),
}

impl Serialize for StepSizeInit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepSizeInit::Auto => s.serialize_str("auto"),
            StepSizeInit::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for StepSizeInit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(StepSizeInit::Fixed(v)),
            Raw::Str(s) if s == "auto" => Ok(StepSizeInit::Auto),
            Raw::Str(s) => s
                .parse::<f64>()
                .map(StepSizeInit::Fixed)
                .map_err(|_| serde::de::Error::custom(format!("step size must be a number or \"auto\", got {s:?}"))),
        }
    }
}

impl std::str::FromStr for StepSizeInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(StepSizeInit::Auto);
        }
        s.parse::<f64>()
            .map(StepSizeInit::Fixed)
            .map_err(|_| Error::InvalidArgument(format!("step size must be a number or \"auto\", got {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub burn_in: usize,
    /// Retained draws in total, split across chains.
    pub samples: usize,
    pub chains: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub init_step_size: StepSizeInit,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            burn_in: 100,
            samples: 100,
            chains: 1,
            target_accept: 0.8,
            max_tree_depth: 10,
            init_step_size: StepSizeInit::Auto,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.samples < 1 {
            return bad("samples must be >= 1".into());
        }
        if self.chains < 1 {
            return bad("chains must be >= 1".into());
        }
        if self.samples < self.chains {
            return bad(format!(
                "{} samples cannot be split over {} chains",
                self.samples, self.chains
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad(format!("target_accept must lie in (0, 1), got {}", self.target_accept));
        }
        if !(1..=15).contains(&self.max_tree_depth) {
            return bad(format!(
                "max_tree_depth must lie in [1, 15], got {}",
                self.max_tree_depth
            ));
        }
        if let StepSizeInit::Fixed(e) = self.init_step_size {
            if !(e > 0.0) || !e.is_finite() {
                return bad(format!("init_step_size must be > 0, got {e}"));
            }
        }
        Ok(())
    }

    /// Retained draws per chain; earlier chains take the remainder.
    pub fn samples_per_chain(&self) -> Vec<usize> {
        let base = self.samples / self.chains;
        let extra = self.samples % self.chains;
        (0..self.chains).map(|c| base + usize::from(c < extra)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
}

/// `H = -log p(theta) + |p|^2 / 2`.
pub fn hamiltonian<T: DifferentiableTarget + ?Sized>(target: &T, point: &PhasePoint) -> f64 {
    -target.logp(&point.theta) + 0.5 * norm_sq(&point.p)
}

/// Phase point with cached log density and gradient.
#[derive(Clone, Debug)]
struct State {
    theta: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

impl State {
    fn at<T: DifferentiableTarget + ?Sized>(target: &T, theta: Vec<f64>, p: Vec<f64>) -> Self {
        let mut grad = vec![0.0; theta.len()];
        let logp = target.logp_and_grad(&theta, &mut grad);
        State { theta, p, grad, logp }
    }

    /// Negative Hamiltonian.
    fn joint(&self) -> f64 {
        self.logp - 0.5 * norm_sq(&self.p)
    }

    fn is_finite(&self) -> bool {
        self.logp.is_finite() && self.grad.iter().all(|g| g.is_finite()) && self.theta.iter().all(|t| t.is_finite())
    }
}

/// One leapfrog step of signed size `eps`; `None` when the new state is not
/// finite.
fn step<T: DifferentiableTarget + ?Sized>(target: &T, s: &State, eps: f64) -> Option<State> {
    let half = 0.5 * eps;
    let p_half: Vec<f64> = s.p.iter().zip(&s.grad).map(|(p, g)| p + half * g).collect();
    let theta: Vec<f64> = s.theta.iter().zip(&p_half).map(|(t, p)| t + eps * p).collect();
    let mut grad = vec![0.0; theta.len()];
    let logp = target.logp_and_grad(&theta, &mut grad);
    let p = p_half.iter().zip(&grad).map(|(p, g)| p + half * g).collect();
    let next = State { theta, p, grad, logp };
    next.is_finite().then_some(next)
}

/// Leapfrog step of size `direction * eps`. `None` signals a non-finite
/// density or gradient (a diverged step).
pub fn leapfrog<T: DifferentiableTarget + ?Sized>(
    target: &T,
    point: &PhasePoint,
    eps: f64,
    direction: f64,
) -> Option<PhasePoint> {
    let s = State::at(target, point.theta.clone(), point.p.clone());
    if !s.is_finite() {
        return None;
    }
    step(target, &s, direction * eps).map(|n| PhasePoint { theta: n.theta, p: n.p })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub step_size: f64,
    pub tree_depth: usize,
    /// Mean Metropolis acceptance probability over every trajectory leaf.
    pub accept_stat: f64,
    /// Hamiltonian at the returned point.
    pub energy: f64,
    pub n_leapfrog: usize,
    pub diverged: bool,
}

struct Tree {
    minus: State,
    plus: State,
    proposal: State,
    n: usize,
    ok: bool,
    alpha: f64,
    n_alpha: usize,
    diverged: bool,
}

fn no_u_turn(minus: &State, plus: &State) -> bool {
    let span: Vec<f64> = plus.theta.iter().zip(&minus.theta).map(|(a, b)| a - b).collect();
    dot(&span, &minus.p) >= 0.0 && dot(&span, &plus.p) >= 0.0
}

#[allow(clippy::too_many_arguments)]
fn build_tree<T: DifferentiableTarget + ?Sized, R: Rng + ?Sized>(
    target: &T,
    from: &State,
    log_u: f64,
    v: f64,
    depth: usize,
    eps: f64,
    joint0: f64,
    rng: &mut R,
) -> Tree {
    if depth == 0 {
        return match step(target, from, v * eps) {
            Some(s) => {
                let joint = s.joint();
                let ok = log_u < MAX_ENERGY_ERROR + joint;
                Tree {
                    n: usize::from(log_u <= joint),
                    ok,
                    alpha: (joint - joint0).exp().min(1.0),
                    n_alpha: 1,
                    diverged: !ok,
                    minus: s.clone(),
                    plus: s.clone(),
                    proposal: s,
                }
            }
            None => Tree {
                minus: from.clone(),
                plus: from.clone(),
                proposal: from.clone(),
                n: 0,
                ok: false,
                alpha: 0.0,
                n_alpha: 1,
                diverged: true,
            },
        };
    }
    let mut tree = build_tree(target, from, log_u, v, depth - 1, eps, joint0, rng);
    if !tree.ok {
        return tree;
    }
    let edge = if v < 0.0 { &tree.minus } else { &tree.plus };
    let other = build_tree(target, edge, log_u, v, depth - 1, eps, joint0, rng);
    let total = tree.n + other.n;
    if total > 0 && rng.random::<f64>() < other.n as f64 / total as f64 {
        tree.proposal = other.proposal;
    }
    if v < 0.0 {
        tree.minus = other.minus;
    } else {
        tree.plus = other.plus;
    }
    tree.alpha += other.alpha;
    tree.n_alpha += other.n_alpha;
    tree.diverged |= other.diverged;
    tree.ok = other.ok && no_u_turn(&tree.minus, &tree.plus);
    tree.n = total;
    tree
}

fn sample_momentum<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn transition<T: DifferentiableTarget + ?Sized, R: Rng + ?Sized>(
    target: &T,
    current: &State,
    eps: f64,
    max_depth: usize,
    rng: &mut R,
) -> (State, TransitionStats) {
    let mut start = current.clone();
    start.p = sample_momentum(current.theta.len(), rng);
    let joint0 = start.joint();
    // u ~ Uniform(0, exp(joint0)); 1 - U keeps the logarithm finite.
    let log_u = joint0 + (1.0 - rng.random::<f64>()).ln();
    let mut minus = start.clone();
    let mut plus = start.clone();
    let mut proposal = start;
    let mut n = 1usize;
    let mut depth = 0;
    let mut alpha = 0.0;
    let mut n_alpha = 0usize;
    let mut diverged = false;
    let mut ok = true;
    while ok && depth < max_depth {
        let v = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let edge = if v < 0.0 { &minus } else { &plus };
        let sub = build_tree(target, edge, log_u, v, depth, eps, joint0, rng);
        alpha += sub.alpha;
        n_alpha += sub.n_alpha;
        diverged |= sub.diverged;
        depth += 1;
        if v < 0.0 {
            minus = sub.minus;
        } else {
            plus = sub.plus;
        }
        if sub.ok && rng.random::<f64>() < sub.n as f64 / n as f64 {
            proposal = sub.proposal;
        }
        n += sub.n;
        ok = sub.ok && no_u_turn(&minus, &plus);
    }
    let energy = -proposal.joint();
    let stats = TransitionStats {
        step_size: eps,
        tree_depth: depth,
        accept_stat: if n_alpha > 0 { alpha / n_alpha as f64 } else { 0.0 },
        energy,
        n_leapfrog: n_alpha,
        diverged,
    };
    (proposal, stats)
}

/// One NUTS transition from `theta` with step size `eps`.
pub fn nuts_transition<T: DifferentiableTarget + ?Sized, R: Rng + ?Sized>(
    target: &T,
    theta: &[f64],
    eps: f64,
    max_tree_depth: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, TransitionStats)> {
    let current = State::at(target, theta.to_vec(), vec![0.0; theta.len()]);
    if !current.is_finite() {
        return Err(Error::Numerical("non-finite log density at the current point".into()));
    }
    let (next, stats) = transition(target, &current, eps, max_tree_depth, rng);
    Ok((next.theta, stats))
}

/// Dual-averaging accumulators for step-size adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationState {
    pub mu: f64,
    pub log_eps: f64,
    pub log_eps_bar: f64,
    pub h_bar: f64,
    pub iteration: usize,
    pub target_accept: f64,
}

impl AdaptationState {
    pub fn new(eps0: f64, target_accept: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            iteration: 0,
            target_accept,
        }
    }

    /// Step size to use once adaptation ends.
    pub fn final_step_size(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Dual-averaging update after one burn-in transition; returns the next step
/// size.
pub fn adapt_step_size(state: &mut AdaptationState, accept_stat: f64) -> f64 {
    state.iteration += 1;
    let m = state.iteration as f64;
    let eta = 1.0 / (m + DA_T0);
    state.h_bar = (1.0 - eta) * state.h_bar + eta * (state.target_accept - accept_stat);
    state.log_eps = state.mu - m.sqrt() / DA_GAMMA * state.h_bar;
    let w = m.powf(-DA_KAPPA);
    state.log_eps_bar = w * state.log_eps + (1.0 - w) * state.log_eps_bar;
    state.log_eps.exp()
}

const MAX_EPS_SEARCH: usize = 100;

/// Initial step size: starting from 1, double or halve until the one-step
/// acceptance ratio crosses 1/2.
pub fn find_reasonable_epsilon<T: DifferentiableTarget + ?Sized, R: Rng + ?Sized>(
    target: &T,
    theta: &[f64],
    rng: &mut R,
) -> Result<f64> {
    let mut s = State::at(target, theta.to_vec(), vec![0.0; theta.len()]);
    if !s.is_finite() {
        return Err(Error::Numerical("non-finite log density at the initial point".into()));
    }
    s.p = sample_momentum(theta.len(), rng);
    let joint0 = s.joint();
    let log_ratio = |eps: f64| match step(target, &s, eps) {
        Some(n) => n.joint() - joint0,
        None => f64::NEG_INFINITY,
    };
    let mut eps = 1.0;
    let mut lr = log_ratio(eps);
    let a: f64 = if lr > 0.5f64.ln() { 1.0 } else { -1.0 };
    for _ in 0..MAX_EPS_SEARCH {
        if !(a * lr > -a * 2f64.ln()) {
            break;
        }
        eps *= 2f64.powf(a);
        lr = log_ratio(eps);
    }
    Ok(eps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<TransitionStats>,
    /// Step size after adaptation (the one used for every retained draw).
    pub step_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSampleSet {
    pub config: SamplerConfig,
    pub dim: usize,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorSampleSet {
    pub fn num_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// All draws, chain after chain.
    pub fn all_draws(&self) -> Vec<&[f64]> {
        self.chains
            .iter()
            .flat_map(|c| c.draws.iter().map(Vec::as_slice))
            .collect()
    }

    /// All draws ordered round-robin across chains: first draw of every chain,
    /// then the second, and so on.
    pub fn interleaved_draws(&self) -> Vec<&[f64]> {
        let longest = self.chains.iter().map(|c| c.draws.len()).max().unwrap_or(0);
        let mut out = Vec::with_capacity(self.total_draws());
        for s in 0..longest {
            for c in &self.chains {
                if let Some(d) = c.draws.get(s) {
                    out.push(d.as_slice());
                }
            }
        }
        out
    }

    /// Trace of coordinate `i` in chain `c`.
    pub fn trace(&self, c: usize, i: usize) -> Vec<f64> {
        self.chains[c].draws.iter().map(|d| d[i]).collect()
    }

    pub fn divergences(&self) -> usize {
        self.chains.iter().flat_map(|c| &c.stats).filter(|s| s.diverged).count()
    }

    pub fn mean_accept_stat(&self) -> f64 {
        let all: Vec<f64> = self
            .chains
            .iter()
            .flat_map(|c| c.stats.iter().map(|s| s.accept_stat))
            .collect();
        all.iter().sum::<f64>() / all.len() as f64
    }

    /// Predictive bundle with one member per retained draw.
    pub fn predict(&self, features: &Matrix) -> Result<PredictiveBundle> {
        predict_proba(&self.all_draws(), features)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `chains` cold-start positions drawn from the prior, each from its own
/// stream.
pub fn prior_inits(prior: &GaussianPrior, dim: usize, chains: usize, rng: RngState) -> Vec<Vec<f64>> {
    (0..chains)
        .map(|c| prior.sample(dim, &mut rng.split(c as u64).rng()))
        .collect()
}

fn run_chain<T: DifferentiableTarget + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    init: &[f64],
    retained: usize,
    rng_state: RngState,
) -> Result<ChainDraws> {
    let mut rng = rng_state.rng();
    let mut current = State::at(target, init.to_vec(), vec![0.0; init.len()]);
    if !current.is_finite() {
        return Err(Error::Numerical(
            "non-finite log density at the initial position".into(),
        ));
    }
    let eps0 = match config.init_step_size {
        StepSizeInit::Fixed(e) => e,
        StepSizeInit::Auto => find_reasonable_epsilon(target, init, &mut rng)?,
    };
    let mut eps = eps0;
    if config.burn_in > 0 {
        let mut adapt = AdaptationState::new(eps0, config.target_accept);
        for _ in 0..config.burn_in {
            let (next, stats) = transition(target, &current, eps, config.max_tree_depth, &mut rng);
            current = next;
            eps = adapt_step_size(&mut adapt, stats.accept_stat);
        }
        eps = adapt.final_step_size();
    }
    let mut draws = Vec::with_capacity(retained);
    let mut stats = Vec::with_capacity(retained);
    for _ in 0..retained {
        let (next, st) = transition(target, &current, eps, config.max_tree_depth, &mut rng);
        current = next;
        draws.push(current.theta.clone());
        stats.push(st);
    }
    Ok(ChainDraws {
        draws,
        stats,
        step_size: eps,
    })
}

/// Runs `config.chains` independent chains in parallel from `inits`.
pub fn run_chains<T: DifferentiableTarget + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    inits: &[Vec<f64>],
) -> Result<PosteriorSampleSet> {
    config.validate()?;
    if inits.len() != config.chains {
        return Err(Error::InvalidArgument(format!(
            "{} initial positions for {} chains",
            inits.len(),
            config.chains
        )));
    }
    if let Some(bad) = inits.iter().find(|i| i.len() != target.dim()) {
        return Err(Error::ShapeMismatch(format!(
            "initial position has {} coordinates, target has {}",
            bad.len(),
            target.dim()
        )));
    }
    let root = RngState::new(config.seed);
    let counts = config.samples_per_chain();
    let chains = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, config, &inits[c], counts[c], root.split(c as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSampleSet {
        config: config.clone(),
        dim: target.dim(),
        chains,
    })
}
