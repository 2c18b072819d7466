//! Non-HMC last-layer methods: deterministic MAP softmax, mean-field
//! variational (Bayes by backprop) last layer, sub-ensembles of MAP heads and
//! Gaussian discriminant analysis in feature space.

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Optimizer, OptimizerConfig};
use crate::dataset::LatentDataset;
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, norm_sq, Matrix};
use crate::model::{
    last_layer_dim, log_prior, predict_proba, softmax_loglik, GaussianPrior, LastLayerClassifier, PredictiveBundle,
};
use crate::rng::RngState;
use crate::sampler::PosteriorSampleSet;

const MAP_INIT_STD: f64 = 0.1;
const MAP_GRAD_TOL: f64 = 1e-6;

/// Negative log posterior divided by `max(N, 1)` and its gradient.
fn map_objective(theta: &[f64], data: &LatentDataset, prior: &GaussianPrior, grad: &mut [f64]) -> f64 {
    let scale = data.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let ll = softmax_loglik(theta, data, 0..data.len(), Some(grad));
    prior.add_grad(theta, grad);
    grad.iter_mut().for_each(|g| *g /= -scale);
    -(ll + log_prior(theta, prior)) / scale
}

/// Full-batch gradient descent with Barzilai-Borwein trial steps and Armijo
/// backtracking.
fn minimize_full_batch(
    theta: &mut [f64],
    data: &LatentDataset,
    prior: &GaussianPrior,
    opt: &OptimizerConfig,
) -> Result<()> {
    let dim = theta.len();
    let mut grad = vec![0.0; dim];
    let mut f = map_objective(theta, data, prior, &mut grad);
    let mut trial = if opt.learning_rate > 0.0 {
        opt.learning_rate
    } else {
        1.0
    };
    let mut cand = vec![0.0; dim];
    let mut cand_grad = vec![0.0; dim];
    for epoch in 0..opt.epochs {
        if !f.is_finite() {
            return Err(Error::Diverged { epoch, loss: f });
        }
        let gn2 = norm_sq(&grad);
        if gn2.sqrt() < MAP_GRAD_TOL {
            break;
        }
        let mut step = trial;
        let f_new = loop {
            for i in 0..dim {
                cand[i] = theta[i] - step * grad[i];
            }
            let fc = map_objective(&cand, data, prior, &mut cand_grad);
            if fc <= f - 1e-4 * step * gn2 {
                break fc;
            }
            step *= 0.5;
            if step < 1e-20 {
                // No descent possible at floating-point resolution.
                return Ok(());
            }
        };
        // Barzilai-Borwein: s = -step * g, y = g_new - g
        let mut sy = 0.0;
        let mut yy = 0.0;
        for i in 0..dim {
            let s = -step * grad[i];
            let y = cand_grad[i] - grad[i];
            sy += s * y;
            yy += y * y;
        }
        trial = if sy > 0.0 && yy > 0.0 { sy / yy } else { 2.0 * step };
        theta.copy_from_slice(&cand);
        std::mem::swap(&mut grad, &mut cand_grad);
        f = f_new;
    }
    if !f.is_finite() {
        return Err(Error::Diverged {
            epoch: opt.epochs,
            loss: f,
        });
    }
    Ok(())
}

fn minimize_minibatch<R: Rng + ?Sized>(
    theta: &mut [f64],
    data: &LatentDataset,
    prior: &GaussianPrior,
    opt: &OptimizerConfig,
    rng: &mut R,
) -> Result<()> {
    let n = data.len();
    let batch = opt.effective_batch(n);
    let mut optimizer = Optimizer::new(opt, theta.len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; theta.len()];
    for epoch in 0..opt.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for rows in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let ll = softmax_loglik(theta, data, rows.iter().copied(), Some(&mut grad));
            let b = rows.len() as f64;
            // minibatch estimate of the per-instance negative log posterior
            for (g, t) in grad.iter_mut().zip(theta.iter()) {
                *g = -*g / b + t / (prior.std() * prior.std() * n as f64);
            }
            epoch_loss += -ll;
            optimizer.step(theta, &grad);
        }
        if !epoch_loss.is_finite() || theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
    }
    Ok(())
}

/// Maximum a posteriori softmax last layer. With `batch_size` 0 (or at
/// least N) the convex objective is minimized by full-batch descent until the
/// gradient norm drops below 1e-6 or `epochs` iterations pass; otherwise the
/// configured stochastic optimizer runs for `epochs` passes.
pub fn fit_map_softmax<R: Rng + ?Sized>(
    data: &LatentDataset,
    prior: &GaussianPrior,
    opt: &OptimizerConfig,
    rng: &mut R,
) -> Result<LastLayerClassifier> {
    opt.validate()?;
    let (k, d) = (data.num_classes(), data.dim());
    let mut theta: Vec<f64> = (0..last_layer_dim(k, d))
        .map(|_| MAP_INIT_STD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    if opt.batch_size == 0 || opt.batch_size >= data.len() {
        minimize_full_batch(&mut theta, data, prior, opt)?;
    } else {
        minimize_minibatch(&mut theta, data, prior, opt, rng)?;
    }
    LastLayerClassifier::from_flat(k, d, &theta)
}

/// Negative log posterior per instance; the quantity MAP fitting minimizes.
pub fn map_objective_value(params: &LastLayerClassifier, data: &LatentDataset, prior: &GaussianPrior) -> f64 {
    let theta = params.to_flat();
    let mut g = vec![0.0; theta.len()];
    map_objective(&theta, data, prior, &mut g)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `KL(N(mu, sigma^2) || N(0, prior_std^2))` summed over coordinates.
pub fn kl_diag_gaussian(mu: &[f64], sigma: &[f64], prior_std: f64) -> f64 {
    let pv = prior_std * prior_std;
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| (prior_std / s).ln() + (s * s + m * m) / (2.0 * pv) - 0.5)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BbbConfig {
    /// Reparameterized draws per gradient step.
    pub mc_samples: usize,
    /// Initial posterior std; `None` means `min(prior std, 0.1)`.
    pub init_std: Option<f64>,
}

impl Default for BbbConfig {
    fn default() -> Self {
        Self {
            mc_samples: 1,
            init_std: None,
        }
    }
}

/// Mean-field Gaussian over the flat last layer with `std = softplus(rho)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalLastLayer {
    pub num_classes: usize,
    pub dim: usize,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub prior: GaussianPrior,
}

impl VariationalLastLayer {
    /// `q = N(mu, std^2)` in every coordinate.
    pub fn new(num_classes: usize, dim: usize, mu: Vec<f64>, std: f64, prior: GaussianPrior) -> Result<Self> {
        if mu.len() != last_layer_dim(num_classes, dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} means for a {num_classes}x{dim} layer",
                mu.len()
            )));
        }
        if !(std > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "variational std must be > 0, got {std}"
            )));
        }
        let rho = vec![inverse_softplus(std); mu.len()];
        Ok(Self {
            num_classes,
            dim,
            mu,
            rho,
            prior,
        })
    }

    pub fn std(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn kl(&self) -> f64 {
        kl_diag_gaussian(&self.mu, &self.std(), self.prior.std())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.rho)
            .map(|(m, r)| m + softplus(*r) * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Monte Carlo ELBO estimate `E_q[log p(D | theta)] - KL(q || prior)`.
    pub fn elbo<R: Rng + ?Sized>(&self, data: &LatentDataset, mc_samples: usize, rng: &mut R) -> f64 {
        let s = mc_samples.max(1);
        let ll: f64 = (0..s)
            .map(|_| softmax_loglik(&self.sample(rng), data, 0..data.len(), None))
            .sum::<f64>()
            / s as f64;
        ll - self.kl()
    }
}

/// Bayes-by-backprop training. Each minibatch step descends
/// `-E_q[log p(batch | theta)] + KL / num_batches` using reparameterized
/// draws, so one epoch sums to the negative ELBO.
pub fn fit_bbb_last_layer<R: Rng + ?Sized>(
    data: &LatentDataset,
    prior: &GaussianPrior,
    opt: &OptimizerConfig,
    cfg: &BbbConfig,
    rng: &mut R,
) -> Result<VariationalLastLayer> {
    opt.validate()?;
    if cfg.mc_samples == 0 {
        return Err(Error::InvalidArgument(
            "BBB needs at least one MC sample per step".into(),
        ));
    }
    let init_std = cfg.init_std.unwrap_or(prior.std().min(0.1));
    let (k, d) = (data.num_classes(), data.dim());
    let p = last_layer_dim(k, d);
    let mut q = VariationalLastLayer::new(k, d, vec![0.0; p], init_std, *prior)?;
    let n = data.len();
    let batch = opt.effective_batch(n);
    let num_batches = n.div_ceil(batch).max(1) as f64;
    let pv = prior.std() * prior.std();

    // params = [mu, rho]
    let mut params: Vec<f64> = q.mu.iter().chain(&q.rho).copied().collect();
    let mut optimizer = Optimizer::new(opt, 2 * p);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; 2 * p];
    let mut g_theta = vec![0.0; p];
    let mut xi = vec![0.0; p];
    let mut theta = vec![0.0; p];
    let mut sigma = vec![0.0; p];
    for epoch in 0..opt.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for rows in order.chunks(batch) {
            let (mu, rho) = params.split_at(p);
            for i in 0..p {
                sigma[i] = softplus(rho[i]);
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut ll_sum = 0.0;
            for _ in 0..cfg.mc_samples {
                for i in 0..p {
                    xi[i] = rng.sample(StandardNormal);
                    theta[i] = mu[i] + sigma[i] * xi[i];
                }
                g_theta.iter_mut().for_each(|g| *g = 0.0);
                ll_sum += softmax_loglik(&theta, data, rows.iter().copied(), Some(&mut g_theta));
                for i in 0..p {
                    grad[i] -= g_theta[i];
                    grad[p + i] -= g_theta[i] * xi[i] * sigmoid(rho[i]);
                }
            }
            let s = cfg.mc_samples as f64;
            for i in 0..p {
                grad[i] = grad[i] / s + mu[i] / pv / num_batches;
                let dkl_dsigma = -1.0 / sigma[i] + sigma[i] / pv;
                grad[p + i] = grad[p + i] / s + dkl_dsigma * sigmoid(rho[i]) / num_batches;
            }
            epoch_loss += -ll_sum / s + kl_diag_gaussian(mu, &sigma, prior.std()) / num_batches;
            optimizer.step(&mut params, &grad);
        }
        if !epoch_loss.is_finite() || params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
    }
    q.mu = params[..p].to_vec();
    q.rho = params[p..].to_vec();
    Ok(q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubEnsemble {
    pub members: Vec<LastLayerClassifier>,
    /// Stream id of each member under the fitting seed.
    pub member_streams: Vec<u64>,
}

/// `m` MAP heads, member `i` initialized and shuffled from `rng.split(i)`.
pub fn fit_sub_ensemble(
    data: &LatentDataset,
    m: usize,
    prior: &GaussianPrior,
    opt: &OptimizerConfig,
    rng: RngState,
) -> Result<SubEnsemble> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "a sub-ensemble needs at least 2 members, got {m}"
        )));
    }
    let members = (0..m as u64)
        .into_par_iter()
        .map(|i| fit_map_softmax(data, prior, opt, &mut rng.split(i).rng()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SubEnsemble {
        members,
        member_streams: (0..m as u64).map(|i| rng.split(i).stream()).collect(),
    })
}

pub enum MemberSource<'a> {
    Variational(&'a VariationalLastLayer),
    Ensemble(&'a SubEnsemble),
    Hmc(&'a PosteriorSampleSet),
}

fn pick<R: Rng + ?Sized>(available: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n > available {
        return Err(Error::InvalidArgument(format!(
            "{n} members requested, {available} available"
        )));
    }
    if n == available {
        return Ok((0..n).collect());
    }
    let mut idx = index::sample(rng, available, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// `n` retained draws chosen uniformly without replacement, split across
/// chains as evenly as possible with earlier chains taking the remainder.
/// Asking for every draw returns them all in chain order.
pub fn select_draws<'a, R: Rng + ?Sized>(set: &'a PosteriorSampleSet, n: usize, rng: &mut R) -> Result<Vec<&'a [f64]>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n_members must be >= 1".into()));
    }
    let c = set.num_chains();
    let mut out = Vec::with_capacity(n);
    for (ci, chain) in set.chains.iter().enumerate() {
        let want = n / c + usize::from(ci < n % c);
        for i in pick(chain.draws.len(), want, rng)? {
            out.push(chain.draws[i].as_slice());
        }
    }
    Ok(out)
}

/// Builds an `n_members` predictive bundle: fresh draws from a variational
/// posterior, or a uniform subset without replacement of a finite member set
/// (see [`select_draws`] for how HMC draws are spread over chains).
pub fn sample_predictions<R: Rng + ?Sized>(
    source: MemberSource<'_>,
    features: &Matrix,
    n_members: usize,
    rng: &mut R,
) -> Result<PredictiveBundle> {
    if n_members == 0 {
        return Err(Error::InvalidArgument("n_members must be >= 1".into()));
    }
    match source {
        MemberSource::Variational(q) => {
            let members: Vec<Vec<f64>> = (0..n_members).map(|_| q.sample(rng)).collect();
            predict_proba(&members, features)
        }
        MemberSource::Ensemble(e) => {
            let members: Vec<Vec<f64>> = pick(e.members.len(), n_members, rng)?
                .into_iter()
                .map(|i| e.members[i].to_flat())
                .collect();
            predict_proba(&members, features)
        }
        MemberSource::Hmc(set) => predict_proba(&select_draws(set, n_members, rng)?, features),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdaConfig {
    /// Ridge added to the covariance diagonal; `None` means
    /// `1e-3 * trace / D` of each unregularized covariance.
    pub ridge: Option<f64>,
    pub shared_covariance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdaModel {
    pub means: Matrix,
    /// One regularized covariance per class (all equal when shared).
    pub covariances: Vec<Matrix>,
    pub weights: Vec<f64>,
    /// `log N(z | mu_k, Sigma_k) + 0.5 * mahalanobis^2`, per class.
    pub log_normalizers: Vec<f64>,
}

fn regularize(cov: &mut DMatrix<f64>, ridge: Option<f64>) -> f64 {
    let d = cov.nrows();
    let lambda = ridge.unwrap_or_else(|| 1e-3 * cov.trace() / d as f64);
    for i in 0..d {
        cov[(i, i)] += lambda;
    }
    lambda
}

fn to_matrix(m: &DMatrix<f64>) -> Matrix {
    let d = m.nrows();
    let mut out = Matrix::zeros(d, m.ncols());
    for i in 0..d {
        for j in 0..m.ncols() {
            out.set(i, j, m[(i, j)]);
        }
    }
    out
}

fn cholesky(cov: &Matrix) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    DMatrix::from_row_slice(cov.rows(), cov.cols(), cov.as_slice())
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite after regularization".into()))
}

pub fn fit_gda(train: &LatentDataset, cfg: &GdaConfig) -> Result<GdaModel> {
    let (k, d, n) = (train.num_classes(), train.dim(), train.len());
    if d == 0 {
        return Err(Error::InvalidArgument("GDA needs at least one feature".into()));
    }
    if let Some(r) = cfg.ridge {
        if !(r >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {r}")));
        }
    }
    let counts = train.class_counts();
    if let Some(c) = counts.iter().position(|&c| c < 2) {
        return Err(Error::InvalidDataset(format!(
            "class {c} has {} training rows, GDA needs 2",
            counts[c]
        )));
    }
    let mut means = Matrix::zeros(k, d);
    for (z, &y) in train.features().iter_rows().zip(train.labels()) {
        for (m, v) in means.row_mut(y).iter_mut().zip(z) {
            *m += v;
        }
    }
    for c in 0..k {
        means.row_mut(c).iter_mut().for_each(|m| *m /= counts[c] as f64);
    }
    let mut scatter = vec![DMatrix::<f64>::zeros(d, d); k];
    for (z, &y) in train.features().iter_rows().zip(train.labels()) {
        let diff = DVector::from_iterator(d, z.iter().zip(means.row(y)).map(|(a, b)| a - b));
        scatter[y] += &diff * diff.transpose();
    }
    let covs: Vec<DMatrix<f64>> = if cfg.shared_covariance {
        let mut pooled = scatter.iter().fold(DMatrix::zeros(d, d), |acc, s| acc + s) / (n - k) as f64;
        regularize(&mut pooled, cfg.ridge);
        vec![pooled; k]
    } else {
        scatter
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| {
                let mut cov = s / (c - 1) as f64;
                regularize(&mut cov, cfg.ridge);
                cov
            })
            .collect()
    };
    let covariances: Vec<Matrix> = covs.iter().map(to_matrix).collect();
    let mut log_normalizers = Vec::with_capacity(k);
    for cov in &covariances {
        let chol = cholesky(cov)?;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        log_normalizers.push(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det));
    }
    Ok(GdaModel {
        means,
        covariances,
        weights: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        log_normalizers,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdaScores {
    pub posteriors: Matrix,
    /// `log sum_k w_k N(z | mu_k, Sigma_k)`.
    pub log_density: Vec<f64>,
}

impl GdaScores {
    /// Larger means more out-of-distribution.
    pub fn ood_scores(&self) -> Vec<f64> {
        self.log_density.iter().map(|v| -v).collect()
    }
}

pub fn gda_scores(model: &GdaModel, features: &Matrix) -> Result<GdaScores> {
    let (k, d) = (model.means.rows(), model.means.cols());
    if features.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "GDA fitted on {d} features, got {}",
            features.cols()
        )));
    }
    let chols = model.covariances.iter().map(cholesky).collect::<Result<Vec<_>>>()?;
    let mut posteriors = Matrix::zeros(features.rows(), k);
    let mut log_density = Vec::with_capacity(features.rows());
    let mut joint = vec![0.0; k];
    for (i, z) in features.iter_rows().enumerate() {
        for c in 0..k {
            let diff = DVector::from_iterator(d, z.iter().zip(model.means.row(c)).map(|(a, b)| a - b));
            let w = chols[c]
                .l_dirty()
                .solve_lower_triangular(&diff)
                .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
            joint[c] = model.weights[c].ln() + model.log_normalizers[c] - 0.5 * w.norm_squared();
        }
        let lse = log_sum_exp(&joint);
        for (p, j) in posteriors.row_mut(i).iter_mut().zip(&joint) {
            *p = (j - lse).exp();
        }
        log_density.push(lse);
    }
    Ok(GdaScores {
        posteriors,
        log_density,
    })
}

/// Any fitted last-layer method, tagged for JSON storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FittedMethod {
    Map(LastLayerClassifier),
    Bbb(VariationalLastLayer),
    Subensemble(SubEnsemble),
    Gda(GdaModel),
    Llhmc(PosteriorSampleSet),
}

impl FittedMethod {
    pub fn name(&self) -> &'static str {
        match self {
            FittedMethod::Map(_) => "map",
            FittedMethod::Bbb(_) => "bbb",
            FittedMethod::Subensemble(_) => "subensemble",
            FittedMethod::Gda(_) => "gda",
            FittedMethod::Llhmc(_) => "llhmc",
        }
    }

    /// Predictive bundle over `features`. `n_members` applies to the
    /// sampling-based methods; it defaults to every available member, or 10
    /// fresh draws for the variational layer.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        features: &Matrix,
        n_members: Option<usize>,
        rng: &mut R,
    ) -> Result<PredictiveBundle> {
        match self {
            FittedMethod::Map(p) => predict_proba(&[p.to_flat()], features),
            FittedMethod::Bbb(q) => {
                sample_predictions(MemberSource::Variational(q), features, n_members.unwrap_or(10), rng)
            }
            FittedMethod::Subensemble(e) => sample_predictions(
                MemberSource::Ensemble(e),
                features,
                n_members.unwrap_or(e.members.len()),
                rng,
            ),
            FittedMethod::Gda(g) => PredictiveBundle::from_members(vec![gda_scores(g, features)?.posteriors]),
            FittedMethod::Llhmc(s) => sample_predictions(
                MemberSource::Hmc(s),
                features,
                n_members.unwrap_or(s.total_draws()),
                rng,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form() {
        assert!((kl_diag_gaussian(&[1.0], &[1.0], 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[2.5, 2.5], 2.5), 0.0);
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-6, 0.01, 0.1, 1.0, 5.0, 40.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn variational_init_at_prior_has_zero_kl() {
        let prior = GaussianPrior::new(2.5).unwrap();
        let q = VariationalLastLayer::new(2, 3, vec![0.0; 8], 2.5, prior).unwrap();
        assert!(q.kl().abs() < 1e-12);
    }

    #[test]
    fn sub_ensemble_needs_two_members() {
        let data = LatentDataset::new(Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap(), vec![0, 1], 2).unwrap();
        let prior = GaussianPrior::new(1.0).unwrap();
        assert!(fit_sub_ensemble(&data, 1, &prior, &OptimizerConfig::default(), RngState::new(0)).is_err());
    }

    #[test]
    fn gda_rejects_single_row_class() {
        let data = LatentDataset::new(
            Matrix::from_rows(&[vec![0.0], vec![1.0], vec![1.5]]).unwrap(),
            vec![0, 1, 1],
            2,
        )
        .unwrap();
        assert!(fit_gda(&data, &GdaConfig::default()).is_err());
    }

    #[test]
    fn fitted_method_json_is_tagged() {
        let m = FittedMethod::Map(LastLayerClassifier::zeros(2, 1));
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["method"], "map");
        let back: FittedMethod = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
