//! Posterior targets for the sampler and last-layer predictive distributions.
//!
//! Every target exposes `log p(D | theta) + log p(theta)` (prior normalization
//! included) and its analytic gradient through [`DifferentiableTarget`].
//!
//! Last-layer classifier parameters flatten as the `K x D` weight matrix in
//! row-major order followed by the `K` biases. Regression heads flatten as the
//! `D` weights followed by the bias.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{MlpSpec, TaskData, TrainedMlp};
use crate::dataset::{LatentDataset, RegressionDataset};
use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, norm_sq, softmax_in_place, Matrix};
use crate::metrics::predictive_entropy;

/// Unnormalized-posterior contract consumed by the sampler. Implementations
/// must be pure and reentrant.
pub trait DifferentiableTarget: Sync {
    fn dim(&self) -> usize;

    /// Returns `log p(theta)` and overwrites `grad` with its gradient.
    fn logp_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;

    fn logp(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.logp_and_grad(theta, &mut g)
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.logp_and_grad(theta, &mut g);
        g
    }
}

/// Zero-mean isotropic Gaussian prior shared by all parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    std: f64,
}

impl GaussianPrior {
    pub fn new(std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::InvalidArgument(format!("prior std must be > 0, got {std}")));
        }
        Ok(Self { std })
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    /// Adds `d log p(theta) / d theta = -theta / std^2` to `grad`.
    pub fn add_grad(&self, theta: &[f64], grad: &mut [f64]) {
        let inv_var = 1.0 / (self.std * self.std);
        for (g, t) in grad.iter_mut().zip(theta) {
            *g -= t * inv_var;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        (0..dim)
            .map(|_| self.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

pub fn log_prior(theta: &[f64], prior: &GaussianPrior) -> f64 {
    let var = prior.std * prior.std;
    -0.5 * theta.len() as f64 * (2.0 * PI * var).ln() - norm_sq(theta) / (2.0 * var)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LastLayerClassifier {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LastLayerClassifier {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight rows but {} biases",
                weights.rows(),
                bias.len()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(num_classes, dim),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn from_flat(num_classes: usize, dim: usize, theta: &[f64]) -> Result<Self> {
        if theta.len() != num_classes * (dim + 1) {
            return Err(Error::ShapeMismatch(format!(
                "{num_classes} classes x {dim} features need {} parameters, got {}",
                num_classes * (dim + 1),
                theta.len()
            )));
        }
        let split = num_classes * dim;
        Ok(Self {
            weights: Matrix::from_vec(num_classes, dim, theta[..split].to_vec())?,
            bias: theta[split..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_params(&self) -> usize {
        self.num_classes() * (self.feature_dim() + 1)
    }
}

/// Number of parameters of a `K`-class last layer over `D` features.
pub fn last_layer_dim(num_classes: usize, dim: usize) -> usize {
    num_classes * (dim + 1)
}

/// Softmax log-likelihood of the flat last layer `theta` over `rows`, adding
/// its gradient into `grad` when given.
pub(crate) fn softmax_loglik(
    theta: &[f64],
    data: &LatentDataset,
    rows: impl IntoIterator<Item = usize>,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let k = data.num_classes();
    let d = data.dim();
    let bias_off = k * d;
    let mut logits = vec![0.0; k];
    let mut total = 0.0;
    for i in rows {
        let z = data.features().row(i);
        let y = data.labels()[i];
        for c in 0..k {
            logits[c] = dot(&theta[c * d..(c + 1) * d], z) + theta[bias_off + c];
        }
        let lse = log_sum_exp(&logits);
        total += logits[y] - lse;
        if let Some(g) = grad.as_deref_mut() {
            for c in 0..k {
                let resid = f64::from(u8::from(c == y)) - (logits[c] - lse).exp();
                if resid != 0.0 {
                    for (gj, &zj) in g[c * d..(c + 1) * d].iter_mut().zip(z) {
                        *gj += resid * zj;
                    }
                    g[bias_off + c] += resid;
                }
            }
        }
    }
    total
}

/// `sum_i log softmax(W z_i + b)[y_i]`.
pub fn class_log_likelihood(params: &LastLayerClassifier, data: &LatentDataset) -> Result<f64> {
    if params.num_classes() != data.num_classes() || params.feature_dim() != data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "last layer is {}x{}, data has {} classes and {} features",
            params.num_classes(),
            params.feature_dim(),
            data.num_classes(),
            data.dim()
        )));
    }
    Ok(softmax_loglik(&params.to_flat(), data, 0..data.len(), None))
}

/// Posterior over a softmax last layer given frozen features.
#[derive(Clone, Debug)]
pub struct ClassificationPosterior {
    data: LatentDataset,
    prior: GaussianPrior,
}

pub fn posterior_target_classification(data: &LatentDataset, prior: GaussianPrior) -> ClassificationPosterior {
    ClassificationPosterior {
        data: data.clone(),
        prior,
    }
}

impl ClassificationPosterior {
    pub fn data(&self) -> &LatentDataset {
        &self.data
    }

    pub fn prior(&self) -> GaussianPrior {
        self.prior
    }
}

impl DifferentiableTarget for ClassificationPosterior {
    fn dim(&self) -> usize {
        last_layer_dim(self.data.num_classes(), self.data.dim())
    }

    fn logp_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let ll = softmax_loglik(theta, &self.data, 0..self.data.len(), Some(grad));
        self.prior.add_grad(theta, grad);
        ll + log_prior(theta, &self.prior)
    }
}

/// Linear-Gaussian regression head with fixed observation noise.
#[derive(Clone, Debug)]
pub struct RegressionPosterior {
    data: RegressionDataset,
    prior: GaussianPrior,
    noise_std: f64,
}

pub fn posterior_target_regression(
    data: &RegressionDataset,
    prior: GaussianPrior,
    noise_std: f64,
) -> Result<RegressionPosterior> {
    if !(noise_std > 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise std must be > 0, got {noise_std}"
        )));
    }
    Ok(RegressionPosterior {
        data: data.clone(),
        prior,
        noise_std,
    })
}

/// `sum_i log N(y_i | pred_i, sigma^2)`.
pub fn gaussian_log_likelihood(predictions: &[f64], targets: &[f64], noise_std: f64) -> f64 {
    let var = noise_std * noise_std;
    let norm = -0.5 * (2.0 * PI * var).ln();
    predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| norm - (p - y) * (p - y) / (2.0 * var))
        .sum()
}

impl DifferentiableTarget for RegressionPosterior {
    fn dim(&self) -> usize {
        self.data.dim() + 1
    }

    fn logp_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.data.dim();
        let var = self.noise_std * self.noise_std;
        let norm = -0.5 * (2.0 * PI * var).ln();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut ll = 0.0;
        for (z, &y) in self.data.inputs().iter_rows().zip(self.data.targets()) {
            let r = dot(&theta[..d], z) + theta[d] - y;
            ll += norm - r * r / (2.0 * var);
            let s = -r / var;
            for (g, &zj) in grad[..d].iter_mut().zip(z) {
                *g += s * zj;
            }
            grad[d] += s;
        }
        self.prior.add_grad(theta, grad);
        ll + log_prior(theta, &self.prior)
    }
}

/// Default cap on the parameter count of full-network posteriors.
pub const FULL_NETWORK_MAX_DIM: usize = 20_000;

#[derive(Clone, Debug)]
enum OwnedTaskData {
    Classification(LatentDataset),
    Regression { data: RegressionDataset, noise_std: f64 },
}

/// Posterior over every parameter of a toy MLP.
#[derive(Clone, Debug)]
pub struct FullNetworkPosterior {
    spec: MlpSpec,
    data: OwnedTaskData,
    prior: GaussianPrior,
}

/// `noise_std` is used only for regression networks.
pub fn posterior_target_full_network(
    spec: &MlpSpec,
    data: TaskData<'_>,
    prior: GaussianPrior,
    noise_std: f64,
    max_dim: usize,
) -> Result<FullNetworkPosterior> {
    spec.validate()?;
    if spec.num_params() > max_dim {
        return Err(Error::InvalidArgument(format!(
            "full-network posterior has {} parameters, cap is {max_dim}",
            spec.num_params()
        )));
    }
    if spec.task != data.task() || spec.input_width() != data.inputs().cols() {
        return Err(Error::ShapeMismatch("network spec does not match the data".into()));
    }
    let data = match data {
        TaskData::Classification(d) => {
            if d.num_classes() != spec.output_width() {
                return Err(Error::ShapeMismatch(format!(
                    "{} outputs for {} classes",
                    spec.output_width(),
                    d.num_classes()
                )));
            }
            OwnedTaskData::Classification(d.clone())
        }
        TaskData::Regression(d) => {
            if !(noise_std > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "noise std must be > 0, got {noise_std}"
                )));
            }
            OwnedTaskData::Regression {
                data: d.clone(),
                noise_std,
            }
        }
    };
    Ok(FullNetworkPosterior {
        spec: spec.clone(),
        data,
        prior,
    })
}

impl FullNetworkPosterior {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }
}

impl DifferentiableTarget for FullNetworkPosterior {
    fn dim(&self) -> usize {
        self.spec.num_params()
    }

    fn logp_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        if theta.iter().any(|t| !t.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let mlp = TrainedMlp::from_flat_unchecked(self.spec.clone(), theta);
        // Accumulate the gradient of the negative log-likelihood, then flip.
        let nll = match &self.data {
            OwnedTaskData::Classification(d) => {
                let rows: Vec<usize> = (0..d.len()).collect();
                mlp.loss_and_gradient(TaskData::Classification(d), &rows, grad)
            }
            OwnedTaskData::Regression { data, noise_std } => {
                let var = noise_std * noise_std;
                let norm = 0.5 * (2.0 * PI * var).ln();
                let targets = data.targets();
                let rows: Vec<usize> = (0..data.len()).collect();
                mlp.accumulate_gradient(
                    data.inputs(),
                    &rows,
                    |i, out, dout| {
                        let r = out[0] - targets[i];
                        dout[0] = r / var;
                        norm + r * r / (2.0 * var)
                    },
                    grad,
                )
            }
        };
        grad.iter_mut().for_each(|g| *g = -*g);
        self.prior.add_grad(theta, grad);
        -nll + log_prior(theta, &self.prior)
    }
}

/// Independent Gaussian with per-coordinate means and scales; a reference
/// target with known moments.
#[derive(Clone, Debug)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianTarget {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }
}

impl DifferentiableTarget for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn logp_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        for i in 0..theta.len() {
            let s = self.std[i];
            let u = (theta[i] - self.mean[i]) / s;
            lp += -0.5 * u * u - s.ln() - 0.5 * (2.0 * PI).ln();
            grad[i] = -u / s;
        }
        lp
    }
}

/// Class probabilities of every ensemble member / posterior draw, their
/// arithmetic mean and the entropy of that mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveBundle {
    pub members: Vec<Matrix>,
    pub mean: Matrix,
    pub entropy: Vec<f64>,
}

impl PredictiveBundle {
    pub fn from_members(members: Vec<Matrix>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("a predictive bundle needs at least one member".into()))?;
        let (n, k) = (first.rows(), first.cols());
        if members.iter().any(|m| m.rows() != n || m.cols() != k) {
            return Err(Error::ShapeMismatch("members disagree in shape".into()));
        }
        let mut mean = Matrix::zeros(n, k);
        for m in &members {
            for (a, b) in mean.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *a += b;
            }
        }
        let count = members.len() as f64;
        mean.as_mut_slice().iter_mut().for_each(|v| *v /= count);
        let entropy = mean.iter_rows().map(predictive_entropy).collect::<Result<Vec<_>>>()?;
        Ok(Self { members, mean, entropy })
    }

    /// Concatenates the members of several bundles over the same instances.
    pub fn concat(bundles: Vec<PredictiveBundle>) -> Result<Self> {
        Self::from_members(bundles.into_iter().flat_map(|b| b.members).collect())
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.mean.cols()
    }

    pub fn predicted_labels(&self) -> Vec<usize> {
        self.mean.iter_rows().map(crate::linalg::argmax).collect()
    }
}

/// Softmax probabilities of one flat last layer on `features`.
pub fn softmax_probs(theta: &[f64], features: &Matrix) -> Result<Matrix> {
    let d = features.cols();
    if theta.is_empty() || !theta.len().is_multiple_of(d + 1) {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters do not form a last layer over {d} features",
            theta.len()
        )));
    }
    let k = theta.len() / (d + 1);
    let mut out = Matrix::zeros(features.rows(), k);
    for i in 0..features.rows() {
        let z = features.row(i);
        let row = out.row_mut(i);
        for c in 0..k {
            row[c] = dot(&theta[c * d..(c + 1) * d], z) + theta[k * d + c];
        }
        softmax_in_place(row);
    }
    Ok(out)
}

/// Predictive bundle from flat last-layer parameter vectors (one per member).
pub fn predict_proba<P: AsRef<[f64]>>(members: &[P], features: &Matrix) -> Result<PredictiveBundle> {
    let probs = members
        .iter()
        .map(|m| softmax_probs(m.as_ref(), features))
        .collect::<Result<Vec<_>>>()?;
    PredictiveBundle::from_members(probs)
}
