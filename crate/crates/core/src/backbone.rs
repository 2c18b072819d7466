//! Fully connected backbone with hand-written backpropagation.
//!
//! Parameters are flattened in a canonical order used everywhere a network
//! is treated as a vector (serialization, full-network posteriors): for each
//! layer in turn, the weight matrix row-major (shape `out x in`) followed by
//! its bias vector.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LatentDataset, RegressionDataset};
use crate::error::{Error, Result};
use crate::linalg::{affine, log_sum_exp, softmax_in_place, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub task: Task,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, task: Task) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
            task,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `input -> hidden... -> output`.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        task: Task,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, activation, task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::InvalidArgument(
                "an MLP needs an input width, at least one hidden width and an output width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
        }
        if self.task == Task::Regression && self.output_width() != 1 {
            return Err(Error::InvalidArgument(
                "regression networks have a single output".into(),
            ));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Width of the penultimate (last hidden) layer.
    pub fn feature_width(&self) -> usize {
        self.layer_widths[self.layer_widths.len() - 2]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Flat offset of the last layer's weights.
    pub fn last_layer_offset(&self) -> usize {
        self.num_params() - self.output_width() * (self.feature_width() + 1)
    }
}

/// Data accepted by the trainer and gradient routines.
#[derive(Clone, Copy, Debug)]
pub enum TaskData<'a> {
    Classification(&'a LatentDataset),
    Regression(&'a RegressionDataset),
}

impl<'a> TaskData<'a> {
    pub fn inputs(&self) -> &'a Matrix {
        match self {
            TaskData::Classification(d) => d.features(),
            TaskData::Regression(d) => d.inputs(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskData::Classification(d) => d.len(),
            TaskData::Regression(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            TaskData::Classification(_) => Task::Classification,
            TaskData::Regression(_) => Task::Regression,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct TrainedMlp {
    spec: MlpSpec,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// On-disk form: spec plus the flat parameter vector in canonical order.
#[derive(Serialize, Deserialize)]
struct MlpFile {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl From<TrainedMlp> for MlpFile {
    fn from(m: TrainedMlp) -> Self {
        MlpFile {
            params: m.to_flat(),
            spec: m.spec,
        }
    }
}

impl TryFrom<MlpFile> for TrainedMlp {
    type Error = Error;

    fn try_from(f: MlpFile) -> Result<Self> {
        TrainedMlp::from_flat(f.spec, &f.params)
    }
}

/// Per-row forward activations kept for backpropagation.
struct Trace {
    /// `post[0]` is the input; `post[l]` the activation feeding layer `l`.
    post: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last entry is the network output.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    fn new(spec: &MlpSpec) -> Self {
        let w = &spec.layer_widths;
        Trace {
            post: w[..w.len() - 1].iter().map(|&n| vec![0.0; n]).collect(),
            pre: w[1..].iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

impl TrainedMlp {
    /// Random initialization: Kaiming-uniform (fan-in) for relu, Xavier-uniform
    /// for tanh; biases start at zero.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.num_layers());
        let mut biases = Vec::with_capacity(spec.num_layers());
        for w in spec.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = match spec.activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self { spec, weights, biases })
    }

    pub fn from_flat(spec: MlpSpec, params: &[f64]) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "spec needs {} parameters, got {}",
                spec.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network parameter".into()));
        }
        Ok(Self::from_flat_unchecked(spec, params))
    }

    /// Unpacks `params` without validation; the length must already match.
    pub(crate) fn from_flat_unchecked(spec: MlpSpec, params: &[f64]) -> Self {
        let mut weights = Vec::with_capacity(spec.num_layers());
        let mut biases = Vec::with_capacity(spec.num_layers());
        let mut off = 0;
        for w in spec.layer_widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let w = Matrix::from_vec(n_out, n_in, params[off..off + n_in * n_out].to_vec()).expect("layer shape");
            weights.push(w);
            off += n_in * n_out;
            biases.push(params[off..off + n_out].to_vec());
            off += n_out;
        }
        Self { spec, weights, biases }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Weight matrix (`out x features`) and bias of the output layer.
    pub fn last_layer(&self) -> (&Matrix, &[f64]) {
        let l = self.weights.len() - 1;
        (&self.weights[l], &self.biases[l])
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.spec.input_width() && inputs.rows() > 0 {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input columns, got {}",
                self.spec.input_width(),
                inputs.cols()
            )));
        }
        Ok(())
    }

    fn forward_row(&self, x: &[f64], trace: &mut Trace) {
        trace.post[0].copy_from_slice(x);
        let last = self.weights.len() - 1;
        for l in 0..=last {
            affine(&self.weights[l], &self.biases[l], &trace.post[l], &mut trace.pre[l]);
            if l < last {
                let act = self.spec.activation;
                for (d, &s) in trace.post[l + 1].iter_mut().zip(&trace.pre[l]) {
                    *d = act.apply(s);
                }
            }
        }
    }

    /// Post-activation outputs of the last hidden layer (the inputs the output
    /// layer consumes).
    pub fn extract_features(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        let width = self.spec.feature_width();
        let mut out = Matrix::zeros(inputs.rows(), width);
        let mut trace = Trace::new(&self.spec);
        let last = self.weights.len() - 1;
        for i in 0..inputs.rows() {
            self.forward_row(inputs.row(i), &mut trace);
            out.row_mut(i).copy_from_slice(&trace.post[last]);
        }
        Ok(out)
    }

    /// Raw network outputs (logits for classification, predictions for
    /// regression).
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        let mut out = Matrix::zeros(inputs.rows(), self.spec.output_width());
        let mut trace = Trace::new(&self.spec);
        for i in 0..inputs.rows() {
            self.forward_row(inputs.row(i), &mut trace);
            out.row_mut(i).copy_from_slice(trace.pre.last().unwrap());
        }
        Ok(out)
    }

    pub fn predict_proba(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut out = self.forward(inputs)?;
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        Ok(out)
    }

    /// Sums `head`'s per-row loss over `rows` and accumulates the gradient of
    /// that sum into `grad` (canonical flat order). `head` receives the row
    /// index and network output and writes `d loss / d output`.
    pub(crate) fn accumulate_gradient<F>(&self, inputs: &Matrix, rows: &[usize], mut head: F, grad: &mut [f64]) -> f64
    where
        F: FnMut(usize, &[f64], &mut [f64]) -> f64,
    {
        debug_assert_eq!(grad.len(), self.spec.num_params());
        let n_layers = self.weights.len();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in &self.weights {
            offsets.push(off);
            off += w.rows() * w.cols() + w.rows();
        }
        let mut trace = Trace::new(&self.spec);
        let max_width = *self.spec.layer_widths.iter().max().unwrap();
        let mut delta = vec![0.0; max_width];
        let mut delta_prev = vec![0.0; max_width];
        let mut loss = 0.0;
        for &i in rows {
            self.forward_row(inputs.row(i), &mut trace);
            let out_w = self.spec.output_width();
            loss += head(i, &trace.pre[n_layers - 1], &mut delta[..out_w]);
            for l in (0..n_layers).rev() {
                let w = &self.weights[l];
                let (n_out, n_in) = (w.rows(), w.cols());
                let input = &trace.post[l];
                let base = offsets[l];
                for k in 0..n_out {
                    let d = delta[k];
                    if d == 0.0 {
                        continue;
                    }
                    let g = &mut grad[base + k * n_in..base + (k + 1) * n_in];
                    for (gj, &a) in g.iter_mut().zip(input) {
                        *gj += d * a;
                    }
                    grad[base + n_out * n_in + k] += d;
                }
                if l > 0 {
                    let pre = &trace.pre[l - 1];
                    for j in 0..n_in {
                        let mut s = 0.0;
                        for k in 0..n_out {
                            s += w.get(k, j) * delta[k];
                        }
                        delta_prev[j] = s * self.spec.activation.derivative(pre[j]);
                    }
                    std::mem::swap(&mut delta, &mut delta_prev);
                }
            }
        }
        loss
    }

    /// Sum of per-row training losses over `rows` and its gradient: softmax
    /// cross-entropy for classification, squared error for regression.
    pub(crate) fn loss_and_gradient(&self, data: TaskData<'_>, rows: &[usize], grad: &mut [f64]) -> f64 {
        match data {
            TaskData::Classification(d) => {
                let labels = d.labels();
                self.accumulate_gradient(
                    d.features(),
                    rows,
                    |i, logits, dout| {
                        let lse = log_sum_exp(logits);
                        for (g, &z) in dout.iter_mut().zip(logits) {
                            *g = (z - lse).exp();
                        }
                        dout[labels[i]] -= 1.0;
                        lse - logits[labels[i]]
                    },
                    grad,
                )
            }
            TaskData::Regression(d) => {
                let targets = d.targets();
                self.accumulate_gradient(
                    d.inputs(),
                    rows,
                    |i, out, dout| {
                        let r = out[0] - targets[i];
                        dout[0] = 2.0 * r;
                        r * r
                    },
                    grad,
                )
            }
        }
    }

    fn check_task(&self, data: &TaskData<'_>) -> Result<()> {
        if data.task() != self.spec.task {
            return Err(Error::ShapeMismatch(format!(
                "{:?} network given {:?} data",
                self.spec.task,
                data.task()
            )));
        }
        if data.inputs().cols() != self.spec.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} inputs, data has {}",
                self.spec.input_width(),
                data.inputs().cols()
            )));
        }
        if let TaskData::Classification(d) = data {
            if d.num_classes() != self.spec.output_width() {
                return Err(Error::ShapeMismatch(format!(
                    "network has {} outputs, data has {} classes",
                    self.spec.output_width(),
                    d.num_classes()
                )));
            }
        }
        Ok(())
    }
}

/// Mean training loss over `batch` and its gradient in canonical flat order.
pub fn mlp_gradient(mlp: &TrainedMlp, batch: TaskData<'_>) -> Result<(f64, Vec<f64>)> {
    mlp.check_task(&batch)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("gradient of an empty batch".into()));
    }
    let rows: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0; mlp.spec.num_params()];
    let loss = mlp.loss_and_gradient(batch, &rows, &mut grad);
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMethod {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    /// L2 penalty coefficient added to the gradient of every parameter.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: OptimizerMethod::Adam,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 32,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        Ok(())
    }

    pub(crate) fn effective_batch(&self, n: usize) -> usize {
        if self.batch_size == 0 || self.batch_size >= n {
            n
        } else {
            self.batch_size
        }
    }
}

/// First-order update rule shared by backbone training and last-layer fits.
pub(crate) struct Optimizer {
    method: OptimizerMethod,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(cfg: &OptimizerConfig, dim: usize) -> Self {
        Self {
            method: cfg.method,
            lr: cfg.learning_rate,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.method {
            OptimizerMethod::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerMethod::Adam => {
                self.t += 1;
                let bc1 = 1.0 - Self::BETA1.powi(self.t);
                let bc2 = 1.0 - Self::BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Minibatch training on cross-entropy (classification) or mean squared error
/// (regression). Returns the network and the mean training loss per epoch.
pub fn train_mlp<R: Rng + ?Sized>(
    data: TaskData<'_>,
    spec: MlpSpec,
    opt: &OptimizerConfig,
    rng: &mut R,
) -> Result<(TrainedMlp, Vec<f64>)> {
    opt.validate()?;
    let init = TrainedMlp::init(spec, rng)?;
    init.check_task(&data)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let spec = init.spec.clone();
    let mut params = init.to_flat();
    let mut optimizer = Optimizer::new(opt, params.len());
    let n = data.len();
    let batch = opt.effective_batch(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(opt.epochs);
    let mut mlp = init;
    for epoch in 0..opt.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = mlp.loss_and_gradient(data, chunk, &mut grad);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss;
            let m = chunk.len() as f64;
            for (g, &p) in grad.iter_mut().zip(&params) {
                *g = *g / m + opt.weight_decay * p;
            }
            optimizer.step(&mut params, &grad);
            mlp =
                TrainedMlp::from_flat(spec.clone(), &params).map_err(|_| Error::Diverged { epoch, loss: f64::NAN })?;
        }
        losses.push(epoch_loss / n as f64);
    }
    Ok((mlp, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use rand_distr::StandardNormal;

    fn blobs(n_per: usize, seed: u64) -> LatentDataset {
        let mut rng = RngState::new(seed).rng();
        let mut rows = vec![];
        let mut labels = vec![];
        for k in 0..2 {
            let c = if k == 0 { -2.0 } else { 2.0 };
            for _ in 0..n_per {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                rows.push(vec![c + 0.3 * a, c + 0.3 * b]);
                labels.push(k);
            }
        }
        LatentDataset::new(Matrix::from_rows(&rows).unwrap(), labels, 2).unwrap()
    }

    fn random_batch(seed: u64, n: usize, d: usize, k: usize) -> LatentDataset {
        let mut rng = RngState::new(seed).rng();
        let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        LatentDataset::new(Matrix::from_vec(n, d, data).unwrap(), labels, k).unwrap()
    }

    fn mean_loss(mlp: &TrainedMlp, data: TaskData<'_>) -> f64 {
        mlp_gradient(mlp, data).unwrap().0
    }

    // Zero-initialised biases can put ReLU pre-activations exactly on the kink,
    // where central differences are meaningless.
    fn jittered(mlp: TrainedMlp, seed: u64) -> TrainedMlp {
        let mut rng = RngState::new(seed).rng();
        let flat: Vec<f64> = mlp
            .to_flat()
            .iter()
            .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        TrainedMlp::from_flat(mlp.spec.clone(), &flat).unwrap()
    }

    fn fd_check(mlp: &TrainedMlp, data: TaskData<'_>) {
        let (_, grad) = mlp_gradient(mlp, data).unwrap();
        let flat = mlp.to_flat();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let lp = mean_loss(&TrainedMlp::from_flat(mlp.spec.clone(), &plus).unwrap(), data);
            let lm = mean_loss(&TrainedMlp::from_flat(mlp.spec.clone(), &minus).unwrap(), data);
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-5, "coord {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (act, hidden) in [
            (Activation::Tanh, vec![5]),
            (Activation::Tanh, vec![4, 3]),
            (Activation::Relu, vec![6, 5]),
            (Activation::Relu, vec![3, 4, 3]),
        ] {
            let data = random_batch(3, 12, 3, 3);
            let spec = MlpSpec::with_hidden(3, &hidden, 3, act, Task::Classification).unwrap();
            let mlp = jittered(TrainedMlp::init(spec, &mut RngState::new(5).rng()).unwrap(), 7);
            fd_check(&mlp, TaskData::Classification(&data));

            let reg = RegressionDataset::new(
                data.features().clone(),
                data.features().iter_rows().map(|r| r[0].sin()).collect(),
            )
            .unwrap();
            let spec = MlpSpec::with_hidden(3, &hidden, 1, act, Task::Regression).unwrap();
            let mlp = jittered(TrainedMlp::init(spec, &mut RngState::new(6).rng()).unwrap(), 8);
            fd_check(&mlp, TaskData::Regression(&reg));
        }
    }

    #[test]
    fn zero_network_output_bias_gradient_is_prob_minus_onehot() {
        let data = random_batch(8, 10, 2, 3);
        let spec = MlpSpec::with_hidden(2, &[4], 3, Activation::Tanh, Task::Classification).unwrap();
        let mlp = TrainedMlp::from_flat(spec.clone(), &vec![0.0; spec.num_params()]).unwrap();
        let (_, grad) = mlp_gradient(&mlp, TaskData::Classification(&data)).unwrap();
        let counts = data.class_counts();
        let off = spec.num_params() - 3;
        for k in 0..3 {
            let expected = 1.0 / 3.0 - counts[k] as f64 / data.len() as f64;
            assert!((grad[off + k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let data = random_batch(9, 7, 2, 2);
        let idx: Vec<usize> = (0..7).flat_map(|i| [i, i]).collect();
        let doubled = data.subset(&idx);
        let spec = MlpSpec::with_hidden(2, &[5], 2, Activation::Relu, Task::Classification).unwrap();
        let mlp = TrainedMlp::init(spec, &mut RngState::new(1).rng()).unwrap();
        let (_, a) = mlp_gradient(&mlp, TaskData::Classification(&data)).unwrap();
        let (_, b) = mlp_gradient(&mlp, TaskData::Classification(&doubled)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(50, 2);
        let spec = MlpSpec::with_hidden(2, &[8], 2, Activation::Relu, Task::Classification).unwrap();
        let (mlp, losses) = train_mlp(
            TaskData::Classification(&data),
            spec,
            &OptimizerConfig::default(),
            &mut RngState::new(3).rng(),
        )
        .unwrap();
        assert_eq!(losses.len(), 200);
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(losses.last().unwrap() < &losses[0]);
        let probs = mlp.predict_proba(data.features()).unwrap();
        let correct = probs
            .iter_rows()
            .zip(data.labels())
            .filter(|(p, &y)| crate::linalg::argmax(p) == y)
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let data = blobs(10, 4);
        let spec = MlpSpec::with_hidden(2, &[4], 2, Activation::Tanh, Task::Classification).unwrap();
        for method in [OptimizerMethod::Sgd, OptimizerMethod::Adam] {
            let opt = OptimizerConfig {
                method,
                learning_rate: 0.0,
                epochs: 5,
                ..Default::default()
            };
            let init = TrainedMlp::init(spec.clone(), &mut RngState::new(10).rng()).unwrap();
            let (trained, _) = train_mlp(
                TaskData::Classification(&data),
                spec.clone(),
                &opt,
                &mut RngState::new(10).rng(),
            )
            .unwrap();
            assert_eq!(trained.to_flat(), init.to_flat());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(20, 5);
        let spec = MlpSpec::with_hidden(2, &[6, 6], 2, Activation::Relu, Task::Classification).unwrap();
        let run = || {
            train_mlp(
                TaskData::Classification(&data),
                spec.clone(),
                &OptimizerConfig {
                    epochs: 20,
                    ..Default::default()
                },
                &mut RngState::new(42).rng(),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn features_compose_with_last_layer_bitwise() {
        let data = random_batch(1, 15, 3, 4);
        let spec = MlpSpec::with_hidden(3, &[7, 5], 4, Activation::Relu, Task::Classification).unwrap();
        let mlp = TrainedMlp::init(spec, &mut RngState::new(2).rng()).unwrap();
        let feats = mlp.extract_features(data.features()).unwrap();
        let logits = mlp.forward(data.features()).unwrap();
        let (w, b) = mlp.last_layer();
        let mut out = vec![0.0; 4];
        for i in 0..feats.rows() {
            affine(w, b, feats.row(i), &mut out);
            assert_eq!(out.as_slice(), logits.row(i));
        }
    }

    #[test]
    fn relu_features_vanish_for_negative_preactivations() {
        let spec = MlpSpec::with_hidden(1, &[3], 2, Activation::Relu, Task::Classification).unwrap();
        let mut params = vec![0.0; spec.num_params()];
        // hidden weights 1, biases -10: any input below 10 gives negative pre-activations
        params[..3].copy_from_slice(&[1.0, 1.0, 1.0]);
        params[3..6].copy_from_slice(&[-10.0, -10.0, -10.0]);
        let mlp = TrainedMlp::from_flat(spec, &params).unwrap();
        let f = mlp.extract_features(&Matrix::from_rows(&[vec![2.0]]).unwrap()).unwrap();
        assert_eq!(f.row(0), &[0.0, 0.0, 0.0]);
        let empty = mlp.extract_features(&Matrix::zeros(0, 1)).unwrap();
        assert_eq!((empty.rows(), empty.cols()), (0, 3));
    }

    #[test]
    fn json_round_trip_uses_flat_parameters() {
        let spec = MlpSpec::with_hidden(2, &[3], 2, Activation::Tanh, Task::Classification).unwrap();
        let mlp = TrainedMlp::init(spec, &mut RngState::new(0).rng()).unwrap();
        let text = serde_json::to_string(&mlp).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["params"].as_array().unwrap().len(), mlp.spec().num_params());
        let back: TrainedMlp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, mlp);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let data = random_batch(1, 4, 3, 2);
        let spec = MlpSpec::with_hidden(2, &[3], 2, Activation::Tanh, Task::Classification).unwrap();
        let r = train_mlp(
            TaskData::Classification(&data),
            spec,
            &OptimizerConfig::default(),
            &mut RngState::new(0).rng(),
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let data = random_batch(3, 30, 2, 2);
        let reg = RegressionDataset::new(data.features().clone(), vec![1e6; 30]).unwrap();
        let spec = MlpSpec::with_hidden(2, &[4], 1, Activation::Relu, Task::Regression).unwrap();
        let opt = OptimizerConfig {
            method: OptimizerMethod::Sgd,
            learning_rate: 1e6,
            epochs: 50,
            ..Default::default()
        };
        let r = train_mlp(TaskData::Regression(&reg), spec, &opt, &mut RngState::new(0).rng());
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }
}
