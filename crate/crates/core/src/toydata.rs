//! Toy data generators: two moons, a gapped noisy sinusoid and regular 2-D
//! evaluation grids for uncertainty maps.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{LatentDataset, RegressionDataset};
use crate::error::{Error, Result};
use crate::linalg::{linspace, Matrix};

/// Two interleaved half circles. Class 0 (`ceil(n/2)` points) lies on the
/// upper unit arc around the origin; class 1 (`floor(n/2)` points) on the
/// lower unit arc around `(1, 0.5)`. Arc angles are evenly spaced and each
/// coordinate gets independent `N(0, noise^2)` jitter.
pub fn two_moons<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> Result<LatentDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("two_moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    let n_upper = n.div_ceil(2);
    let n_lower = n / 2;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for t in linspace(0.0, PI, n_upper) {
        data.push(t.cos());
        data.push(t.sin());
        labels.push(0);
    }
    for t in linspace(0.0, PI, n_lower) {
        data.push(1.0 - t.cos());
        data.push(0.5 - t.sin());
        labels.push(1);
    }
    if noise > 0.0 {
        for v in data.iter_mut() {
            let xi: f64 = rng.sample(StandardNormal);
            *v += noise * xi;
        }
    }
    LatentDataset::new(Matrix::from_vec(n, 2, data)?, labels, 2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinusoidConfig {
    pub n: usize,
    pub noise: f64,
    pub amplitude: f64,
    pub intervals: Vec<(f64, f64)>,
}

impl Default for SinusoidConfig {
    fn default() -> Self {
        Self {
            n: 200,
            noise: 0.1,
            amplitude: 1.0,
            intervals: vec![(-0.1, 0.4), (0.7, 1.2)],
        }
    }
}

pub fn sinusoid_value(x: f64, amplitude: f64) -> f64 {
    amplitude * (2.0 * PI * x).sin()
}

/// `y = a sin(2 pi x) + noise * xi` with `x` uniform over the union of the
/// configured intervals.
pub fn sinusoid_regression<R: Rng + ?Sized>(cfg: &SinusoidConfig, rng: &mut R) -> Result<RegressionDataset> {
    if cfg.n < 1 {
        return Err(Error::InvalidArgument("sinusoid_regression needs n >= 1".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {}", cfg.noise)));
    }
    if cfg.intervals.is_empty() {
        return Err(Error::InvalidArgument("at least one x interval is required".into()));
    }
    for &(lo, hi) in &cfg.intervals {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("degenerate interval [{lo}, {hi}]")));
        }
    }
    let mut sorted = cfg.intervals.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in sorted.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::InvalidArgument(format!(
                "intervals [{}, {}] and [{}, {}] overlap",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    let total: f64 = sorted.iter().map(|(lo, hi)| hi - lo).sum();
    let mut xs = Vec::with_capacity(cfg.n);
    let mut ys = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        // Position along the concatenated intervals.
        let mut u = rng.random::<f64>() * total;
        let mut x = sorted[sorted.len() - 1].1;
        for &(lo, hi) in &sorted {
            let len = hi - lo;
            if u < len {
                x = lo + u;
                break;
            }
            u -= len;
        }
        let xi: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ys.push(sinusoid_value(x, cfg.amplitude) + cfg.noise * xi);
    }
    RegressionDataset::new(Matrix::from_vec(cfg.n, 1, xs)?, ys)
}

/// Cartesian grid of `resolution^2` points in y-outer, x-inner order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x_bounds: (f64, f64),
    pub y_bounds: (f64, f64),
    pub resolution: usize,
    pub points: Matrix,
}

pub fn make_grid(x_bounds: (f64, f64), y_bounds: (f64, f64), resolution: usize) -> Result<Grid2D> {
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid resolution must be >= 2, got {resolution}"
        )));
    }
    for (name, (lo, hi)) in [("x", x_bounds), ("y", y_bounds)] {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} bounds [{lo}, {hi}] are not increasing"
            )));
        }
    }
    let xs = linspace(x_bounds.0, x_bounds.1, resolution);
    let ys = linspace(y_bounds.0, y_bounds.1, resolution);
    let mut data = Vec::with_capacity(2 * resolution * resolution);
    for &y in &ys {
        for &x in &xs {
            data.push(x);
            data.push(y);
        }
    }
    Ok(Grid2D {
        x_bounds,
        y_bounds,
        resolution,
        points: Matrix::from_vec(resolution * resolution, 2, data)?,
    })
}

/// Isotropic Gaussian clusters centred at `separation * e_k`, one per class,
/// for synthetic latent-feature experiments.
pub fn gaussian_clusters<R: Rng + ?Sized>(
    per_class: usize,
    dim: usize,
    num_classes: usize,
    separation: f64,
    rng: &mut R,
) -> Result<LatentDataset> {
    if num_classes > dim {
        return Err(Error::InvalidArgument(format!(
            "{num_classes} axis-aligned cluster centres need dim >= {num_classes}, got {dim}"
        )));
    }
    let n = per_class * num_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        for _ in 0..per_class {
            for j in 0..dim {
                let xi: f64 = rng.sample(StandardNormal);
                data.push(if j == k { separation } else { 0.0 } + xi);
            }
            labels.push(k);
        }
    }
    LatentDataset::new(Matrix::from_vec(n, dim, data)?, labels, num_classes)
}
