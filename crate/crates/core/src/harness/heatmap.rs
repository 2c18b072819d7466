//! Uncertainty maps over 2-D input grids and predictive bands for the 1-D
//! sinusoid toy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{train_mlp, MlpSpec, Task, TaskData, TrainedMlp};
use crate::error::{Error, Result};
use crate::harness::config::{DataSource, ExperimentConfig, MethodTag};
use crate::harness::experiment::{stream, Predictor};
use crate::linalg::{dot, linspace, Matrix};
use crate::metrics::predictive_entropy;
use crate::model::{posterior_target_full_network, posterior_target_regression};
use crate::rng::RngState;
use crate::sampler::{prior_inits, run_chains};
use crate::toydata::{sinusoid_regression, Grid2D};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCellValue {
    pub x: f64,
    pub y: f64,
    /// Mean probability of class 1.
    pub p1: f64,
    pub entropy: f64,
    /// Entropy rescaled to [0, 1] over the grid; all zero when constant.
    pub entropy_norm: f64,
}

fn to_err(e: csv::Error) -> Error {
    Error::Serialization(e.to_string())
}

/// Predictive mean and entropy at every grid point.
pub fn uncertainty_grid(
    predictor: &Predictor,
    grid: &Grid2D,
    n_members: Option<usize>,
    rng: RngState,
) -> Result<Vec<GridCellValue>> {
    if let Some(w) = predictor.input_width() {
        if w != 2 {
            return Err(Error::ShapeMismatch(format!(
                "uncertainty maps need 2-D inputs, the model takes {w}"
            )));
        }
    }
    if grid.points.cols() != 2 {
        return Err(Error::ShapeMismatch("grid points must be 2-D".into()));
    }
    let bundle = predictor.predict(&grid.points, n_members, rng)?;
    let k = bundle.num_classes();
    let entropies = bundle
        .mean
        .iter_rows()
        .map(predictive_entropy)
        .collect::<Result<Vec<_>>>()?;
    let lo = entropies.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = entropies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(grid
        .points
        .iter_rows()
        .zip(bundle.mean.iter_rows())
        .zip(&entropies)
        .map(|((pt, p), &h)| GridCellValue {
            x: pt[0],
            y: pt[1],
            p1: if k > 1 { p[1] } else { 0.0 },
            entropy: h,
            entropy_norm: if hi > lo { (h - lo) / (hi - lo) } else { 0.0 },
        })
        .collect())
}

/// Writes the uncertainty map as CSV with columns `x, y, p1, entropy,
/// entropy_norm`.
pub fn emit_uncertainty_grid(
    predictor: &Predictor,
    grid: &Grid2D,
    path: impl AsRef<Path>,
    n_members: Option<usize>,
    rng: RngState,
) -> Result<Vec<GridCellValue>> {
    let path = path.as_ref();
    let cells = uncertainty_grid(predictor, grid, n_members, rng)?;
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["x", "y", "p1", "entropy", "entropy_norm"])
        .map_err(to_err)?;
    for c in &cells {
        w.write_record([c.x, c.y, c.p1, c.entropy, c.entropy_norm].map(|v| v.to_string()))
            .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(cells)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub x: f64,
    pub mean: f64,
    /// Predictive std including observation noise.
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

fn band_from_predictions(xs: &[f64], preds: &[Vec<f64>], noise_std: f64) -> Vec<BandPoint> {
    let m = preds.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let mean = preds.iter().map(|p| p[i]).sum::<f64>() / m;
            let var = preds.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / m;
            let std = (var + noise_std * noise_std).sqrt();
            BandPoint {
                x,
                mean,
                std,
                lower: mean - 2.0 * std,
                upper: mean + 2.0 * std,
            }
        })
        .collect()
}

/// Predictive band of a regression MLP on the sinusoid toy, evaluated at
/// `resolution` points spanning `x_range`. `llhmc` samples the linear head
/// on backbone features, `full_hmc` every network weight, and `map` uses the
/// trained network alone.
pub fn regression_band(
    config: &ExperimentConfig,
    seed: u64,
    x_range: (f64, f64),
    resolution: usize,
) -> Result<Vec<BandPoint>> {
    config.validate()?;
    let DataSource::Sinusoid(sin) = &config.data.source else {
        return Err(Error::Config("regression bands need data.kind = \"sinusoid\"".into()));
    };
    if !matches!(config.method, MethodTag::Llhmc | MethodTag::FullHmc | MethodTag::Map) {
        return Err(Error::Config(format!(
            "no regression band for method {}",
            config.method.as_str()
        )));
    }
    if !config.backbone.enabled {
        return Err(Error::Config("regression bands need the backbone enabled".into()));
    }
    if resolution < 2 || !(x_range.0 < x_range.1) {
        return Err(Error::InvalidArgument(
            "band needs resolution >= 2 and an increasing x range".into(),
        ));
    }
    let data_rng = RngState::new(config.data.seed.unwrap_or(seed)).split(stream::DATA);
    let data = sinusoid_regression(sin, &mut data_rng.rng())?;
    let spec = MlpSpec::with_hidden(
        1,
        &config.backbone.hidden,
        1,
        config.backbone.activation,
        Task::Regression,
    )?;
    let (mlp, _) = train_mlp(
        TaskData::Regression(&data),
        spec,
        &config.backbone.optimizer,
        &mut RngState::new(seed).split(stream::BACKBONE).rng(),
    )
    .map_err(|e| e.in_phase("backbone training"))?;

    let xs = linspace(x_range.0, x_range.1, resolution);
    let grid = Matrix::from_vec(resolution, 1, xs.clone())?;
    let prior = config.prior()?;
    let fit_rng = RngState::new(seed).split(stream::FIT);
    let mut sampler = config.sampler.clone();
    sampler.seed = fit_rng.split(stream::SAMPLER).stream();
    let preds: Vec<Vec<f64>> = match config.method {
        MethodTag::Llhmc => {
            let feats = data.with_inputs(mlp.extract_features(data.inputs())?)?;
            let target = posterior_target_regression(&feats, prior, config.noise_std)?;
            let inits = prior_inits(&prior, feats.dim() + 1, sampler.chains, fit_rng.split(stream::INIT));
            let set = run_chains(&target, &sampler, &inits)?;
            let z = mlp.extract_features(&grid)?;
            let d = z.cols();
            set.all_draws()
                .into_iter()
                .map(|t| z.iter_rows().map(|row| dot(&t[..d], row) + t[d]).collect())
                .collect()
        }
        MethodTag::FullHmc => {
            let target = posterior_target_full_network(
                mlp.spec(),
                TaskData::Regression(&data),
                prior,
                config.noise_std,
                config.full_hmc.max_dim,
            )?;
            let set = run_chains(&target, &sampler, &vec![mlp.to_flat(); sampler.chains])?;
            set.all_draws()
                .into_iter()
                .map(|t| {
                    Ok(TrainedMlp::from_flat(mlp.spec().clone(), t)?
                        .forward(&grid)?
                        .as_slice()
                        .to_vec())
                })
                .collect::<Result<_>>()?
        }
        _ => vec![mlp.forward(&grid)?.as_slice().to_vec()],
    };
    Ok(band_from_predictions(&xs, &preds, config.noise_std))
}

pub fn write_band_csv(band: &[BandPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["x", "mean", "std", "lower", "upper"]).map_err(to_err)?;
    for b in band {
        w.write_record([b.x, b.mean, b.std, b.lower, b.upper].map(|v| v.to_string()))
            .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_of_identical_members_is_noise_only() {
        let preds = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let b = band_from_predictions(&[0.0, 1.0], &preds, 0.5);
        assert_eq!(b[1].mean, 2.0);
        assert_eq!(b[1].std, 0.5);
        assert_eq!(b[1].lower, 1.0);
    }
}
