use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use llhmc::backbone::{train_mlp, Activation, MlpSpec, OptimizerConfig, OptimizerMethod, Task, TaskData, TrainedMlp};
use llhmc::dataset::{load_latent_dataset, load_regression_dataset, save_latent_dataset, save_regression_dataset};
use llhmc::harness::config::{parse_override, DataSource, OodConfig, OodMode};
use llhmc::harness::curve::{dependent_sample_curve, write_curve_csv};
use llhmc::harness::grid::{default_baseline_grid, default_llhmc_grid, grid_search, summarize, GridSpec};
use llhmc::harness::heatmap::{emit_uncertainty_grid, regression_band, write_band_csv};
use llhmc::harness::{fit_predictor, run_experiment, ExperimentConfig, MethodTag, Predictor, RecordStore};
use llhmc::metrics::evaluate;
use llhmc::model::{last_layer_dim, posterior_target_classification, GaussianPrior};
use llhmc::rng::RngState;
use llhmc::sampler::{prior_inits, run_chains, SamplerConfig, StepSizeInit};
use llhmc::toydata::{make_grid, sinusoid_regression, two_moons, SinusoidConfig};

#[derive(Parser)]
#[command(name = "llhmc", version, about = "Last-layer HMC toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset as CSV.
    Toy {
        #[command(subcommand)]
        kind: ToyKind,
    },
    /// Train an MLP backbone on a CSV dataset.
    TrainBackbone(TrainBackboneArgs),
    /// Write penultimate-layer features of a dataset.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Classification)]
        task: TaskArg,
    },
    /// Run NUTS on the last-layer posterior of a feature CSV.
    Sample(SampleArgs),
    /// Fit the configured method and save the predictor as JSON.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved predictor on a CSV, or run configured experiments.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds; defaults to the config's `seeds`.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Saved predictor; requires --data.
        #[arg(long, requires = "data")]
        predictor: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        n_members: Option<usize>,
        /// Records directory (defaults to output_dir, then ./results).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run configured experiments under a class-removal OOD scenario.
    Ood {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds; defaults to the config's `seeds`.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        threshold: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded grid search with resumable records and both summaries.
    Grid {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds; defaults to the config's `seeds`.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// TOML file with an `[axes]` table of dotted keys to value arrays.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// F1 and PR-AUC against the number of dependent LL-HMC draws.
    Curve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds; defaults to the config's `seeds`.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Uncertainty map over a 2-D grid, or a predictive band for the sinusoid.
    Heatmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        resolution: usize,
        #[arg(long, num_args = 2, allow_negative_numbers = true, default_values_t = [-2.0, 3.0])]
        x_range: Vec<f64>,
        #[arg(long, num_args = 2, allow_negative_numbers = true, default_values_t = [-1.5, 2.0])]
        y_range: Vec<f64>,
        #[arg(long)]
        n_members: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ToyKind {
    Moons {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Sinusoid {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set sampler.burn_in=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let overrides = self
            .overrides
            .iter()
            .map(|o| parse_override(o))
            .collect::<llhmc::Result<Vec<_>>>()?;
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, &overrides)?,
            None => ExperimentConfig::parse("", &overrides)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Regression,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Min,
    Max,
}

#[derive(Args)]
struct TrainBackboneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Classification)]
    task: TaskArg,
    #[arg(long, value_delimiter = ',', default_values_t = [20, 20])]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    activation: ActivationArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    /// 0 trains full batch.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Labelled feature CSV.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    prior_std: f64,
    #[arg(long, default_value_t = 100)]
    burn_in: usize,
    /// Retained draws in total, split across chains.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    chains: usize,
    #[arg(long, default_value_t = 0.8)]
    target_accept: f64,
    #[arg(long, default_value_t = 10)]
    max_tree_depth: usize,
    /// `auto` or a positive number.
    #[arg(long, default_value = "auto")]
    init_step_size: StepSizeInit,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn store_for(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<RecordStore> {
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    Ok(RecordStore::open(dir)?)
}

/// The `--seed` list, or the config's `seeds` when none was given.
fn seeds_or(config: &ExperimentConfig, flag: Vec<u64>) -> Result<Vec<u64>> {
    let seeds = if flag.is_empty() { config.seeds.clone() } else { flag };
    if seeds.is_empty() {
        bail!("no seeds: pass --seed or set `seeds` in the config");
    }
    Ok(seeds)
}

/// Runs and persists one record per seed; returns the number of failures.
fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64], store: &RecordStore) -> usize {
    let mut failures = 0;
    for &seed in seeds {
        match run_experiment(cfg, seed).and_then(|r| store.save(&r).map(|_| r)) {
            Ok(r) => println!("{}", serde_json::to_string(&r).expect("record serializes")),
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                failures += 1;
            }
        }
    }
    failures
}

fn train_backbone(a: TrainBackboneArgs) -> Result<()> {
    let opt = OptimizerConfig {
        method: match a.optimizer {
            OptimizerArg::Sgd => OptimizerMethod::Sgd,
            OptimizerArg::Adam => OptimizerMethod::Adam,
        },
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
    };
    let act = match a.activation {
        ActivationArg::Relu => Activation::Relu,
        ActivationArg::Tanh => Activation::Tanh,
    };
    let mut rng = RngState::new(a.seed).rng();
    let (mlp, losses) = match a.task {
        TaskArg::Classification => {
            let d = load_latent_dataset(&a.data)?;
            let spec = MlpSpec::with_hidden(d.dim(), &a.hidden, d.num_classes(), act, Task::Classification)?;
            train_mlp(TaskData::Classification(&d), spec, &opt, &mut rng)?
        }
        TaskArg::Regression => {
            let d = load_regression_dataset(&a.data)?;
            let spec = MlpSpec::with_hidden(d.dim(), &a.hidden, 1, act, Task::Regression)?;
            train_mlp(TaskData::Regression(&d), spec, &opt, &mut rng)?
        }
    };
    write_json(&mlp, &a.out)?;
    if let Some(last) = losses.last() {
        eprintln!("final training loss {last:.6}");
    }
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let data = load_latent_dataset(&a.features)?;
    let prior = GaussianPrior::new(a.prior_std)?;
    let root = RngState::new(a.seed);
    let cfg = SamplerConfig {
        burn_in: a.burn_in,
        samples: a.samples,
        chains: a.chains,
        target_accept: a.target_accept,
        max_tree_depth: a.max_tree_depth,
        init_step_size: a.init_step_size,
        seed: a.seed,
    };
    let dim = last_layer_dim(data.num_classes(), data.dim());
    let inits = prior_inits(&prior, dim, a.chains, root.split(1));
    let set = run_chains(&posterior_target_classification(&data, prior), &cfg, &inits)?;
    set.save_json(&a.out)?;
    eprintln!(
        "{} draws, {} divergences, mean accept {:.3}",
        set.total_draws(),
        set.divergences(),
        set.mean_accept_stat()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Toy { kind } => match kind {
            ToyKind::Moons { n, noise, seed, out } => {
                save_latent_dataset(&two_moons(n, noise, &mut RngState::new(seed).rng())?, &out)?;
            }
            ToyKind::Sinusoid {
                n,
                noise,
                amplitude,
                seed,
                out,
            } => {
                let cfg = SinusoidConfig {
                    n,
                    noise,
                    amplitude,
                    ..Default::default()
                };
                save_regression_dataset(&sinusoid_regression(&cfg, &mut RngState::new(seed).rng())?, &out)?;
            }
        },
        Command::TrainBackbone(a) => train_backbone(a)?,
        Command::Extract { model, data, out, task } => {
            let text = fs::read_to_string(&model).with_context(|| format!("reading {}", model.display()))?;
            let mlp: TrainedMlp = serde_json::from_str(&text)?;
            match task {
                TaskArg::Classification => {
                    let d = load_latent_dataset(&data)?;
                    save_latent_dataset(&d.with_features(mlp.extract_features(d.features())?)?, &out)?;
                }
                TaskArg::Regression => {
                    let d = load_regression_dataset(&data)?;
                    save_regression_dataset(&d.with_inputs(mlp.extract_features(d.inputs())?)?, &out)?;
                }
            }
        }
        Command::Sample(a) => sample(a)?,
        Command::Fit { cfg, seed, out } => {
            let (predictor, _) = fit_predictor(&cfg.load()?, seed)?;
            write_json(&predictor, &out)?;
        }
        Command::Evaluate {
            cfg,
            seed,
            predictor,
            data,
            n_members,
            out,
        } => {
            if let (Some(p), Some(d)) = (predictor, data) {
                let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                let predictor: Predictor = serde_json::from_str(&text)?;
                let test = load_latent_dataset(&d)?;
                if seed.is_empty() {
                    bail!("pass --seed with --predictor");
                }
                for s in seed {
                    let bundle = predictor.predict(test.features(), n_members, RngState::new(s))?;
                    println!("{}", serde_json::to_string(&evaluate(&bundle, test.labels())?)?);
                }
            } else {
                let config = cfg.load()?;
                let seeds = seeds_or(&config, seed)?;
                let store = store_for(&config, out)?;
                if run_seeds(&config, &seeds, &store) > 0 {
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Ood {
            cfg,
            seed,
            mode,
            threshold,
            out,
        } => {
            let mut config = cfg.load()?;
            let ood = config.ood.get_or_insert(OodConfig {
                mode: OodMode::Min,
                threshold: None,
            });
            if let Some(m) = mode {
                ood.mode = match m {
                    ModeArg::Min => OodMode::Min,
                    ModeArg::Max => OodMode::Max,
                };
            }
            if threshold.is_some() {
                ood.threshold = threshold;
            }
            let seeds = seeds_or(&config, seed)?;
            let store = store_for(&config, out)?;
            if run_seeds(&config, &seeds, &store) > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Grid { cfg, seed, grid, out } => {
            let config = cfg.load()?;
            let spec = match grid {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<GridSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => match config.method {
                    MethodTag::Llhmc => default_llhmc_grid(),
                    MethodTag::Map => default_baseline_grid("map"),
                    MethodTag::Bbb => default_baseline_grid("bbb"),
                    MethodTag::Subensemble => default_baseline_grid("subensemble"),
                    m => bail!("no default grid for method {}; pass --grid", m.as_str()),
                },
            };
            let store = store_for(&config, out)?;
            let outcome = grid_search(&config, &spec, &seeds_or(&config, seed)?, Some(&store))?;
            for f in &outcome.failures {
                eprintln!("cell {} seed {}: {}", f.cell, f.seed, f.error);
            }
            let summary = summarize(&store.load_all()?)?;
            write_json(&summary, &store.dir().join("summary.json"))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if !outcome.failures.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Curve { cfg, seed, out } => {
            let config = cfg.load()?;
            let rows = dependent_sample_curve(&config, &seeds_or(&config, seed)?)?;
            write_curve_csv(&rows, &out)?;
        }
        Command::Heatmap {
            cfg,
            seed,
            resolution,
            x_range,
            y_range,
            n_members,
            out,
        } => {
            let config = cfg.load()?;
            if matches!(config.data.source, DataSource::Sinusoid(_)) {
                let band = regression_band(&config, seed, (x_range[0], x_range[1]), resolution)?;
                write_band_csv(&band, &out)?;
            } else {
                let (predictor, _) = fit_predictor(&config, seed)?;
                let grid = make_grid((x_range[0], x_range[1]), (y_range[0], y_range[1]), resolution)?;
                emit_uncertainty_grid(&predictor, &grid, &out, n_members, RngState::new(seed).split(6))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
