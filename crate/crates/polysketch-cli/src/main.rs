//! Command-line front end for the `polysketch` library.
//!
//! Every subcommand takes a JSON configuration (`--config`); `fig1` takes
//! plain flags instead. Results go to `--out` or stdout. Exit codes: 0 on
//! success, 2 for configuration or input errors, 3 for numerical failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use polysketch::eval::{
    fig1_benchmark, fig1_csv, method_features, preprocess, run_experiment, synthetic_dataset,
    AllocationSettings, DataSource, Dataset, ExperimentConfig, KernelConfig, MethodConfig,
    PreprocessFlags,
};
use polysketch::gp::{fit_gp, predict, NoiseModel};
use polysketch::maclaurin::{extended_allocate, precompute_objective_tables, FeatureFamily, SketchKind};
use polysketch::numerics::{HadamardDim, RngStream};
use polysketch::sketches::{apply_sketch, build_unstructured_sketch, Family};
use polysketch::tensor_srht::{apply_tensor_srht, build_tensor_srht};
use polysketch::variance::{
    sigma_sq_bound, surrogate_var_tensor_srht, var_tensor_srht, var_unstructured,
};
use polysketch::{Error, FeatureMatrix, Result, SketchSpec};

#[derive(Parser)]
#[command(name = "polysketch", version, about = "Polynomial sketches and Maclaurin random features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed(s) in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (directory for `bench`); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Emit sketch features for every input row as CSV.
    Sketch(Common),
    /// Evaluate the closed-form variances for a pair of vectors.
    Variance(Common),
    /// Optimize the truncation degree and per-degree feature counts.
    Allocate(Common),
    /// Fit a feature-space GP and predict on test rows.
    Gp(Common),
    /// Run a full experiment and write the report.
    Bench(Common),
    /// Real versus complex Rademacher error table.
    Fig1 {
        #[arg(long, default_value_t = 100)]
        d: usize,
        #[arg(long, default_value_t = 2000)]
        features: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
        degrees: Vec<u32>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_source(source: &DataSource, flags: PreprocessFlags) -> Result<Dataset> {
    let raw = match source {
        DataSource::Csv { path, label_column } => polysketch::eval::load_csv(path, label_column)?,
        DataSource::Synthetic(spec) => synthetic_dataset(spec)?,
    };
    preprocess(&raw, flags)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SketchConfig {
    data: DataSource,
    #[serde(default)]
    preprocess: PreprocessFlags,
    sketch: FeatureFamily,
    degree: usize,
    num_features: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VarianceConfig {
    x: Vec<f64>,
    y: Vec<f64>,
    degree: u32,
    num_features: u64,
    family: FeatureFamily,
}

#[derive(Serialize)]
struct VarianceOutput {
    single_feature_variance: f64,
    variance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    surrogate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hadamard_dim: Option<usize>,
    sigma_sq_bound: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocateConfig {
    data: DataSource,
    #[serde(default)]
    preprocess: PreprocessFlags,
    kernel: KernelConfig,
    family: FeatureFamily,
    num_features: usize,
    #[serde(default = "one")]
    p_min: usize,
    #[serde(default = "ten")]
    p_max: usize,
    #[serde(default = "five_thousand")]
    sample_size: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GpConfig {
    train: DataSource,
    test: DataSource,
    #[serde(default)]
    preprocess: PreprocessFlags,
    kernel: KernelConfig,
    method: MethodConfig,
    num_features: usize,
    noise_variance: f64,
    #[serde(default = "one")]
    p_min: usize,
    #[serde(default = "ten")]
    p_max: usize,
    #[serde(default = "five_thousand")]
    sample_size: usize,
    #[serde(default)]
    seed: u64,
}

fn one() -> usize {
    1
}
fn ten() -> usize {
    10
}
fn five_thousand() -> usize {
    5000
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, body).map_err(|source| Error::Io {
            path: p.display().to_string(),
            source,
        }),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable output");
    s.push('\n');
    s
}

fn features_csv(f: &FeatureMatrix) -> String {
    let m = f.matrix();
    let mut header = Vec::new();
    for c in 0..m.ncols() {
        header.push(format!("f{c}_re"));
        if !f.is_real() {
            header.push(format!("f{c}_im"));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..m.nrows() {
        let mut cells = Vec::new();
        for c in 0..m.ncols() {
            cells.push(format!("{:e}", m[(r, c)].re));
            if !f.is_real() {
                cells.push(format!("{:e}", m[(r, c)].im));
            }
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn cmd_sketch(args: &Common) -> Result<()> {
    let cfg: SketchConfig = read_config(&args.config)?;
    let ds = load_source(&cfg.data, cfg.preprocess)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let field = cfg.sketch.field;
    let features = match cfg.sketch.sketch {
        SketchKind::TensorSrht => {
            let sk = build_tensor_srht(cfg.degree, cfg.num_features, ds.x.ncols(), field, seed)?;
            apply_tensor_srht(&sk, &ds.x)?
        }
        kind => {
            let family = if kind == SketchKind::Gaussian { Family::Gaussian } else { Family::Rademacher };
            let sk = build_unstructured_sketch(SketchSpec {
                family,
                field,
                degree: cfg.degree,
                num_features: cfg.num_features,
                input_dim: ds.x.ncols(),
                seed,
            })?;
            apply_sketch(&sk, &ds.x)?
        }
    };
    emit(args.out.as_deref(), &features_csv(&features))
}

fn cmd_variance(args: &Common) -> Result<()> {
    let cfg: VarianceConfig = read_config(&args.config)?;
    if cfg.num_features == 0 {
        return Err(Error::Config("num_features must be positive".into()));
    }
    let moments = cfg.family.moments();
    let single = var_unstructured(&cfg.x, &cfg.y, cfg.degree, moments)?;
    let bound = sigma_sq_bound(&cfg.x, &cfg.y, cfg.degree, moments.q)?;
    let output = match cfg.family.sketch {
        SketchKind::TensorSrht => {
            let d = HadamardDim::covering(cfg.x.len()).get();
            VarianceOutput {
                single_feature_variance: single,
                variance: var_tensor_srht(&cfg.x, &cfg.y, cfg.degree, cfg.num_features, d, moments)?,
                surrogate: Some(surrogate_var_tensor_srht(
                    &cfg.x,
                    &cfg.y,
                    cfg.degree,
                    cfg.num_features,
                    d,
                    moments,
                )?),
                hadamard_dim: Some(d),
                sigma_sq_bound: bound,
            }
        }
        _ => VarianceOutput {
            single_feature_variance: single,
            variance: single / cfg.num_features as f64,
            surrogate: None,
            hadamard_dim: None,
            sigma_sq_bound: bound,
        },
    };
    emit(args.out.as_deref(), &to_json(&output))
}

fn cmd_allocate(args: &Common) -> Result<()> {
    let cfg: AllocateConfig = read_config(&args.config)?;
    let kernel = cfg.kernel.to_spec()?;
    let ds = load_source(&cfg.data, cfg.preprocess)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let idx = polysketch::eval::subsample_indices(ds.len(), cfg.sample_size, &RngStream::new(seed, 11));
    let sample = DMatrix::from_fn(idx.len(), ds.x.ncols(), |r, c| ds.x[(idx[r], c)]);
    let tables = precompute_objective_tables(&sample, &kernel, cfg.family, cfg.p_max)?;
    let alloc = extended_allocate(cfg.p_min, cfg.p_max, cfg.num_features, &tables)?;
    emit(args.out.as_deref(), &to_json(&alloc))
}

fn cmd_gp(args: &Common) -> Result<()> {
    let cfg: GpConfig = read_config(&args.config)?;
    let kernel = cfg.kernel.to_spec()?;
    let train = load_source(&cfg.train, cfg.preprocess)?;
    let test = load_source(&cfg.test, cfg.preprocess)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let settings = AllocationSettings {
        sample_size: cfg.sample_size,
        p_min: cfg.p_min,
        p_max: cfg.p_max,
    };
    let feats = method_features(&settings, &kernel, &cfg.method.kind, cfg.num_features, seed, &train.x, &test.x)?;
    let noise = NoiseModel::homoscedastic(train.len(), cfg.noise_variance)?;
    let fit = fit_gp(&feats.train, &train.y, &noise)?;
    let mut post = predict(&fit, &feats.test)?;
    if let Some(off) = &feats.variance_offset {
        post = post.with_variance_offset(off)?;
    }
    let mut out = String::from("mean,variance\n");
    for (m, v) in post.mean.iter().zip(&post.variance) {
        out.push_str(&format!("{m:e},{v:e}\n"));
    }
    emit(args.out.as_deref(), &out)
}

fn cmd_bench(args: &Common) -> Result<()> {
    let text = fs::read_to_string(&args.config).map_err(|source| Error::Io {
        path: args.config.display().to_string(),
        source,
    })?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let report = run_experiment(&cfg)?;
    match args.out.clone().or(cfg.output.clone()) {
        Some(dir) => report.write_to(dir),
        None => emit(None, &(report.to_json() + "\n")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Sketch(a) => cmd_sketch(a),
        Command::Variance(a) => cmd_variance(a),
        Command::Allocate(a) => cmd_allocate(a),
        Command::Gp(a) => cmd_gp(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Fig1 {
            d,
            features,
            degrees,
            trials,
            seed,
            out,
        } => {
            let rows = fig1_benchmark(*d, *features, degrees, *trials, *seed)?;
            emit(out.as_deref(), &fig1_csv(&rows))
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
