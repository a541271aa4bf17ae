//! Data ingestion, preprocessing, error metrics and experiment reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{
    classify, dirichlet_transform, exact_gp_reference_real, fit_gp, kl_divergence_diag,
    mnll_classification, mnll_regression, one_hot, predict, NoiseModel, PosteriorSummary,
};
use crate::maclaurin::{
    assemble_features, bias_correction, extended_allocate, precompute_objective_tables,
    random_maclaurin_features, rows_of, FeatureFamily, KernelSpec,
};
use crate::numerics::{derive_seed, HadamardDim, RngStream};
use crate::sketches::{
    approx_kernel, build_unstructured_sketch, rff_features, Family, FeatureMatrix, Field,
    SketchSpec,
};
use crate::stats::{mean_std, SampleSummary};
use crate::variance::{var_unstructured, SketchMoments};

/// Inputs, targets and provenance of a tabular dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Integer class labels, which must be exactly `0..C` with every class
    /// present. Returns the labels and `C`.
    pub fn class_labels(&self) -> Result<(Vec<usize>, usize)> {
        let mut labels = Vec::with_capacity(self.y.len());
        for (i, &v) in self.y.iter().enumerate() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::config(format!("label {v} in row {i} is not a class index")));
            }
            labels.push(v as usize);
        }
        let c = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; c];
        labels.iter().for_each(|&l| seen[l] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!(
                "class labels are not contiguous: class {missing} never occurs"
            )));
        }
        Ok((labels, c))
    }

    /// Rows `idx` of the dataset.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.x.ncols();
        Dataset {
            x: DMatrix::from_fn(idx.len(), d, |r, c| self.x[(idx[r], c)]),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Reads a CSV file with a header row; `label_column` names the target.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_idx = headers.iter().position(|h| h == label_column).ok_or_else(|| {
        Error::config(format!("label column '{label_column}' not found in {}", path.display()))
    })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let width = headers.len();
    let mut values = Vec::new();
    let mut y = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // Line numbers count the header as line 1.
        let line = r + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != width {
            return Err(Error::Parse {
                row: line,
                column: record.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: line,
                column: c + 1,
                message: format!("non-numeric cell '{cell}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: c + 1,
                    message: format!("non-finite value '{cell}'"),
                });
            }
            if c == label_idx {
                y.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = y.len();
    Ok(Dataset {
        x: DMatrix::from_row_slice(n, width - 1, &values),
        y,
        feature_names,
        provenance: path.display().to_string(),
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let (row, column) = e
        .position()
        .map_or((0, 0), |p| (p.line() as usize, 0));
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.display().to_string(),
            source,
        },
        other => Error::Parse {
            row,
            column,
            message: format!("{other:?}"),
        },
    }
}

/// Preprocessing switches, applied in the order center, normalize, pad.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessFlags {
    pub zero_center: bool,
    pub unit_normalize: bool,
    pub pad_pow2: bool,
}

pub fn preprocess(ds: &Dataset, flags: PreprocessFlags) -> Result<Dataset> {
    let mut x = ds.x.clone();
    let n = x.nrows();
    if flags.zero_center && n > 0 {
        for mut col in x.column_iter_mut() {
            let mean = col.sum() / n as f64;
            col.add_scalar_mut(-mean);
        }
    }
    if flags.unit_normalize {
        for (i, mut row) in x.row_iter_mut().enumerate() {
            let norm = row.norm();
            if norm == 0.0 {
                return Err(Error::invalid(format!("row {i} has zero norm and cannot be normalized")));
            }
            row /= norm;
        }
    }
    let mut feature_names = ds.feature_names.clone();
    if flags.pad_pow2 {
        let d = x.ncols();
        let d_pad = HadamardDim::covering(d).get();
        if d_pad > d {
            x = x.resize_horizontally(d_pad, 0.0);
            feature_names.extend((d..d_pad).map(|k| format!("pad_{k}")));
        }
    }
    Ok(Dataset {
        x,
        y: ds.y.clone(),
        feature_names,
        provenance: ds.provenance.clone(),
    })
}

/// `||K - Re(K_hat)||_F / ||K||_F`.
pub fn rel_frobenius_error(k_exact: &DMatrix<f64>, k_hat: &DMatrix<Complex64>) -> Result<f64> {
    if k_exact.nrows() != k_exact.ncols() {
        return Err(Error::dim("rel_frobenius_error square", k_exact.nrows(), k_exact.ncols()));
    }
    if k_exact.shape() != k_hat.shape() {
        return Err(Error::dim("rel_frobenius_error shape", k_exact.nrows(), k_hat.nrows()));
    }
    let denom = k_exact.norm();
    if denom == 0.0 {
        return Err(Error::invalid("exact kernel matrix has zero norm"));
    }
    let diff = k_exact - k_hat.map(|z| z.re);
    Ok(diff.norm() / denom)
}

/// Indices of `min(m, n)` distinct rows drawn uniformly, in sorted order.
pub fn subsample_indices(n: usize, m: usize, stream: &RngStream) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    let mut idx = sample(&mut stream.rng(), n, m).into_vec();
    idx.sort_unstable();
    idx
}

/// Random train/test split; `test_fraction` of the rows (at least one)
/// go to the test side.
pub fn train_test_split(n: usize, test_fraction: f64, stream: &RngStream) -> (Vec<usize>, Vec<usize>) {
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = subsample_indices(n, n_test, stream);
    let mut is_test = vec![false; n];
    test.iter().for_each(|&i| is_test[i] = true);
    let train = (0..n).filter(|&i| !is_test[i]).collect();
    (train, test)
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    /// Draw inputs uniformly from `[0, 1)` instead of standard normal.
    #[serde(default)]
    pub nonnegative: bool,
    /// Number of classes; `None` yields a regression target.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

/// Synthetic inputs with a smooth regression target
/// `sin(3 u^T x / ||x||) + 0.1 eps` with unit `u` or labels `argmax_c u_c^T x`. Both depend
/// on the direction of `x` only, so they survive unit normalization.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0 || spec.d == 0 {
        return Err(Error::config("synthetic data needs n, d >= 1"));
    }
    let mut rng = RngStream::new(spec.seed, 0).rng();
    let x = DMatrix::from_fn(spec.n, spec.d, |_, _| {
        if spec.nonnegative {
            rng.random::<f64>()
        } else {
            rng.sample(StandardNormal)
        }
    });
    let mut rng = RngStream::new(spec.seed, 1).rng();
    let dirs = spec.classes.unwrap_or(1).max(1);
    let mut u = DMatrix::from_fn(spec.d, dirs, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut c in u.column_iter_mut() {
        c.normalize_mut();
    }
    let proj = &x * &u;
    let y = match spec.classes {
        None => (0..spec.n)
            .map(|i| {
                let norm = x.row(i).norm().max(f64::MIN_POSITIVE);
                (3.0 * proj[(i, 0)] / norm).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect(),
        Some(c) if c >= 2 => {
            // Center each direction so every class is plausible.
            let means: Vec<f64> = (0..c).map(|k| proj.column(k).mean()).collect();
            let mut y: Vec<f64> = (0..spec.n)
                .map(|i| {
                    (0..c)
                        .max_by(|&a, &b| {
                            (proj[(i, a)] - means[a]).total_cmp(&(proj[(i, b)] - means[b]))
                        })
                        .unwrap() as f64
                })
                .collect();
            // Guarantee contiguous labels on tiny samples.
            for k in 0..c.min(spec.n) {
                if !y.contains(&(k as f64)) {
                    y[k] = k as f64;
                }
            }
            y
        }
        Some(c) => return Err(Error::config(format!("need at least 2 classes, got {c}"))),
    };
    Ok(Dataset {
        x,
        y,
        feature_names: (0..spec.d).map(|k| format!("x{k}")).collect(),
        provenance: format!("synthetic(n={}, d={}, seed={})", spec.n, spec.d, spec.seed),
    })
}

/// Where the experiment reads its data from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { path: PathBuf, label_column: String },
    Synthetic(SyntheticSpec),
}

/// Kernel as written in a configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Polynomial {
        degree: u32,
        nu: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    Exponential {
        lengthscale: f64,
    },
    Gaussian {
        lengthscale: f64,
    },
    /// `amplitude (1 - ||x - y||^2 / a^2)^degree` for unit-norm inputs.
    UnitSpherePolynomial {
        degree: u32,
        a: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl KernelConfig {
    pub fn to_spec(self) -> Result<KernelSpec> {
        let spec = match self {
            KernelConfig::Polynomial { degree, nu, scale } => KernelSpec::Polynomial { degree, nu, scale },
            KernelConfig::Exponential { lengthscale } => KernelSpec::Exponential { lengthscale },
            KernelConfig::Gaussian { lengthscale } => KernelSpec::Gaussian { lengthscale },
            KernelConfig::UnitSpherePolynomial { degree, a, amplitude } => {
                if !(a > 0.0) {
                    return Err(Error::config("parameter a must be positive"));
                }
                KernelSpec::unit_sphere_polynomial(degree, a, amplitude)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A feature construction compared in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodKind {
    OptimizedMaclaurin {
        family: FeatureFamily,
        #[serde(default)]
        bias_correction: bool,
    },
    RandomMaclaurin {
        family: FeatureFamily,
        #[serde(default = "default_c")]
        c: f64,
    },
    /// Random Fourier features; Gaussian kernel only.
    Rff { field: Field },
}

fn default_c() -> f64 {
    2.0
}

/// A named method. Unknown keys are rejected by the flattened `kind` enum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: MethodKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Frobenius,
    GpRegression,
    GpClassification,
}

/// Full description of a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub kernel: KernelConfig,
    pub methods: Vec<MethodConfig>,
    /// Feature budgets `D` to sweep.
    pub num_features: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub preprocess: PreprocessFlags,
    pub task: Task,
    /// Sample size `m` for the allocation objective.
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    /// Maximum number of test points used by the Frobenius metric.
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Fixed test rows; overrides the per-seed random split.
    #[serde(default)]
    pub test_indices: Option<Vec<usize>>,
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    #[serde(default = "default_alpha")]
    pub dirichlet_alpha: f64,
    #[serde(default = "default_p_min")]
    pub p_min: usize,
    #[serde(default = "default_p_max")]
    pub p_max: usize,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_sample_size() -> usize {
    5000
}
fn default_test_size() -> usize {
    1000
}
fn default_test_fraction() -> f64 {
    0.1
}
fn default_noise() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    0.01
}
fn default_p_min() -> usize {
    2
}
fn default_p_max() -> usize {
    10
}
fn default_n_mc() -> usize {
    256
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn allocation_settings(&self) -> AllocationSettings {
        AllocationSettings {
            sample_size: self.sample_size,
            p_min: self.p_min,
            p_max: self.p_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.to_spec()?;
        if self.methods.is_empty() || self.num_features.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("methods, num_features and seeds must be nonempty"));
        }
        let mut names: Vec<&str> = self.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("method names must be unique"));
        }
        if self.num_features.contains(&0) {
            return Err(Error::config("feature counts must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must lie in (0, 1)"));
        }
        if self.p_min == 0 || self.p_min > self.p_max {
            return Err(Error::config("need 1 <= p_min <= p_max"));
        }
        if !(self.noise_variance > 0.0) || !(self.dirichlet_alpha > 0.0) {
            return Err(Error::config("noise_variance and dirichlet_alpha must be positive"));
        }
        for m in &self.methods {
            if let MethodKind::Rff { .. } = m.kind {
                if !matches!(self.kernel, KernelConfig::Gaussian { .. }) {
                    return Err(Error::config(format!(
                        "method '{}' uses RFF, which needs the Gaussian kernel",
                        m.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Metrics of one (method, D, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub num_features: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_star: Option<usize>,
}

/// Mean and standard deviation of a metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub num_features: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub method: String,
    pub num_features: usize,
    pub seed: u64,
    pub seconds: f64,
}

/// Results of [`run_experiment`]. Wall-clock timings are kept out of the
/// JSON form so that reports are byte-for-byte reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    #[serde(skip)]
    pub timings: Vec<RunTiming>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV row per run and metric.
    pub fn runs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "num_features", "seed", "metric", "value"])
            .expect("in-memory write");
        for r in &self.runs {
            for (k, v) in &r.metrics {
                w.write_record([
                    r.method.clone(),
                    r.num_features.to_string(),
                    r.seed.to_string(),
                    k.clone(),
                    format!("{v:.17e}"),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn timings_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "num_features", "seed", "seconds"])
            .expect("in-memory write");
        for t in &self.timings {
            w.write_record([
                t.method.clone(),
                t.num_features.to_string(),
                t.seed.to_string(),
                format!("{:.6}", t.seconds),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// Writes `report.json`, `runs.csv` and `timings.csv` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let io = |path: &Path, e| Error::Io {
            path: path.display().to_string(),
            source: e,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, body) in [
            ("report.json", self.to_json()),
            ("runs.csv", self.runs_csv()),
            ("timings.csv", self.timings_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| io(&p, e))?;
        }
        Ok(())
    }

    pub fn metric(&self, method: &str, num_features: usize, seed: u64, metric: &str) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.method == method && r.num_features == num_features && r.seed == seed)
            .and_then(|r| r.metrics.get(metric).copied())
    }
}

/// Loads and preprocesses the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let raw = match &cfg.data {
        DataSource::Csv { path, label_column } => load_csv(path, label_column)?,
        DataSource::Synthetic(spec) => synthetic_dataset(spec)?,
    };
    preprocess(&raw, cfg.preprocess)
}

/// Settings of the allocation objective shared by all optimized methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationSettings {
    pub sample_size: usize,
    pub p_min: usize,
    pub p_max: usize,
}

/// Train and test features produced by one method under a shared map.
#[derive(Debug, Clone)]
pub struct MethodFeatures {
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
    /// Truncation degree chosen by the optimized Maclaurin method.
    pub p_star: Option<usize>,
    /// Per-test-point variance correction, when requested.
    pub variance_offset: Option<Vec<f64>>,
}

/// Features for `train` and `test` rows from the same random map. The map
/// seed is `derive_seed(seed, D)`, so equal methods agree for equal seeds.
pub fn method_features(
    cfg: &AllocationSettings,
    kernel: &KernelSpec,
    method: &MethodKind,
    big_d: usize,
    seed: u64,
    train: &DMatrix<f64>,
    test: &DMatrix<f64>,
) -> Result<MethodFeatures> {
    if train.ncols() != test.ncols() {
        return Err(Error::dim("method_features test columns", train.ncols(), test.ncols()));
    }
    let feature_seed = derive_seed(seed, big_d as u64);
    // Train and test rows go through one map so they share the weights.
    let all = DMatrix::from_fn(train.nrows() + test.nrows(), train.ncols(), |r, c| {
        if r < train.nrows() {
            train[(r, c)]
        } else {
            test[(r - train.nrows(), c)]
        }
    });
    let split = |f: FeatureMatrix| -> Result<(FeatureMatrix, FeatureMatrix)> {
        let m = f.matrix();
        let n = train.nrows();
        let a = FeatureMatrix::new(m.rows(0, n).into_owned(), f.is_real())?;
        let b = FeatureMatrix::new(m.rows(n, m.nrows() - n).into_owned(), f.is_real())?;
        Ok((a, b))
    };
    match method {
        MethodKind::OptimizedMaclaurin {
            family,
            bias_correction: correct,
        } => {
            let idx = subsample_indices(train.nrows(), cfg.sample_size, &RngStream::new(seed, 11));
            let sample = DMatrix::from_fn(idx.len(), train.ncols(), |r, c| train[(idx[r], c)]);
            let tables = precompute_objective_tables(&sample, kernel, *family, cfg.p_max)?;
            let alloc = extended_allocate(cfg.p_min, cfg.p_max, big_d, &tables)?;
            let f = assemble_features(kernel, &alloc, *family, feature_seed, &all)?;
            let (tr, te) = split(f)?;
            let offset = correct.then(|| {
                rows_of(test)
                    .iter()
                    .map(|x| bias_correction(kernel, alloc.p_star, x))
                    .collect()
            });
            Ok(MethodFeatures {
                train: tr,
                test: te,
                p_star: Some(alloc.p_star),
                variance_offset: offset,
            })
        }
        MethodKind::RandomMaclaurin { family, c } => {
            let (f, _) = random_maclaurin_features(kernel, big_d, cfg.p_max, *c, *family, feature_seed, &all)?;
            let (tr, te) = split(f)?;
            Ok(MethodFeatures {
                train: tr,
                test: te,
                p_star: None,
                variance_offset: None,
            })
        }
        MethodKind::Rff { field } => {
            let KernelSpec::Gaussian { lengthscale } = *kernel else {
                return Err(Error::config("RFF needs the Gaussian kernel"));
            };
            let f = rff_features(lengthscale, big_d, all.ncols(), *field, feature_seed, &all)?;
            let (tr, te) = split(f)?;
            Ok(MethodFeatures {
                train: tr,
                test: te,
                p_star: None,
                variance_offset: None,
            })
        }
    }
}

fn population_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
}

/// Squared error normalized by the (population) variance of the targets.
pub fn normalized_mse(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || y.is_empty() {
        return Err(Error::dim("normalized_mse", y.len(), pred.len()));
    }
    let var = population_variance(y);
    if var == 0.0 {
        return Err(Error::invalid("test targets have zero variance"));
    }
    let mse = pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64;
    Ok(mse / var)
}

struct SeedContext {
    train: Dataset,
    test: Dataset,
    exact: Option<PosteriorSummary>,
    k_test: Option<DMatrix<f64>>,
    frob_rows: Vec<usize>,
}

fn prepare_seed(cfg: &ExperimentConfig, kernel: &KernelSpec, ds: &Dataset, seed: u64) -> Result<SeedContext> {
    let n = ds.len();
    if n < 3 {
        return Err(Error::config("dataset needs at least 3 rows"));
    }
    let (train_idx, test_idx) = match &cfg.test_indices {
        Some(fixed) => {
            if let Some(&bad) = fixed.iter().find(|&&i| i >= n) {
                return Err(Error::config(format!("test index {bad} out of range")));
            }
            let mut is_test = vec![false; n];
            fixed.iter().for_each(|&i| is_test[i] = true);
            ((0..n).filter(|&i| !is_test[i]).collect(), fixed.clone())
        }
        None => train_test_split(n, cfg.test_fraction, &RngStream::new(seed, 10)),
    };
    let train = ds.select(&train_idx);
    let test = ds.select(&test_idx);
    let mut ctx = SeedContext {
        train,
        test,
        exact: None,
        k_test: None,
        frob_rows: Vec::new(),
    };
    match cfg.task {
        Task::Frobenius => {
            ctx.frob_rows = subsample_indices(ctx.test.len(), cfg.test_size, &RngStream::new(seed, 12));
            let sub = ctx.test.select(&ctx.frob_rows);
            ctx.k_test = Some(kernel.matrix(&sub.x, &sub.x));
        }
        Task::GpRegression => {
            let noise = NoiseModel::homoscedastic(ctx.train.len(), cfg.noise_variance)?;
            let k_train = kernel.matrix(&ctx.train.x, &ctx.train.x);
            let k_cross = kernel.matrix(&ctx.test.x, &ctx.train.x);
            let diag: Vec<f64> = rows_of(&ctx.test.x).iter().map(|x| kernel.eval(x, x)).collect();
            ctx.exact = Some(exact_gp_reference_real(&k_train, &k_cross, &diag, &ctx.train.y, &noise)?);
        }
        Task::GpClassification => {
            ds.class_labels()?;
        }
    }
    Ok(ctx)
}

fn run_one(
    cfg: &ExperimentConfig,
    kernel: &KernelSpec,
    ctx: &SeedContext,
    method: &MethodConfig,
    big_d: usize,
    seed: u64,
) -> Result<(RunRecord, RunTiming)> {
    let start = Instant::now();
    let built = method_features(&cfg.allocation_settings(), kernel, &method.kind, big_d, seed, &ctx.train.x, &ctx.test.x)?;
    let mut metrics = BTreeMap::new();
    match cfg.task {
        Task::Frobenius => {
            let rows: Vec<Vec<_>> = ctx.frob_rows.iter().map(|&r| built.test.row(r)).collect();
            let cols = built.test.cols();
            let f = FeatureMatrix::new(
                DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]),
                built.test.is_real(),
            )?;
            let k_hat = f.gram(&f)?;
            let k = ctx.k_test.as_ref().expect("prepared for the Frobenius task");
            metrics.insert("rel_frobenius".to_string(), rel_frobenius_error(k, &k_hat)?);
        }
        Task::GpRegression => {
            let noise = NoiseModel::homoscedastic(ctx.train.len(), cfg.noise_variance)?;
            let fit = fit_gp(&built.train, &ctx.train.y, &noise)?;
            let mut post = predict(&fit, &built.test)?;
            if let Some(off) = &built.variance_offset {
                post = post.with_variance_offset(off)?;
            }
            let exact = ctx.exact.as_ref().expect("prepared for regression");
            let add_noise = |v: &[f64]| -> Vec<f64> { v.iter().map(|s| s + cfg.noise_variance).collect() };
            metrics.insert(
                "kl".to_string(),
                kl_divergence_diag(&post.mean, &add_noise(&post.variance), &exact.mean, &add_noise(&exact.variance))?,
            );
            metrics.insert("mnll".to_string(), mnll_regression(&post, &ctx.test.y, cfg.noise_variance)?);
            metrics.insert("nmse".to_string(), normalized_mse(&post.mean, &ctx.test.y)?);
        }
        Task::GpClassification => {
            let (train_labels, c) = ctx.train.class_labels()?;
            let (test_labels, _) = (
                ctx.test.y.iter().map(|&v| v as usize).collect::<Vec<_>>(),
                c,
            );
            let targets = dirichlet_transform(&one_hot(&train_labels, c)?, cfg.dirichlet_alpha)?;
            let fits = targets
                .iter()
                .map(|t| fit_gp(&built.train, &t.targets, &NoiseModel::heteroscedastic(t.variances.clone())?))
                .collect::<Result<Vec<_>>>()?;
            let probs = classify(&fits, &built.test, cfg.n_mc, &RngStream::new(seed, 13))?;
            let wrong = (0..probs.nrows())
                .filter(|&i| {
                    let row = probs.row(i);
                    let arg = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                    arg != test_labels[i]
                })
                .count();
            metrics.insert("error_rate".to_string(), wrong as f64 / test_labels.len() as f64);
            metrics.insert("mnll".to_string(), mnll_classification(&probs, &test_labels)?);
        }
    }
    let record = RunRecord {
        method: method.name.clone(),
        num_features: big_d,
        seed,
        metrics,
        p_star: built.p_star,
    };
    let timing = RunTiming {
        method: method.name.clone(),
        num_features: big_d,
        seed,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((record, timing))
}

/// Runs every (seed, method, D) combination and aggregates across seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let kernel = cfg.kernel.to_spec()?;
    let ds = load_dataset(cfg)?;
    let per_seed: Vec<Result<Vec<(RunRecord, RunTiming)>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let ctx = prepare_seed(cfg, &kernel, &ds, seed).map_err(|e| e.context(format!("seed {seed}")))?;
            let mut out = Vec::new();
            for method in &cfg.methods {
                for &big_d in &cfg.num_features {
                    out.push(run_one(cfg, &kernel, &ctx, method, big_d, seed).map_err(|e| {
                        e.context(format!("method '{}', D={big_d}, seed {seed}", method.name))
                    })?);
                }
            }
            Ok(out)
        })
        .collect();
    let mut runs = Vec::new();
    let mut timings = Vec::new();
    for r in per_seed {
        for (rec, t) in r? {
            runs.push(rec);
            timings.push(t);
        }
    }
    let mut aggregates = Vec::new();
    for method in &cfg.methods {
        for &big_d in &cfg.num_features {
            let selected: Vec<&RunRecord> = runs
                .iter()
                .filter(|r| r.method == method.name && r.num_features == big_d)
                .collect();
            let metric_names: Vec<String> = selected
                .first()
                .map(|r| r.metrics.keys().cloned().collect())
                .unwrap_or_default();
            for metric in metric_names {
                let vals: Vec<f64> = selected.iter().map(|r| r.metrics[&metric]).collect();
                let (mean, std) = mean_std(&vals);
                aggregates.push(Aggregate {
                    method: method.name.clone(),
                    num_features: big_d,
                    metric,
                    mean,
                    std,
                    count: vals.len(),
                });
            }
        }
    }
    Ok(Report {
        runs,
        aggregates,
        timings,
    })
}

/// One row of the real-versus-complex Rademacher comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Row {
    pub p: u32,
    pub method: String,
    /// Mean of `|Re k_hat(x, x) - 1|` over the trials.
    pub mae: f64,
    pub stderr: f64,
    /// Closed-form variance of `k_hat` at this `D`.
    pub predicted_variance: f64,
}

/// Mean absolute error of real and complex Rademacher sketches at
/// `x = y = (1, ..., 1) / sqrt(d)`, where the exact kernel value is 1.
pub fn fig1_benchmark(d: usize, big_d: usize, p_list: &[u32], trials: usize, seed: u64) -> Result<Vec<Fig1Row>> {
    if d == 0 || big_d == 0 || trials == 0 {
        return Err(Error::invalid("fig1 needs d, D and trials >= 1"));
    }
    let x = vec![1.0 / (d as f64).sqrt(); d];
    let mut rows = Vec::new();
    for &p in p_list {
        if p == 0 {
            return Err(Error::invalid("degrees must be at least 1"));
        }
        for (name, field) in [("real_rademacher", Field::Real), ("complex_rademacher", Field::Complex)] {
            let errors: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let sk = build_unstructured_sketch(SketchSpec {
                        family: Family::Rademacher,
                        field,
                        degree: p as usize,
                        num_features: big_d,
                        input_dim: d,
                        seed: derive_seed(seed, ((p as u64) << 32) | t as u64),
                    })?;
                    let f = sk.feature_row(&x)?;
                    Ok((approx_kernel(&f, &f)?.re - 1.0).abs())
                })
                .collect::<Result<_>>()?;
            let s = SampleSummary::from_slice(&errors);
            let moments = SketchMoments::for_sketch(Family::Rademacher, field);
            rows.push(Fig1Row {
                p,
                method: name.to_string(),
                mae: s.mean,
                stderr: s.se_mean(),
                predicted_variance: var_unstructured(&x, &x, p, moments)? / big_d as f64,
            });
        }
    }
    Ok(rows)
}

/// CSV form of [`fig1_benchmark`] output.
pub fn fig1_csv(rows: &[Fig1Row]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_examples() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let kc = k.map(|v| Complex64::new(v, 0.0));
        assert_eq!(rel_frobenius_error(&k, &kc).unwrap(), 0.0);
        assert_eq!(rel_frobenius_error(&k, &DMatrix::zeros(2, 2)).unwrap(), 1.0);
        let kh = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]).map(|v| Complex64::new(v, 5.0));
        assert!((rel_frobenius_error(&k, &kh).unwrap() - 0.5).abs() < 1e-15);
        assert!(rel_frobenius_error(&DMatrix::zeros(2, 2), &kh).is_err());
    }

    #[test]
    fn subsample_edges() {
        assert_eq!(subsample_indices(4, 10, &RngStream::new(0, 0)), vec![0, 1, 2, 3]);
        let s = subsample_indices(100, 10, &RngStream::new(0, 0));
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        let (tr, te) = train_test_split(50, 0.1, &RngStream::new(1, 0));
        assert_eq!((tr.len(), te.len()), (45, 5));
    }

    #[test]
    fn nmse_of_mean_predictor_is_one() {
        let y = [0.3, -1.2, 2.5, 0.1, 0.7];
        let mean = y.iter().sum::<f64>() / 5.0;
        assert!((normalized_mse(&[mean; 5], &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn method_config_rejects_unknown_keys() {
        let ok: MethodConfig = serde_json::from_str(r#"{"name":"a","kind":"rff","field":"real"}"#).unwrap();
        assert_eq!(ok.name, "a");
        let bad = r#"{"name":"a","kind":"rff","field":"real","bogus":1}"#;
        assert!(serde_json::from_str::<MethodConfig>(bad).is_err());
    }
}
