//! Dataset loading, noise injection, and the two Monte Carlo experiments:
//! clustering noisy copies of a labelled dataset, and comparing fitted
//! codebooks with their high-resolution predictions.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::highres::{
    csv_error, inverse_transform_codebook, optimal_point_density, theorem2_prediction,
    DensityModel,
};
use crate::lloyd::{best_run, fit_all_restarts, fit_multistart, FitHistory, FitOptions};
use crate::metrics::{ami, ari};
use crate::model::{Codebook, DistortionSpec, MultiDataset, Partition};
use crate::quantizer::{assign, empirical_distortion};

pub const NOISY_SCHEMA: &str = "multiquant.experiment.noisy/1";
pub const HIGHRES_SCHEMA: &str = "multiquant.experiment.highres/1";
pub const GROUND_TRUTH_RESTARTS: usize = 10;

/// Fixed-width float formatting with 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Which CSV columns hold features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSelect {
    /// Zero-based column indices; every column when absent.
    #[serde(default)]
    pub include: Option<Vec<usize>>,
    /// Header names to drop, such as a class label.
    #[serde(default)]
    pub exclude: Vec<String>,
}

/// Reads numeric rows into a single-observation dataset. A first row with
/// any non-numeric field is taken as the header.
pub fn load_csv(path: &Path, columns: &ColumnSelect) -> Result<MultiDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut header: Option<Vec<String>> = None;
    let mut width = None;
    let mut keep: Vec<usize> = Vec::new();
    let mut points = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(idx + 1, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match width {
            None => {
                width = Some(rec.len());
                if idx == 0 && rec.iter().any(|f| f.parse::<f64>().is_err()) {
                    header = Some(rec.iter().map(str::to_string).collect());
                }
                keep = select_columns(path, rec.len(), header.as_deref(), columns)?;
                if header.is_some() {
                    continue;
                }
            }
            Some(w) if w != rec.len() => {
                return Err(Error::RaggedRows {
                    path: path.to_path_buf(),
                    line,
                    expected: w,
                    found: rec.len(),
                })
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(keep.len());
        for &c in &keep {
            let v = rec[c].parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column {c}: {e}"),
            })?;
            row.push(v);
        }
        points.push(row);
    }
    MultiDataset::from_points(&points)
}

fn select_columns(
    path: &Path,
    width: usize,
    header: Option<&[String]>,
    columns: &ColumnSelect,
) -> Result<Vec<usize>> {
    let mut keep: Vec<usize> = match &columns.include {
        Some(cols) => cols.clone(),
        None => (0..width).collect(),
    };
    if let Some(&c) = keep.iter().find(|&&c| c >= width) {
        return Err(Error::InvalidConfig(format!(
            "{}: column {c} does not exist (width {width})",
            path.display()
        )));
    }
    if !columns.exclude.is_empty() {
        let Some(names) = header else {
            return Err(Error::InvalidConfig(format!(
                "{}: columns can only be excluded by name when the file has a header",
                path.display()
            )));
        };
        for name in &columns.exclude {
            let Some(pos) = names.iter().position(|h| h == name) else {
                return Err(Error::InvalidConfig(format!(
                    "{}: no column named {name:?}",
                    path.display()
                )));
            };
            keep.retain(|&c| c != pos);
        }
    }
    if keep.is_empty() {
        return Err(Error::InvalidConfig("no feature columns selected".into()));
    }
    Ok(keep)
}

/// Divides every coordinate by its sample standard deviation. Means are
/// left in place.
pub fn standardize(ds: &MultiDataset) -> Result<MultiDataset> {
    let m = ds.len();
    if m < 2 {
        return Err(Error::InvalidOption(
            "standardizing needs at least two samples".into(),
        ));
    }
    let width = ds.observations() * ds.dim();
    let flat = ds.as_flat();
    let mut scale = vec![0.0; width];
    for (c, s) in scale.iter_mut().enumerate() {
        let mean = (0..m).map(|i| flat[i * width + c]).sum::<f64>() / m as f64;
        let ss: f64 = (0..m).map(|i| (flat[i * width + c] - mean).powi(2)).sum();
        let sd = (ss / (m - 1) as f64).sqrt();
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(Error::ZeroVariance { column: c });
        }
        *s = sd;
    }
    let data = flat
        .iter()
        .enumerate()
        .map(|(k, x)| x / scale[k % width])
        .collect();
    MultiDataset::from_flat(data, m, ds.observations(), ds.dim())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseKind {
    /// Independent normal coordinates with this variance.
    Gaussian { variance: f64 },
    /// Independent coordinates uniform on `[−half_width, half_width]`.
    Uniform { half_width: f64 },
}

impl NoiseKind {
    pub fn validate(&self) -> Result<()> {
        let p = match *self {
            NoiseKind::Gaussian { variance } => variance,
            NoiseKind::Uniform { half_width } => half_width,
        };
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise parameter {p} must be positive"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub observations: usize,
    pub seed: u64,
}

/// Builds `L` noisy observations of every clean sample.
pub fn inject_noise(clean: &MultiDataset, spec: &NoiseSpec) -> Result<MultiDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    inject_noise_with(clean, spec.kind, spec.observations, &mut rng)
}

pub fn inject_noise_with<R: Rng + ?Sized>(
    clean: &MultiDataset,
    kind: NoiseKind,
    observations: usize,
    rng: &mut R,
) -> Result<MultiDataset> {
    kind.validate()?;
    if observations == 0 {
        return Err(Error::InvalidConfig("need at least one observation".into()));
    }
    if clean.observations() != 1 {
        return Err(Error::DimensionMismatch(
            "clean data must have one observation per sample".into(),
        ));
    }
    let (m, d) = (clean.len(), clean.dim());
    let mut data = Vec::with_capacity(m * observations * d);
    let mut fill = |draw: &mut dyn FnMut() -> f64| {
        for s in clean.samples() {
            let x = s.observation(0);
            for _ in 0..observations {
                data.extend(x.iter().map(|v| v + draw()));
            }
        }
    };
    match kind {
        NoiseKind::Gaussian { variance } => {
            let dist = Normal::new(0.0, variance.sqrt())
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            fill(&mut || dist.sample(rng));
        }
        NoiseKind::Uniform { half_width } => {
            let dist = Uniform::new_inclusive(-half_width, half_width)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            fill(&mut || dist.sample(rng));
        }
    }
    MultiDataset::from_flat(data, m, observations, d)
}

fn kmeans_spec() -> DistortionSpec {
    DistortionSpec::uniform(2.0, 1).expect("valid")
}

fn partition_of(cb: &Codebook, ds: &MultiDataset, spec: &DistortionSpec) -> Result<Partition> {
    assign(cb, ds, spec)?.partition(cb.len())
}

/// Reference clustering of the clean data: best of several k-means runs.
pub fn ground_truth_partition(clean: &MultiDataset, n: usize, seed: u64) -> Result<Partition> {
    let ds = clean.concat_view();
    let spec = kmeans_spec();
    let opts = FitOptions::new(n, seed).with_restarts(GROUND_TRUTH_RESTARTS);
    let (cb, _) = fit_multistart(&ds, &spec, &opts)?;
    partition_of(&cb, &ds, &spec)
}

/// Independent stream for trial `t` of an experiment seeded with `seed`.
pub fn trial_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64 + 1);
    rng
}

fn default_true() -> bool {
    true
}

fn default_r() -> f64 {
    2.0
}

fn default_trials() -> usize {
    200
}

fn default_restarts() -> usize {
    10
}

fn default_highres_restarts() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyConfig {
    pub schema: String,
    /// CSV file with the clean data.
    pub dataset: PathBuf,
    #[serde(default)]
    pub columns: ColumnSelect,
    #[serde(default = "default_true")]
    pub standardize: bool,
    pub noise: NoiseKind,
    pub observations: usize,
    /// Codebook sizes to sweep.
    pub n: Vec<usize>,
    #[serde(default = "default_r")]
    pub r: f64,
    /// Observation weights; all ones when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

impl NoisyConfig {
    pub fn spec(&self) -> Result<DistortionSpec> {
        match &self.weights {
            Some(w) => {
                if w.len() != self.observations {
                    return Err(Error::InvalidConfig(format!(
                        "{} weights for {} observations",
                        w.len(),
                        self.observations
                    )));
                }
                DistortionSpec::new(self.r, w.clone())
            }
            None => DistortionSpec::uniform(self.r, self.observations),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != NOISY_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "schema {:?} is not {NOISY_SCHEMA:?}",
                self.schema
            )));
        }
        if self.trials == 0 || self.restarts == 0 {
            return Err(Error::InvalidConfig("trials and restarts must be positive".into()));
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return Err(Error::InvalidConfig("n must be a nonempty list of positive sizes".into()));
        }
        self.noise.validate()?;
        self.spec().map(|_| ())
    }
}

/// Mean and normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub ci_half: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let t = values.len() as f64;
        let mean = values.iter().sum::<f64>() / t;
        let ci_half = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1.0);
            1.96 * (var / t).sqrt()
        };
        Self { mean, ci_half }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// k-means on the concatenated observation vectors.
    Ordinary,
    /// Common centers under the weighted multi-observation distortion.
    Proposed,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ordinary => "ordinary",
            Method::Proposed => "proposed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n: usize,
    pub ari: Summary,
    pub ami: Summary,
    /// Each method's own objective, so values are not comparable across methods.
    pub distortion: Summary,
    /// Restart histories whose distortion ever increased.
    pub non_monotone: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoisyResult {
    pub schema: &'static str,
    pub trials: usize,
    pub seed: u64,
    pub histories: usize,
    pub rows: Vec<MethodSummary>,
}

impl NoisyResult {
    pub fn get(&self, method: Method, n: usize) -> Option<&MethodSummary> {
        self.rows.iter().find(|r| r.method == method && r.n == n)
    }

    pub fn non_monotone(&self) -> usize {
        self.rows.iter().map(|r| r.non_monotone).sum()
    }

    /// Long format: `method,n,metric,mean,ci_half`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["method", "n", "metric", "mean", "ci_half"]).map_err(io)?;
        for row in &self.rows {
            for (metric, s) in [("ari", row.ari), ("ami", row.ami), ("distortion", row.distortion)] {
                out.write_record([
                    row.method.as_str(),
                    &row.n.to_string(),
                    metric,
                    &fmt_float(s.mean),
                    &fmt_float(s.ci_half),
                ])
                .map_err(io)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

struct Outcome {
    ari: f64,
    ami: f64,
    distortion: f64,
    non_monotone: usize,
}

fn fit_and_score(
    ds: &MultiDataset,
    spec: &DistortionSpec,
    opts: &FitOptions,
    truth: &Partition,
) -> Result<Outcome> {
    let runs = fit_all_restarts(ds, spec, opts)?;
    let non_monotone = runs.iter().filter(|(_, h)| !h.is_monotone()).count();
    let (cb, _) = best_run(runs).expect("restarts >= 1");
    let labels = partition_of(&cb, ds, spec)?;
    Ok(Outcome {
        ari: ari(truth, &labels)?,
        ami: ami(truth, &labels)?,
        distortion: cb.fit_info.distortion,
        non_monotone,
    })
}

/// Loads the configured dataset and runs the noisy clustering experiment.
pub fn run_noisy_experiment(cfg: &NoisyConfig) -> Result<NoisyResult> {
    cfg.validate()?;
    let raw = load_csv(&cfg.dataset, &cfg.columns)?;
    let clean = if cfg.standardize { standardize(&raw)? } else { raw };
    run_noisy_on(&clean, cfg)
}

/// Runs the noisy clustering experiment on already loaded clean data. Each
/// trial draws one noisy dataset, shared by every codebook size and both
/// methods.
pub fn run_noisy_on(clean: &MultiDataset, cfg: &NoisyConfig) -> Result<NoisyResult> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let truths: Vec<Partition> = cfg
        .n
        .iter()
        .map(|&n| ground_truth_partition(clean, n, cfg.seed))
        .collect::<Result<_>>()?;
    let trials: Vec<Vec<(Outcome, Outcome)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, t);
            let noisy = inject_noise_with(clean, cfg.noise, cfg.observations, &mut rng)?;
            let concat = noisy.concat_view();
            cfg.n
                .iter()
                .zip(&truths)
                .map(|(&n, truth)| {
                    let opts = FitOptions::new(n, rng.random()).with_restarts(cfg.restarts);
                    let ordinary = fit_and_score(&concat, &kmeans_spec(), &opts, truth)?;
                    let proposed = fit_and_score(&noisy, &spec, &opts, truth)?;
                    Ok((ordinary, proposed))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (k, &n) in cfg.n.iter().enumerate() {
        for method in [Method::Ordinary, Method::Proposed] {
            let pick = |t: &[(Outcome, Outcome)]| match method {
                Method::Ordinary => (t[k].0.ari, t[k].0.ami, t[k].0.distortion, t[k].0.non_monotone),
                Method::Proposed => (t[k].1.ari, t[k].1.ami, t[k].1.distortion, t[k].1.non_monotone),
            };
            let picked: Vec<_> = trials.iter().map(|t| pick(t)).collect();
            let collect = |f: fn(&(f64, f64, f64, usize)) -> f64| -> Vec<f64> {
                picked.iter().map(f).collect()
            };
            rows.push(MethodSummary {
                method,
                n,
                ari: Summary::of(&collect(|o| o.0)),
                ami: Summary::of(&collect(|o| o.1)),
                distortion: Summary::of(&collect(|o| o.2)),
                non_monotone: picked.iter().map(|o| o.3).sum(),
            });
        }
    }
    Ok(NoisyResult {
        schema: NOISY_SCHEMA,
        trials: cfg.trials,
        seed: cfg.seed,
        histories: 2 * cfg.trials * cfg.n.len() * cfg.restarts,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighResConfig {
    pub schema: String,
    pub r: f64,
    /// Weights of the second observation; the first has weight 1.
    pub lambdas: Vec<f64>,
    pub n: Vec<usize>,
    /// Number of independent uniform pairs drawn.
    pub m: usize,
    pub seed: u64,
    #[serde(default = "default_highres_restarts")]
    pub restarts: usize,
}

impl HighResConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != HIGHRES_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "schema {:?} is not {HIGHRES_SCHEMA:?}",
                self.schema
            )));
        }
        if !(self.r > 1.0 && self.r.is_finite()) {
            return Err(Error::InvalidPower(self.r));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidConfig("lambdas must be positive".into()));
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return Err(Error::InvalidConfig("n must be a nonempty list of positive sizes".into()));
        }
        if self.m == 0 || self.restarts == 0 {
            return Err(Error::InvalidConfig("m and restarts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HighResRow {
    pub r: f64,
    pub lambda: f64,
    pub n: usize,
    /// Codebook from the optimal point density, ascending.
    pub analytical: Vec<f64>,
    /// Fitted codebook, ascending.
    pub numerical: Vec<f64>,
    pub max_gap: f64,
    /// Largest gap excluding the two outermost points.
    pub interior_gap: f64,
    /// High-resolution prediction of the optimal distortion.
    pub predicted: f64,
    /// Distortion of the fitted codebook on the sample.
    pub empirical: f64,
    /// Distortion of the analytical codebook on the same sample.
    pub analytical_distortion: f64,
    pub non_monotone: usize,
}

impl HighResRow {
    /// `|predicted − empirical| / empirical`.
    pub fn distortion_gap(&self) -> f64 {
        (self.predicted - self.empirical).abs() / self.empirical
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HighResResult {
    pub schema: &'static str,
    pub rows: Vec<HighResRow>,
}

impl HighResResult {
    /// One row per center: `r,lambda,n,index,analytical,numerical,gap`.
    pub fn write_centers_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["r", "lambda", "n", "index", "analytical", "numerical", "gap"])
            .map_err(io)?;
        for row in &self.rows {
            for (i, (a, b)) in row.analytical.iter().zip(&row.numerical).enumerate() {
                out.write_record([
                    fmt_float(row.r),
                    fmt_float(row.lambda),
                    row.n.to_string(),
                    i.to_string(),
                    fmt_float(*a),
                    fmt_float(*b),
                    fmt_float((a - b).abs()),
                ])
                .map_err(io)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// One row per configuration:
    /// `r,lambda,n,predicted,empirical,analytical_distortion,relative_gap`.
    pub fn write_distortions_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record([
            "r",
            "lambda",
            "n",
            "predicted",
            "empirical",
            "analytical_distortion",
            "relative_gap",
        ])
        .map_err(io)?;
        for row in &self.rows {
            out.write_record([
                fmt_float(row.r),
                fmt_float(row.lambda),
                row.n.to_string(),
                fmt_float(row.predicted),
                fmt_float(row.empirical),
                fmt_float(row.analytical_distortion),
                fmt_float(row.distortion_gap()),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `m` independent pairs of uniform `[0, 1]` scalars.
pub fn uniform_pairs(m: usize, seed: u64) -> Result<MultiDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2 * m).map(|_| rng.random::<f64>()).collect();
    MultiDataset::from_flat(data, m, 2, 1)
}

fn sorted_points(cb: &Codebook) -> Vec<f64> {
    let mut pts: Vec<f64> = cb.centers().map(|c| c[0]).collect();
    pts.sort_by(f64::total_cmp);
    pts
}

/// Compares fitted scalar codebooks for independent uniform pairs with the
/// codebooks and distortions predicted by the high-resolution theory.
pub fn run_highres_experiment(cfg: &HighResConfig) -> Result<HighResResult> {
    cfg.validate()?;
    let ds = uniform_pairs(cfg.m, cfg.seed)?;
    let model = DensityModel::uniform_cube(1, 2)?;
    let mut rows = Vec::new();
    for &lambda in &cfg.lambdas {
        let spec = DistortionSpec::new(cfg.r, vec![1.0, lambda])?;
        let density = optimal_point_density(&model, &spec)?;
        let prediction = theorem2_prediction(&model, &spec)?;
        for &n in &cfg.n {
            let analytical_cb = inverse_transform_codebook(&density, n)?;
            let opts = FitOptions::new(n, cfg.seed).with_restarts(cfg.restarts);
            let runs = fit_all_restarts(&ds, &spec, &opts)?;
            let non_monotone = runs.iter().filter(|(_, h)| !h.is_monotone()).count();
            let (fitted, _) = best_run(runs).expect("restarts >= 1");
            let analytical = sorted_points(&analytical_cb);
            let numerical = sorted_points(&fitted);
            let gaps: Vec<f64> = analytical
                .iter()
                .zip(&numerical)
                .map(|(a, b)| (a - b).abs())
                .collect();
            let interior_gap = if n > 2 {
                gaps[1..n - 1].iter().cloned().fold(0.0, f64::max)
            } else {
                0.0
            };
            rows.push(HighResRow {
                r: cfg.r,
                lambda,
                n,
                max_gap: gaps.iter().cloned().fold(0.0, f64::max),
                interior_gap,
                predicted: prediction.at(n)?,
                empirical: fitted.fit_info.distortion,
                analytical_distortion: empirical_distortion(&analytical_cb, &ds, &spec)?,
                analytical,
                numerical,
                non_monotone,
            });
        }
    }
    Ok(HighResResult {
        schema: HIGHRES_SCHEMA,
        rows,
    })
}

/// True when every history in `histories` is monotone.
pub fn all_monotone<'a>(histories: impl IntoIterator<Item = &'a FitHistory>) -> bool {
    histories.into_iter().all(FitHistory::is_monotone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::highres::{r2_constants, theorem1_predict, ConstantSource};
    use crate::lloyd::fit;
    use crate::metrics::ari;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn data_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
    }

    fn blobs(per: usize, seed: u64) -> (MultiDataset, Vec<usize>) {
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (k, c) in centers.iter().enumerate() {
            for _ in 0..per {
                points.push(vec![c[0] + rng.random::<f64>() - 0.5, c[1] + rng.random::<f64>() - 0.5]);
                labels.push(k);
            }
        }
        (MultiDataset::from_points(&points).unwrap(), labels)
    }

    fn iris_config(noise: NoiseKind, observations: usize, trials: usize) -> NoisyConfig {
        NoisyConfig {
            schema: NOISY_SCHEMA.into(),
            dataset: data_dir().join("iris.csv"),
            columns: ColumnSelect {
                include: None,
                exclude: vec!["class".into()],
            },
            standardize: true,
            noise,
            observations,
            n: vec![3],
            r: 2.0,
            weights: None,
            trials,
            seed: 3,
            restarts: 3,
        }
    }

    #[test]
    fn loads_bundled_datasets() {
        let drop_class = ColumnSelect {
            include: None,
            exclude: vec!["class".into()],
        };
        let iris = load_csv(&data_dir().join("iris.csv"), &drop_class).unwrap();
        assert_eq!((iris.len(), iris.dim()), (150, 4));
        let wine = load_csv(&data_dir().join("wine.csv"), &drop_class).unwrap();
        assert_eq!((wine.len(), wine.dim()), (178, 13));
        let two = ColumnSelect {
            include: Some(vec![0, 2]),
            exclude: vec![],
        };
        let iris = load_csv(&data_dir().join("iris.csv"), &two).unwrap();
        assert_eq!(iris.sample(0).observation(0), &[5.1, 1.4]);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let all = ColumnSelect::default();
        let p = write(dir.path(), "ragged.csv", "1,2\n3,4,5\n");
        assert!(matches!(
            load_csv(&p, &all),
            Err(Error::RaggedRows { line: 2, expected: 2, found: 3, .. })
        ));
        let p = write(dir.path(), "bad.csv", "a,b\n1,2\n3,x\n");
        assert!(matches!(load_csv(&p, &all), Err(Error::Parse { line: 3, .. })));
        let p = write(dir.path(), "noheader.csv", "1,2\n3,4\n");
        let ds = load_csv(&p, &all).unwrap();
        assert_eq!(ds.len(), 2);
        let drop = ColumnSelect {
            include: None,
            exclude: vec!["class".into()],
        };
        assert!(matches!(load_csv(&p, &drop), Err(Error::InvalidConfig(_))));
        let p = write(dir.path(), "empty.csv", "a,b\n");
        assert!(matches!(load_csv(&p, &all), Err(Error::Empty)));
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv"), &all),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn standardize_examples() {
        let ds = MultiDataset::from_points(&[vec![0.0, 1.0], vec![2.0, 1.0], vec![4.0, 2.0]]).unwrap();
        let out = standardize(&ds).unwrap();
        // first column has variance 4
        let col: Vec<f64> = out.samples().map(|s| s.observation(0)[0]).collect();
        assert_eq!(col, vec![0.0, 1.0, 2.0]);
        let again = standardize(&out).unwrap();
        for (a, b) in out.as_flat().iter().zip(again.as_flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = MultiDataset::from_points(&[vec![1.0, 3.0], vec![2.0, 3.0]]).unwrap();
        assert!(matches!(standardize(&flat), Err(Error::ZeroVariance { column: 1 })));
    }

    #[test]
    fn noise_examples() {
        let (clean, _) = blobs(50, 1);
        let tiny = NoiseSpec {
            kind: NoiseKind::Gaussian { variance: 1e-18 },
            observations: 3,
            seed: 9,
        };
        let noisy = inject_noise(&clean, &tiny).unwrap();
        assert_eq!(noisy.observations(), 3);
        for (c, s) in clean.samples().zip(noisy.samples()) {
            for y in s.iter() {
                for (a, b) in c.observation(0).iter().zip(y) {
                    assert!((a - b).abs() < 1e-8);
                }
            }
        }

        let iris = load_csv(
            &data_dir().join("iris.csv"),
            &ColumnSelect {
                include: None,
                exclude: vec!["class".into()],
            },
        )
        .unwrap();
        let spec = NoiseSpec {
            kind: NoiseKind::Gaussian { variance: 1.0 },
            observations: 4,
            seed: 2,
        };
        let noisy = inject_noise(&iris, &spec).unwrap();
        let dev: Vec<f64> = iris
            .samples()
            .zip(noisy.samples())
            .flat_map(|(c, s)| {
                let c = c.observation(0).to_vec();
                s.iter()
                    .flat_map(move |y| y.iter().zip(c.clone()).map(|(a, b)| a - b).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            })
            .collect();
        let mean = dev.iter().sum::<f64>() / dev.len() as f64;
        let var = dev.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (dev.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
        assert_eq!(inject_noise(&iris, &spec).unwrap(), noisy);

        let spec = NoiseSpec {
            kind: NoiseKind::Uniform { half_width: 0.5 },
            observations: 2,
            seed: 2,
        };
        let noisy = inject_noise(&iris, &spec).unwrap();
        for (c, s) in iris.samples().zip(noisy.samples()) {
            for y in s.iter() {
                for (a, b) in c.observation(0).iter().zip(y) {
                    assert!((a - b).abs() <= 0.5);
                }
            }
        }
        let bad = NoiseSpec {
            kind: NoiseKind::Uniform { half_width: 0.0 },
            observations: 2,
            seed: 2,
        };
        assert!(inject_noise(&iris, &bad).is_err());
    }

    #[test]
    fn ground_truth_examples() {
        let (clean, labels) = blobs(20, 4);
        let p = ground_truth_partition(&clean, 1, 0).unwrap();
        assert!(p.labels().iter().all(|&l| l == 0));
        let p = ground_truth_partition(&clean, 3, 0).unwrap();
        assert_eq!(ari(&p, &Partition::new(labels).unwrap()).unwrap(), 1.0);
        let small = clean.select(&[0, 25, 50, 7]).unwrap();
        let p = ground_truth_partition(&small, 4, 0).unwrap();
        let mut l = p.labels().to_vec();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3]);
    }

    #[test]
    fn averaging_reduces_to_kmeans_on_means() {
        let (clean, _) = blobs(30, 8);
        let noisy = inject_noise(
            &clean,
            &NoiseSpec {
                kind: NoiseKind::Gaussian { variance: 4.0 },
                observations: 3,
                seed: 1,
            },
        )
        .unwrap();
        let means: Vec<Vec<f64>> = noisy
            .samples()
            .map(|s| {
                (0..2)
                    .map(|j| s.iter().map(|y| y[j]).sum::<f64>() / 3.0)
                    .collect()
            })
            .collect();
        let means = MultiDataset::from_points(&means).unwrap();
        let spec = DistortionSpec::uniform(2.0, 3).unwrap();
        for seed in 0..5 {
            let opts = FitOptions::new(4, seed);
            let (a, _) = fit(&noisy, &spec, &opts).unwrap();
            let (b, _) = fit(&means, &kmeans_spec(), &opts).unwrap();
            let pa = partition_of(&a, &noisy, &spec).unwrap();
            let pb = partition_of(&b, &means, &kmeans_spec()).unwrap();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn noiseless_experiment_recovers_truth() {
        // three blobs on a line with unequal gaps, so every n ≤ 3 has a
        // clear optimum
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut text = String::from("x,y,class\n");
        for (k, c) in [0.0, 10.0, 30.0].iter().enumerate() {
            for _ in 0..20 {
                let x = c + rng.random::<f64>() - 0.5;
                let y = rng.random::<f64>() - 0.5;
                text.push_str(&format!("{x},{y},{k}\n"));
            }
        }
        let cfg = NoisyConfig {
            dataset: write(dir.path(), "blobs.csv", &text),
            standardize: false,
            noise: NoiseKind::Gaussian { variance: 1e-18 },
            n: vec![1, 2, 3],
            ..iris_config(NoiseKind::Gaussian { variance: 1.0 }, 2, 3)
        };
        let res = run_noisy_experiment(&cfg).unwrap();
        for row in &res.rows {
            assert!(row.ari.mean > 0.999, "{row:?}");
            assert!(row.ami.mean > 0.999);
        }
        assert_eq!(res.non_monotone(), 0);
    }

    #[test]
    fn experiment_is_deterministic_and_serializes() {
        let cfg = iris_config(NoiseKind::Uniform { half_width: 1.0 }, 2, 4);
        let a = run_noisy_experiment(&cfg).unwrap();
        let b = run_noisy_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,n,metric,mean,ci_half");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("ordinary,3,ari,"));
        assert!(a.get(Method::Proposed, 3).is_some());

        let json = serde_json::to_string(&cfg).unwrap();
        let back: NoisyConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let bad = NoisyConfig {
            schema: "other".into(),
            ..cfg
        };
        assert!(matches!(run_noisy_experiment(&bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn half_width_shrinks_with_trials() {
        let cfg = NoisyConfig {
            restarts: GROUND_TRUTH_RESTARTS,
            ..iris_config(NoiseKind::Gaussian { variance: 2.0 }, 2, 50)
        };
        let few = run_noisy_experiment(&cfg).unwrap();
        let many = run_noisy_experiment(&NoisyConfig { trials: 200, ..cfg }).unwrap();
        let a = few.get(Method::Proposed, 3).unwrap().distortion.ci_half;
        let b = many.get(Method::Proposed, 3).unwrap().distortion.ci_half;
        let ratio = a / b;
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn config_parsing() {
        let text = r#"{
            "schema": "multiquant.experiment.noisy/1",
            "dataset": "data/iris.csv",
            "columns": {"exclude": ["class"]},
            "noise": {"kind": "uniform", "half_width": 2.0},
            "observations": 2,
            "n": [2, 3, 4],
            "seed": 1
        }"#;
        let cfg: NoisyConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.trials, 200);
        assert!(cfg.standardize);
        assert_eq!(cfg.spec().unwrap().weights(), &[1.0, 1.0]);
        cfg.validate().unwrap();
        assert!(serde_json::from_str::<NoisyConfig>(&text.replace("\"seed\"", "\"sed\"")).is_err());
    }

    #[test]
    fn highres_square_error_matches_prediction() {
        let cfg = HighResConfig {
            schema: HIGHRES_SCHEMA.into(),
            r: 2.0,
            lambdas: vec![1.0],
            n: vec![8],
            m: 50_000,
            seed: 12,
            restarts: 2,
        };
        let res = run_highres_experiment(&cfg).unwrap();
        let row = &res.rows[0];
        let model = DensityModel::uniform_cube(1, 2).unwrap();
        let spec = DistortionSpec::uniform(2.0, 2).unwrap();
        let consts = r2_constants(ConstantSource::Density(&model), &spec).unwrap();
        let fz = model.average_density(spec.weights()).unwrap();
        let t1 = theorem1_predict(&consts, &fz, 8).unwrap();
        assert!((row.empirical - t1).abs() < 0.02 * t1);
        assert!(row.max_gap < 0.03, "{row:?}");
        assert_eq!(row.non_monotone, 0);
        let mut buf = Vec::new();
        res.write_centers_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 9);
    }
}
