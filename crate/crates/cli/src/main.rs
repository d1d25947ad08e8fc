use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use multiquant::experiment::{
    fmt_float, load_csv, run_highres_experiment, run_noisy_experiment, ColumnSelect,
    HighResConfig, NoisyConfig,
};
use multiquant::highres::{
    optimal_point_density, pair_constants, r2_constants, theorem1_prediction, theorem2_prediction,
    ConstantSource, DensityModel, HighResConstants, PointDensity, Prediction,
    inverse_transform_codebook, b_norm,
};
use multiquant::lloyd::fit_multistart;
use multiquant::metrics::{ami, ari};
use multiquant::quantizer::assign;
use multiquant::{Codebook, DistortionSpec, Error, FitOptions, MultiDataset, Partition};

const CODEBOOK_SCHEMA: &str = "multiquant.codebook/1";
const ANALYSIS_SCHEMA: &str = "multiquant.analysis/1";

#[derive(Parser)]
#[command(name = "multiquant", version, about = "Cluster noisy multi-observation data to common centers")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, env = "MULTIQUANT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a codebook with the generalized Lloyd algorithm.
    Fit(FitArgs),
    /// Assign every sample to its nearest center.
    Assign(AssignArgs),
    /// Evaluate the high-resolution predictions.
    Analyze(AnalyzeArgs),
    /// Run the noisy-observation clustering experiment.
    ExperimentNoisy(NoisyArgs),
    /// Compare fitted codebooks with their high-resolution predictions.
    ExperimentHighres(HighResArgs),
    /// Compare two label files with ARI and AMI.
    Similarity(SimilarityArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file; each row holds the L observations of one sample side by side.
    #[arg(long)]
    data: PathBuf,
    /// Zero-based columns to read (default: all).
    #[arg(long, value_delimiter = ',')]
    columns: Option<Vec<usize>>,
    /// Header names of columns to skip, e.g. a class label.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    /// Observations per sample.
    #[arg(short = 'L', long = "L", default_value_t = 1)]
    observations: usize,
}

impl DataArgs {
    fn load(&self) -> multiquant::Result<MultiDataset> {
        let select = ColumnSelect {
            include: self.columns.clone(),
            exclude: self.exclude.clone(),
        };
        let flat = load_csv(&self.data, &select)?;
        let width = flat.dim();
        if self.observations == 0 || width % self.observations != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{width} columns cannot be split into {} observations",
                self.observations
            )));
        }
        MultiDataset::from_flat(
            flat.as_flat().to_vec(),
            flat.len(),
            self.observations,
            width / self.observations,
        )
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of centers.
    #[arg(long)]
    n: usize,
    /// Distortion power.
    #[arg(long, default_value_t = 2.0)]
    r: f64,
    /// Observation weights (default: all ones).
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Codebook JSON output (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Distortion history CSV output.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct AssignArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Codebook JSON written by `fit`.
    #[arg(long)]
    codebook: PathBuf,
    /// Labels CSV output (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Case {
    /// Squared error with any number of observations.
    Theorem1,
    /// General power with two observations.
    Theorem2,
    /// General power with two independent uniform scalar observations.
    Example2,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    case: Case,
    #[arg(long, default_value_t = 2.0)]
    r: f64,
    /// Weight of the second observation; the first has weight 1.
    #[arg(long, conflicts_with = "weights")]
    lambda: Option<f64>,
    /// All observation weights.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Observations per sample for the uniform model (theorem1 only).
    #[arg(short = 'L', long = "L")]
    observations: Option<usize>,
    /// Dimension of the uniform model.
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Tabulated density CSV: (x, value) for one source or (x1, x2, value)
    /// for two. Defaults to independent uniform sources on the unit cube.
    #[arg(long)]
    density: Option<PathBuf>,
    /// Codebook sizes to evaluate.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    /// Summary JSON output (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Point density table CSV output (scalar sources only).
    #[arg(long)]
    density_out: Option<PathBuf>,
    /// Analytical codebook CSV output (scalar sources only).
    #[arg(long)]
    codebook_out: Option<PathBuf>,
}

#[derive(Args)]
struct NoisyArgs {
    /// JSON configuration; a relative dataset path is resolved against the
    /// configuration file's directory.
    #[arg(long)]
    config: PathBuf,
    /// Long-format results CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// JSON summary (default: standard output).
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct HighResArgs {
    #[arg(long)]
    config: PathBuf,
    /// Per-center comparison CSV.
    #[arg(long)]
    centers_csv: Option<PathBuf>,
    /// Per-configuration distortion CSV.
    #[arg(long)]
    distortions_csv: Option<PathBuf>,
    /// JSON summary (default: standard output).
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct SimilarityArgs {
    /// Labels CSV; the `label` column is used when present, else the last.
    /// A first row is a header when it names `label` or is text above
    /// numeric labels.
    first: PathBuf,
    second: PathBuf,
    /// JSON output (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidPower(_)
            | Error::InvalidWeights(_)
            | Error::InvalidOption(_)
            | Error::InvalidConfig(_)
            | Error::Unsupported(_) => Failure::Usage(msg),
            e if e.is_data_error() => Failure::Data(msg),
            _ => Failure::Numerical(msg),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

/// Output collected in memory and written only after every step succeeded.
#[derive(Default)]
struct Outputs {
    files: Vec<(Option<PathBuf>, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: Option<&Path>, bytes: Vec<u8>) {
        self.files.push((path.map(Path::to_path_buf), bytes));
    }

    fn json<T: Serialize>(&mut self, path: Option<&Path>, value: &T) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| Failure::Numerical(format!("cannot encode JSON: {e}")))?;
        bytes.push(b'\n');
        self.add(path, bytes);
        Ok(())
    }

    fn flush(self) -> CliResult<()> {
        for (path, bytes) in self.files {
            match path {
                Some(p) => fs::write(&p, bytes)
                    .map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?,
                None => io::stdout().write_all(&bytes)?,
            }
        }
        Ok(())
    }
}

fn make_spec(r: f64, weights: Option<Vec<f64>>, observations: usize) -> CliResult<DistortionSpec> {
    let spec = match weights {
        Some(w) => {
            if w.len() != observations {
                return Err(Failure::Usage(format!(
                    "{} weights given for {observations} observations",
                    w.len()
                )));
            }
            DistortionSpec::new(r, w)?
        }
        None => DistortionSpec::uniform(r, observations)?,
    };
    Ok(spec)
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    schema: String,
    r: f64,
    weights: Vec<f64>,
    dim: usize,
    centers: Vec<Vec<f64>>,
    distortion: f64,
    iterations: usize,
    seed: u64,
    restart: usize,
}

fn fit_cmd(args: FitArgs) -> CliResult<Outputs> {
    let ds = args.data.load()?;
    let spec = make_spec(args.r, args.weights, args.data.observations)?;
    let mut opts = FitOptions::new(args.n, args.seed).with_restarts(args.restarts);
    opts.max_iters = args.max_iters;
    let (cb, hist) = fit_multistart(&ds, &spec, &opts)?;
    let file = CodebookFile {
        schema: CODEBOOK_SCHEMA.into(),
        r: spec.r(),
        weights: spec.weights().to_vec(),
        dim: cb.dim(),
        centers: cb.to_vecs(),
        distortion: cb.fit_info.distortion,
        iterations: cb.fit_info.iterations,
        seed: cb.fit_info.seed,
        restart: hist.restart,
    };
    let mut out = Outputs::default();
    out.json(args.out.as_deref(), &file)?;
    if let Some(path) = &args.history {
        let mut text = String::from("iteration,distortion\n");
        for (i, d) in hist.distortions.iter().enumerate() {
            text.push_str(&format!("{i},{}\n", fmt_float(*d)));
        }
        out.add(Some(path), text.into_bytes());
    }
    Ok(out)
}

fn read_codebook(path: &Path) -> CliResult<(Codebook, DistortionSpec)> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let file: CodebookFile = serde_json::from_str(&text)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    if file.schema != CODEBOOK_SCHEMA {
        return Err(Failure::Data(format!(
            "{}: schema {:?} is not {CODEBOOK_SCHEMA:?}",
            path.display(),
            file.schema
        )));
    }
    let cb = Codebook::new(file.centers).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Ok((cb, DistortionSpec::new(file.r, file.weights)?))
}

fn assign_cmd(args: AssignArgs) -> CliResult<Outputs> {
    let (cb, spec) = read_codebook(&args.codebook)?;
    let ds = args.data.load()?;
    if spec.observations() != ds.observations() {
        return Err(Failure::Usage(format!(
            "codebook expects {} observations per sample, --L gives {}",
            spec.observations(),
            ds.observations()
        )));
    }
    if cb.dim() != ds.dim() {
        return Err(Failure::Data(format!(
            "codebook dimension {} does not match data dimension {}",
            cb.dim(),
            ds.dim()
        )));
    }
    let cells = assign(&cb, &ds, &spec)?;
    let mut text = String::from("sample,label,cost\n");
    for (i, (l, c)) in cells.labels.iter().zip(&cells.per_sample_cost).enumerate() {
        text.push_str(&format!("{i},{l},{}\n", fmt_float(*c)));
    }
    let mut out = Outputs::default();
    out.add(args.out.as_deref(), text.into_bytes());
    Ok(out)
}

#[derive(Serialize)]
struct PredictionRow {
    n: usize,
    distortion: f64,
}

#[derive(Serialize)]
struct CodebookRow {
    n: usize,
    centers: Vec<f64>,
}

#[derive(Serialize)]
struct Analysis {
    schema: &'static str,
    case: &'static str,
    r: f64,
    weights: Vec<f64>,
    dim: usize,
    constants: HighResConstants,
    /// The density functional multiplying `κ_d n^{−2/d}` in the prediction.
    norm: f64,
    prediction: Prediction,
    predictions: Vec<PredictionRow>,
    codebooks: Vec<CodebookRow>,
}

fn analyze_cmd(args: AnalyzeArgs) -> CliResult<Outputs> {
    let weights = match (&args.weights, args.lambda) {
        (Some(w), _) => w.clone(),
        (None, Some(l)) => vec![1.0, l],
        (None, None) => match (args.case, args.observations) {
            (Case::Theorem1, Some(l)) => vec![1.0; l],
            _ => vec![1.0, 1.0],
        },
    };
    if let (Some(l), true) = (args.observations, args.weights.is_some() || args.lambda.is_some()) {
        if l != weights.len() {
            return Err(Failure::Usage(format!("{} weights given for --L {l}", weights.len())));
        }
    }
    if args.n.contains(&0) {
        return Err(Failure::Usage("codebook sizes must be positive".into()));
    }
    let spec = DistortionSpec::new(args.r, weights)?;
    let model = match (&args.density, args.case) {
        (Some(_), Case::Example2) => {
            return Err(Failure::Usage("example2 uses the uniform model; drop --density".into()))
        }
        (Some(path), _) => DensityModel::from_csv(path)?,
        (None, Case::Example2) => DensityModel::uniform_cube(1, 2)?,
        (None, _) => DensityModel::uniform_cube(args.dim, spec.observations())?,
    };
    let (case, constants, prediction) = match args.case {
        Case::Theorem1 => {
            let constants = r2_constants(ConstantSource::Density(&model), &spec)?;
            let fz = model.average_density(spec.weights())?;
            ("theorem1", constants, theorem1_prediction(&constants, &fz)?)
        }
        Case::Theorem2 | Case::Example2 => {
            let constants = pair_constants(&model, &spec)?;
            let name = if matches!(args.case, Case::Example2) { "example2" } else { "theorem2" };
            (name, constants, theorem2_prediction(&model, &spec)?)
        }
    };
    let norm = match args.case {
        Case::Theorem1 => prediction.coefficient / (constants.c1 * constants.kappa.unwrap_or(f64::NAN)),
        _ => b_norm(&model, &spec)?,
    };
    let predictions = args
        .n
        .iter()
        .map(|&n| Ok(PredictionRow { n, distortion: prediction.at(n)? }))
        .collect::<multiquant::Result<Vec<_>>>()?;

    let mut out = Outputs::default();
    let mut codebooks = Vec::new();
    let wants_tables = args.density_out.is_some() || args.codebook_out.is_some();
    let density: Option<PointDensity> = if model.dim() == 1 {
        Some(optimal_point_density(&model, &spec)?)
    } else if wants_tables {
        return Err(Failure::Usage(
            "point densities and codebooks are available for scalar sources only".into(),
        ));
    } else {
        None
    };
    if let Some(pd) = &density {
        let mut table = String::from("n,index,center\n");
        for &n in &args.n {
            let cb = inverse_transform_codebook(pd, n)?;
            let centers: Vec<f64> = cb.centers().map(|c| c[0]).collect();
            for (i, c) in centers.iter().enumerate() {
                table.push_str(&format!("{n},{i},{}\n", fmt_float(*c)));
            }
            codebooks.push(CodebookRow { n, centers });
        }
        if let Some(path) = &args.density_out {
            let mut text = String::from("z,density,cumulative\n");
            for ((z, d), c) in pd.nodes().iter().zip(pd.density()).zip(pd.cumulative()) {
                text.push_str(&format!("{},{},{}\n", fmt_float(*z), fmt_float(*d), fmt_float(*c)));
            }
            out.add(Some(path), text.into_bytes());
        }
        if let Some(path) = &args.codebook_out {
            out.add(Some(path), table.into_bytes());
        }
    }
    let analysis = Analysis {
        schema: ANALYSIS_SCHEMA,
        case,
        r: spec.r(),
        weights: spec.weights().to_vec(),
        dim: model.dim(),
        constants,
        norm,
        prediction,
        predictions,
        codebooks,
    };
    out.json(args.out.as_deref(), &analysis)?;
    Ok(out)
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn noisy_cmd(args: NoisyArgs) -> CliResult<Outputs> {
    let mut cfg: NoisyConfig = read_config(&args.config)?;
    if cfg.dataset.is_relative() {
        if let Some(dir) = args.config.parent() {
            cfg.dataset = dir.join(&cfg.dataset);
        }
    }
    let res = run_noisy_experiment(&cfg)?;
    let mut out = Outputs::default();
    if let Some(path) = &args.out_csv {
        let mut buf = Vec::new();
        res.write_csv(&mut buf)?;
        out.add(Some(path), buf);
    }
    out.json(args.out_json.as_deref(), &res)?;
    Ok(out)
}

fn highres_cmd(args: HighResArgs) -> CliResult<Outputs> {
    let cfg: HighResConfig = read_config(&args.config)?;
    let res = run_highres_experiment(&cfg)?;
    let mut out = Outputs::default();
    if let Some(path) = &args.centers_csv {
        let mut buf = Vec::new();
        res.write_centers_csv(&mut buf)?;
        out.add(Some(path), buf);
    }
    if let Some(path) = &args.distortions_csv {
        let mut buf = Vec::new();
        res.write_distortions_csv(&mut buf)?;
        out.add(Some(path), buf);
    }
    out.json(args.out_json.as_deref(), &res)?;
    Ok(out)
}

/// Reads labels, mapping arbitrary tokens to cluster indices in order of
/// first appearance.
fn read_labels(path: &Path) -> CliResult<Partition> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let first: Vec<&str> = match lines.peek() {
        Some(l) => l.split(',').map(str::trim).collect(),
        None => return Err(Failure::Data(format!("{}: no labels", path.display()))),
    };
    let mut column = first.len() - 1;
    if let Some(pos) = first.iter().position(|h| *h == "label") {
        column = pos;
        lines.next();
    } else {
        // a text first row over numeric labels is a header; all-text labels
        // without a `label` column are read as data
        let numeric = |l: &str| {
            l.split(',')
                .nth(column)
                .is_some_and(|f| f.trim().parse::<f64>().is_ok())
        };
        let second = text.lines().filter(|l| !l.trim().is_empty()).nth(1);
        if first[column].parse::<f64>().is_err() && second.is_some_and(numeric) {
            lines.next();
        }
    }
    let mut seen: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let Some(token) = fields.get(column) else {
            return Err(Failure::Data(format!("{}: row {} is too short", path.display(), k + 1)));
        };
        let idx = match seen.iter().position(|s| s == token) {
            Some(i) => i,
            None => {
                seen.push(token.to_string());
                seen.len() - 1
            }
        };
        labels.push(idx);
    }
    Ok(Partition::new(labels)?)
}

#[derive(Serialize)]
struct Similarity {
    ari: f64,
    ami: f64,
}

fn similarity_cmd(args: SimilarityArgs) -> CliResult<Outputs> {
    let p = read_labels(&args.first)?;
    let q = read_labels(&args.second)?;
    let sim = Similarity {
        ari: ari(&p, &q)?,
        ami: ami(&p, &q)?,
    };
    let mut out = Outputs::default();
    out.json(args.out.as_deref(), &sim)?;
    Ok(out)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let out = match cli.command {
        Command::Fit(a) => fit_cmd(a)?,
        Command::Assign(a) => assign_cmd(a)?,
        Command::Analyze(a) => analyze_cmd(a)?,
        Command::ExperimentNoisy(a) => noisy_cmd(a)?,
        Command::ExperimentHighres(a) => highres_cmd(a)?,
        Command::Similarity(a) => similarity_cmd(a)?,
    };
    out.flush()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
