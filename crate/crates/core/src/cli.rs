//! The `hmm-fisher` command line.
//!
//! Every command reads a JSON [`RunConfig`], writes its reports under `--out`
//! and tags each JSON report with the command, the seed and the SHA-256 of
//! the resolved config. Reports carry no timestamps, so reruns with the same
//! config and seed are byte-identical whatever `--workers` is.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ergodicity::{
    gradient_forgetting_fit, likelihood_forgetting_check, likelihood_ratio_check, posterior_forgetting_check,
    static_bounds_check, BoundCheckResult, BoundTrial, DecayFit,
};
use crate::error::Error;
use crate::estimation::{normality_experiment, sample_observations, NormalityOptions};
use crate::fisher::{
    equivalence_scan, info_asymptotic, proposition1_sweep, AsymptoticRoute, ScanEstimator, ScanOptions,
    SweepOptions, DEFAULT_TAU_ABS, DEFAULT_TAU_REL,
};
use crate::inference::ObservationWindow;
use crate::io::{read_observations, write_observations};
use crate::mc::{derive_seed, replicate_rng};
use crate::model::{
    check_assumptions, compute_constants, AssumptionReport, CatalogModel, ModelConstants, ParamBox, ParamHmm,
};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_ASSUMPTION: u8 = 2;
pub const EXIT_CAPABILITY: u8 = 3;
pub const EXIT_REFUSED: u8 = 4;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "hmm-fisher", version, about = "Fisher information of parametric hidden Markov models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assumption verdicts and model constants over the parameter box.
    Check(RunArgs),
    /// Singularity scan of the finite-horizon and asymptotic information.
    Fisher(RunArgs),
    /// Conditional-information convergence sweep over (k, m).
    Prop1(RunArgs),
    /// Forgetting and boundedness inequalities, with decay curves.
    Forgetting(RunArgs),
    /// Monte Carlo experiment on the MLE's asymptotic covariance.
    Mle(RunArgs),
    /// Index every report in a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "hmm-fisher-out")]
    pub out: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, default_value = "hmm-fisher-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    /// Half-width of a box centred at θ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherConfig {
    pub n_max: usize,
    pub estimator: ScanEstimator,
    /// Replicates for horizons estimated by Monte Carlo.
    pub replicates: usize,
    pub tau_rel: f64,
    pub tau_abs: f64,
    pub asymptotic: AsymptoticRoute,
    /// Also compute the other asymptotic route and compare.
    pub compare_routes: bool,
    pub horizon: usize,
    pub batches: usize,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            n_max: 6,
            estimator: ScanEstimator::Auto,
            replicates: 20_000,
            tau_rel: DEFAULT_TAU_REL,
            tau_abs: DEFAULT_TAU_ABS,
            asymptotic: AsymptoticRoute::ConditionalLimit {
                memory: 200,
                replicates: 20_000,
            },
            compare_routes: false,
            horizon: 100_000,
            batches: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop1Config {
    pub n: usize,
    pub k_grid: Vec<usize>,
    pub m_grid: Vec<usize>,
    pub replicates: usize,
    pub bootstrap_draws: usize,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            n: 2,
            k_grid: vec![1, 2, 4, 8, 16, 32],
            m_grid: vec![0, 5, 20],
            replicates: 50_000,
            bootstrap_draws: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgettingConfig {
    /// Optional observation CSV, relative to the config file. Used as the
    /// first window; the rest are simulated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observations: Option<PathBuf>,
    pub window_len: usize,
    pub windows: usize,
    pub posterior_k_max: usize,
    pub likelihood_k_max: usize,
    pub ratio_windows: usize,
    pub gradient_k_grid: Vec<usize>,
    pub trials: usize,
}

impl Default for ForgettingConfig {
    fn default() -> Self {
        Self {
            observations: None,
            window_len: 40,
            windows: 20,
            posterior_k_max: 20,
            likelihood_k_max: 15,
            ratio_windows: 200,
            gradient_k_grid: vec![0, 1, 2, 3, 4, 6, 8, 12, 16],
            trials: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub n: usize,
    pub replicates: usize,
    pub box_radius: f64,
    pub random_starts: usize,
    pub max_excluded_fraction: f64,
    pub scan_n_max: usize,
    pub reference: AsymptoticRoute,
}

impl Default for MleConfig {
    fn default() -> Self {
        let d = NormalityOptions::default();
        Self {
            n: 2000,
            replicates: 500,
            box_radius: d.box_radius,
            random_starts: d.random_starts,
            max_excluded_fraction: d.max_excluded_fraction,
            scan_n_max: d.scan_n_max,
            reference: d.reference,
        }
    }
}

fn default_grid() -> usize {
    3
}

/// Model, box and per-command parameters. Absent sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(default, rename = "box")]
    pub param_box: BoxConfig,
    #[serde(default = "default_grid")]
    pub grid_per_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub fisher: FisherConfig,
    #[serde(default)]
    pub prop1: Prop1Config,
    #[serde(default)]
    pub forgetting: ForgettingConfig,
    #[serde(default)]
    pub mle: MleConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        serde_json::from_str(text).map_err(|e| Failure::Usage(format!("invalid config: {e}")))
    }

    fn catalog(&self) -> Result<CatalogModel, Failure> {
        Ok(self.model.parse::<CatalogModel>()?)
    }

    /// The model on the open parameter region.
    pub fn build_model(&self) -> Result<ParamHmm, Failure> {
        Ok(crate::model::build_catalog_model(&self.model, self.theta.as_deref())?)
    }

    /// The configured box. A radius box is clipped to `[0, 1]` along
    /// probability coordinates.
    pub fn param_box(&self, model: &ParamHmm) -> Result<ParamBox, Failure> {
        let theta = model.theta();
        let b = &self.param_box;
        let bx = match (&b.lower, &b.upper) {
            (Some(l), Some(u)) => {
                if b.radius.is_some() {
                    return Err(Failure::Usage("box: give either radius or lower/upper, not both".into()));
                }
                ParamBox::new(l.clone(), u.clone())?
            }
            (None, None) => ParamBox::around(theta, b.radius.unwrap_or(0.05))?
                .clip_unit(&model.family().unit_interval_params())?,
            _ => return Err(Failure::Usage("box: lower and upper must be given together".into())),
        };
        if bx.dim() != theta.len() {
            return Err(Error::Dimension {
                expected: theta.len(),
                found: bx.dim(),
            }
            .into());
        }
        Ok(bx)
    }

    /// SHA-256 of the compact JSON serialization, in declaration order.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Assumption(String),
    Lib(Error),
    Io(String),
    /// The run completed but failed its own acceptance rule.
    Rejected(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Assumption(_) => EXIT_ASSUMPTION,
            Failure::Io(_) | Failure::Rejected(_) => EXIT_FAILURE,
            Failure::Lib(e) => match e {
                Error::UnknownModel(_)
                | Error::Dimension { .. }
                | Error::InvalidArgument(_)
                | Error::InvalidObservation(_)
                | Error::NotSymmetric { .. } => EXIT_USAGE,
                Error::Inadmissible { .. }
                | Error::UniformErgodicity(_)
                | Error::NotStationary { .. }
                | Error::ZeroProbability { .. } => EXIT_ASSUMPTION,
                Error::RequiresFiniteAlphabet(_) | Error::TooLarge { .. } => EXIT_CAPABILITY,
                Error::SingularInformation(_) => EXIT_REFUSED,
                Error::Numerical(_) => EXIT_FAILURE,
            },
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Assumption(m) => write!(f, "assumption failure: {m}"),
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Io(m) => write!(f, "io: {m}"),
            Failure::Rejected(m) => write!(f, "run rejected: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seed: Option<u64>,
    config: &'a RunConfig,
    /// SHA-256 of each CSV written alongside this report.
    tables: Vec<TableRef>,
    result: &'a T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRef {
    pub file: String,
    pub sha256: String,
}

struct Output<'a> {
    dir: &'a Path,
    command: &'a str,
    config: &'a RunConfig,
    tables: Vec<TableRef>,
}

impl<'a> Output<'a> {
    fn new(dir: &'a Path, command: &'a str, config: &'a RunConfig) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            command,
            config,
            tables: Vec::new(),
        })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
    }

    fn table(&mut self, name: &str, csv: &str) -> Result<(), Failure> {
        self.write(name, csv.as_bytes())?;
        self.tables.push(TableRef {
            file: name.into(),
            sha256: hex::encode(Sha256::digest(csv.as_bytes())),
        });
        Ok(())
    }

    fn report<T: Serialize>(self, result: &T) -> Result<(), Failure> {
        let env = Envelope {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: self.config.sha256(),
            seed: self.config.seed,
            config: self.config,
            tables: self.tables.clone(),
            result,
        };
        let mut text = serde_json::to_string_pretty(&env).map_err(|e| Failure::Io(e.to_string()))?;
        text.push('\n');
        self.write(&format!("{}.json", self.command), text.as_bytes())
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::from_json(&text)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if let Some(obs) = &cfg.forgetting.observations {
        if obs.is_relative() {
            let base = args.config.parent().unwrap_or(Path::new(""));
            cfg.forgetting.observations = Some(base.join(obs));
        }
    }
    Ok(cfg)
}

fn require_seed(cfg: &RunConfig) -> Result<u64, Failure> {
    cfg.seed
        .ok_or_else(|| Failure::Usage("this command is stochastic: give --seed or \"seed\" in the config".into()))
}

#[derive(Serialize)]
struct CheckResult<'a> {
    assumptions: &'a AssumptionReport,
    /// Constants at θ itself rather than over the box.
    pointwise: ModelConstants,
}

pub fn cmd_check(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let entry = cfg.catalog()?;
    let model = entry.build_closed(cfg.theta.as_deref())?;
    let bx = cfg.param_box(&model)?;
    let report = check_assumptions(&model, &bx, cfg.grid_per_dim)?;
    let pointwise = compute_constants(&model, &ParamBox::point(model.theta()), 1)?;
    Output::new(out, "check", cfg)?.report(&CheckResult {
        assumptions: &report,
        pointwise,
    })?;
    let failed = report.failed();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Assumption(format!("{} violated on the box", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct RouteComparison {
    horizon_average: crate::fisher::InfoMatrix,
    conditional_limit: crate::fisher::InfoMatrix,
    /// Largest `|difference| / combined stderr` over the entries.
    max_standardized_difference: f64,
    agree_within_3_stderr: bool,
}

#[derive(Serialize)]
struct FisherResult {
    scan: crate::fisher::EquivalenceScan,
    #[serde(skip_serializing_if = "Option::is_none")]
    routes: Option<RouteComparison>,
}

fn compare_routes(model: &ParamHmm, f: &FisherConfig, seed: u64) -> Result<RouteComparison, Failure> {
    let conditional = match f.asymptotic {
        r @ AsymptoticRoute::ConditionalLimit { .. } => r,
        AsymptoticRoute::HorizonAverage { .. } => AsymptoticRoute::ConditionalLimit {
            memory: 200,
            replicates: 20_000,
        },
    };
    let a = info_asymptotic(
        model,
        AsymptoticRoute::HorizonAverage {
            horizon: f.horizon,
            batches: f.batches,
        },
        derive_seed(seed, 1),
    )?;
    let b = info_asymptotic(model, conditional, derive_seed(seed, 2))?;
    let (sa, sb) = (a.stderr.as_ref().unwrap(), b.stderr.as_ref().unwrap());
    let mut worst: f64 = 0.0;
    for i in 0..a.matrix.nrows() {
        for j in 0..a.matrix.ncols() {
            let se = (sa[(i, j)].powi(2) + sb[(i, j)].powi(2)).sqrt();
            let d = (a.matrix[(i, j)] - b.matrix[(i, j)]).abs();
            worst = worst.max(if se > 0.0 { d / se } else if d == 0.0 { 0.0 } else { f64::INFINITY });
        }
    }
    Ok(RouteComparison {
        horizon_average: a,
        conditional_limit: b,
        max_standardized_difference: worst,
        agree_within_3_stderr: worst <= 3.0,
    })
}

pub fn cmd_fisher(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let seed = require_seed(cfg)?;
    let model = cfg.build_model()?;
    let f = &cfg.fisher;
    if f.estimator == ScanEstimator::Exact && model.alphabet().is_none() {
        return Err(Error::RequiresFiniteAlphabet("the model has continuous emissions").into());
    }
    let scan = equivalence_scan(
        &model,
        ScanOptions {
            n_max: f.n_max,
            estimator: f.estimator,
            tau_rel: f.tau_rel,
            tau_abs: f.tau_abs,
            seed,
            replicates: f.replicates,
            asymptotic: f.asymptotic,
        },
    )?;
    let routes = if f.compare_routes {
        Some(compare_routes(&model, f, derive_seed(seed, 7))?)
    } else {
        None
    };
    Output::new(out, "fisher", cfg)?.report(&FisherResult { scan, routes })
}

pub fn cmd_prop1(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let seed = require_seed(cfg)?;
    let model = cfg.build_model()?;
    let p = &cfg.prop1;
    let sweep = proposition1_sweep(
        &model,
        &SweepOptions {
            n: p.n,
            k_grid: p.k_grid.clone(),
            m_grid: p.m_grid.clone(),
            replicates: p.replicates,
            seed,
            bootstrap_draws: p.bootstrap_draws,
        },
    )?;
    let mut o = Output::new(out, "prop1", cfg)?;
    o.table("prop1.csv", &sweep.to_csv())?;
    o.report(&sweep)
}

#[derive(Serialize)]
struct ForgettingResult {
    posterior: BoundCheckResult,
    likelihood: BoundCheckResult,
    likelihood_ratio: BoundCheckResult,
    gradient: DecayFit,
    static_bounds: Vec<BoundCheckResult>,
    pass: bool,
}

fn merge(name: &str, parts: Vec<BoundCheckResult>) -> BoundCheckResult {
    let trials: Vec<BoundTrial> = parts.into_iter().flat_map(|r| r.trials).collect();
    BoundCheckResult::new(name, trials)
}

pub fn cmd_forgetting(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let seed = require_seed(cfg)?;
    let model = cfg.build_model()?;
    let f = &cfg.forgetting;
    if f.windows == 0 {
        return Err(Failure::Usage("forgetting.windows must be at least 1".into()));
    }
    let sim_seed = derive_seed(seed, 1);
    let simulate = |i: usize, len: usize| sample_observations(&model, len, &mut replicate_rng(sim_seed, i as u64));
    let mut windows = Vec::with_capacity(f.windows);
    if let Some(path) = &f.observations {
        let file = fs::File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        windows.push(read_observations(file)?.values);
    }
    while windows.len() < f.windows {
        windows.push(simulate(windows.len(), f.window_len)?);
    }
    let posterior = windows
        .iter()
        .map(|y| posterior_forgetting_check(&model, y, f.posterior_k_max))
        .collect::<crate::Result<Vec<_>>>()?;
    let likelihood = windows
        .iter()
        .map(|y| likelihood_forgetting_check(&model, y, f.likelihood_k_max))
        .collect::<crate::Result<Vec<_>>>()?;
    let ratio_windows: Vec<Vec<f64>> = (0..f.ratio_windows)
        .map(|i| simulate(f.windows + i, f.window_len))
        .collect::<crate::Result<_>>()?;
    let ratio = likelihood_ratio_check(&model, &ratio_windows)?;
    let gradient = gradient_forgetting_fit(&model, &windows[0], &f.gradient_k_grid)?;
    let static_bounds = static_bounds_check(&model, f.trials, derive_seed(seed, 2))?;
    let posterior = merge("reverse posterior forgetting", posterior);
    let likelihood = merge("likelihood forgetting", likelihood);
    let pass = posterior.pass && likelihood.pass && ratio.pass && gradient.pass && static_bounds.iter().all(|b| b.pass);

    let mut o = Output::new(out, "forgetting", cfg)?;
    let mut window_csv = Vec::new();
    write_observations(&mut window_csv, &ObservationWindow::new(windows[0].clone(), 1))?;
    o.table("forgetting_window.csv", std::str::from_utf8(&window_csv).expect("csv is utf-8"))?;
    o.table("posterior_decay.csv", &posterior.decay_csv())?;
    o.table("likelihood_decay.csv", &likelihood.decay_csv())?;
    o.table("gradient_decay.csv", &gradient.to_csv())?;
    o.report(&ForgettingResult {
        posterior,
        likelihood,
        likelihood_ratio: ratio,
        gradient,
        static_bounds,
        pass,
    })
}

pub fn cmd_mle(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let seed = require_seed(cfg)?;
    let model = cfg.build_model()?;
    let m = &cfg.mle;
    let opts = NormalityOptions {
        box_radius: m.box_radius,
        random_starts: m.random_starts,
        scan_n_max: m.scan_n_max,
        reference: m.reference,
        max_excluded_fraction: m.max_excluded_fraction,
        ..NormalityOptions::default()
    };
    let report = normality_experiment(&model, m.n, m.replicates, seed, &opts)?;
    let mut o = Output::new(out, "mle", cfg)?;
    o.table("mle_replicates.csv", &report.replicates_csv())?;
    o.report(&report)?;
    if report.excluded_within_limit {
        Ok(())
    } else {
        Err(Failure::Rejected(format!(
            "{} of {} replicates did not converge, above the {} limit",
            report.excluded, report.replicates, m.max_excluded_fraction
        )))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportIndex {
    pub files: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

pub fn cmd_report(dir: &Path) -> Result<ReportIndex, Failure> {
    let io = |e: std::io::Error| Failure::Io(format!("{}: {e}", dir.display()));
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n != INDEX_FILE && (n.ends_with(".json") || n.ends_with(".csv")))
        .collect();
    names.sort();
    let mut files = Vec::with_capacity(names.len());
    for name in names {
        let bytes = fs::read(dir.join(&name)).map_err(io)?;
        let mut entry = IndexEntry {
            file: name.clone(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
            command: None,
            seed: None,
            config_sha256: None,
        };
        if name.ends_with(".json") {
            if let Ok(v) = serde_json::from_slice::<serde_json::Value>(&bytes) {
                entry.command = v["command"].as_str().map(String::from);
                entry.seed = v["seed"].as_u64();
                entry.config_sha256 = v["config_sha256"].as_str().map(String::from);
            }
        }
        files.push(entry);
    }
    let index = ReportIndex { files };
    let mut text = serde_json::to_string_pretty(&index).map_err(|e| Failure::Io(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join(INDEX_FILE), text).map_err(io)?;
    Ok(index)
}

fn dispatch(command: Command) -> Result<(), Failure> {
    let (args, run): (RunArgs, fn(&RunConfig, &Path) -> Result<(), Failure>) = match command {
        Command::Report(r) => return cmd_report(&r.out).map(|_| ()),
        Command::Check(a) => (a, cmd_check),
        Command::Fisher(a) => (a, cmd_fisher),
        Command::Prop1(a) => (a, cmd_prop1),
        Command::Forgetting(a) => (a, cmd_forgetting),
        Command::Mle(a) => (a, cmd_mle),
    };
    let cfg = load_config(&args)?;
    match args.workers {
        Some(0) => Err(Failure::Usage("--workers must be at least 1".into())),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Failure::Io(e.to_string()))?
            .install(|| run(&cfg, &args.out)),
        None => run(&cfg, &args.out),
    }
}

/// Parses `args` (program name first), runs the command and maps the outcome
/// to the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hmm-fisher: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
