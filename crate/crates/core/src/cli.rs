//! Command-line front end: experiment runs, verification suites and tables.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 a
//! verification check failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bench::{
    run_experiment, Algorithm, DecadeTable, Experiment, ExperimentConfig, Family, LineSearchSpec, MatrixInit,
    StartPoint, TrialSummary,
};
use crate::error::Error;
use crate::exec::{map_indexed, Execution};
use crate::hessian::{update_corr, HessianEstimate, UpdateScheme};
use crate::linesearch::AdaptiveStepState;
use crate::metric::{generalized_condition, pd_check, PdMatrix, SymmetricMatrix};
use crate::oracle::Quadratic;
use crate::pursuit::{StopReason, UpdateAt, DECADES};
use crate::sampling::{
    estimate_gaussian_moments, estimate_moments, frobenius_z_score, haar_rotation, sample_isotropic, z_score,
    MomentClosedForm, SeededRng,
};
use crate::theory::{diagonalization_product, recurrence_matrix, rhe_exact_expectation, rhe_recurrence_iterate, RheState};

pub const SUMMARY_SCHEMA: &str = "rpursuit.summary/1";
pub const VERIFY_SCHEMA: &str = "rpursuit.verify/1";
pub const TRAJECTORY_HEADER: &str = "trial,iter,fes,fval,gap,kappa_BinvH,spectrum_min,spectrum_max";
pub const PLOT_HEADER: &str = "iter,mean_gap,min_gap,max_gap";

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
    VerificationFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::VerificationFailed(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
            CliError::VerificationFailed(k) => write!(f, "{k} verification check(s) failed"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidArgument { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn bad(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("`{field}`: {reason}"))
}

#[derive(Debug, Parser)]
#[command(name = "rpursuit", version, about = "Random pursuit with randomized Hessian estimation", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Run a batch of trials and write trajectories, a summary and plot data.
    Run(RunArgs),
    /// Check the analytic identities against Monte-Carlo and direct iteration.
    Verify(VerifyArgs),
    /// Print an accuracy-vs-FES/n² table from summary files.
    Table(TableArgs),
}

/// Every option may also be given in a `key = value` config file; flags win.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// Flat `key = value` file with the same keys as the long flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// f1 | f2 | f3 | f4 | g
    #[arg(long)]
    pub function: Option<String>,
    /// Index of the large block for `g`.
    #[arg(long)]
    pub i: Option<String>,
    #[arg(long)]
    pub ell: Option<String>,
    /// Sets ℓ = 10^p.
    #[arg(long)]
    pub ellpow: Option<String>,
    #[arg(long)]
    pub n: Option<String>,
    /// frp | vrp
    #[arg(long)]
    pub algo: Option<String>,
    /// identity | scaled:<v> | file:<path>
    #[arg(long)]
    pub init: Option<String>,
    /// canonical | preset
    #[arg(long)]
    pub start: Option<String>,
    /// exact | exact-confirm | exact-model | es | bisection
    #[arg(long)]
    pub ls: Option<String>,
    /// Relative accuracy of the bisection search.
    #[arg(long)]
    pub mu: Option<String>,
    /// Evaluation cap per bisection search.
    #[arg(long)]
    pub ls_fes: Option<String>,
    #[arg(long)]
    pub es_sigma: Option<String>,
    #[arg(long)]
    pub es_target_p: Option<String>,
    #[arg(long)]
    pub es_adapt: Option<String>,
    /// plain | corr | store
    #[arg(long)]
    pub update: Option<String>,
    #[arg(long)]
    pub reuse: Option<String>,
    #[arg(long)]
    pub m: Option<String>,
    #[arg(long)]
    pub capacity: Option<String>,
    #[arg(long)]
    pub reuse_every: Option<String>,
    #[arg(long)]
    pub reuse_start: Option<String>,
    /// interlaced | fixed:<updates>
    #[arg(long)]
    pub update_at: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    /// FES budget, or `none`.
    #[arg(long)]
    pub budget: Option<String>,
    #[arg(long)]
    pub max_iter: Option<String>,
    /// Target gap, or `none`.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub trials: Option<String>,
    #[arg(long, env = "RP_SEED")]
    pub seed: Option<String>,
    #[arg(long)]
    pub transform: Option<String>,
    #[arg(long)]
    pub record_every: Option<String>,
    #[arg(long)]
    pub kappa: Option<String>,
    #[arg(long)]
    pub spectrum: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    /// Run trials one after another.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Moments,
    RheExact,
    Diag,
    Pd,
    Propagation,
    Store,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub suite: Suite,
    #[arg(long, env = "RP_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Monte-Carlo samples for the moment identities (scientific notation accepted).
    #[arg(long, default_value = "1e6")]
    pub samples: String,
    /// Simulated runs for the rank-one update dynamics.
    #[arg(long, default_value_t = 5000)]
    pub runs: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum TableFormat {
    #[default]
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = TableFormat::Text)]
    pub format: TableFormat,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a).map(|dir| eprintln!("wrote {}", dir.display())),
        Command::Verify(a) => cmd_verify(&a).map(|r| println!("{}", serde_json::to_string_pretty(&r).unwrap_or_default())),
        Command::Table(a) => cmd_table(&a.inputs, a.format).map(|t| print!("{t}")),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// configuration

/// Keys accepted in config files, in emission order.
pub const CONFIG_KEYS: &[&str] = &[
    "function",
    "i",
    "ell",
    "ellpow",
    "n",
    "algo",
    "init",
    "start",
    "ls",
    "mu",
    "ls_fes",
    "es_sigma",
    "es_target_p",
    "es_adapt",
    "update",
    "reuse",
    "m",
    "capacity",
    "reuse_every",
    "reuse_start",
    "update_at",
    "eps",
    "budget",
    "max_iter",
    "target",
    "trials",
    "seed",
    "transform",
    "record_every",
    "kappa",
    "spectrum",
    "out",
];

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("config line {}: expected `key = value`", lineno + 1)))?;
        let k = k.trim().replace('-', "_");
        if !CONFIG_KEYS.contains(&k.as_str()) {
            return Err(CliError::Validation(format!("config line {}: unknown key `{k}`", lineno + 1)));
        }
        map.insert(k, v.trim().to_string());
    }
    Ok(map)
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("function", &self.function),
            ("i", &self.i),
            ("ell", &self.ell),
            ("ellpow", &self.ellpow),
            ("n", &self.n),
            ("algo", &self.algo),
            ("init", &self.init),
            ("start", &self.start),
            ("ls", &self.ls),
            ("mu", &self.mu),
            ("ls_fes", &self.ls_fes),
            ("es_sigma", &self.es_sigma),
            ("es_target_p", &self.es_target_p),
            ("es_adapt", &self.es_adapt),
            ("update", &self.update),
            ("reuse", &self.reuse),
            ("m", &self.m),
            ("capacity", &self.capacity),
            ("reuse_every", &self.reuse_every),
            ("reuse_start", &self.reuse_start),
            ("update_at", &self.update_at),
            ("eps", &self.eps),
            ("budget", &self.budget),
            ("max_iter", &self.max_iter),
            ("target", &self.target),
            ("trials", &self.trials),
            ("seed", &self.seed),
            ("transform", &self.transform),
            ("record_every", &self.record_every),
            ("kappa", &self.kappa),
            ("spectrum", &self.spectrum),
            ("out", &self.out),
        ]
    }

    /// Config file values overridden by flags.
    pub fn settings(&self) -> CliResult<BTreeMap<String, String>> {
        let mut map = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
                parse_config_text(&text)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in self.overrides() {
            if let Some(v) = v {
                map.insert(k.to_string(), v.clone());
            }
        }
        Ok(map)
    }
}

fn parse_f64(field: &str, v: &str) -> CliResult<f64> {
    let x: f64 = v.trim().parse().map_err(|_| bad(field, format!("`{v}` is not a number")))?;
    if !x.is_finite() {
        return Err(bad(field, "must be finite"));
    }
    Ok(x)
}

/// Non-negative integer; scientific notation such as `2e4` is accepted.
fn parse_count(field: &str, v: &str) -> CliResult<u64> {
    let t = v.trim();
    if let Ok(k) = t.parse::<u64>() {
        return Ok(k);
    }
    let x = parse_f64(field, t)?;
    if x < 0.0 || x.fract() != 0.0 || x > u64::MAX as f64 {
        return Err(bad(field, format!("`{v}` is not a non-negative integer")));
    }
    Ok(x as u64)
}

fn parse_bool(field: &str, v: &str) -> CliResult<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad(field, format!("`{v}` is not a boolean"))),
    }
}

fn optional<T>(field: &str, v: &str, parse: impl Fn(&str, &str) -> CliResult<T>) -> CliResult<Option<T>> {
    if v.trim().eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(field, v).map(Some)
    }
}

/// Builds and validates an experiment configuration from flat settings.
/// Also returns the output directory.
pub fn config_from_settings(s: &BTreeMap<String, String>) -> CliResult<(ExperimentConfig, PathBuf)> {
    let get = |k: &str| s.get(k).map(String::as_str);
    let ell = match (get("ell"), get("ellpow")) {
        (Some(_), Some(_)) => return Err(bad("ellpow", "give either `ell` or `ellpow`, not both")),
        (Some(v), None) => Some(parse_f64("ell", v)?),
        (None, Some(p)) => Some(10f64.powf(parse_f64("ellpow", p)?)),
        (None, None) => None,
    };
    let need_ell = || ell.ok_or_else(|| bad("ell", "required for this function"));
    let name = get("function").ok_or_else(|| bad("function", "required (f1, f2, f3, f4 or g)"))?;
    let function = match name.trim().to_ascii_lowercase().as_str() {
        "f1" => Family::F1 { ell: need_ell()? },
        "f2" | "rosenbrock" => Family::F2,
        "f3" => Family::F3 { ell: need_ell()? },
        "f4" => Family::F4 { ell: need_ell()? },
        "g" => Family::G {
            ell: need_ell()?,
            i: parse_count("i", get("i").ok_or_else(|| bad("i", "required for g"))?)? as usize,
        },
        other => return Err(bad("function", format!("unknown function `{other}`"))),
    };
    let n = match get("n") {
        Some(v) => parse_count("n", v)? as usize,
        None => 10,
    };
    let mut c = ExperimentConfig::new(function, n);
    if let Some(v) = get("algo") {
        c.algorithm = match v.trim() {
            "frp" => Algorithm::Frp,
            "vrp" => Algorithm::Vrp,
            o => return Err(bad("algo", format!("unknown algorithm `{o}` (frp or vrp)"))),
        };
    }
    if let Some(v) = get("init") {
        let v = v.trim();
        c.init = if v == "identity" {
            MatrixInit::Identity
        } else if let Some(x) = v.strip_prefix("scaled:") {
            MatrixInit::Scaled {
                value: parse_f64("init", x)?,
            }
        } else if let Some(p) = v.strip_prefix("file:") {
            MatrixInit::File { path: PathBuf::from(p) }
        } else {
            return Err(bad("init", format!("`{v}`: expected identity, scaled:<v> or file:<path>")));
        };
    }
    if let Some(v) = get("start") {
        c.start = match v.trim() {
            "canonical" => StartPoint::Canonical,
            "preset" => StartPoint::Preset,
            o => return Err(bad("start", format!("unknown start `{o}`"))),
        };
    }
    if let Some(v) = get("ls") {
        c.linesearch = match v.trim() {
            "exact" => LineSearchSpec::Exact { confirm: None },
            "exact-confirm" => LineSearchSpec::Exact { confirm: Some(true) },
            "exact-model" => LineSearchSpec::Exact { confirm: Some(false) },
            "es" => LineSearchSpec::Es {
                state: AdaptiveStepState::default(),
            },
            "bisection" => LineSearchSpec::Bisection { mu: 0.5, max_fes: 40 },
            o => return Err(bad("ls", format!("unknown line search `{o}`"))),
        };
    }
    match &mut c.linesearch {
        LineSearchSpec::Es { state } => {
            if let Some(v) = get("es_sigma") {
                state.sigma = parse_f64("es_sigma", v)?;
            }
            if let Some(v) = get("es_target_p") {
                state.target_p = parse_f64("es_target_p", v)?;
            }
            if let Some(v) = get("es_adapt") {
                state.adapt_factor = parse_f64("es_adapt", v)?;
            }
        }
        LineSearchSpec::Bisection { mu, max_fes } => {
            if let Some(v) = get("mu") {
                *mu = parse_f64("mu", v)?;
            }
            if let Some(v) = get("ls_fes") {
                *max_fes = parse_count("ls_fes", v)?;
            }
        }
        LineSearchSpec::Exact { .. } => {}
    }
    if let Some(v) = get("update") {
        c.update = match v.trim() {
            "plain" => UpdateScheme::Plain,
            "corr" => UpdateScheme::Corr,
            "store" => UpdateScheme::store_default(),
            o => return Err(bad("update", format!("unknown update scheme `{o}`"))),
        };
    }
    if let UpdateScheme::Store {
        reuse,
        m,
        capacity,
        every,
        start_after,
    } = &mut c.update
    {
        if let Some(v) = get("reuse") {
            *reuse = parse_bool("reuse", v)?;
        }
        if let Some(v) = get("m") {
            *m = parse_count("m", v)? as usize;
        }
        if let Some(v) = get("capacity") {
            *capacity = optional("capacity", v, parse_count)?.map(|x| x as usize);
        }
        if let Some(v) = get("reuse_every") {
            *every = optional("reuse_every", v, parse_count)?;
        }
        if let Some(v) = get("reuse_start") {
            *start_after = optional("reuse_start", v, parse_count)?;
        }
    }
    if let Some(v) = get("update_at") {
        let v = v.trim();
        c.update_at = if v == "interlaced" {
            UpdateAt::Interlaced
        } else if let Some(k) = v.strip_prefix("fixed:") {
            UpdateAt::FixedPoint {
                updates: parse_count("update_at", k)?,
            }
        } else {
            return Err(bad("update_at", format!("`{v}`: expected interlaced or fixed:<updates>")));
        };
    }
    if let Some(v) = get("eps") {
        c.eps = optional("eps", v, parse_f64)?;
    }
    if let Some(v) = get("budget") {
        c.budget_fes = optional("budget", v, parse_count)?;
    }
    if let Some(v) = get("max_iter") {
        c.max_iterations = optional("max_iter", v, parse_count)?;
    }
    if let Some(v) = get("target") {
        c.target_gap = optional("target", v, parse_f64)?;
    }
    if let Some(v) = get("trials") {
        c.trials = parse_count("trials", v)? as usize;
    }
    if let Some(v) = get("seed") {
        c.seed = parse_count("seed", v)?;
    }
    if let Some(v) = get("transform") {
        c.transform = parse_bool("transform", v)?;
    }
    if let Some(v) = get("record_every") {
        c.record.every = parse_count("record_every", v)?;
    }
    if let Some(v) = get("kappa") {
        c.record.kappa = parse_bool("kappa", v)?;
    }
    if let Some(v) = get("spectrum") {
        c.record.spectrum = parse_bool("spectrum", v)?;
    }
    c.validate()?;
    let out = PathBuf::from(get("out").unwrap_or("rpursuit-out"));
    Ok((c, out))
}

fn opt_str<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "none".to_string())
}

/// Flat `key = value` text that [`config_from_settings`] maps back to `c`.
pub fn emit_config(c: &ExperimentConfig, out: &Path) -> String {
    let mut kv: Vec<(&str, String)> = Vec::new();
    let (name, ell, i) = match c.function {
        Family::F1 { ell } => ("f1", Some(ell), None),
        Family::F2 => ("f2", None, None),
        Family::F3 { ell } => ("f3", Some(ell), None),
        Family::F4 { ell } => ("f4", Some(ell), None),
        Family::G { ell, i } => ("g", Some(ell), Some(i)),
    };
    kv.push(("function", name.into()));
    if let Some(i) = i {
        kv.push(("i", i.to_string()));
    }
    if let Some(ell) = ell {
        kv.push(("ell", format!("{ell:e}")));
    }
    kv.push(("n", c.n.to_string()));
    kv.push((
        "algo",
        match c.algorithm {
            Algorithm::Frp => "frp".into(),
            Algorithm::Vrp => "vrp".into(),
        },
    ));
    kv.push((
        "init",
        match &c.init {
            MatrixInit::Identity => "identity".into(),
            MatrixInit::Scaled { value } => format!("scaled:{value:e}"),
            MatrixInit::File { path } => format!("file:{}", path.display()),
        },
    ));
    kv.push((
        "start",
        match c.start {
            StartPoint::Canonical => "canonical".into(),
            StartPoint::Preset => "preset".into(),
        },
    ));
    match c.linesearch {
        LineSearchSpec::Exact { confirm } => kv.push((
            "ls",
            match confirm {
                None => "exact".into(),
                Some(true) => "exact-confirm".into(),
                Some(false) => "exact-model".into(),
            },
        )),
        LineSearchSpec::Es { state } => {
            kv.push(("ls", "es".into()));
            kv.push(("es_sigma", format!("{:e}", state.sigma)));
            kv.push(("es_target_p", format!("{:e}", state.target_p)));
            kv.push(("es_adapt", format!("{:e}", state.adapt_factor)));
        }
        LineSearchSpec::Bisection { mu, max_fes } => {
            kv.push(("ls", "bisection".into()));
            kv.push(("mu", format!("{mu:e}")));
            kv.push(("ls_fes", max_fes.to_string()));
        }
    }
    match c.update {
        UpdateScheme::Plain => kv.push(("update", "plain".into())),
        UpdateScheme::Corr => kv.push(("update", "corr".into())),
        UpdateScheme::Store {
            reuse,
            m,
            capacity,
            every,
            start_after,
        } => {
            kv.push(("update", "store".into()));
            kv.push(("reuse", reuse.to_string()));
            kv.push(("m", m.to_string()));
            kv.push(("capacity", opt_str(capacity)));
            kv.push(("reuse_every", opt_str(every)));
            kv.push(("reuse_start", opt_str(start_after)));
        }
    }
    kv.push((
        "update_at",
        match c.update_at {
            UpdateAt::Interlaced => "interlaced".into(),
            UpdateAt::FixedPoint { updates } => format!("fixed:{updates}"),
        },
    ));
    kv.push(("eps", c.eps.map(|e| format!("{e:e}")).unwrap_or_else(|| "none".into())));
    kv.push(("budget", opt_str(c.budget_fes)));
    kv.push(("max_iter", opt_str(c.max_iterations)));
    kv.push(("target", c.target_gap.map(|t| format!("{t:e}")).unwrap_or_else(|| "none".into())));
    kv.push(("trials", c.trials.to_string()));
    kv.push(("seed", c.seed.to_string()));
    kv.push(("transform", c.transform.to_string()));
    kv.push(("record_every", c.record.every.to_string()));
    kv.push(("kappa", c.record.kappa.to_string()));
    kv.push(("spectrum", c.record.spectrum.to_string()));
    kv.push(("out", out.display().to_string()));
    let mut s = String::new();
    for (k, v) in kv {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

// ---------------------------------------------------------------------------
// run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub detected: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub schema: String,
    pub label: String,
    pub config: ExperimentConfig,
    pub table: DecadeTable,
    pub stop_reasons: BTreeMap<String, usize>,
    /// Length of the metric learning phase, in iterations.
    pub learning_phase: PhaseStats,
    pub trials: Vec<TrialSummary>,
}

impl SummaryFile {
    pub fn from_experiment(e: &Experiment) -> Self {
        let trials = e.summaries();
        let mut stop_reasons = BTreeMap::new();
        for t in &trials {
            let key = match t.stop_reason {
                StopReason::Target => "target",
                StopReason::Budget => "budget",
                StopReason::Iterations => "iterations",
            };
            *stop_reasons.entry(key.to_string()).or_insert(0) += 1;
        }
        let mut phases: Vec<f64> = trials.iter().filter_map(|t| t.learning_phase_end).map(|k| k as f64).collect();
        phases.sort_by(f64::total_cmp);
        let learning_phase = PhaseStats {
            detected: phases.len(),
            mean: (!phases.is_empty()).then(|| phases.iter().sum::<f64>() / phases.len() as f64),
            median: (!phases.is_empty()).then(|| {
                let m = phases.len() / 2;
                if phases.len() % 2 == 1 {
                    phases[m]
                } else {
                    0.5 * (phases[m - 1] + phases[m])
                }
            }),
        };
        let table = e.decade_table();
        Self {
            schema: SUMMARY_SCHEMA.to_string(),
            label: table.label.clone(),
            config: e.config.clone(),
            table,
            stop_reasons,
            learning_phase,
            trials,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn trajectories_csv(e: &Experiment) -> String {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    for t in &e.trials {
        for r in &t.trajectory.records {
            let (lo, hi) = match &r.spectrum {
                Some(sp) if !sp.is_empty() => (Some(sp[0]), Some(sp[sp.len() - 1])),
                _ => (None, None),
            };
            let _ = writeln!(
                s,
                "{},{},{},{:e},{},{},{},{}",
                t.summary.trial_index,
                r.iteration,
                r.fes,
                r.fval,
                fmt_opt(r.gap),
                fmt_opt(r.kappa),
                fmt_opt(lo),
                fmt_opt(hi)
            );
        }
    }
    s
}

pub fn plot_csv(e: &Experiment) -> String {
    let mut s = String::from(PLOT_HEADER);
    s.push('\n');
    for p in e.plot_series() {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", p.iteration, p.mean, p.min, p.max);
    }
    s
}

/// Runs the experiment and writes `trajectories.csv`, `summary.json`,
/// `plot.csv` and `config.txt` into the output directory.
pub fn cmd_run(args: &RunArgs) -> CliResult<PathBuf> {
    let (config, out) = config_from_settings(&args.settings()?)?;
    let exec = if args.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    log::info!("running {} trials of {}", config.trials, config.label());
    let e = run_experiment(&config, exec)?;
    // all file writes happen here, after every trial has joined
    let io = |p: &Path, e: std::io::Error| CliError::Runtime(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(&out).map_err(|err| io(&out, err))?;
    let summary = serde_json::to_string_pretty(&SummaryFile::from_experiment(&e))
        .map_err(|err| CliError::Runtime(err.to_string()))?;
    let files = [
        ("trajectories.csv", trajectories_csv(&e)),
        ("summary.json", summary + "\n"),
        ("plot.csv", plot_csv(&e)),
        ("config.txt", emit_config(&config, &out)),
    ];
    for (name, body) in files {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|err| io(&p, err))?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// table

pub fn read_summary(path: &Path) -> CliResult<SummaryFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let s: SummaryFile =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if s.schema != SUMMARY_SCHEMA {
        return Err(CliError::Validation(format!(
            "{}: unsupported schema `{}` (expected `{SUMMARY_SCHEMA}`)",
            path.display(),
            s.schema
        )));
    }
    Ok(s)
}

/// Mean FES/n² per decade; a cell is shown only when every trial reached it.
pub fn format_table(tables: &[DecadeTable], format: TableFormat) -> CliResult<String> {
    if let Some(first) = tables.first() {
        if let Some(t) = tables.iter().find(|t| t.n != first.n) {
            return Err(CliError::Validation(format!(
                "mixed dimensions: `{}` has n = {}, `{}` has n = {}",
                first.label, first.n, t.label, t.n
            )));
        }
    }
    let decades: Vec<i32> = DECADES.rev().collect();
    let cell = |t: &DecadeTable, d: i32| {
        t.rows
            .iter()
            .find(|r| r.decade == d)
            .filter(|r| r.reached == t.trials && t.trials > 0)
            .and_then(|r| r.mean)
            .map(|m| format!("{m:.2}"))
            .unwrap_or_else(|| "-".to_string())
    };
    let mut s = String::new();
    match format {
        TableFormat::Csv => {
            s.push_str("config");
            for d in &decades {
                let _ = write!(s, ",1e{d}");
            }
            s.push('\n');
            for t in tables {
                s.push_str(&t.label.replace(',', ";"));
                for &d in &decades {
                    let _ = write!(s, ",{}", cell(t, d));
                }
                s.push('\n');
            }
        }
        TableFormat::Text => {
            let w = tables.iter().map(|t| t.label.len()).max().unwrap_or(6).max(6);
            let _ = write!(s, "{:<w$}", "config");
            for d in &decades {
                let _ = write!(s, " {:>8}", format!("1e{d}"));
            }
            s.push('\n');
            for t in tables {
                let _ = write!(s, "{:<w$}", t.label);
                for &d in &decades {
                    let _ = write!(s, " {:>8}", cell(t, d));
                }
                s.push('\n');
            }
        }
    }
    Ok(s)
}

pub fn cmd_table(inputs: &[PathBuf], format: TableFormat) -> CliResult<String> {
    let tables: Vec<DecadeTable> = inputs
        .iter()
        .map(|p| read_summary(p).map(|s| s.table))
        .collect::<CliResult<_>>()?;
    format_table(&tables, format)
}

// ---------------------------------------------------------------------------
// verify

/// One measured quantity against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured ≤ tolerance`.
    pub fn at_most(suite: &str, name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.to_string(),
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }

    /// Passes when `measured ≥ tolerance`.
    pub fn at_least(suite: &str, name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            passed: measured >= tolerance,
            ..Self::at_most(suite, name, measured, tolerance)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: String,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Random SPD matrix with spectrum in `[lo, hi]`.
pub fn random_spd_in(n: usize, lo: f64, hi: f64, rng: &mut SeededRng) -> DMatrix<f64> {
    let q = haar_rotation(n, rng);
    let d = DVector::from_fn(n, |_, _| lo + (hi - lo) * rng.uniform());
    let m = &q * DMatrix::from_diagonal(&d) * q.transpose();
    (&m + m.transpose()) * 0.5
}

fn random_symmetric(n: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
    (&g + g.transpose()) * 0.5
}

/// Normalized-direction moments and the Gaussian fourth-moment identities,
/// as z-scores against the closed forms.
pub fn verify_moments(dims: &[usize], samples: usize, seed: u64, exec: Execution) -> crate::error::Result<Vec<Check>> {
    const SUITE: &str = "moments";
    let mut out = Vec::new();
    for &n in dims {
        let mut rng = SeededRng::new(seed ^ (n as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
        let sigma = PdMatrix::from_matrix(random_spd_in(n, 0.5, 3.0, &mut rng))?;
        let a = SymmetricMatrix::symmetrized(random_symmetric(n, &mut rng));
        let x = rng.normal_vector(n);
        let est = estimate_moments(&sigma, &a, &x, samples, &mut rng, exec)?;
        let cf = MomentClosedForm::normalized(&sigma, &a, &x);
        let z = |name: &str, v: f64| Check::at_most(SUITE, format!("n={n} {name}"), v, 3.0);
        out.push(z(
            "E[vvᵀ]",
            frobenius_z_score(est.outer.mean.as_slice(), est.outer.std_err.as_slice(), cf.outer.as_slice()),
        ));
        out.push(z("E[vᵀAv]", z_score(&est.quad, cf.quad)));
        out.push(z("E[(vᵀAv)²]", z_score(&est.quad_sq, cf.quad_sq)));
        out.push(z(
            "E[⟨x,v⟩v]",
            frobenius_z_score(
                est.projection.mean.as_slice(),
                est.projection.std_err.as_slice(),
                cf.projection.as_slice(),
            ),
        ));
        out.push(z("E[‖⟨x,v⟩v‖²_A]", z_score(&est.projection_norm_sq, cf.projection_norm_sq)));
        let g = estimate_gaussian_moments(&sigma, &a, &x, samples, &mut rng, exec)?;
        let gf = MomentClosedForm::gaussian(&sigma, &a, &x);
        out.push(z("gaussian E[(uᵀAu)²]", z_score(&g.quad_sq, gf.quad_sq)));
        out.push(z("gaussian E[‖⟨x,u⟩u‖²_A]", z_score(&g.projection_norm_sq, gf.projection_norm_sq)));
    }
    Ok(out)
}

/// Largest entrywise deviation between the factored and the direct
/// recurrence matrix over `n = 2..=max_n`.
pub fn verify_diag(max_n: usize) -> crate::error::Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for n in 2..=max_n {
        let d = (diagonalization_product(n)? - recurrence_matrix(n)?).amax();
        worst = worst.max(d);
    }
    Ok(vec![Check::at_most(
        "diag",
        format!("max |PDQ − C(n)|, n = 2..{max_n}"),
        worst,
        1e-12,
    )])
}

/// Mean and standard error of `(‖X_k‖²_F, Tr[X_k]²)` at each checkpoint over
/// `runs` simulated sequences of exact rank-one updates `X ← X − (uᵀXu)uuᵀ`.
pub fn simulate_rhe(
    x0: &DMatrix<f64>,
    checkpoints: &[u64],
    runs: usize,
    seed: u64,
    exec: Execution,
) -> Vec<[(f64, f64); 2]> {
    let n = x0.nrows();
    let last = checkpoints.iter().copied().max().unwrap_or(0);
    let per_run = map_indexed(runs, exec, |r| {
        let mut rng = SeededRng::for_trial(seed, r);
        let mut x = x0.clone();
        let mut vals = Vec::with_capacity(checkpoints.len());
        let mut next = 0;
        for k in 0..=last {
            while next < checkpoints.len() && checkpoints[next] == k {
                vals.push((x.norm_squared(), x.trace().powi(2)));
                next += 1;
            }
            if k == last {
                break;
            }
            let u = sample_isotropic(n, &mut rng).u;
            let s = u.dot(&(&x * &u));
            x.ger(-s, &u, &u, 1.0);
        }
        vals
    });
    let m = runs as f64;
    (0..checkpoints.len())
        .map(|c| {
            let mut out = [(0.0, 0.0); 2];
            for (q, slot) in out.iter_mut().enumerate() {
                let vals: Vec<f64> = per_run.iter().map(|v| if q == 0 { v[c].0 } else { v[c].1 }).collect();
                let mean = vals.iter().sum::<f64>() / m;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
                *slot = (mean, (var / m).sqrt());
            }
            out
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Closed form vs direct iteration vs simulation for the expected error of
/// the rank-one Hessian update.
pub fn verify_rhe_exact(
    n: usize,
    steps: u64,
    runs: usize,
    seed: u64,
    exec: Execution,
) -> crate::error::Result<Vec<Check>> {
    const SUITE: &str = "rhe-exact";
    let mut out = Vec::new();
    let mut rng = SeededRng::new(seed);
    let traceless = {
        let mut x = random_symmetric(n, &mut rng);
        let t = x.trace() / n as f64;
        for i in 0..n {
            x[(i, i)] -= t;
        }
        let f = x.norm();
        x / f
    };
    let scaled_identity = DMatrix::<f64>::identity(n, n);
    let rate = 1.0 - 2.0 / (n as f64 * (n as f64 + 2.0));
    let mut checkpoints: Vec<u64> = [1, 10, steps / 6, steps / 3, 2 * steps / 3, steps]
        .into_iter()
        .filter(|&k| k >= 1 && k <= steps)
        .collect();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    for (label, x0) in [("traceless", &traceless), ("Tr²=n·frob", &scaled_identity)] {
        let s0 = RheState::from_error(x0);
        let mut worst_rel = 0.0f64;
        let mut worst_bound = 0.0f64;
        let mut iter = s0;
        let c = recurrence_matrix(n)?;
        for k in 1..=steps {
            let v = c * nalgebra::Vector2::new(iter.frob_sq, iter.trace_sq);
            iter = RheState {
                frob_sq: v[0],
                trace_sq: v[1],
            };
            let cf = rhe_exact_expectation(s0, n, k)?.state;
            worst_rel = worst_rel.max(rel(cf.frob_sq, iter.frob_sq));
            if iter.trace_sq > 1e-14 * iter.frob_sq {
                worst_rel = worst_rel.max(rel(cf.trace_sq, iter.trace_sq));
            } else {
                worst_rel = worst_rel.max((cf.trace_sq - iter.trace_sq).abs() / iter.frob_sq);
            }
            worst_bound = worst_bound.max(cf.frob_sq / (rate.powi(k as i32) * s0.frob_sq));
        }
        let direct = rhe_recurrence_iterate(s0, n, steps)?;
        worst_rel = worst_rel.max(rel(rhe_exact_expectation(s0, n, steps)?.state.frob_sq, direct.frob_sq));
        out.push(Check::at_most(SUITE, format!("{label}: closed form vs iteration (rel)"), worst_rel, 1e-10));
        out.push(Check::at_most(
            SUITE,
            format!("{label}: E‖X_N‖²_F / upper bound, N ≤ {steps}"),
            worst_bound,
            1.0 + 1e-12,
        ));
        let sim = simulate_rhe(x0, &checkpoints, runs, seed.wrapping_add(17), exec);
        let mut worst_z = 0.0f64;
        for (k, m) in checkpoints.iter().zip(&sim) {
            let cf = rhe_exact_expectation(s0, n, *k)?.state;
            for ((mean, se), target) in m.iter().zip([cf.frob_sq, cf.trace_sq]) {
                let z = if *se > 0.0 {
                    (mean - target).abs() / se
                } else if (mean - target).abs() <= 1e-12 * target.abs().max(1.0) {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst_z = worst_z.max(z);
            }
        }
        out.push(Check::at_most(
            SUITE,
            format!("{label}: simulation vs closed form, max z over N ∈ {checkpoints:?}"),
            worst_z,
            3.0,
        ));
    }
    Ok(out)
}

/// One rank-one update at a fixed pair: `E‖B₊ − H‖²_F` against
/// `g − (2g + Tr[B − H]²)/(n(n+2))` with `g = ‖B − H‖²_F`.
pub fn verify_single_step(n: usize, samples: usize, seed: u64) -> crate::error::Result<Check> {
    let mut rng = SeededRng::new(seed);
    let b = random_spd_in(n, 0.5, 4.0, &mut rng);
    let h = random_spd_in(n, 0.5, 4.0, &mut rng);
    let x = &b - &h;
    let g = x.norm_squared();
    let nf = n as f64;
    let target = g - (2.0 * g + x.trace().powi(2)) / (nf * (nf + 2.0));
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let u = sample_isotropic(n, &mut rng).u;
        let coef = u.dot(&(&h * &u)) - u.dot(&(&b * &u));
        let mut bp = b.clone();
        bp.ger(coef, &u, &u, 1.0);
        let v = (bp - &h).norm_squared();
        s1 += v;
        s2 += v * v;
    }
    let m = samples as f64;
    let mean = s1 / m;
    let se = ((s2 / m - mean * mean).max(0.0) / (m - 1.0).max(1.0)).sqrt();
    let z = if se > 0.0 { (mean - target).abs() / se } else { 0.0 };
    Ok(Check::at_most("rhe-exact", format!("n={n} one-step expectation (z)"), z, 3.0))
}

/// Runs corrected updates on the Hessian of `f3` and audits every iterate.
pub fn verify_pd(n: usize, ell: f64, steps: usize, seed: u64) -> crate::error::Result<Vec<Check>> {
    const SUITE: &str = "pd";
    let inst = crate::bench::make_f3(n, ell)?;
    let h = DMatrix::from_diagonal(inst.coefficients().expect("quadratic family"));
    let mut f = Quadratic::new(h);
    let x = DVector::from_element(n, 1.0);
    use crate::oracle::Objective;
    let fx = f.value(&x);
    let mut est = HessianEstimate::new(&PdMatrix::from_diagonal(&vec![ell / 2.0; n])?);
    let mut rng = SeededRng::new(seed);
    let (mut not_pd, mut rejected) = (0usize, 0usize);
    for _ in 0..steps {
        let out = update_corr(&mut f, &x, fx, &mut est, 1.0, &mut rng)?;
        if !out.accepted {
            rejected += 1;
        }
        if !pd_check(&SymmetricMatrix::symmetrized(est.b().clone())) {
            not_pd += 1;
        }
    }
    Ok(vec![
        Check::at_most(SUITE, format!("{steps} corrected updates: iterates failing the PD check"), not_pd as f64, 0.0),
        Check::at_most(SUITE, format!("{steps} corrected updates: rejected updates"), rejected as f64, 0.0),
    ])
}

/// Random triples `(B, H, X)` meeting the premises of the condition-number
/// transfer bound; counts violations of `κ(H⁻¹B) ≤ (d + c)/(1 − c)`.
pub fn verify_propagation(triples: usize, seed: u64) -> crate::error::Result<Vec<Check>> {
    let mut rng = SeededRng::new(seed);
    let mut violations = 0usize;
    let mut made = 0usize;
    let mut worst_ratio = 0.0f64;
    while made < triples {
        let n = 2 + (rng.uniform() * 7.0) as usize;
        let a = 0.2 + rng.uniform();
        let b = a * (1.5 + 20.0 * rng.uniform());
        let c = 0.95 * rng.uniform();
        let hm = random_spd_in(n, a, b, &mut rng);
        let xm = random_spd_in(n, a, b, &mut rng);
        let mut e = random_symmetric(n, &mut rng);
        let radius = a * a * c / b * rng.uniform();
        let en = e.norm();
        e *= radius / en;
        let bm = &xm + e;
        let ev = nalgebra::SymmetricEigen::new(bm.clone()).eigenvalues;
        if ev.min() < a || ev.max() > b {
            continue;
        }
        made += 1;
        let hp = PdMatrix::from_matrix(hm)?;
        let d = generalized_condition(&PdMatrix::from_matrix(xm)?, &hp)?;
        let kb = generalized_condition(&PdMatrix::from_matrix(bm)?, &hp)?;
        let bound = crate::theory::kappa_propagation(a, b, c, d.max(1.0))?;
        worst_ratio = worst_ratio.max(kb / bound);
        if kb > bound * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    Ok(vec![
        Check::at_most("propagation", format!("{triples} triples: violations"), violations as f64, 0.0),
        Check::at_most("propagation", "max κ(H⁻¹B) / bound", worst_ratio, 1.0 + 1e-12),
    ])
}

/// Fraction of random pairs `(B, H)` for which the average of
/// `(uᵀ(B − H)u)²` over a fresh stored set of `h` normalized directions is at
/// least `(1 − ε)` times its expectation under fresh sampling.
pub fn store_concentration_fraction(n: usize, h: usize, pairs: usize, eps: f64, seed: u64, exec: Execution) -> f64 {
    let ok = map_indexed(pairs, exec, |p| {
        let mut rng = SeededRng::for_trial(seed, p);
        let b = random_spd_in(n, 0.5, 5.0, &mut rng);
        let hm = random_spd_in(n, 0.5, 5.0, &mut rng);
        let x = &b - &hm;
        let nf = n as f64;
        let expected = (x.trace().powi(2) + 2.0 * x.norm_squared()) / (nf * (nf + 2.0));
        let store: Vec<DVector<f64>> = (0..h).map(|_| sample_isotropic(n, &mut rng).u).collect();
        let empirical = store.iter().map(|u| u.dot(&(&x * u)).powi(2)).sum::<f64>() / h as f64;
        empirical >= (1.0 - eps) * expected
    });
    ok.iter().filter(|&&b| b).count() as f64 / pairs as f64
}

pub fn verify_store(n: usize, pairs: usize, seed: u64, exec: Execution) -> Vec<Check> {
    let frac = store_concentration_fraction(n, 5 * n * n, pairs, 0.5, seed, exec);
    vec![Check::at_least(
        "store",
        format!("n={n}, h=5n²: fraction of stores within ε = 0.5 of the fresh-sample expectation"),
        frac,
        0.95,
    )]
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<VerifyReport> {
    let samples = parse_count("samples", &args.samples)? as usize;
    if samples < 2 {
        return Err(bad("samples", "need at least 2"));
    }
    if args.runs < 2 {
        return Err(bad("runs", "need at least 2"));
    }
    let exec = if args.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let seed = args.seed;
    let want = |s: Suite| args.suite == s || args.suite == Suite::All;
    let mut checks = Vec::new();
    if want(Suite::Moments) {
        checks.extend(verify_moments(&[3, 5, 8], samples, seed, exec)?);
    }
    if want(Suite::Diag) {
        checks.extend(verify_diag(100)?);
    }
    if want(Suite::RheExact) {
        checks.extend(verify_rhe_exact(8, 300, args.runs, seed, exec)?);
        checks.push(verify_single_step(5, 100_000, seed.wrapping_add(99))?);
    }
    if want(Suite::Pd) {
        checks.extend(verify_pd(10, 1e4, 10_000, seed)?);
    }
    if want(Suite::Propagation) {
        checks.extend(verify_propagation(200, seed)?);
    }
    if want(Suite::Store) {
        checks.extend(verify_store(6, 200, seed, exec));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    let report = VerifyReport {
        schema: VERIFY_SCHEMA.to_string(),
        seed,
        passed: failed == 0,
        checks,
    };
    if let Some(p) = &args.out {
        let body = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(p, body + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
    }
    if failed > 0 {
        println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
        return Err(CliError::VerificationFailed(failed));
    }
    Ok(report)
}
