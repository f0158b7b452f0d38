//! Batch front end for the `gstap` binary.
//!
//! Settings come from an optional `key = value` file (`--config`) and from
//! flags, flags winning. Keys are the flag names with `-` replaced by `_`;
//! `#` starts a comment. Every output document starts with a header holding
//! the tool version and the full effective configuration in `key = value`
//! form. The worker count is left out because it does not affect results.
//!
//! Exit codes: 0 success, 1 usage, 2 numerical failure (non-convergence,
//! enumeration cap), 3 I/O.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::experiments::{
    concentration_experiment, physicist_tap_residuals, scaling_study, tap_residuals, ExperimentError, ExperimentSetup,
    Observable, SitePolicy, TapResidualReport, DEFAULT_DISORDER_EXACT, DEFAULT_DISORDER_MCMC,
};
use crate::fixedpoint::{beta_tilde, contraction_certificate, solve, ModelParams, OrderParams, SolveOptions, SolveReport};
use crate::gibbs::{enumerate, mcmc_run, DisorderSample, EnumerateOptions, GibbsError, GibbsStats, McmcOptions, StatsMode, DEFAULT_BATCHES, DEFAULT_ENUMERATION_CAP};
use crate::quadrature::{GaussianRule, DEFAULT_ORDER, MAX_ORDER};
use crate::seeding::derive_seed;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default worker count when `--workers` is absent.
pub const WORKERS_ENV: &str = "GSTAP_WORKERS";

pub const CSV_COLUMNS: [&str; 14] =
    ["experiment", "N", "S", "beta", "D", "h", "p", "q", "seed", "estimate", "std_error", "bound", "mode", "site_policy"];

const KEYS: [&str; 23] = [
    "S",
    "beta",
    "D",
    "h",
    "n",
    "n_grid",
    "n_disorder",
    "mode",
    "sweeps",
    "burn_in",
    "replicas",
    "quadrature_order",
    "tol",
    "max_iter",
    "damping",
    "seed",
    "output",
    "format",
    "site_policy",
    "which",
    "workers",
    "cap",
    "config",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<GibbsError> for CliError {
    fn from(e: GibbsError) -> Self {
        match e {
            GibbsError::CapExceeded { .. } => CliError::Numeric(format!("{e}; use --mode mcmc for this size")),
            GibbsError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Gibbs(g) => g.into(),
            ExperimentError::NonPositive(_) => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    Enumerate,
    Mcmc,
    Tap,
    TapPhysics,
    Concentration,
    Scaling,
    Certificate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "gstap", version, about = "Ghatak-Sherrington order parameters, Gibbs averages and TAP checks")]
#[command(allow_negative_numbers = true)]
struct Args {
    command: Command,
    /// Largest spin magnitude
    #[arg(long = "S")]
    s: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    /// Crystal field
    #[arg(long = "D")]
    d: Option<String>,
    /// External field
    #[arg(long = "h")]
    h: Option<String>,
    /// System size
    #[arg(long)]
    n: Option<String>,
    /// Comma-separated sizes for `scaling`
    #[arg(long = "n-grid")]
    n_grid: Option<String>,
    #[arg(long = "n-disorder")]
    n_disorder: Option<String>,
    /// exact | mcmc
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    sweeps: Option<String>,
    #[arg(long = "burn-in")]
    burn_in: Option<String>,
    #[arg(long)]
    replicas: Option<String>,
    #[arg(long = "quadrature-order")]
    quadrature_order: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long = "max-iter")]
    max_iter: Option<String>,
    #[arg(long)]
    damping: Option<String>,
    /// Master seed
    #[arg(long)]
    seed: Option<String>,
    /// Output file; stdout when absent
    #[arg(long)]
    output: Option<String>,
    /// csv | json
    #[arg(long)]
    format: Option<String>,
    /// site_N | site_averaged | both
    #[arg(long = "site-policy")]
    site_policy: Option<String>,
    /// tap_m | tap_p | conc_r12 | conc_r11
    #[arg(long)]
    which: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    /// Largest state count for exact enumeration
    #[arg(long)]
    cap: Option<String>,
    /// `key = value` settings file
    #[arg(long)]
    config: Option<String>,
}

impl Args {
    fn flag_values(self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("S", self.s),
            ("beta", self.beta),
            ("D", self.d),
            ("h", self.h),
            ("n", self.n),
            ("n_grid", self.n_grid),
            ("n_disorder", self.n_disorder),
            ("mode", self.mode),
            ("sweeps", self.sweeps),
            ("burn_in", self.burn_in),
            ("replicas", self.replicas),
            ("quadrature_order", self.quadrature_order),
            ("tol", self.tol),
            ("max_iter", self.max_iter),
            ("damping", self.damping),
            ("seed", self.seed),
            ("output", self.output),
            ("format", self.format),
            ("site_policy", self.site_policy),
            ("which", self.which),
            ("workers", self.workers),
            ("cap", self.cap),
        ]
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub model: ModelParams,
    pub n: usize,
    pub n_grid: Vec<usize>,
    pub n_disorder: usize,
    pub mode: StatsMode,
    pub sweeps: u64,
    pub burn_in: u64,
    pub replicas: u32,
    pub quadrature_order: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    pub master_seed: u64,
    pub output_path: Option<PathBuf>,
    pub output_format: OutputFormat,
    /// `None` reports both policies.
    pub site_policy: Option<SitePolicy>,
    pub which: Observable,
    pub workers: Option<usize>,
    pub cap: u64,
}

/// Parses a `key = value` settings file.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected `key = value`", lineno + 1)));
        };
        let key = key.trim();
        if key == "config" || !KEYS.contains(&key) {
            return Err(CliError::Usage(format!("config line {}: unknown key `{key}`", lineno + 1)));
        }
        out.insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn value<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, CliError> {
    map.get(key)
        .map(|v| v.parse::<T>().map_err(|_| CliError::Usage(format!("invalid value `{v}` for `{key}`"))))
        .transpose()
}

fn range_error(key: &str, what: &str) -> CliError {
    CliError::Usage(format!("`{key}` out of range: {what}"))
}

fn finite(map: &BTreeMap<String, String>, key: &str, default: f64) -> Result<f64, CliError> {
    let v = value::<f64>(map, key)?.unwrap_or(default);
    if !v.is_finite() {
        return Err(range_error(key, "must be finite"));
    }
    Ok(v)
}

fn at_least<T: FromStr + PartialOrd + Copy + std::fmt::Display>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
    min: T,
) -> Result<T, CliError> {
    let v = value::<T>(map, key)?.unwrap_or(default);
    if v < min {
        return Err(range_error(key, &format!("must be at least {min}")));
    }
    Ok(v)
}

/// Builds a [`RunConfig`] from `command` and the merged settings.
pub fn resolve(command: Command, map: &BTreeMap<String, String>) -> Result<RunConfig, CliError> {
    if let Some(key) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(CliError::Usage(format!("unknown key `{key}`")));
    }
    let spin_max = at_least::<u32>(map, "S", 1, 1)?;
    let beta = finite(map, "beta", 0.1)?;
    if beta < 0.0 {
        return Err(range_error("beta", "must be non-negative"));
    }
    let model = ModelParams::new(spin_max, beta, finite(map, "D", 0.0)?, finite(map, "h", 0.0)?)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let mode = match map.get("mode").map(String::as_str) {
        None | Some("exact") => StatsMode::Exact,
        Some("mcmc") => StatsMode::Mcmc,
        Some(v) => return Err(CliError::Usage(format!("invalid value `{v}` for `mode` (exact | mcmc)"))),
    };
    let n_grid = match map.get("n_grid") {
        None => vec![6, 8, 10, 12],
        Some(v) => v
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::Usage(format!("invalid value `{v}` for `n_grid`")))?,
    };
    if n_grid.len() < 3 || n_grid[0] == 0 || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(range_error("n_grid", "needs at least 3 strictly increasing positive sizes"));
    }
    let default_disorder = if mode == StatsMode::Exact { DEFAULT_DISORDER_EXACT } else { DEFAULT_DISORDER_MCMC };
    let mcmc_defaults = McmcOptions::default();
    let sweeps = at_least::<u64>(map, "sweeps", mcmc_defaults.sweeps, 2)?;
    let replicas = at_least::<u32>(map, "replicas", mcmc_defaults.replicas, 1)?;
    if replicas < 2 && mode == StatsMode::Mcmc && matches!(command, Command::Concentration | Command::Scaling) {
        return Err(range_error("replicas", "overlap moments need at least 2"));
    }
    let quadrature_order = at_least::<usize>(map, "quadrature_order", DEFAULT_ORDER, 1)?;
    if quadrature_order > MAX_ORDER {
        return Err(range_error("quadrature_order", &format!("must be at most {MAX_ORDER}")));
    }
    let solve_defaults = SolveOptions::default();
    let tol = finite(map, "tol", solve_defaults.tol)?;
    if tol <= 0.0 {
        return Err(range_error("tol", "must be positive"));
    }
    let damping = finite(map, "damping", solve_defaults.damping)?;
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(range_error("damping", "must lie in (0, 1]"));
    }
    let output_format = match map.get("format").map(String::as_str) {
        None | Some("csv") => OutputFormat::Csv,
        Some("json") => OutputFormat::Json,
        Some(v) => return Err(CliError::Usage(format!("invalid value `{v}` for `format` (csv | json)"))),
    };
    let site_policy = match map.get("site_policy").map(String::as_str) {
        None | Some("both") => None,
        Some("site_N" | "site_n") => Some(SitePolicy::SiteN),
        Some("site_averaged") => Some(SitePolicy::SiteAveraged),
        Some(v) => {
            return Err(CliError::Usage(format!(
                "invalid value `{v}` for `site_policy` (site_N | site_averaged | both)"
            )))
        }
    };
    let which = match map.get("which").map(String::as_str) {
        None | Some("tap_m") => Observable::TapM,
        Some("tap_p") => Observable::TapP,
        Some("conc_r12") => Observable::ConcR12,
        Some("conc_r11") => Observable::ConcR11,
        Some(v) => {
            return Err(CliError::Usage(format!(
                "invalid value `{v}` for `which` (tap_m | tap_p | conc_r12 | conc_r11)"
            )))
        }
    };
    let workers = match value::<usize>(map, "workers")? {
        Some(0) => return Err(range_error("workers", "must be at least 1")),
        w => w,
    };

    Ok(RunConfig {
        command,
        model,
        n: at_least::<usize>(map, "n", 8, 1)?,
        n_grid,
        n_disorder: at_least::<usize>(map, "n_disorder", default_disorder, 1)?,
        mode,
        sweeps,
        burn_in: value::<u64>(map, "burn_in")?.unwrap_or(mcmc_defaults.burn_in),
        replicas,
        quadrature_order,
        tol,
        max_iter: at_least::<usize>(map, "max_iter", solve_defaults.max_iter, 1)?,
        damping,
        master_seed: value::<u64>(map, "seed")?.unwrap_or(0),
        output_path: map.get("output").map(PathBuf::from),
        output_format,
        site_policy,
        which,
        workers,
        cap: at_least::<u64>(map, "cap", DEFAULT_ENUMERATION_CAP, 1)?,
    })
}

/// Parses command-line arguments (program name first) plus any `--config` file.
pub fn parse_config<I, T>(args: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = Args::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    let command = args.command;
    let mut map = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading {path}: {e}")))?;
            parse_config_file(&text)?
        }
        None => BTreeMap::new(),
    };
    for (key, v) in args.flag_values() {
        if let Some(v) = v {
            map.insert(key.to_string(), v);
        }
    }
    resolve(command, &map)
}

impl RunConfig {
    /// Effective settings in `key = value` form, in a fixed order.
    pub fn effective_pairs(&self) -> Vec<(&'static str, String)> {
        let mode = match self.mode {
            StatsMode::Exact => "exact",
            StatsMode::Mcmc => "mcmc",
        };
        let format = match self.output_format {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        };
        let grid: Vec<String> = self.n_grid.iter().map(usize::to_string).collect();
        vec![
            ("command", self.command.to_possible_value().expect("no skipped variants").get_name().to_string()),
            ("S", self.model.spin_max.to_string()),
            ("beta", self.model.beta.to_string()),
            ("D", self.model.crystal_field.to_string()),
            ("h", self.model.field.to_string()),
            ("n", self.n.to_string()),
            ("n_grid", grid.join(",")),
            ("n_disorder", self.n_disorder.to_string()),
            ("mode", mode.to_string()),
            ("sweeps", self.sweeps.to_string()),
            ("burn_in", self.burn_in.to_string()),
            ("replicas", self.replicas.to_string()),
            ("quadrature_order", self.quadrature_order.to_string()),
            ("tol", self.tol.to_string()),
            ("max_iter", self.max_iter.to_string()),
            ("damping", self.damping.to_string()),
            ("seed", self.master_seed.to_string()),
            ("format", format.to_string()),
            ("site_policy", self.site_policy.map_or("both", SitePolicy::as_str).to_string()),
            ("which", self.which.as_str().to_string()),
            ("cap", self.cap.to_string()),
        ]
    }

    fn setup(&self) -> ExperimentSetup {
        ExperimentSetup {
            n_disorder: self.n_disorder,
            mode: self.mode,
            master_seed: self.master_seed,
            site_policy: self.site_policy.unwrap_or(SitePolicy::SiteAveraged),
            sweeps: self.sweeps,
            burn_in: self.burn_in,
            replicas: self.replicas,
            cap: self.cap,
        }
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions { tol: self.tol, max_iter: self.max_iter, damping: self.damping, initial: None }
    }
}

/// A finished command: the document body and a one-line summary.
#[derive(Debug)]
pub struct Outcome {
    pub document: String,
    pub summary: String,
    /// Set when the run completed but did not reach its numerical target.
    pub failure: Option<CliError>,
}

fn mode_str(mode: StatsMode) -> &'static str {
    match mode {
        StatsMode::Exact => "exact",
        StatsMode::Mcmc => "mcmc",
    }
}

fn csv_header(cfg: &RunConfig) -> String {
    let mut s = format!("# gstap {VERSION}\n");
    for (k, v) in cfg.effective_pairs() {
        let _ = writeln!(s, "# {k} = {v}");
    }
    s
}

fn json_document<T: Serialize>(cfg: &RunConfig, result: &T) -> Result<String, CliError> {
    let config: BTreeMap<&str, String> = cfg.effective_pairs().into_iter().collect();
    let doc = serde_json::json!({
        "header": { "tool": "gstap", "version": VERSION, "config": config },
        "result": result,
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn csv_document(cfg: &RunConfig, header: &[&str], rows: &[Vec<String>]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Io(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    let mut text = csv_header(cfg);
    text.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(text)
}

fn num(v: f64) -> String {
    v.to_string()
}

/// One row in the experiment CSV schema. Per-sample rows carry the disorder
/// seed and no standard error; aggregate rows carry a standard error and no seed.
struct Row<'a> {
    experiment: &'a str,
    n: Option<usize>,
    op: &'a OrderParams,
    seed: Option<u64>,
    estimate: f64,
    std_error: Option<f64>,
    bound: Option<f64>,
    site_policy: Option<SitePolicy>,
}

impl Row<'_> {
    fn render(&self, cfg: &RunConfig) -> Vec<String> {
        let m = &cfg.model;
        vec![
            self.experiment.to_string(),
            self.n.map(|n| n.to_string()).unwrap_or_default(),
            m.spin_max.to_string(),
            num(m.beta),
            num(m.crystal_field),
            num(m.field),
            num(self.op.p),
            num(self.op.q),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            num(self.estimate),
            self.std_error.map(num).unwrap_or_default(),
            self.bound.map(num).unwrap_or_default(),
            mode_str(cfg.mode).to_string(),
            self.site_policy.map(|p| p.as_str().to_string()).unwrap_or_default(),
        ]
    }
}

fn tap_rows(cfg: &RunConfig, prefix: &str, reports: &[TapResidualReport]) -> Vec<Vec<String>> {
    let m_name = format!("{prefix}_m");
    let p_name = format!("{prefix}_p");
    let mut rows = Vec::new();
    for r in reports {
        let base = |experiment, seed, estimate, std_error| Row {
            experiment,
            n: Some(r.n),
            op: &r.order_params,
            seed,
            estimate,
            std_error,
            bound: None,
            site_policy: Some(r.site_policy),
        };
        for s in &r.samples {
            rows.push(base(&m_name, Some(s.seed), s.first, None).render(cfg));
            rows.push(base(&p_name, Some(s.seed), s.second, None).render(cfg));
        }
        rows.push(base(&m_name, None, r.mean_sq_m_residual, Some(r.std_errors[0])).render(cfg));
        rows.push(base(&p_name, None, r.mean_sq_p_residual, Some(r.std_errors[1])).render(cfg));
    }
    rows
}

fn solve_model(cfg: &RunConfig) -> Result<(GaussianRule, SolveReport), CliError> {
    let rule = GaussianRule::new(cfg.quadrature_order).map_err(|e| CliError::Numeric(e.to_string()))?;
    let report = solve(&cfg.model, &rule, &cfg.solve_options()).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((rule, report))
}

fn solved_order_params(cfg: &RunConfig) -> Result<OrderParams, CliError> {
    let (_, report) = solve_model(cfg)?;
    if !report.converged {
        return Err(CliError::Numeric(format!(
            "fixed point did not converge in {} iterations (last step {:e}); try --damping or --max-iter",
            report.iterations, report.final_step_norm
        )));
    }
    Ok(report.solution)
}

fn filter_policy(cfg: &RunConfig, reports: [TapResidualReport; 2]) -> Vec<TapResidualReport> {
    reports.into_iter().filter(|r| cfg.site_policy.is_none_or(|p| p == r.site_policy)).collect()
}

fn single_disorder(cfg: &RunConfig) -> DisorderSample {
    DisorderSample::generate(cfg.n, derive_seed(cfg.master_seed, 0))
}

#[derive(Serialize)]
struct SampleStats<'a> {
    n: usize,
    disorder_seed: u64,
    stats: &'a GibbsStats,
}

fn stats_document(cfg: &RunConfig, disorder: &DisorderSample, stats: &GibbsStats) -> Result<String, CliError> {
    match cfg.output_format {
        OutputFormat::Json => {
            json_document(cfg, &SampleStats { n: disorder.n(), disorder_seed: disorder.seed(), stats })
        }
        OutputFormat::Csv => {
            let rows: Vec<Vec<String>> = (0..stats.n())
                .map(|i| {
                    let se = stats.mcmc_std_errors.as_ref();
                    vec![
                        i.to_string(),
                        num(stats.magnetizations[i]),
                        num(stats.second_moments[i]),
                        se.map(|e| num(e.magnetizations[i])).unwrap_or_default(),
                        se.map(|e| num(e.second_moments[i])).unwrap_or_default(),
                    ]
                })
                .collect();
            let mut doc = csv_document(
                cfg,
                &["site", "magnetization", "second_moment", "magnetization_se", "second_moment_se"],
                &rows,
            )?;
            if let Some(lz) = stats.log_partition {
                doc.insert_str(doc.find("site,").expect("header row"), &format!("# log_partition = {lz}\n"));
            }
            Ok(doc)
        }
    }
}

/// Executes the command and renders its output document.
pub fn run(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let m = &cfg.model;
    match cfg.command {
        Command::Certificate => {
            let c = contraction_certificate(m);
            let bt = beta_tilde(m.spin_max);
            let regime = if c < 1.0 { "within contraction regime" } else { "outside contraction regime" };
            #[derive(Serialize)]
            struct Cert {
                certificate: f64,
                beta_tilde: f64,
                within_contraction_regime: bool,
            }
            let document = match cfg.output_format {
                OutputFormat::Json => json_document(cfg, &Cert { certificate: c, beta_tilde: bt, within_contraction_regime: c < 1.0 })?,
                OutputFormat::Csv => csv_document(
                    cfg,
                    &["S", "beta", "certificate", "beta_tilde", "within_contraction_regime"],
                    &[vec![m.spin_max.to_string(), num(m.beta), num(c), num(bt), (c < 1.0).to_string()]],
                )?,
            };
            Ok(Outcome { document, summary: format!("certificate = {c:.6}, {regime} (beta_tilde = {bt:.6})"), failure: None })
        }
        Command::Solve => {
            let (_, report) = solve_model(cfg)?;
            let document = match cfg.output_format {
                OutputFormat::Json => json_document(cfg, &report)?,
                OutputFormat::Csv => csv_document(
                    cfg,
                    &["S", "beta", "D", "h", "p", "q", "iterations", "final_step_norm", "residual", "certificate", "converged", "damping", "outside_hypothesis"],
                    &[vec![
                        m.spin_max.to_string(),
                        num(m.beta),
                        num(m.crystal_field),
                        num(m.field),
                        num(report.solution.p),
                        num(report.solution.q),
                        report.iterations.to_string(),
                        num(report.final_step_norm),
                        num(report.residual),
                        num(report.contraction_certificate),
                        report.converged.to_string(),
                        num(report.damping),
                        report.outside_hypothesis.to_string(),
                    ]],
                )?,
            };
            let mut summary = format!(
                "p = {:.12}, q = {:.12} after {} iterations",
                report.solution.p, report.solution.q, report.iterations
            );
            if report.outside_hypothesis {
                summary.push_str(" (h < 0: uniqueness not established)");
            }
            let failure = (!report.converged).then(|| {
                CliError::Numeric(format!("fixed point did not converge in {} iterations", report.iterations))
            });
            Ok(Outcome { document, summary, failure })
        }
        Command::Enumerate => {
            let disorder = single_disorder(cfg);
            let stats = enumerate(&disorder, m, &EnumerateOptions { cap: cfg.cap, overlap_reference: None })?;
            let summary = format!(
                "enumerated N = {} (disorder seed {}), log Z = {}",
                cfg.n,
                disorder.seed(),
                stats.log_partition.expect("exact mode")
            );
            Ok(Outcome { document: stats_document(cfg, &disorder, &stats)?, summary, failure: None })
        }
        Command::Mcmc => {
            let disorder = single_disorder(cfg);
            let opts = McmcOptions {
                sweeps: cfg.sweeps,
                burn_in: cfg.burn_in,
                replicas: cfg.replicas,
                rng_seed: disorder.seed(),
                batches: DEFAULT_BATCHES.min(cfg.sweeps),
                overlap_reference: None,
            };
            let stats = mcmc_run(&disorder, m, &opts)?;
            let summary = format!(
                "sampled N = {} (disorder seed {}) with {} x {} sweeps",
                cfg.n,
                disorder.seed(),
                cfg.replicas,
                cfg.sweeps
            );
            Ok(Outcome { document: stats_document(cfg, &disorder, &stats)?, summary, failure: None })
        }
        Command::Tap | Command::TapPhysics => {
            let op = solved_order_params(cfg)?;
            let (prefix, reports) = if cfg.command == Command::Tap {
                ("tap", tap_residuals(m, &op, cfg.n, &cfg.setup())?)
            } else {
                ("tap_physics", physicist_tap_residuals(m, &op, cfg.n, &cfg.setup())?)
            };
            let reports = filter_policy(cfg, reports);
            let summary = reports
                .iter()
                .map(|r| {
                    format!(
                        "{}: m {:.6e} ± {:.1e}, p {:.6e} ± {:.1e}",
                        r.site_policy.as_str(),
                        r.mean_sq_m_residual,
                        r.std_errors[0],
                        r.mean_sq_p_residual,
                        r.std_errors[1]
                    )
                })
                .collect::<Vec<_>>()
                .join("; ");
            let document = match cfg.output_format {
                OutputFormat::Json => json_document(cfg, &reports)?,
                OutputFormat::Csv => csv_document(cfg, &CSV_COLUMNS, &tap_rows(cfg, prefix, &reports))?,
            };
            Ok(Outcome { document, summary: format!("{prefix} N = {}: {summary}", cfg.n), failure: None })
        }
        Command::Concentration => {
            let op = solved_order_params(cfg)?;
            let r = concentration_experiment(m, &op, cfg.n, &cfg.setup())?;
            let document = match cfg.output_format {
                OutputFormat::Json => json_document(cfg, &r)?,
                OutputFormat::Csv => {
                    let mut rows = Vec::new();
                    let row = |experiment, seed, estimate, std_error, bound| {
                        Row { experiment, n: Some(r.n), op: &r.order_params, seed, estimate, std_error, bound: Some(bound), site_policy: None }
                            .render(cfg)
                    };
                    for s in &r.samples {
                        rows.push(row("conc_r12", Some(s.seed), s.first, None, r.bound_r12));
                        rows.push(row("conc_r11", Some(s.seed), s.second, None, r.bound_r11));
                    }
                    rows.push(row("conc_r12", None, r.est_r12_sq, Some(r.std_errors[0]), r.bound_r12));
                    rows.push(row("conc_r11", None, r.est_r11_sq, Some(r.std_errors[1]), r.bound_r11));
                    csv_document(cfg, &CSV_COLUMNS, &rows)?
                }
            };
            let summary = format!(
                "concentration N = {}: r12 {:.6e} (bound {:.6e}), r11 {:.6e} (bound {:.6e})",
                r.n, r.est_r12_sq, r.bound_r12, r.est_r11_sq, r.bound_r11
            );
            Ok(Outcome { document, summary, failure: None })
        }
        Command::Scaling => {
            let op = solved_order_params(cfg)?;
            let r = scaling_study(m, &op, &cfg.n_grid, cfg.which, &cfg.setup())?;
            let document = match cfg.output_format {
                OutputFormat::Json => json_document(cfg, &r)?,
                OutputFormat::Csv => {
                    let name = format!("scaling_{}", cfg.which.as_str());
                    let policy = matches!(cfg.which, Observable::TapM | Observable::TapP).then_some(r.site_policy);
                    let s2 = m.s_squared();
                    let bound = |n: usize| match cfg.which {
                        Observable::ConcR12 => Some(16.0 * s2 / n as f64),
                        Observable::ConcR11 => Some(16.0 * s2 * s2 / n as f64),
                        _ => None,
                    };
                    let mut rows: Vec<Vec<String>> = r
                        .n_grid
                        .iter()
                        .zip(r.residuals.iter().zip(&r.std_errors))
                        .map(|(&n, (&v, &e))| {
                            Row { experiment: &name, n: Some(n), op: &op, seed: None, estimate: v, std_error: Some(e), bound: bound(n), site_policy: policy }
                                .render(cfg)
                        })
                        .collect();
                    for (suffix, v) in [("slope", r.fitted_slope), ("intercept", r.fitted_intercept)] {
                        let label = format!("{name}_{suffix}");
                        rows.push(
                            Row { experiment: &label, n: None, op: &op, seed: None, estimate: v, std_error: None, bound: None, site_policy: policy }
                                .render(cfg),
                        );
                    }
                    csv_document(cfg, &CSV_COLUMNS, &rows)?
                }
            };
            let summary = format!(
                "scaling {} over N = {:?}: slope {:.4}, intercept {:.4}",
                cfg.which.as_str(),
                r.n_grid,
                r.fitted_slope,
                r.fitted_intercept
            );
            Ok(Outcome { document, summary, failure: None })
        }
    }
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("writing {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents.as_bytes()).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn worker_count(cfg: &RunConfig) -> Result<Option<usize>, CliError> {
    if cfg.workers.is_some() {
        return Ok(cfg.workers);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(w) if w >= 1 => Ok(Some(w)),
            _ => Err(CliError::Usage(format!("invalid value `{v}` for {WORKERS_ENV}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs `cfg` on a pool sized by `--workers` or [`WORKERS_ENV`], then writes
/// the output.
pub fn execute(cfg: &RunConfig) -> Result<String, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = worker_count(cfg)? {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| run(cfg))?;
    match &cfg.output_path {
        Some(path) => write_atomic(path, &outcome.document)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(outcome.document.as_bytes()).map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(outcome.summary),
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if let Err(e) = Args::try_parse_from(&args) {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            let _ = e.print();
            return 0;
        }
    }
    let result = parse_config(&args).and_then(|cfg| {
        let to_stdout = cfg.output_path.is_none();
        execute(&cfg).map(|summary| (summary, to_stdout))
    });
    match result {
        Ok((summary, to_stdout)) => {
            if to_stdout {
                eprintln!("{summary}");
            } else {
                println!("{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("gstap: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(args: &[&str]) -> Result<RunConfig, CliError> {
        parse_config(std::iter::once("gstap").chain(args.iter().copied()))
    }

    #[test]
    fn defaults_fill_in() {
        let c = cfg(&["solve", "--S", "1", "--beta", "0.2", "--D", "0", "--h", "0.3"]).unwrap();
        assert_eq!(c.command, Command::Solve);
        assert_eq!(c.model, ModelParams::new(1, 0.2, 0.0, 0.3).unwrap());
        assert_eq!(c.quadrature_order, DEFAULT_ORDER);
        assert_eq!(c.n_disorder, DEFAULT_DISORDER_EXACT);
        assert_eq!(c.output_format, OutputFormat::Csv);
        assert_eq!(c.site_policy, None);
        let c = cfg(&["tap", "--mode", "mcmc"]).unwrap();
        assert_eq!(c.n_disorder, DEFAULT_DISORDER_MCMC);
    }

    fn usage_message(args: &[&str]) -> String {
        match cfg(args) {
            Err(CliError::Usage(m)) => m,
            other => panic!("expected a usage error, got {other:?}"),
        }
    }

    #[test]
    fn range_errors_name_the_key() {
        assert!(usage_message(&["solve", "--beta", "-0.1"]).contains("beta"));
        assert!(usage_message(&["solve", "--S", "0"]).contains("`S`"));
        assert!(usage_message(&["solve", "--damping", "1.5"]).contains("damping"));
        assert!(usage_message(&["solve", "--tol", "abc"]).contains("tol"));
        assert!(usage_message(&["scaling", "--n-grid", "4,6"]).contains("n_grid"));
        assert!(usage_message(&["tap", "--mode", "gibbs"]).contains("mode"));
        assert!(usage_message(&["solve", "--quadrature-order", "301"]).contains("quadrature_order"));
        assert!(usage_message(&["concentration", "--mode", "mcmc", "--replicas", "1"]).contains("replicas"));
    }

    #[test]
    fn negative_fields_are_accepted() {
        let c = cfg(&["solve", "--h", "-0.5", "--D", "-3"]).unwrap();
        assert_eq!(c.model.field, -0.5);
        assert_eq!(c.model.crystal_field, -3.0);
    }

    #[test]
    fn config_file_parsing() {
        let map = parse_config_file("# comment\nbeta = 0.2  # trailing\n\nS=2\n").unwrap();
        assert_eq!(map["beta"], "0.2");
        assert_eq!(map["S"], "2");
        assert!(matches!(parse_config_file("bogus = 1"), Err(CliError::Usage(m)) if m.contains("bogus")));
        assert!(matches!(parse_config_file("beta 0.2"), Err(CliError::Usage(_))));
    }

    #[test]
    fn certificate_summary() {
        let c = cfg(&["certificate", "--S", "1", "--beta", "0.25"]).unwrap();
        let out = run(&c).unwrap();
        assert!(out.summary.contains("0.802827"), "{}", out.summary);
        assert!(out.summary.contains("within contraction regime"));
        assert!(out.document.starts_with("# gstap "));
    }

    #[test]
    fn cap_maps_to_numeric_failure() {
        let c = cfg(&["tap", "--S", "2", "--n", "12", "--cap", "1000"]).unwrap();
        let err = run(&c).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("mcmc"));
    }
}
