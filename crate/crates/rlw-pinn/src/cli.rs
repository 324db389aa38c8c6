//! Command-line front end: train a solver, evaluate a stored checkpoint,
//! compare field sources, or run the finite-difference reference scheme,
//! each writing its artifacts under an output directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 aborted solve (partial
//! artifacts remain and the manifest records the failure), 4 region or
//! shape mismatch, 1 anything else.

use crate::loss::ConservationReference;
use crate::metrics::{conservation_error_pct, error_norms, find_peaks, MetricsError, Peak};
use crate::network::MlpSpec;
use crate::physics::{
    exact_single_soliton, grid_gradient, invariants, ConservedTriple, PhysicsError,
    ScenarioConfig, ScenarioKind, UniformGrid,
};
use crate::reference::{fd_solve, FdConfig, GridField, ReferenceError};
use crate::train::{
    train, Checkpoint, SolutionField, Strategy, TrainConfig, TrainError, Variant,
};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
struct CliError {
    code: i32,
    msg: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> CliError {
        CliError { code: 2, msg: msg.into() }
    }

    fn region(msg: impl Into<String>) -> CliError {
        CliError { code: 4, msg: msg.into() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        let code = match &e {
            TrainError::TimeOutOfRange { .. }
            | TrainError::XOutOfRange { .. }
            | TrainError::BadStitch { .. }
            | TrainError::BadGrid
            | TrainError::NoDerivatives => 4,
            TrainError::Io(_) => 1,
            _ => 2,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<ReferenceError> for CliError {
    fn from(e: ReferenceError) -> CliError {
        let code = match &e {
            ReferenceError::Instability { .. } => 3,
            _ => 2,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<PhysicsError> for CliError {
    fn from(e: PhysicsError) -> CliError {
        CliError::config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> CliError {
        CliError::region(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError { code: 1, msg: format!("io: {e}") }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::config(format!("json: {e}"))
    }
}

#[derive(Parser)]
#[command(
    name = "rlw-pinn",
    version,
    about = "Network and finite-difference solvers for the regularized long wave equation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a solver and write field, history, and metric artifacts.
    Run(RunArgs),
    /// Evaluate a saved checkpoint on a space-time grid.
    Eval(EvalArgs),
    /// Compare two or more field sources over their shared region.
    Compare(CompareArgs),
    /// Solve a scenario with the finite-difference reference scheme.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; sections [train], [eval], [oracle] plus top-level
    /// scenario, variant, strategy, seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config override, e.g. train.adam_epochs=100.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    /// single-soliton | two-soliton | undular-bore | undular-bore-steep.
    #[arg(long)]
    scenario: Option<String>,
    /// adaptive | conservative.
    #[arg(long)]
    variant: Option<String>,
    /// plain-adaptive | plain-conservative | curriculum-conservative | causal[:N].
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory, created if absent.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by run.
    checkpoint: PathBuf,
    #[arg(long)]
    x_min: Option<f64>,
    #[arg(long)]
    x_max: Option<f64>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more sources: a checkpoint path, a field.csv path,
    /// exact:<scenario>, or oracle:<scenario>.
    #[arg(num_args = 2.., required = true)]
    sources: Vec<String>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
    /// Peak detection threshold for the final-time peak tables.
    #[arg(long)]
    min_amplitude: Option<f64>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    dx: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Number of stored snapshots, uniform over [0, t_final].
    #[arg(long)]
    times: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

pub fn main() {
    std::process::exit(dispatch(std::env::args_os()));
}

/// Parse argv and execute one subcommand; returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    if let Err(e) = init_workers() {
        eprintln!("error: {}", e.msg);
        return e.code;
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Oracle(a) => cmd_oracle(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    }
}

/// Honor RLW_PINN_WORKERS for the data-parallel evaluation paths. Results
/// do not depend on the worker count; training itself is sequential.
fn init_workers() -> Result<(), CliError> {
    static ONCE: std::sync::Once = std::sync::Once::new();
    let mut bad = None;
    ONCE.call_once(|| {
        if let Ok(v) = std::env::var("RLW_PINN_WORKERS") {
            match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
                _ => bad = Some(v),
            }
        }
    });
    match bad {
        Some(v) => Err(CliError::config(format!(
            "RLW_PINN_WORKERS must be a positive integer, got {v:?}"
        ))),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------- config --

/// Optional keys recognized in a config file; anything a key does not set
/// falls back to the published defaults for the chosen scenario.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    /// A scenario name or a full scenario table (kind, rlw, domain).
    scenario: Option<toml::Value>,
    variant: Option<String>,
    strategy: Option<String>,
    seed: Option<u64>,
    #[serde(default)]
    train: TrainOverlay,
    #[serde(default)]
    eval: EvalOverlay,
    #[serde(default)]
    oracle: OracleOverlay,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainOverlay {
    n_interior: Option<usize>,
    n_initial: Option<usize>,
    n_boundary: Option<usize>,
    adam_epochs: Option<usize>,
    adam_lr: Option<f64>,
    lbfgs_iters: Option<usize>,
    lambda_cons: Option<f64>,
    conservation_times: Option<usize>,
    conservation_grid_points: Option<usize>,
    conservation_reference: Option<ConservationReference>,
    resample_conservation_times: Option<bool>,
    /// Causal window count when the strategy string does not carry one.
    windows: Option<usize>,
    hidden_layers: Option<usize>,
    hidden_width: Option<usize>,
    /// Full width list including the 2-input and 1-output layers; excludes
    /// hidden_layers and hidden_width.
    layer_widths: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalOverlay {
    nx: Option<usize>,
    nt: Option<usize>,
    peak_min_amplitude: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleOverlay {
    dx: Option<f64>,
    dt: Option<f64>,
    times: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct EvalSettings {
    nx: usize,
    nt: usize,
    min_amplitude: f64,
}

impl EvalOverlay {
    fn settings(&self) -> Result<EvalSettings, CliError> {
        let nx = self.nx.unwrap_or(501);
        let nt = self.nt.unwrap_or(101);
        if nx == 0 || nt == 0 {
            return Err(CliError::config("eval grid sizes must be positive"));
        }
        Ok(EvalSettings { nx, nt, min_amplitude: self.peak_min_amplitude.unwrap_or(0.01) })
    }
}

fn load_table(cfg: &ConfigArgs) -> Result<toml::Table, CliError> {
    let mut table = match &cfg.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?
            .parse::<toml::Table>()
            .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?,
        None => toml::Table::new(),
    };
    for ov in &cfg.overrides {
        apply_override(&mut table, ov)?;
    }
    Ok(table)
}

/// Insert KEY=VALUE at a dotted path, creating intermediate tables. The
/// value is parsed as TOML and falls back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {spec:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key {path:?} has an empty segment")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::config(format!("override key {path:?} crosses a non-table value"))
            })?;
    }
    cur.insert(parts.last().unwrap().to_string(), value);
    Ok(())
}

fn parse_file_config(table: toml::Table) -> Result<FileConfig, CliError> {
    toml::Value::Table(table)
        .try_into::<FileConfig>()
        .map_err(|e| CliError::config(format!("config: {e}")))
}

fn scenario_by_name(name: &str) -> Result<ScenarioConfig, CliError> {
    match name {
        "single-soliton" => Ok(ScenarioConfig::single_soliton()),
        "two-soliton" => Ok(ScenarioConfig::two_soliton()),
        "undular-bore" => Ok(ScenarioConfig::undular_bore(5.0)),
        "undular-bore-steep" => Ok(ScenarioConfig::undular_bore(2.0)),
        _ => Err(CliError::config(format!(
            "unknown scenario {name:?}; expected single-soliton, two-soliton, \
             undular-bore, or undular-bore-steep"
        ))),
    }
}

fn resolve_scenario(
    flag: Option<&str>,
    file: Option<&toml::Value>,
) -> Result<ScenarioConfig, CliError> {
    let sc = match (flag, file) {
        (Some(name), _) => scenario_by_name(name)?,
        (None, Some(toml::Value::String(name))) => scenario_by_name(name)?,
        (None, Some(toml::Value::Table(t))) => {
            if !t.contains_key("kind") {
                return Err(CliError::config(
                    "config key scenario.kind is missing; expected single-soliton, \
                     two-soliton, or undular-bore",
                ));
            }
            toml::Value::Table(t.clone())
                .try_into::<ScenarioConfig>()
                .map_err(|e| CliError::config(format!("config key scenario: {e}")))?
        }
        (None, Some(_)) => {
            return Err(CliError::config("config key scenario must be a name or a table"))
        }
        (None, None) => {
            return Err(CliError::config(
                "missing scenario: pass --scenario or set the scenario config key \
                 (a custom table needs scenario.kind)",
            ))
        }
    };
    sc.validate().map_err(|e| CliError::config(format!("scenario: {e}")))?;
    Ok(sc)
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    match s {
        "adaptive" => Ok(Variant::Adaptive),
        "conservative" => Ok(Variant::Conservative),
        _ => Err(CliError::config(format!(
            "unknown variant {s:?}; expected adaptive or conservative"
        ))),
    }
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Adaptive => "adaptive",
        Variant::Conservative => "conservative",
    }
}

fn parse_strategy(s: &str, windows: usize, conservative: bool) -> Result<Strategy, CliError> {
    Ok(match s {
        "plain-adaptive" => Strategy::PlainAdaptive,
        "plain-conservative" => Strategy::PlainConservative,
        "curriculum-conservative" => Strategy::CurriculumConservative,
        "causal" => Strategy::Causal { windows, conservative },
        _ => {
            let n = s.strip_prefix("causal:").and_then(|n| n.parse::<usize>().ok());
            match n {
                Some(windows) => Strategy::Causal { windows, conservative },
                None => {
                    return Err(CliError::config(format!(
                        "unknown strategy {s:?}; expected plain-adaptive, \
                         plain-conservative, curriculum-conservative, or causal[:N]"
                    )))
                }
            }
        }
    })
}

fn strategy_label(s: Strategy) -> String {
    match s {
        Strategy::PlainAdaptive => "plain-adaptive".into(),
        Strategy::PlainConservative => "plain-conservative".into(),
        Strategy::CurriculumConservative => "curriculum-conservative".into(),
        Strategy::Causal { windows, conservative } => format!(
            "causal:{windows}:{}",
            if conservative { "conservative" } else { "adaptive" }
        ),
    }
}

#[derive(Debug)]
struct RunResolved {
    train: TrainConfig,
    variant: Variant,
    eval: EvalSettings,
}

/// Layer defaults under file keys under --override entries under direct
/// flags, then validate the assembled run config.
fn resolve_run(args: &RunArgs) -> Result<RunResolved, CliError> {
    let fc = parse_file_config(load_table(&args.cfg)?)?;
    let scenario = resolve_scenario(args.scenario.as_deref(), fc.scenario.as_ref())?;
    let variant_str = args.variant.as_deref().or(fc.variant.as_deref());
    let strategy_str = args.strategy.as_deref().or(fc.strategy.as_deref());
    let variant = match variant_str {
        Some(v) => parse_variant(v)?,
        None => match strategy_str {
            Some("plain-conservative") | Some("curriculum-conservative") => Variant::Conservative,
            _ => Variant::Adaptive,
        },
    };
    let seed = args.seed.or(fc.seed).unwrap_or(0);
    let mut train = TrainConfig::paper_default(scenario, variant, seed);
    if let Some(s) = strategy_str {
        let windows = fc.train.windows.unwrap_or(5);
        let strat = parse_strategy(s, windows, variant == Variant::Conservative)?;
        let clash = match strat.conservative() {
            true => variant == Variant::Adaptive && variant_str.is_some(),
            false => variant == Variant::Conservative && !matches!(strat, Strategy::Causal { .. }),
        };
        if clash {
            return Err(CliError::config(format!(
                "strategy {s} contradicts variant {}",
                variant_name(variant)
            )));
        }
        train.strategy = strat;
    } else if let Some(w) = fc.train.windows {
        if let Strategy::Causal { conservative, .. } = train.strategy {
            train.strategy = Strategy::Causal { windows: w, conservative };
        }
    }
    apply_train_overlay(&mut train, &fc.train)?;
    train.validate()?;
    Ok(RunResolved { train, variant, eval: fc.eval.settings()? })
}

fn apply_train_overlay(cfg: &mut TrainConfig, o: &TrainOverlay) -> Result<(), CliError> {
    if let Some(v) = o.n_interior {
        cfg.n_interior = v;
    }
    if let Some(v) = o.n_initial {
        cfg.n_initial = v;
    }
    if let Some(v) = o.n_boundary {
        cfg.n_boundary = v;
    }
    if let Some(v) = o.adam_epochs {
        cfg.adam_epochs = v;
    }
    if let Some(v) = o.adam_lr {
        cfg.adam_lr = v;
    }
    if let Some(v) = o.lbfgs_iters {
        cfg.lbfgs_iters = v;
    }
    if let Some(v) = o.lambda_cons {
        cfg.lambda_cons = v;
    }
    if let Some(v) = o.conservation_times {
        cfg.conservation_times = v;
    }
    if let Some(v) = o.conservation_grid_points {
        cfg.conservation_grid_points = v;
    }
    if let Some(v) = o.conservation_reference {
        cfg.conservation_reference = v;
    }
    if let Some(v) = o.resample_conservation_times {
        cfg.resample_conservation_times = v;
    }
    let map = cfg.model.input_map;
    if let Some(w) = &o.layer_widths {
        if o.hidden_layers.is_some() || o.hidden_width.is_some() {
            return Err(CliError::config(
                "train.layer_widths excludes hidden_layers and hidden_width",
            ));
        }
        cfg.model = MlpSpec::new(w.clone())
            .map_err(|e| CliError::config(format!("train.layer_widths: {e}")))?
            .with_map(map);
    } else if o.hidden_layers.is_some() || o.hidden_width.is_some() {
        let depth = o.hidden_layers.unwrap_or(cfg.model.layer_widths.len() - 2);
        let width = o.hidden_width.unwrap_or_else(|| {
            *cfg.model.layer_widths.get(1).filter(|_| cfg.model.layer_widths.len() > 2).unwrap_or(&1)
        });
        cfg.model = MlpSpec::hidden(depth, width).with_map(map);
    }
    Ok(())
}

// ------------------------------------------------------------- artifacts --

/// Evenly spaced samples from lo to hi inclusive; [lo] when n = 1.
fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

fn write_text(dir: &Path, name: &str, text: &str, files: &mut Vec<String>) -> Result<(), CliError> {
    fs::write(dir.join(name), text)?;
    files.push(name.to_string());
    Ok(())
}

fn write_json<T: Serialize>(
    dir: &Path,
    name: &str,
    value: &T,
    files: &mut Vec<String>,
) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(dir, name, &text, files)
}

/// Field values on the full grid, one row per time.
fn sample_frames(
    sol: &SolutionField,
    xs: &[f64],
    ts: &[f64],
) -> Result<Vec<Vec<f64>>, CliError> {
    ts.iter()
        .map(|&t| xs.par_iter().map(|&x| sol.eval(x, t)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::from)
}

fn field_csv(xs: &[f64], ts: &[f64], frames: &[Vec<f64>]) -> String {
    let mut s = String::from("x,t,u\n");
    for (ti, &t) in ts.iter().enumerate() {
        for (xi, &x) in xs.iter().enumerate() {
            s.push_str(&format!("{x},{t},{}\n", frames[ti][xi]));
        }
    }
    s
}

fn invariants_csv(series: &[(f64, ConservedTriple)]) -> String {
    let mut s = String::from("t,i1,i2,i3\n");
    for &(t, c) in series {
        s.push_str(&format!("{t},{},{},{}\n", c.i1, c.i2, c.i3));
    }
    s
}

fn peaks_csv(
    xs: &[f64],
    ts: &[f64],
    frames: &[Vec<f64>],
    min_amplitude: f64,
) -> Result<String, CliError> {
    let mut s = String::from("t,rank,position,amplitude\n");
    for (ti, &t) in ts.iter().enumerate() {
        for (rank, p) in find_peaks(&frames[ti], xs, min_amplitude)?.iter().enumerate() {
            s.push_str(&format!("{t},{},{},{}\n", rank + 1, p.position, p.amplitude));
        }
    }
    Ok(s)
}

const HISTORY_HEADER: &str = "window,epoch,phase,l_pde,l_ic,l_bc,l_cons,total,\
                              lambda_pde,lambda_ic,lambda_bc,step_len,fallback\n";

fn history_csv(windows: &[crate::train::WindowResult]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    for w in windows {
        for h in &w.history {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                w.index,
                h.epoch,
                h.phase,
                h.losses.l_pde,
                h.losses.l_ic,
                h.losses.l_bc,
                h.losses.l_cons,
                h.total,
                h.lambdas[0],
                h.lambdas[1],
                h.lambdas[2],
                h.step_len,
                h.fallback
            ));
        }
    }
    s
}

/// Invariants of the field at each time, integrated on a fresh uniform
/// quadrature grid with the field's own spatial derivatives.
fn invariant_series(
    sol: &SolutionField,
    x_range: (f64, f64),
    quad_points: usize,
    ts: &[f64],
    rlw: crate::physics::RlwParams,
) -> Result<Vec<(f64, ConservedTriple)>, CliError> {
    let grid = UniformGrid::new(x_range.0, x_range.1, quad_points)?;
    ts.iter()
        .map(|&t| {
            let (u, du) = sol.profile_with_dx(&grid, t)?;
            Ok((t, invariants(&u, &du, grid.spacing(), rlw)?))
        })
        .collect()
}

/// Summary numbers for one run or evaluation. Holds no wall-clock data, so
/// repeating a seeded run reproduces the file byte for byte.
#[derive(Serialize)]
struct MetricsDoc {
    scenario: String,
    variant: Option<&'static str>,
    strategy: Option<String>,
    seed: Option<u64>,
    /// What the error norms are measured against, when anything is.
    reference: Option<&'static str>,
    l2_rel: Option<f64>,
    linf_rel: Option<f64>,
    initial_invariants: Option<[f64; 3]>,
    final_invariants: Option<[f64; 3]>,
    conservation_drift_pct: Option<[f64; 3]>,
    /// Handoff mismatch entering each window after the first.
    boundary_mismatch: Vec<f64>,
    initial_total_loss: Option<f64>,
    final_total_loss: Option<f64>,
    aborted: bool,
}

#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    out_dir: String,
    files: Vec<String>,
    exit_status: i32,
    failure: Option<String>,
    timings_ms: BTreeMap<&'static str, u128>,
    config: serde_json::Value,
}

/// The manifest lists every emitted file including itself and is written
/// last, so a complete listing implies the files exist.
fn write_manifest(dir: &Path, mut m: Manifest) -> Result<(), CliError> {
    m.files.push("manifest.json".to_string());
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Drop repeated snapshots left by sample times that fell on one step.
fn dedup_grid(mut f: GridField) -> GridField {
    let mut times = Vec::with_capacity(f.times.len());
    let mut rows = Vec::with_capacity(f.rows.len());
    for (t, row) in f.times.drain(..).zip(f.rows.drain(..)) {
        if times.last().map_or(true, |&last| t > last) {
            times.push(t);
            rows.push(row);
        }
    }
    GridField { grid: f.grid, times, rows }
}

// ------------------------------------------------------------------ run --

enum RunReference {
    Exact,
    Oracle(SolutionField),
    None,
}

fn cmd_run(args: &RunArgs) -> Result<i32, CliError> {
    let resolved = resolve_run(args)?;
    let cfg = &resolved.train;
    fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    let mut timings = BTreeMap::new();

    let t_start = Instant::now();
    let out = train(cfg)?;
    timings.insert("train", t_start.elapsed().as_millis());

    let t_art = Instant::now();
    let sol = out.solution(&cfg.scenario)?;
    let (t_lo, t_hi) = sol.t_range();
    let xs = linspace(cfg.scenario.x_min, cfg.scenario.x_max, resolved.eval.nx);

    // Reference for error norms: the closed form when the scenario has one,
    // otherwise the difference scheme sampled at the evaluation times.
    let mut ts = linspace(t_lo, t_hi, resolved.eval.nt);
    let (reference, ref_label) = match cfg.scenario.kind {
        ScenarioKind::SingleSoliton { .. } => (RunReference::Exact, Some("exact")),
        _ => {
            let mut fd = FdConfig::default_for(cfg.scenario);
            fd.sample_times = ts.clone();
            match fd_solve(&fd).map(dedup_grid).map(SolutionField::from_grid) {
                Ok(Ok(f)) => {
                    ts = match &f {
                        SolutionField::Grid(g) => g.times.clone(),
                        SolutionField::Net { .. } => unreachable!(),
                    };
                    (RunReference::Oracle(f), Some("fd-oracle"))
                }
                _ => (RunReference::None, None),
            }
        }
    };

    let frames = sample_frames(&sol, &xs, &ts)?;
    write_text(&args.out, "field.csv", &field_csv(&xs, &ts, &frames), &mut files)?;

    let series = invariant_series(
        &sol,
        (cfg.scenario.x_min, cfg.scenario.x_max),
        cfg.conservation_grid_points,
        &ts,
        cfg.scenario.rlw,
    )?;
    write_text(&args.out, "invariants.csv", &invariants_csv(&series), &mut files)?;
    write_text(&args.out, "history.csv", &history_csv(&out.windows), &mut files)?;
    let peaks = peaks_csv(&xs, &ts, &frames, resolved.eval.min_amplitude)?;
    write_text(&args.out, "peaks.csv", &peaks, &mut files)?;

    let ref_frames: Option<Vec<Vec<f64>>> = match &reference {
        RunReference::Exact => Some(
            ts.iter()
                .map(|&t| xs.iter().map(|&x| exact_single_soliton(x, t, &cfg.scenario)).collect())
                .collect(),
        ),
        RunReference::Oracle(f) => Some(
            ts.iter()
                .map(|&t| xs.iter().map(|&x| f.eval(x, t)).collect::<Result<Vec<_>, _>>())
                .collect::<Result<Vec<_>, _>>()?,
        ),
        RunReference::None => None,
    };
    let norms = ref_frames.and_then(|rf| {
        let flat: Vec<f64> = frames.iter().flatten().copied().collect();
        let ref_flat: Vec<f64> = rf.iter().flatten().copied().collect();
        error_norms(&flat, &ref_flat).ok()
    });

    let first = series.first().map(|&(_, c)| c.as_array());
    let last = series.last().map(|&(_, c)| c.as_array());
    let drift = match (series.first(), series.last()) {
        (Some(&(_, a)), Some(&(_, b))) => conservation_error_pct(b, a).ok(),
        _ => None,
    };
    let metrics = MetricsDoc {
        scenario: cfg.scenario.name().to_string(),
        variant: Some(variant_name(resolved.variant)),
        strategy: Some(strategy_label(cfg.strategy)),
        seed: Some(cfg.seed),
        reference: ref_label,
        l2_rel: norms.map(|n| n.0),
        linf_rel: norms.map(|n| n.1),
        initial_invariants: first,
        final_invariants: last,
        conservation_drift_pct: drift,
        boundary_mismatch: out.continuity()?,
        initial_total_loss: out.windows.first().and_then(|w| w.history.first()).map(|h| h.total),
        final_total_loss: out.windows.last().and_then(|w| w.history.last()).map(|h| h.total),
        aborted: out.abort.is_some(),
    };
    write_json(&args.out, "metrics.json", &metrics, &mut files)?;

    out.checkpoint(cfg).save(&args.out.join("checkpoint.json"))?;
    files.push("checkpoint.json".to_string());
    timings.insert("artifacts", t_art.elapsed().as_millis());
    timings.insert("total", t_start.elapsed().as_millis());

    let failure = out.abort.as_ref().map(|a| {
        format!("aborted in window {} during {} at epoch {}: {}", a.window, a.phase, a.epoch, a.detail)
    });
    let code = if out.abort.is_some() { 3 } else { 0 };
    write_manifest(
        &args.out,
        Manifest {
            command: "run",
            out_dir: args.out.display().to_string(),
            files,
            exit_status: code,
            failure,
            timings_ms: timings,
            config: serde_json::to_value(cfg)?,
        },
    )?;
    Ok(code)
}

// ----------------------------------------------------------------- eval --

fn cmd_eval(args: &EvalArgs) -> Result<i32, CliError> {
    let fc = parse_file_config(load_table(&args.cfg)?)?;
    let cp = Checkpoint::load(&args.checkpoint)?;
    let sol = cp.solution()?;
    let (x_lo, x_hi) = sol.x_range();
    let (t_lo, t_hi) = sol.t_range();
    let gx = (args.x_min.unwrap_or(x_lo), args.x_max.unwrap_or(x_hi));
    let gt = (args.t_min.unwrap_or(t_lo), args.t_max.unwrap_or(t_hi));
    if gx.0 > gx.1 || gx.0 < x_lo || gx.1 > x_hi {
        return Err(CliError::region(format!(
            "requested x range [{}, {}] is outside the field's [{x_lo}, {x_hi}]",
            gx.0, gx.1
        )));
    }
    if gt.0 > gt.1 || gt.0 < t_lo || gt.1 > t_hi {
        return Err(CliError::region(format!(
            "requested t range [{}, {}] is outside the field's [{t_lo}, {t_hi}]",
            gt.0, gt.1
        )));
    }
    let nx = args.nx.or(fc.eval.nx).unwrap_or(501);
    let nt = args.nt.or(fc.eval.nt).unwrap_or(101);
    if nx == 0 || nt == 0 {
        return Err(CliError::config("eval grid sizes must be positive"));
    }
    let min_amplitude = fc.eval.peak_min_amplitude.unwrap_or(0.01);

    fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    let mut timings = BTreeMap::new();
    let t_start = Instant::now();

    let xs = linspace(gx.0, gx.1, nx);
    let ts = linspace(gt.0, gt.1, nt);
    let frames = sample_frames(&sol, &xs, &ts)?;
    write_text(&args.out, "field.csv", &field_csv(&xs, &ts, &frames), &mut files)?;

    let series = if nx >= 2 && gx.0 < gx.1 {
        invariant_series(&sol, gx, nx, &ts, cp.scenario.rlw)?
    } else {
        Vec::new()
    };
    write_text(&args.out, "invariants.csv", &invariants_csv(&series), &mut files)?;
    let peaks = peaks_csv(&xs, &ts, &frames, min_amplitude)?;
    write_text(&args.out, "peaks.csv", &peaks, &mut files)?;

    let norms = match cp.scenario.kind {
        ScenarioKind::SingleSoliton { .. } => {
            let flat: Vec<f64> = frames.iter().flatten().copied().collect();
            let ref_flat: Vec<f64> = ts
                .iter()
                .flat_map(|&t| xs.iter().map(move |&x| exact_single_soliton(x, t, &cp.scenario)))
                .collect();
            error_norms(&flat, &ref_flat).ok()
        }
        _ => None,
    };
    let drift = match (series.first(), series.last()) {
        (Some(&(_, a)), Some(&(_, b))) => conservation_error_pct(b, a).ok(),
        _ => None,
    };
    let metrics = MetricsDoc {
        scenario: cp.scenario.name().to_string(),
        variant: Some(variant_name(if cp.strategy.conservative() {
            Variant::Conservative
        } else {
            Variant::Adaptive
        })),
        strategy: Some(strategy_label(cp.strategy)),
        seed: Some(cp.seed),
        reference: matches!(cp.scenario.kind, ScenarioKind::SingleSoliton { .. })
            .then_some("exact"),
        l2_rel: norms.map(|n| n.0),
        linf_rel: norms.map(|n| n.1),
        initial_invariants: series.first().map(|&(_, c)| c.as_array()),
        final_invariants: series.last().map(|&(_, c)| c.as_array()),
        conservation_drift_pct: drift,
        boundary_mismatch: Vec::new(),
        initial_total_loss: None,
        final_total_loss: None,
        aborted: cp.abort.is_some(),
    };
    write_json(&args.out, "metrics.json", &metrics, &mut files)?;
    timings.insert("total", t_start.elapsed().as_millis());

    write_manifest(
        &args.out,
        Manifest {
            command: "eval",
            out_dir: args.out.display().to_string(),
            files,
            exit_status: 0,
            failure: None,
            timings_ms: timings,
            config: json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "x_range": [gx.0, gx.1],
                "t_range": [gt.0, gt.1],
                "nx": nx,
                "nt": nt,
            }),
        },
    )?;
    Ok(0)
}

// -------------------------------------------------------------- compare --

enum SourceSpec {
    Checkpoint(PathBuf),
    Csv(PathBuf),
    Exact(ScenarioConfig),
    Oracle(ScenarioConfig),
}

enum Source {
    Field(SolutionField),
    Exact(ScenarioConfig),
}

impl Source {
    fn frame(&self, xs: &[f64], t: f64) -> Result<Vec<f64>, CliError> {
        match self {
            Source::Field(sol) => Ok(xs
                .par_iter()
                .map(|&x| sol.eval(x, t))
                .collect::<Result<Vec<_>, TrainError>>()?),
            Source::Exact(sc) => Ok(xs.iter().map(|&x| exact_single_soliton(x, t, sc)).collect()),
        }
    }
}

fn parse_source(s: &str) -> Result<SourceSpec, CliError> {
    if let Some(name) = s.strip_prefix("exact:") {
        let sc = scenario_by_name(name)?;
        if !matches!(sc.kind, ScenarioKind::SingleSoliton { .. }) {
            return Err(CliError::config(format!(
                "exact:{name} has no closed form; only single-soliton does"
            )));
        }
        Ok(SourceSpec::Exact(sc))
    } else if let Some(name) = s.strip_prefix("oracle:") {
        Ok(SourceSpec::Oracle(scenario_by_name(name)?))
    } else if s.ends_with(".csv") {
        Ok(SourceSpec::Csv(PathBuf::from(s)))
    } else {
        Ok(SourceSpec::Checkpoint(PathBuf::from(s)))
    }
}

/// Parse a field.csv (x,t,u rows, t-major) back into grid snapshots.
fn read_field_csv(path: &Path) -> Result<GridField, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "x,t,u" => {}
        _ => return Err(CliError::region(format!("{}: expected header x,t,u", path.display()))),
    }
    let mut raw: Vec<(f64, f64, f64)> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let mut next = || it.next().and_then(|v| v.trim().parse::<f64>().ok());
        match (next(), next(), next()) {
            (Some(x), Some(t), Some(u)) => raw.push((x, t, u)),
            _ => {
                return Err(CliError::region(format!(
                    "{}: bad row at line {}",
                    path.display(),
                    i + 2
                )))
            }
        }
    }
    if raw.is_empty() {
        return Err(CliError::region(format!("{}: no data rows", path.display())));
    }
    let t0 = raw[0].1;
    let nx = raw.iter().take_while(|r| r.1 == t0).count();
    let shape_err = || CliError::region(format!("{}: rows do not form a grid", path.display()));
    if nx < 2 || raw.len() % nx != 0 {
        return Err(shape_err());
    }
    let xs: Vec<f64> = raw[..nx].iter().map(|r| r.0).collect();
    let spacing = (xs[nx - 1] - xs[0]) / (nx - 1) as f64;
    let uniform = spacing > 0.0
        && xs
            .iter()
            .enumerate()
            .all(|(i, &x)| (x - (xs[0] + spacing * i as f64)).abs() <= 1e-9 * spacing.max(1.0));
    if !uniform {
        return Err(CliError::region(format!(
            "{}: x samples are not a uniform ascending grid",
            path.display()
        )));
    }
    let grid = UniformGrid::new(xs[0], xs[nx - 1], nx)
        .map_err(|e| CliError::region(format!("{}: {e}", path.display())))?;
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for block in raw.chunks(nx) {
        let t = block[0].1;
        if block.iter().any(|r| r.1 != t) || block.iter().zip(&xs).any(|(r, &x)| r.0 != x) {
            return Err(shape_err());
        }
        times.push(t);
        rows.push(block.iter().map(|r| r.2).collect());
    }
    Ok(GridField { grid, times, rows })
}

/// Difference-scheme snapshots bracketing the requested times so the grid
/// stays evaluable at each of them.
fn oracle_field(sc: ScenarioConfig, ts: &[f64]) -> Result<GridField, CliError> {
    let mut fd = FdConfig::default_for(sc);
    let dt = fd.dt;
    let total = (sc.t_final / dt).round() as usize;
    let mut steps: Vec<usize> = ts.iter().map(|&t| (t / dt).round() as usize).collect();
    steps.push((ts[0] / dt).floor().max(0.0) as usize);
    steps.push(((ts[ts.len() - 1] / dt).ceil() as usize).min(total));
    steps.sort_unstable();
    steps.dedup();
    fd.sample_times = steps.iter().map(|&s| s as f64 * dt).collect();
    Ok(fd_solve(&fd)?)
}

#[derive(Serialize)]
struct PairSummary {
    a: usize,
    b: usize,
    max_abs_diff: f64,
    l2_rel: Option<f64>,
    linf_rel: Option<f64>,
    /// Rank-matched final-time peak differences, a minus b.
    peak_position_diffs: Vec<f64>,
    peak_amplitude_diffs: Vec<f64>,
}

#[derive(Serialize)]
struct CompareDoc {
    sources: Vec<String>,
    x_range: [f64; 2],
    t_range: [f64; 2],
    nx: usize,
    nt: usize,
    pairs: Vec<PairSummary>,
    /// Peaks of each source at the last compared time, leading first.
    final_peaks: Vec<Vec<Peak>>,
}

fn cmd_compare(args: &CompareArgs) -> Result<i32, CliError> {
    let fc = parse_file_config(load_table(&args.cfg)?)?;
    let specs =
        args.sources.iter().map(|s| parse_source(s)).collect::<Result<Vec<_>, CliError>>()?;

    let mut sources: Vec<Option<Source>> = Vec::new();
    let mut regions = Vec::new();
    for spec in &specs {
        match spec {
            SourceSpec::Checkpoint(p) => {
                let sol = Checkpoint::load(p)?.solution()?;
                regions.push((sol.x_range(), sol.t_range()));
                sources.push(Some(Source::Field(sol)));
            }
            SourceSpec::Csv(p) => {
                let sol = SolutionField::from_grid(read_field_csv(p)?)?;
                regions.push((sol.x_range(), sol.t_range()));
                sources.push(Some(Source::Field(sol)));
            }
            SourceSpec::Exact(sc) => {
                regions.push(((sc.x_min, sc.x_max), (0.0, sc.t_final)));
                sources.push(Some(Source::Exact(*sc)));
            }
            SourceSpec::Oracle(sc) => {
                regions.push(((sc.x_min, sc.x_max), (0.0, sc.t_final)));
                sources.push(None);
            }
        }
    }
    let x_lo = regions.iter().fold(f64::NEG_INFINITY, |m, r| m.max(r.0 .0));
    let x_hi = regions.iter().fold(f64::INFINITY, |m, r| m.min(r.0 .1));
    let t_lo = regions.iter().fold(f64::NEG_INFINITY, |m, r| m.max(r.1 .0));
    let t_hi = regions.iter().fold(f64::INFINITY, |m, r| m.min(r.1 .1));
    if !(x_lo < x_hi) || !(t_lo <= t_hi) {
        return Err(CliError::region(format!(
            "sources share no region: x overlap [{x_lo}, {x_hi}], t overlap [{t_lo}, {t_hi}]"
        )));
    }

    let nx = args.nx.or(fc.eval.nx).unwrap_or(501);
    let nt = args.nt.or(fc.eval.nt).unwrap_or(101);
    if nx == 0 || nt == 0 {
        return Err(CliError::config("compare grid sizes must be positive"));
    }
    let min_amplitude =
        args.min_amplitude.or(fc.eval.peak_min_amplitude).unwrap_or(0.01);
    let xs = linspace(x_lo, x_hi, nx);
    let mut ts = linspace(t_lo, t_hi, nt);

    // Align the compared times with the first difference-scheme source so
    // its values come straight from stored snapshots.
    if let Some(dt) = specs.iter().find_map(|s| match s {
        SourceSpec::Oracle(sc) => Some(FdConfig::default_for(*sc).dt),
        _ => None,
    }) {
        let mut snapped: Vec<f64> =
            ts.iter().map(|&t| ((t / dt).round() * dt).clamp(t_lo, t_hi)).collect();
        snapped.dedup();
        ts = snapped;
    }
    for (i, spec) in specs.iter().enumerate() {
        if let SourceSpec::Oracle(sc) = spec {
            let field = dedup_grid(oracle_field(*sc, &ts)?);
            sources[i] = Some(Source::Field(SolutionField::from_grid(field)?));
        }
    }
    let sources: Vec<Source> = sources.into_iter().map(|s| s.unwrap()).collect();

    fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    let mut timings = BTreeMap::new();
    let t_start = Instant::now();

    let frames: Vec<Vec<Vec<f64>>> = sources
        .iter()
        .map(|s| ts.iter().map(|&t| s.frame(&xs, t)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let final_peaks: Vec<Vec<Peak>> = frames
        .iter()
        .map(|f| find_peaks(f.last().unwrap(), &xs, min_amplitude))
        .collect::<Result<Vec<_>, _>>()?;

    let mut pairs = Vec::new();
    for a in 0..sources.len() {
        for b in a + 1..sources.len() {
            let mut diff = String::from("x,t,diff\n");
            let mut norms = String::from("t,l2_rel,linf_rel,rms_abs,max_abs\n");
            let mut max_abs = 0.0_f64;
            for (ti, &t) in ts.iter().enumerate() {
                let (fa, fb) = (&frames[a][ti], &frames[b][ti]);
                let mut sq = 0.0;
                let mut mx = 0.0_f64;
                for (xi, &x) in xs.iter().enumerate() {
                    let d = fa[xi] - fb[xi];
                    diff.push_str(&format!("{x},{t},{d}\n"));
                    sq += d * d;
                    mx = mx.max(d.abs());
                }
                max_abs = max_abs.max(mx);
                let (l2, linf) = error_norms(fa, fb).unwrap_or((f64::NAN, f64::NAN));
                let rms = (sq / xs.len() as f64).sqrt();
                norms.push_str(&format!("{t},{l2},{linf},{rms},{mx}\n"));
            }
            let flat_a: Vec<f64> = frames[a].iter().flatten().copied().collect();
            let flat_b: Vec<f64> = frames[b].iter().flatten().copied().collect();
            let overall = error_norms(&flat_a, &flat_b).ok();
            let ranks = final_peaks[a].len().min(final_peaks[b].len());
            pairs.push(PairSummary {
                a,
                b,
                max_abs_diff: max_abs,
                l2_rel: overall.map(|n| n.0),
                linf_rel: overall.map(|n| n.1),
                peak_position_diffs: (0..ranks)
                    .map(|r| final_peaks[a][r].position - final_peaks[b][r].position)
                    .collect(),
                peak_amplitude_diffs: (0..ranks)
                    .map(|r| final_peaks[a][r].amplitude - final_peaks[b][r].amplitude)
                    .collect(),
            });
            write_text(&args.out, &format!("diff_{a}_{b}.csv"), &diff, &mut files)?;
            write_text(&args.out, &format!("norms_{a}_{b}.csv"), &norms, &mut files)?;
        }
    }

    let doc = CompareDoc {
        sources: args.sources.clone(),
        x_range: [x_lo, x_hi],
        t_range: [t_lo, t_hi],
        nx,
        nt: ts.len(),
        pairs,
        final_peaks,
    };
    write_json(&args.out, "compare.json", &doc, &mut files)?;
    timings.insert("total", t_start.elapsed().as_millis());
    write_manifest(
        &args.out,
        Manifest {
            command: "compare",
            out_dir: args.out.display().to_string(),
            files,
            exit_status: 0,
            failure: None,
            timings_ms: timings,
            config: json!({
                "sources": args.sources,
                "nx": nx,
                "nt": nt,
                "min_amplitude": min_amplitude,
            }),
        },
    )?;
    Ok(0)
}

// --------------------------------------------------------------- oracle --

fn cmd_oracle(args: &OracleArgs) -> Result<i32, CliError> {
    let fc = parse_file_config(load_table(&args.cfg)?)?;
    let scenario = resolve_scenario(args.scenario.as_deref(), fc.scenario.as_ref())?;
    let mut fd = FdConfig::default_for(scenario);
    if let Some(dx) = args.dx.or(fc.oracle.dx) {
        fd.dx = dx;
    }
    if let Some(dt) = args.dt.or(fc.oracle.dt) {
        fd.dt = dt;
    }
    let times = args.times.or(fc.oracle.times).unwrap_or(11);
    if times == 0 {
        return Err(CliError::config("snapshot count must be positive"));
    }
    fd.sample_times = linspace(0.0, scenario.t_final, times);
    let min_amplitude = fc.eval.peak_min_amplitude.unwrap_or(0.01);

    fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    let mut timings = BTreeMap::new();
    let t_start = Instant::now();
    let field = match fd_solve(&fd) {
        Ok(f) => dedup_grid(f),
        Err(e @ ReferenceError::Instability { .. }) => {
            // The blow-up itself is the result; record it and exit 3.
            write_manifest(
                &args.out,
                Manifest {
                    command: "oracle",
                    out_dir: args.out.display().to_string(),
                    files,
                    exit_status: 3,
                    failure: Some(e.to_string()),
                    timings_ms: timings,
                    config: serde_json::to_value(&fd)?,
                },
            )?;
            eprintln!("error: {e}");
            return Ok(3);
        }
        Err(e) => return Err(e.into()),
    };
    timings.insert("solve", t_start.elapsed().as_millis());

    let xs = field.grid.points();
    let spacing = field.grid.spacing();
    write_text(&args.out, "field.csv", &field_csv(&xs, &field.times, &field.rows), &mut files)?;
    let series = field
        .times
        .iter()
        .zip(&field.rows)
        .map(|(&t, row)| {
            let du = grid_gradient(row, spacing)?;
            Ok((t, invariants(row, &du, spacing, scenario.rlw)?))
        })
        .collect::<Result<Vec<_>, PhysicsError>>()?;
    write_text(&args.out, "invariants.csv", &invariants_csv(&series), &mut files)?;
    let peaks = peaks_csv(&xs, &field.times, &field.rows, min_amplitude)?;
    write_text(&args.out, "peaks.csv", &peaks, &mut files)?;

    let norms = match scenario.kind {
        ScenarioKind::SingleSoliton { .. } => {
            let flat: Vec<f64> = field.rows.iter().flatten().copied().collect();
            let ref_flat: Vec<f64> = field
                .times
                .iter()
                .flat_map(|&t| xs.iter().map(move |&x| exact_single_soliton(x, t, &scenario)))
                .collect();
            error_norms(&flat, &ref_flat).ok()
        }
        _ => None,
    };
    let drift = match (series.first(), series.last()) {
        (Some(&(_, a)), Some(&(_, b))) => conservation_error_pct(b, a).ok(),
        _ => None,
    };
    let metrics = MetricsDoc {
        scenario: scenario.name().to_string(),
        variant: None,
        strategy: None,
        seed: None,
        reference: matches!(scenario.kind, ScenarioKind::SingleSoliton { .. }).then_some("exact"),
        l2_rel: norms.map(|n| n.0),
        linf_rel: norms.map(|n| n.1),
        initial_invariants: series.first().map(|&(_, c)| c.as_array()),
        final_invariants: series.last().map(|&(_, c)| c.as_array()),
        conservation_drift_pct: drift,
        boundary_mismatch: Vec::new(),
        initial_total_loss: None,
        final_total_loss: None,
        aborted: false,
    };
    write_json(&args.out, "metrics.json", &metrics, &mut files)?;
    timings.insert("total", t_start.elapsed().as_millis());
    write_manifest(
        &args.out,
        Manifest {
            command: "oracle",
            out_dir: args.out.display().to_string(),
            files,
            exit_status: 0,
            failure: None,
            timings_ms: timings,
            config: serde_json::to_value(&fd)?,
        },
    )?;
    Ok(0)
}
