//! Command-line experiments: configuration, dispatch and report files.
//!
//! Every subcommand accepts its flags from the command line and from a flat
//! `key = value` file given with `--config`. File keys are the long flag
//! names without dashes; flags on the command line win. Reports are written
//! to `--out`, else `$LIFESPAN_LAB_OUT`, else `./lab_out`.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 on a runtime failure
//! (a step failure, a failed fit, an I/O error).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{LabError, Result};
use crate::fit::{fit_line, ExcludedRow, FitResult};
use crate::functional::{
    self, star_value, verify_snapshots, verify_wave_run, CheckInputs, FunctionalConfig,
    FunctionalTrace, QuadOptions, ResidualReport, VerifyOptions,
};
use crate::ode::{
    default_horizon, integrate_blowup, membership_residuals, sweep_ode, BlowupStatus,
    IntegratorControls, OdeSpec, OdeVariant, TimeCoordinate,
};
use crate::odi::{self, CriticalOdiParams, SubcriticalOdiParams};
use crate::quad::gauss_composite;
use crate::wave::{
    detect_lifespan_with_resolution, pde_sweep, read_snapshot_csv, run_wave, write_snapshot_csv,
    DataProfile, DomainPolicy, GMode, ProfileShape, RadialField, SnapshotPolicy, WaveConfig,
};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "LIFESPAN_LAB_OUT";
pub const DEFAULT_OUT: &str = "lab_out";

#[derive(Parser, Debug, Clone)]
#[command(
    name = "lifespan-lab",
    version,
    about = "Lifespan experiments for semilinear wave equations"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat `key = value` file with defaults for the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (0: all hardware threads).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Sharp and theorem constants for `(n, p)`.
    Constants(ConstantsArgs),
    /// Iteration ladder of an ODE inequality class.
    OdiLadder(LadderArgs),
    /// Blow-up time of one ODE equality model.
    OdeBlowup(OdeBlowupArgs),
    /// ODE blow-up times over a ladder of `A` with a scaling fit.
    OdeSweep(OdeSweepArgs),
    /// One wave equation run, optionally checking the functional bounds.
    PdeRun(PdeRunArgs),
    /// Wave lifespans over a ladder of `ε` with a scaling fit.
    PdeSweep(PdeSweepArgs),
    /// Functional lower bounds on exported snapshots.
    VerifyFunctional(VerifyArgs),
    /// Least-squares line through two columns of a CSV file.
    Fit(FitArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Critical,
    Subcritical,
}

impl From<VariantArg> for OdeVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Critical => OdeVariant::Critical,
            VariantArg::Subcritical => OdeVariant::Subcritical,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeArg {
    Physical,
    Log,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeArg {
    Standard,
    Shell,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GArg {
    Zero,
    F,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ConstantsArgs {
    #[arg(long)]
    pub n: u32,
    #[arg(long)]
    pub p: f64,
    /// Support radius for the theorem constants.
    #[arg(long = "R", default_value_t = 1.0)]
    pub r: f64,
    /// `A_f` for the theorem constants (default: the standard bump of amplitude 1).
    #[arg(long = "A-f")]
    pub a_f: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LadderArgs {
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 2)]
    pub n: u32,
    #[arg(long)]
    pub p: f64,
    #[arg(long = "A", default_value_t = 1.0)]
    pub a: f64,
    #[arg(long = "T0", default_value_t = 0.125)]
    pub t0: f64,
    #[arg(long = "k-max", default_value_t = 25)]
    pub k_max: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ControlArgs {
    #[arg(long = "rel-tol", default_value_t = 1e-8)]
    pub rel_tol: f64,
    #[arg(long = "abs-tol", default_value_t = 1e-12)]
    pub abs_tol: f64,
    /// Blow-up threshold on `H`.
    #[arg(long, default_value_t = 1e30)]
    pub threshold: f64,
    #[arg(long = "max-steps", default_value_t = 2_000_000)]
    pub max_steps: usize,
    /// Integration coordinate (default: log for critical, physical otherwise).
    #[arg(long = "time-coordinate", value_enum)]
    pub time_coordinate: Option<TimeArg>,
    /// Skip the looser-tolerance rerun.
    #[arg(long = "no-error-estimate")]
    pub no_error_estimate: bool,
    /// Final time (default: twice the predicted bound).
    #[arg(long)]
    pub horizon: Option<f64>,
}

impl ControlArgs {
    fn controls(&self, variant: OdeVariant) -> IntegratorControls {
        let base = IntegratorControls::for_variant(variant);
        IntegratorControls {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            blowup_threshold: self.threshold,
            max_steps: self.max_steps,
            time_coordinate: match self.time_coordinate {
                Some(TimeArg::Physical) => TimeCoordinate::Physical,
                Some(TimeArg::Log) => TimeCoordinate::Log,
                None => base.time_coordinate,
            },
            estimate_error: !self.no_error_estimate,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OdeBlowupArgs {
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 2)]
    pub n: u32,
    #[arg(long)]
    pub p: f64,
    #[arg(long = "A")]
    pub a: f64,
    #[arg(long = "T0", default_value_t = 0.125)]
    pub t0: f64,
    #[arg(long = "H0", default_value_t = 0.0)]
    pub h0: f64,
    #[arg(long = "dH0", default_value_t = 0.0)]
    pub dh0: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub controls: ControlArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OdeSweepArgs {
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 2)]
    pub n: u32,
    #[arg(long)]
    pub p: f64,
    /// Comma-separated forcing amplitudes.
    #[arg(long = "A", value_delimiter = ',', required = true)]
    pub a: Vec<f64>,
    #[arg(long = "T0", default_value_t = 0.125)]
    pub t0: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub controls: ControlArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct WaveArgs {
    #[arg(long)]
    pub n: u32,
    #[arg(long)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub amp: f64,
    #[arg(long = "R", default_value_t = 1.0)]
    pub r: f64,
    #[arg(long, value_enum, default_value_t = ShapeArg::Standard)]
    pub shape: ShapeArg,
    /// Initial velocity: zero or equal to the displacement profile.
    #[arg(long, value_enum, default_value_t = GArg::Zero)]
    pub g: GArg,
    #[arg(long, default_value_t = 0.005)]
    pub dr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub cfl: f64,
    #[arg(long, default_value_t = 5000.0)]
    pub horizon: f64,
    /// Blow-up threshold on `max |u_r|`.
    #[arg(long, default_value_t = 1e6)]
    pub threshold: f64,
    /// Evolve only `r >= t - W` (default: the whole domain).
    #[arg(long)]
    pub window: Option<f64>,
}

impl WaveArgs {
    fn config(&self, epsilon: f64) -> WaveConfig {
        let profile = DataProfile {
            shape: match self.shape {
                ShapeArg::Standard => ProfileShape::StandardBump,
                ShapeArg::Shell => ProfileShape::ShellBump,
            },
            r_support: self.r,
            amplitude: self.amp,
            g_mode: match self.g {
                GArg::Zero => GMode::Zero,
                GArg::F => GMode::EqualToF,
            },
        };
        let mut cfg = WaveConfig::new(self.n, self.p, epsilon, profile, self.dr, self.horizon);
        cfg.cfl = self.cfl;
        cfg.blowup_threshold = self.threshold;
        if let Some(width) = self.window {
            cfg.domain = DomainPolicy::FrontWindow { width };
        }
        cfg
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PdeRunArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub wave: WaveArgs,
    #[arg(long)]
    pub eps: f64,
    /// Also run at dr/2 and report the relative change of T.
    #[arg(long = "resolution-check")]
    pub resolution_check: bool,
    /// Write snapshots (r, u, v) to `<out>/snapshots/`.
    #[arg(long = "export-snapshots")]
    pub export_snapshots: bool,
    /// Minimum number of stored snapshots.
    #[arg(long = "snapshot-target", default_value_t = 256)]
    pub snapshot_target: usize,
    /// Check both functional lower bounds along the run.
    #[arg(long = "verify-functional")]
    pub verify_functional: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub functional: FunctionalArgs,
    /// Grid of a companion run entering the functional error estimate.
    #[arg(long = "companion-dr")]
    pub companion_dr: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FunctionalArgs {
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    /// Inner strip radius (default 3R/4).
    #[arg(long = "R0")]
    pub r0: Option<f64>,
    /// Residuals are checked up to this fraction of T.
    #[arg(long = "t-fraction", default_value_t = 0.8)]
    pub t_fraction: f64,
}

impl FunctionalArgs {
    fn config(&self, r_support: f64) -> Result<FunctionalConfig> {
        FunctionalConfig::new(self.beta, self.r0.unwrap_or(0.75 * r_support), r_support)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PdeSweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub wave: WaveArgs,
    /// Comma-separated amplitudes ε (at least four).
    #[arg(long, value_delimiter = ',', required = true)]
    pub eps: Vec<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct VerifyArgs {
    /// Directory of snapshot CSV files (as written by `pde-run --export-snapshots`).
    #[arg(long)]
    pub snapshots: PathBuf,
    /// Snapshots of the same data on another grid, for the error estimate.
    #[arg(long)]
    pub companion: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    #[arg(long = "R0")]
    pub r0: Option<f64>,
    /// Support radius of the data (default: support at t = 0).
    #[arg(long = "R")]
    pub r: Option<f64>,
    /// Last checked time (default: the last snapshot).
    #[arg(long = "t-max")]
    pub t_max: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    #[arg(long = "log-x")]
    pub log_x: bool,
    #[arg(long = "log-y")]
    pub log_y: bool,
    /// Keep rows whose `status` column differs from `blew_up`.
    #[arg(long = "keep-all")]
    pub keep_all: bool,
}

// ---------------------------------------------------------------- parsing

const SUBCOMMANDS: [&str; 8] = [
    "constants",
    "odi-ladder",
    "ode-blowup",
    "ode-sweep",
    "pde-run",
    "pde-sweep",
    "verify-functional",
    "fit",
];

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            LabError::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(LabError::Config(format!("line {}: bad key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn config_tokens(pairs: &[(String, String)]) -> Result<Vec<OsString>> {
    let mut tokens = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => tokens.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                tokens.push(format!("--{k}").into());
                tokens.push(v.into());
            }
        }
    }
    Ok(tokens)
}

/// Parses command-line arguments, splicing in the `--config` file so that
/// explicit flags override it.
pub fn parse_args<I, T>(args: I) -> std::result::Result<Cli, ParseFailure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let mut config_path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config_path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(path) = s.strip_prefix("--config=") {
            config_path = Some(PathBuf::from(path));
        }
    }
    if let Some(path) = config_path {
        let text = fs::read_to_string(&path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        let tokens = config_tokens(&parse_config_file(&text)?)?;
        let at = args
            .iter()
            .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
            .map_or(args.len(), |i| i + 1);
        args.splice(at..at, tokens);
    }
    Cli::try_parse_from(args).map_err(ParseFailure::Clap)
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Lab(LabError),
}

impl From<LabError> for ParseFailure {
    fn from(e: LabError) -> Self {
        ParseFailure::Lab(e)
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse_args(args) {
        Ok(cli) => run(&cli),
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            }
        }
        Err(ParseFailure::Lab(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Output directory: `--out`, else `$LIFESPAN_LAB_OUT`, else `./lab_out`.
pub fn output_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Runs a parsed command and returns the exit code.
pub fn run(cli: &Cli) -> i32 {
    let out = output_dir(cli);
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| LabError::Runtime(format!("thread pool: {e}")))
        .and_then(|pool| pool.install(|| dispatch(&cli.command, &out)));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Runs `command`, writing artifacts to `out`. Returns the exit code.
pub fn dispatch(command: &Command, out: &Path) -> Result<i32> {
    fs::create_dir_all(out)?;
    match command {
        Command::Constants(a) => cmd_constants(a, command, out),
        Command::OdiLadder(a) => cmd_ladder(a, command, out),
        Command::OdeBlowup(a) => cmd_ode_blowup(a, command, out),
        Command::OdeSweep(a) => cmd_ode_sweep(a, command, out),
        Command::PdeRun(a) => cmd_pde_run(a, command, out),
        Command::PdeSweep(a) => cmd_pde_sweep(a, command, out),
        Command::VerifyFunctional(a) => cmd_verify(a, command, out),
        Command::Fit(a) => cmd_fit(a, command, out),
    }
}

// ---------------------------------------------------------------- output

/// JSON formatter writing every float with 17 significant digits.
struct ReportFormatter {
    inner: PrettyFormatter<'static>,
}

impl ReportFormatter {
    fn new() -> Self {
        Self {
            inner: PrettyFormatter::with_indent(b"  "),
        }
    }
}

impl Formatter for ReportFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{:.16e}", value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Serializes `value` as pretty JSON with fixed float formatting.
pub fn to_report_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ReportFormatter::new());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("JSON output is UTF-8"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_report_json(value)?)?;
    Ok(())
}

/// A CSV cell.
pub enum Cell {
    F(f64),
    I(i64),
    S(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) => format!("{v:.16e}"),
            Cell::I(v) => v.to_string(),
            Cell::S(s) => s.clone(),
        }
    }
}

/// CSV text: `# schema=1`, a `# config=` echo, the header, then the rows.
pub fn csv_text<C: Serialize>(config: &C, header: &[&str], rows: &[Vec<Cell>]) -> Result<String> {
    let mut s = String::from("# schema=1\n");
    writeln!(s, "# config={}", serde_json::to_string(config)?).expect("write to String");
    s.push_str(&header.join(","));
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(Cell::render).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Ok(s)
}

fn write_csv<C: Serialize>(
    path: &Path,
    config: &C,
    header: &[&str],
    rows: &[Vec<Cell>],
) -> Result<()> {
    fs::write(path, csv_text(config, header, rows)?)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

// ---------------------------------------------------------------- commands

#[derive(Serialize)]
struct ConstantsReport<'a> {
    config: &'a Command,
    critical_exponent: f64,
    regime: &'static str,
    sharp: odi::SharpConstants,
    a_f: f64,
    theorem: odi::TheoremConstants,
}

fn cmd_constants(a: &ConstantsArgs, cfg: &Command, out: &Path) -> Result<i32> {
    let sharp = odi::sharp_constants(a.n, a.p)?;
    let a_f = match a.a_f {
        Some(v) => v,
        None => functional::compute_a_f(&DataProfile::standard(a.r, 1.0), a.n)?.a_f,
    };
    let theorem = odi::theorem_constants(a.n, a.p, a.r, a_f)?;
    let report = ConstantsReport {
        config: cfg,
        critical_exponent: odi::critical_exponent(a.n)?,
        regime: if odi::is_critical(a.n, a.p) {
            "critical"
        } else {
            "subcritical"
        },
        sharp,
        a_f,
        theorem,
    };
    write_json(&out.join("constants.json"), &report)?;
    println!(
        "n = {}, p = {} ({}), p_c = {:.6}",
        a.n, a.p, report.regime, report.critical_exponent
    );
    println!(
        "C~_crit = {:.6e}, remark crit bound = {:.6}",
        sharp.c_tilde_crit, sharp.remark_crit_bound
    );
    println!(
        "C~_sub = {}, remark sub bound = {}",
        sharp.c_tilde_sub.map_or("-".into(), |v| format!("{v:.6e}")),
        fmt_opt(sharp.remark_sub_bound)
    );
    println!(
        "A_f = {a_f:.6e}: theorem crit = {}, sub = {}",
        fmt_opt(theorem.crit),
        fmt_opt(theorem.sub)
    );
    Ok(0)
}

#[derive(Serialize)]
struct LadderReport<'a> {
    config: &'a Command,
    ladder: &'a odi::IterationLadder,
}

fn cmd_ladder(a: &LadderArgs, cfg: &Command, out: &Path) -> Result<i32> {
    let ladder = match a.variant {
        VariantArg::Critical => {
            odi::critical_ladder(&CriticalOdiParams::new(a.a, a.p, a.t0)?, a.k_max)?
        }
        VariantArg::Subcritical => {
            odi::subcritical_ladder(&SubcriticalOdiParams::new(a.a, a.p, a.n, a.t0)?, a.k_max)?
        }
    };
    let rows: Vec<Vec<Cell>> = ladder
        .entries
        .iter()
        .map(|e| {
            vec![
                Cell::I(e.k as i64),
                Cell::F(e.q),
                Cell::F(e.ln_c),
                Cell::F(e.ln_t),
            ]
        })
        .collect();
    write_csv(
        &out.join("odi_ladder.csv"),
        cfg,
        &["k", "q", "ln_c", "ln_t"],
        &rows,
    )?;
    write_json(
        &out.join("odi_ladder.json"),
        &LadderReport {
            config: cfg,
            ladder: &ladder,
        },
    )?;
    let last = ladder.entries.last().expect("ladder has at least one rung");
    println!(
        "{} rungs; ln(T_k + 1) at k = {}: {:.6}",
        ladder.entries.len(),
        last.k,
        last.ln_t
    );
    if let Some(t) = ladder.tilde_t {
        println!("limit ln(T~ + 1) = {t:.6}");
    }
    Ok(0)
}

fn ode_spec(variant: VariantArg, a: f64, p: f64, n: u32, t0: f64) -> Result<OdeSpec> {
    match variant {
        VariantArg::Critical => OdeSpec::critical(a, p, t0),
        VariantArg::Subcritical => OdeSpec::subcritical(a, p, n, t0),
    }
}

#[derive(Serialize)]
struct BlowupReport<'a> {
    config: &'a Command,
    status: BlowupStatus,
    t_blow: f64,
    ln_t_blow: f64,
    predicted_bound: f64,
    diagnostics: crate::ode::BlowupDiagnostics,
    membership: crate::ode::MembershipResiduals,
}

fn cmd_ode_blowup(a: &OdeBlowupArgs, cfg: &Command, out: &Path) -> Result<i32> {
    let spec = ode_spec(a.variant, a.a, a.p, a.n, a.t0)?;
    let ctrl = a.controls.controls(spec.variant);
    let horizon = match a.controls.horizon {
        Some(h) => h,
        None => default_horizon(&spec)?,
    };
    let res = integrate_blowup(&spec, (a.h0, a.dh0), &ctrl, horizon)?;
    let membership = membership_residuals(&res, &spec)?;
    // ln(t+1) bound for critical models, t+1 bound for subcritical ones
    let predicted_bound = match spec.variant {
        OdeVariant::Critical => odi::predict_lifespan_critical(a.a, a.p)?,
        OdeVariant::Subcritical => odi::predict_lifespan_subcritical(a.a, a.n, a.p)?,
    };
    let rows: Vec<Vec<Cell>> = res
        .trace
        .iter()
        .map(|s| vec![Cell::F(s.t), Cell::F(s.h), Cell::F(s.dh)])
        .collect();
    write_csv(&out.join("ode_trace.csv"), cfg, &["t", "H", "dH"], &rows)?;
    let report = BlowupReport {
        config: cfg,
        status: res.status,
        t_blow: res.t_blow,
        ln_t_blow: res.ln_t_blow,
        predicted_bound,
        diagnostics: res.diagnostics,
        membership,
    };
    write_json(&out.join("ode_blowup.json"), &report)?;
    println!(
        "{}: status {}, t_blow = {:.10e}, predicted bound {:.6e}",
        spec.label(),
        res.status.as_str(),
        res.t_blow,
        predicted_bound
    );
    Ok(if res.status == BlowupStatus::StepFailure {
        2
    } else {
        0
    })
}

#[derive(Serialize)]
struct OdeSweepReport<'a> {
    config: &'a Command,
    sweep: &'a crate::ode::OdeSweep,
}

fn cmd_ode_sweep(a: &OdeSweepArgs, cfg: &Command, out: &Path) -> Result<i32> {
    let spec = ode_spec(
        a.variant,
        a.a.first().copied().unwrap_or(1.0),
        a.p,
        a.n,
        a.t0,
    )?;
    let ctrl = a.controls.controls(spec.variant);
    let sweep = sweep_ode(&spec, &a.a, &ctrl, a.controls.horizon)?;
    let rows: Vec<Vec<Cell>> = sweep
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::S(r.variant.clone()),
                Cell::I(r.n as i64),
                Cell::F(r.p),
                Cell::F(r.a),
                Cell::F(r.t0),
                Cell::F(r.t_blow),
                Cell::F(r.ln_t_blow),
                Cell::S(r.status.as_str().into()),
                Cell::F(r.product_or_residual),
            ]
        })
        .collect();
    let header = [
        "variant",
        "n",
        "p",
        "A",
        "T0",
        "t_blow",
        "ln_t_blow",
        "status",
        "product_or_residual",
    ];
    write_csv(&out.join("ode_sweep.csv"), cfg, &header, &rows)?;
    write_json(
        &out.join("ode_sweep.json"),
        &OdeSweepReport {
            config: cfg,
            sweep: &sweep,
        },
    )?;
    for r in &sweep.rows {
        println!(
            "A = {:<10} t_blow = {:.6e} ({})",
            r.a,
            r.t_blow,
            r.status.as_str()
        );
    }
    if let Some(fit) = &sweep.fit {
        println!(
            "fit ln t_blow vs ln A: slope {:.4} (target {}), r^2 = {:.5}",
            fit.slope,
            fmt_opt(sweep.target_slope),
            fit.r_squared
        );
    }
    if let Some(products) = &sweep.products {
        println!("products ln(t_blow) A^(p-1): {products:.4?}");
        println!(
            "nondecreasing as A decreases: {:?}",
            sweep.products_monotone
        );
    }
    for w in &sweep.warnings {
        println!("warning: {w}");
    }
    Ok(0)
}

#[derive(Serialize)]
struct PdeRunReport<'a> {
    config: &'a Command,
    estimate: crate::wave::LifespanEstimate,
    a_f: functional::AfValues,
    snapshots_written: usize,
    functional: Option<FunctionalSummary<'a>>,
}

#[derive(Serialize)]
struct FunctionalSummary<'a> {
    passed: bool,
    residuals: &'a ResidualReport,
    error_quadrature: functional::ResidualErrors,
    error_time: functional::ResidualErrors,
    error_grid: Option<functional::ResidualErrors>,
}

fn residual_rows(report: &ResidualReport, trace: &FunctionalTrace) -> Vec<Vec<Cell>> {
    report
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            vec![
                Cell::F(t),
                Cell::F(trace.u[i]),
                Cell::F(trace.u_second[i]),
                Cell::F(report.residual_linear[i]),
                report.residual_nonlinear[i].map_or(Cell::S(String::new()), Cell::F),
            ]
        })
        .collect()
}

const RESIDUAL_HEADER: [&str; 5] = [
    "t",
    "U",
    "U_second",
    "residual_linear",
    "residual_nonlinear",
];

fn print_residuals(report: &ResidualReport) {
    println!(
        "functional: min linear residual {:.4e} (tol {:.2e}), min nonlinear residual {} (tol {:.2e}): {}",
        report.min_residual_linear,
        report.tolerance_linear,
        report.min_residual_nonlinear.map_or("-".into(), |v| format!("{v:.4e}")),
        report.tolerance_nonlinear,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    if let Some(n) = &report.notice {
        println!("notice: {n}");
    }
}

fn cmd_pde_run(a: &PdeRunArgs, cfg: &Command, out: &Path) -> Result<i32> {
    let wave = a.wave.config(a.eps);
    wave.validate()?;
    let fconfig = a.functional.config(a.wave.r)?;
    let mut estimate;
    let mut snapshots_written = 0;
    let a_f;
    let mut verification = None;
    if a.verify_functional {
        let opts = VerifyOptions {
            t_fraction: a.functional.t_fraction,
            companion_dr: a.companion_dr,
            snapshot_target: a.snapshot_target,
        };
        let report = verify_wave_run(&wave, &fconfig, opts)?;
        estimate = report.estimate;
        a_f = functional::compute_a_f(&wave.profile, wave.n)?;
        verification = Some(report);
    } else {
        let snapshots = a.export_snapshots.then_some(SnapshotPolicy {
            target: a.snapshot_target,
            depth: None,
        });
        let run = run_wave(&WaveConfig {
            snapshots,
            ..wave.clone()
        })?;
        estimate = run.estimate;
        a_f = run.a_f;
        if a.export_snapshots {
            let dir = out.join("snapshots");
            fs::create_dir_all(&dir)?;
            for (i, snap) in run.snapshots.iter().enumerate() {
                let mut f =
                    io::BufWriter::new(fs::File::create(dir.join(format!("snap_{i:05}.csv")))?);
                write_snapshot_csv(&mut f, snap, wave.n, wave.p, wave.epsilon)?;
                f.flush()?;
            }
            snapshots_written = run.snapshots.len();
        }
    }
    if a.resolution_check {
        let res = detect_lifespan_with_resolution(&wave)?;
        estimate.resolution_sensitivity = res.resolution_sensitivity;
    }
    let functional = verification.as_ref().map(|v| FunctionalSummary {
        passed: v.residuals.passed(),
        residuals: &v.residuals,
        error_quadrature: v.error_quadrature,
        error_time: v.error_time,
        error_grid: v.error_grid,
    });
    if let Some(v) = &verification {
        write_csv(
            &out.join("functional_residuals.csv"),
            cfg,
            &RESIDUAL_HEADER,
            &residual_rows(&v.residuals, &v.trace),
        )?;
    }
    let report = PdeRunReport {
        config: cfg,
        estimate,
        a_f,
        snapshots_written,
        functional,
    };
    write_json(&out.join("pde_run.json"), &report)?;
    println!(
        "n = {}, p = {}, eps = {}: {} at T = {:.6}, threshold sensitivity {:.2e}, resolution sensitivity {}",
        wave.n,
        wave.p,
        wave.epsilon,
        estimate.status.as_str(),
        estimate.t_num,
        estimate.threshold_sensitivity,
        fmt_opt(estimate.resolution_sensitivity)
    );
    if let Some(v) = &verification {
        print_residuals(&v.residuals);
    }
    if estimate.step_failure {
        eprintln!("error: the scheme produced a non-finite state before the threshold");
        return Ok(2);
    }
    Ok(0)
}

#[derive(Serialize)]
struct PdeSweepReport<'a> {
    config: &'a Command,
    sweep: &'a crate::wave::PdeSweep,
}

fn cmd_pde_sweep(a: &PdeSweepArgs, cfg: &Command, out: &Path) -> Result<i32> {
    let base = a.wave.config(a.eps.first().copied().unwrap_or(1.0));
    let sweep = pde_sweep(&base, &a.eps)?;
    let rows: Vec<Vec<Cell>> = sweep
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::I(r.n as i64),
                Cell::F(r.p),
                Cell::F(r.epsilon),
                Cell::F(r.t_num),
                Cell::S(r.status.as_str().into()),
                Cell::F(r.threshold_sensitivity),
            ]
        })
        .collect();
    let header = [
        "n",
        "p",
        "epsilon",
        "T_num",
        "status",
        "threshold_sensitivity",
    ];
    write_csv(&out.join("pde_sweep.csv"), cfg, &header, &rows)?;
    write_json(
        &out.join("pde_sweep.json"),
        &PdeSweepReport {
            config: cfg,
            sweep: &sweep,
        },
    )?;
    for r in &sweep.rows {
        println!(
            "eps = {:<8} T = {:.6} ({})",
            r.epsilon,
            r.t_num,
            r.status.as_str()
        );
    }
    let f = &sweep.fit;
    match sweep.target_slope {
        Some(target) => println!(
            "fit ln T vs ln eps: slope {:.4} (target {target:.4}), r^2 = {:.5}",
            f.slope, f.r_squared
        ),
        None => println!(
            "fit ln T vs eps^-(p-1): slope {:.4}, r^2 = {:.5}",
            f.slope, f.r_squared
        ),
    }
    if let Some(products) = &sweep.products {
        println!("products ln(T) eps^(p-1): {products:.4?}");
    }
    for w in &sweep.warnings {
        println!("warning: {w}");
    }
    let failed = sweep.rows.iter().any(|r| r.step_failure);
    Ok(if failed { 2 } else { 0 })
}

/// Loads all snapshot CSV files of `dir`, sorted by time.
pub fn load_snapshots(dir: &Path) -> Result<(Vec<RadialField>, crate::wave::SnapshotMeta)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut snaps = Vec::with_capacity(paths.len());
    let mut meta = None;
    for path in &paths {
        let (field, m) = read_snapshot_csv(BufReader::new(fs::File::open(path)?))?;
        meta.get_or_insert(m);
        snaps.push(field);
    }
    let meta =
        meta.ok_or_else(|| LabError::Data(format!("no snapshot files in {}", dir.display())))?;
    snaps.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok((snaps, meta))
}

/// `½ ∫_{R0}^{R} u*(0, r) dr / ε` from the snapshot at `t = 0`.
fn conservative_a_f_of_field(
    field: &RadialField,
    n: u32,
    fconfig: &FunctionalConfig,
    eps: f64,
) -> Result<f64> {
    let panels = ((fconfig.r_support - fconfig.r0) / (4.0 * field.dr))
        .ceil()
        .max(2.0) as usize;
    let mut err = None;
    let integral = gauss_composite(
        |r| {
            star_value(field, n, r, QuadOptions::default()).unwrap_or_else(|e| {
                err.get_or_insert(e);
                0.0
            })
        },
        fconfig.r0,
        fconfig.r_support,
        panels,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(0.5 * integral / eps),
    }
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    config: &'a Command,
    snapshots: usize,
    a_f_conservative: f64,
    passed: bool,
    residuals: &'a ResidualReport,
    error_quadrature: functional::ResidualErrors,
    error_time: functional::ResidualErrors,
    error_grid: Option<functional::ResidualErrors>,
}

fn cmd_verify(a: &VerifyArgs, cfg: &Command, out: &Path) -> Result<i32> {
    let (snaps, meta) = load_snapshots(&a.snapshots)?;
    let companion = match &a.companion {
        Some(dir) => Some(load_snapshots(dir)?.0),
        None => None,
    };
    let first = &snaps[0];
    let r_support = a.r.unwrap_or(first.support_radius);
    let fconfig = FunctionalConfig::new(a.beta, a.r0.unwrap_or(0.75 * r_support), r_support)?;
    if !(meta.epsilon > 0.0) {
        return Err(LabError::Data(
            "snapshot header lacks a positive epsilon".into(),
        ));
    }
    let a_f_conservative = conservative_a_f_of_field(first, meta.n, &fconfig, meta.epsilon)?;
    let inputs = CheckInputs {
        n: meta.n,
        p: meta.p,
        epsilon: meta.epsilon,
        a_f_conservative,
        t_max: a.t_max.unwrap_or(snaps.last().map_or(0.0, |s| s.t)),
    };
    let check = verify_snapshots(&snaps, &inputs, &fconfig, companion.as_deref())?;
    write_csv(
        &out.join("functional_residuals.csv"),
        cfg,
        &RESIDUAL_HEADER,
        &residual_rows(&check.residuals, &check.trace),
    )?;
    let report = VerifyReport {
        config: cfg,
        snapshots: snaps.len(),
        a_f_conservative,
        passed: check.residuals.passed(),
        residuals: &check.residuals,
        error_quadrature: check.error_quadrature,
        error_time: check.error_time,
        error_grid: check.error_grid,
    };
    write_json(&out.join("functional_report.json"), &report)?;
    println!(
        "{} snapshots, conservative A_f = {a_f_conservative:.6e}",
        snaps.len()
    );
    print_residuals(&check.residuals);
    Ok(0)
}

#[derive(Serialize)]
struct FitReport<'a> {
    config: &'a Command,
    x: String,
    y: String,
    fit: FitResult,
}

/// Points kept for the fit and the rows left out.
pub type FitPoints = (Vec<(f64, f64)>, Vec<ExcludedRow>);

/// Collects fit points from CSV `text` (lines starting with `#` are skipped).
pub fn fit_points(text: &str, a: &FitArgs) -> Result<FitPoints> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| LabError::Data(format!("CSV header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LabError::Data(format!("column {name:?} not found")))
    };
    let (ix, iy) = (col(&a.x)?, col(&a.y)?);
    let status = headers.iter().position(|h| h == "status");
    let mut points = Vec::new();
    let mut excluded = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| LabError::Data(format!("CSV row {i}: {e}")))?;
        if let (Some(s), false) = (status, a.keep_all) {
            if rec.get(s) != Some("blew_up") {
                excluded.push(ExcludedRow {
                    index: i,
                    reason: format!("status {}", rec.get(s).unwrap_or("")),
                });
                continue;
            }
        }
        let num = |j: usize| rec.get(j).and_then(|s| s.parse::<f64>().ok());
        let (Some(mut x), Some(mut y)) = (num(ix), num(iy)) else {
            excluded.push(ExcludedRow {
                index: i,
                reason: "unparsable value".into(),
            });
            continue;
        };
        if (a.log_x && !(x > 0.0)) || (a.log_y && !(y > 0.0)) {
            excluded.push(ExcludedRow {
                index: i,
                reason: "nonpositive value under log".into(),
            });
            continue;
        }
        if a.log_x {
            x = x.ln();
        }
        if a.log_y {
            y = y.ln();
        }
        if !x.is_finite() || !y.is_finite() {
            excluded.push(ExcludedRow {
                index: i,
                reason: "non-finite value".into(),
            });
            continue;
        }
        points.push((x, y));
    }
    Ok((points, excluded))
}

fn cmd_fit(a: &FitArgs, cfg: &Command, out: &Path) -> Result<i32> {
    let text = fs::read_to_string(&a.input)?;
    let (points, excluded) = fit_points(&text, a)?;
    let mut fit = fit_line(&points)?;
    fit.excluded = excluded;
    let wrap = |log: bool, c: &str| {
        if log {
            format!("ln {c}")
        } else {
            c.to_string()
        }
    };
    let report = FitReport {
        config: cfg,
        x: wrap(a.log_x, &a.x),
        y: wrap(a.log_y, &a.y),
        fit,
    };
    write_json(&out.join("fit.json"), &report)?;
    println!(
        "{} vs {}: slope {:.6}, intercept {:.6}, r^2 = {:.6} ({} points, {} excluded)",
        report.y,
        report.x,
        report.fit.slope,
        report.fit.intercept,
        report.fit.r_squared,
        report.fit.n_points,
        report.fit.excluded.len()
    );
    Ok(0)
}
