//! Command-line front end. Exit codes: 0 ok, 1 verification failure,
//! 2 configuration or input error, 3 numerical failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::empirical::SampleSet;
use crate::error::Error;
use crate::functional::{choquet_order_stat, choquet_plugin, ChoquetEstimate};
use crate::pipeline::{run_scenario, run_suite, AdjointChoice, Direction, Outcome, ScenarioReport, Suite, SuiteRow, Tolerances};
use crate::preference::{DistortionFn, UtilityFn};
use crate::scenarios::{build_scenario, ScenarioConfig, ScenarioId};
use crate::sde::{simulate_variational, write_paths_csv};

pub const OUT_DIR_ENV: &str = "CPT_SMP_OUT";
pub const SCHEMA: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("config file: {0}")]
    Toml(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Lib(Error::Numerical(_)) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cpt-smp", version, about = "Maximum-principle checks for CPT portfolio problems")]
pub struct Cli {
    /// worker threads (results do not depend on it)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario through simulate → adjoint → residual → Gateaux → duality.
    Run(RunArgs),
    /// Both Choquet estimators of a sample file.
    Choquet(ChoquetArgs),
    /// Invariant suites over the preset scenarios.
    Verify(VerifyArgs),
    /// Write a scenario's simulated paths as CSV.
    DumpPaths(DumpArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// TOML config; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    pub control: Option<f64>,
    #[arg(long)]
    pub control_scale: Option<f64>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub adjoint: Option<String>,
    /// also write paths.csv
    #[arg(long)]
    pub emit_paths: bool,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub mp_min: Option<f64>,
    #[arg(long)]
    pub mp_se: Option<f64>,
    #[arg(long)]
    pub duality_se: Option<f64>,
    #[arg(long)]
    pub gateaux_rel: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ChoquetArgs {
    /// CSV of nonnegative samples
    pub samples: PathBuf,
    /// power:γ (x^γ), crra:γ (x^γ/γ)
    #[arg(long, default_value = "power:1")]
    pub util: String,
    /// identity, pow:k (p^k), lopes:ν,a,b
    #[arg(long, default_value = "identity")]
    pub dist: String,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// path count for every scenario (default: the presets)
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// also write the variational state for this direction (e.g. 0.1 or 0.5*u)
    #[arg(long)]
    pub direction: Option<String>,
}

/// Contents of a config file; every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: Option<String>,
    pub adjoint: Option<AdjointChoice>,
    pub output_dir: Option<PathBuf>,
    pub emit_paths: Option<bool>,
    pub format: Option<Format>,
    /// overrides of the scenario preset
    pub params: Option<toml::Table>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| CliError::Toml(e.to_string()))
    }
}

/// Fully resolved settings of a `run`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub adjoint: AdjointChoice,
    pub tolerances: Tolerances,
    pub output_dir: PathBuf,
    pub emit_paths: bool,
    pub format: Format,
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.scenario.validate()?;
        self.tolerances.validate()?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) -> CliResult<()> {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o)?,
            (Some(slot), _) => *slot = v.clone(),
            (None, _) => return Err(CliError::Toml(format!("unknown scenario parameter '{k}'"))),
        }
    }
    Ok(())
}

fn apply_params(cfg: ScenarioConfig, params: Option<&toml::Table>) -> CliResult<ScenarioConfig> {
    let Some(params) = params else { return Ok(cfg) };
    if params.contains_key("id") {
        return Err(CliError::Toml("set the scenario with `scenario`, not params.id".into()));
    }
    let mut table = toml::Table::try_from(&cfg).map_err(|e| CliError::Toml(e.to_string()))?;
    merge(&mut table, params)?;
    table.try_into().map_err(|e: toml::de::Error| CliError::Toml(e.to_string()))
}

fn default_out() -> PathBuf {
    PathBuf::from("cpt-smp-out")
}

fn resolve_scenario(args: &ScenarioArgs, file: &FileConfig) -> CliResult<ScenarioConfig> {
    let name = args
        .scenario
        .as_deref()
        .or(file.scenario.as_deref())
        .ok_or_else(|| Error::config("no scenario given (--scenario or `scenario` in the config)"))?;
    let id: ScenarioId = name.parse()?;
    let mut cfg = apply_params(ScenarioConfig::preset(id), file.params.as_ref())?;
    if let Some(n) = args.paths {
        cfg.n_paths = n;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(c) = args.control {
        cfg.control = c;
    }
    if let Some(c) = args.control_scale {
        cfg.control_scale = c;
    }
    if let Some(r) = args.rate {
        cfg.rate = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_file(path: Option<&Path>) -> CliResult<FileConfig> {
    path.map(FileConfig::load).transpose().map(Option::unwrap_or_default)
}

pub fn resolve_run(args: &RunArgs) -> CliResult<RunConfig> {
    let file = load_file(args.scenario.config.as_deref())?;
    let scenario = resolve_scenario(&args.scenario, &file)?;
    let mut tolerances = file.tolerances;
    if let Some(v) = args.mp_min {
        tolerances.mp_min = v;
    }
    if let Some(v) = args.mp_se {
        tolerances.mp_se_multiple = v;
    }
    if let Some(v) = args.duality_se {
        tolerances.duality_se_multiple = v;
    }
    if let Some(v) = args.gateaux_rel {
        tolerances.gateaux_rel = v;
    }
    let adjoint = match &args.adjoint {
        Some(a) => a.parse()?,
        None => file.adjoint.unwrap_or_default(),
    };
    let cfg = RunConfig {
        scenario,
        adjoint,
        tolerances,
        output_dir: args.scenario.out.clone().or(file.output_dir).unwrap_or_else(default_out),
        emit_paths: args.emit_paths || file.emit_paths.unwrap_or(false),
        format: args.format.or(file.format).unwrap_or_default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `bytes` to `dir/name` through a temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    let target = dir.join(name);
    tmp.persist(&target).map_err(|e| e.error)?;
    Ok(target)
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "scenario", "n_paths", "steps", "seed", "J_total", "mp_rms", "gateaux_gap", "duality_gap", "verdict",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary_csv(reports: &[&ScenarioReport]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER).map_err(io::Error::from)?;
    for r in reports {
        w.write_record([
            r.scenario.name().to_string(),
            r.n_paths.to_string(),
            r.steps.to_string(),
            r.seed.to_string(),
            r.objective.total.to_string(),
            opt(r.residual.as_ref().map(|m| m.rms)),
            opt(r.gateaux.as_ref().map(|g| g.report.abs_gap)),
            opt(r.max_duality_gap()),
            r.verdict.to_string(),
        ])
        .map_err(io::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct RunDocument<'a> {
    schema: u32,
    command: &'static str,
    adjoint: AdjointChoice,
    tolerances: &'a Tolerances,
    report: &'a ScenarioReport,
}

pub fn cmd_run(args: &RunArgs) -> CliResult<i32> {
    let cfg = resolve_run(args)?;
    let report = run_scenario(&cfg.scenario, cfg.adjoint, &cfg.tolerances)?;
    let json = to_json(&RunDocument {
        schema: SCHEMA,
        command: "run",
        adjoint: cfg.adjoint,
        tolerances: &cfg.tolerances,
        report: &report,
    })?;
    let csv = summary_csv(&[&report])?;
    if cfg.emit_paths && cfg.scenario.id.is_checked() {
        let sc = build_scenario(&cfg.scenario)?;
        let mut buf = Vec::new();
        write_paths_csv(&sc.ensemble, &mut buf)?;
        write_atomic(&cfg.output_dir, "paths.csv", &buf)?;
    }
    write_atomic(&cfg.output_dir, "report.json", json.as_bytes())?;
    write_atomic(&cfg.output_dir, "summary.csv", csv.as_bytes())?;
    match cfg.format {
        Format::Json => print!("{json}"),
        Format::Csv => print!("{csv}"),
    }
    Ok(match report.verdict {
        Outcome::Violated => EXIT_VERIFY,
        _ => EXIT_OK,
    })
}

/// `power:γ` is x^γ, `crra:γ` is x^γ/γ.
pub fn parse_utility(s: &str) -> CliResult<UtilityFn> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let gamma = || -> CliResult<f64> {
        arg.trim()
            .parse()
            .map_err(|_| CliError::Lib(Error::config(format!("bad utility exponent in '{s}'"))))
    };
    Ok(match kind {
        "power" => UtilityFn::monomial(gamma()?)?,
        "crra" => UtilityFn::power(gamma()?)?,
        _ => return Err(Error::config(format!("unknown utility '{s}'")).into()),
    })
}

/// `identity`, `pow:k` (p^k, k ≥ 1) or `lopes:ν,a,b`.
pub fn parse_distortion(s: &str) -> CliResult<DistortionFn> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let nums = || -> CliResult<Vec<f64>> {
        arg.split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CliError::Lib(Error::config(format!("bad distortion parameters in '{s}'"))))
    };
    Ok(match (kind, arg.is_empty()) {
        ("identity", true) => DistortionFn::Identity,
        ("pow", false) => match nums()?.as_slice() {
            // ν = 1 Lopes is p^(a+1)
            [k] if *k >= 1.0 => DistortionFn::lopes(1.0, k - 1.0, 0.0)?,
            _ => return Err(Error::config(format!("pow distortion needs one exponent ≥ 1, got '{s}'")).into()),
        },
        ("lopes", false) => match nums()?.as_slice() {
            [nu, a, b] => DistortionFn::lopes(*nu, *a, *b)?,
            _ => return Err(Error::config(format!("lopes needs ν,a,b, got '{s}'")).into()),
        },
        _ => return Err(Error::config(format!("unknown distortion '{s}'")).into()),
    })
}

/// Every numeric field of a headerless or single-header CSV.
pub fn read_samples(path: &Path) -> CliResult<SampleSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io::Error::other(e.to_string()))?;
    let mut values = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| io::Error::other(e.to_string()))?;
        for field in rec.iter().filter(|f| !f.is_empty()) {
            match field.parse::<f64>() {
                Ok(v) => values.push(v),
                Err(_) if line == 0 => break,
                Err(_) => return Err(Error::data(format!("line {}: '{field}' is not a number", line + 1)).into()),
            }
        }
    }
    if values.is_empty() {
        return Err(Error::data(format!("{} holds no samples", path.display())).into());
    }
    Ok(SampleSet::new(values)?)
}

#[derive(Serialize)]
struct ChoquetDocument {
    schema: u32,
    n: usize,
    order_stat: ChoquetEstimate,
    plugin: ChoquetEstimate,
}

pub fn cmd_choquet(args: &ChoquetArgs) -> CliResult<i32> {
    let util = parse_utility(&args.util)?;
    let dist = parse_distortion(&args.dist)?;
    let samples = read_samples(&args.samples)?;
    let doc = ChoquetDocument {
        schema: SCHEMA,
        n: samples.len(),
        order_stat: choquet_order_stat(&samples, &util, &dist)?,
        plugin: choquet_plugin(&samples, &util, &dist)?,
    };
    print!("{}", to_json(&doc)?);
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct VerifyDocument<'a> {
    schema: u32,
    command: &'static str,
    suite: &'static str,
    seed: u64,
    n_paths: Option<usize>,
    pass: bool,
    rows: &'a [SuiteRow],
}

pub fn suite_csv(rows: &[SuiteRow]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(io::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<i32> {
    let suite: Suite = args.suite.parse()?;
    if let Some(n) = args.paths {
        if n < 100 {
            return Err(Error::config(format!("n_paths must be at least 100, got {n}")).into());
        }
    }
    let rows = run_suite(suite, args.seed, args.paths, &Tolerances::default())?;
    let pass = rows.iter().all(|r| r.pass);
    let json = to_json(&VerifyDocument {
        schema: SCHEMA,
        command: "verify",
        suite: suite.name(),
        seed: args.seed,
        n_paths: args.paths,
        pass,
        rows: &rows,
    })?;
    let out = args.out.clone().unwrap_or_else(default_out);
    write_atomic(&out, "report.json", json.as_bytes())?;
    match args.format {
        Format::Json => print!("{json}"),
        Format::Csv => print!("{}", suite_csv(&rows)?),
    }
    Ok(if pass { EXIT_OK } else { EXIT_VERIFY })
}

pub fn parse_direction(s: &str) -> CliResult<Direction> {
    let bad = || CliError::Lib(Error::config(format!("bad direction '{s}' (expected c or c*u)")));
    match s.strip_suffix("*u") {
        Some(c) => Ok(Direction::Scaled(c.trim().parse().map_err(|_| bad())?)),
        None => Ok(Direction::Constant(s.trim().parse().map_err(|_| bad())?)),
    }
}

pub fn cmd_dump_paths(args: &DumpArgs) -> CliResult<i32> {
    let file = load_file(args.scenario.config.as_deref())?;
    let cfg = resolve_scenario(&args.scenario, &file)?;
    if !cfg.id.is_checked() {
        return Err(Error::config(format!("{} has no simulated ensemble to dump", cfg.id)).into());
    }
    let sc = build_scenario(&cfg)?;
    let ens = match &args.direction {
        Some(d) => simulate_variational(&sc.ensemble, &sc.model, &parse_direction(d)?.control(&sc.ensemble))?,
        None => sc.ensemble,
    };
    let mut buf = Vec::new();
    write_paths_csv(&ens, &mut buf)?;
    let out = args.scenario.out.clone().or(file.output_dir).unwrap_or_else(default_out);
    let path = write_atomic(&out, "paths.csv", &buf)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

pub fn execute(cli: &Cli) -> CliResult<i32> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(e.to_string()))?;
    }
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Choquet(a) => cmd_choquet(a),
        Command::Verify(a) => cmd_verify(a),
        Command::DumpPaths(a) => cmd_dump_paths(a),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
