//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::configurator::Techniques;
use crate::manager::{read_trace, run_pipeline, write_trace, RunConfig, RunError, RunReport, TraceRecord, CSV_HEADER};
use crate::pipeline::{OperationSpec, PipelineDag};
use crate::profiler::{CacheStatus, MetadataStore};
use crate::scenario::{bundled, bundled_files, read_json, Bundle, Prepared, Scenario, ScenarioError, BUNDLED};

pub const METADATA_ENV: &str = "SLACKPIPE_METADATA_DIR";

pub const EXIT_MET: i32 = 0;
pub const EXIT_MISSED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "slackpipe", version, about = "Latency-target-driven configuration of DAG pipelines on simulated backends")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Profile operations into the metadata store.
    Profile(ProfileArgs),
    /// Run a pipeline once against a latency target.
    Run(RunArgs),
    /// Run fast and cheap modes, then the derived 25/50/75% targets.
    Sweep(SweepArgs),
    /// Write a synthetic workload trace from a scenario's workload section.
    GenTrace(GenTraceArgs),
    /// List the bundled scenarios or export one to a directory.
    Bundled {
        /// Scenario to export; lists all when omitted.
        name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// JSON array of operation specs.
    #[arg(long)]
    pub operations: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    /// Metadata directory (defaults to $SLACKPIPE_METADATA_DIR or ./metadata).
    #[arg(long)]
    pub metadata_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct InputArgs {
    /// Use a bundled scenario instead of the pipeline/operations/scenario files.
    #[arg(long, conflicts_with_all = ["pipeline", "scenario"])]
    pub bundled: Option<String>,
    #[arg(long, required_unless_present = "bundled")]
    pub pipeline: Option<PathBuf>,
    #[arg(long, required_unless_present = "bundled")]
    pub scenario: Option<PathBuf>,
    /// Operation specs to profile; without it, profiles are read from the
    /// metadata store.
    #[arg(long)]
    pub operations: Option<PathBuf>,
    /// JSON-lines trace; defaults to the scenario's generated workload.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub metadata_dir: Option<PathBuf>,
    /// Keep profiles in memory instead of the metadata store.
    #[arg(long)]
    pub no_store: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TuneArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Feedback smoothing weight in (0, 1].
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated techniques to disable: fb, dfp, sdb, eslc, pbc.
    #[arg(long, default_value = "")]
    pub ablate: String,
    /// Scale every profiled latency by this factor before running.
    #[arg(long)]
    pub misprofile: Option<f64>,
    /// Multiply every true latency by this factor.
    #[arg(long)]
    pub latency_bias: Option<f64>,
    /// Log-normal sigma of execution noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub failure_rate: Option<f64>,
    #[arg(long)]
    pub straggle_rate: Option<f64>,
    #[arg(long)]
    pub straggle_factor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub tune: TuneArgs,
    /// Seconds, or `fast` / `cheap`.
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Write the report CSV here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the full report as JSON here.
    #[arg(long)]
    pub report_json: Option<PathBuf>,
    #[arg(long)]
    pub decision_log: Option<PathBuf>,
    #[arg(long)]
    pub event_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub tune: TuneArgs,
    #[arg(long, default_value = "fast,cheap,25,50,75")]
    pub targets: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long, conflicts_with = "scenario")]
    pub bundled: Option<String>,
    #[arg(long, required_unless_present = "bundled")]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Trace(#[from] crate::manager::TraceError),
    #[error("degenerate scenario: fast mode took {fast:.3} s, cheap mode {cheap:.3} s")]
    Degenerate { fast: f64, cheap: f64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn parse_target(s: &str) -> Result<f64, CliError> {
    match s {
        "fast" => Ok(0.0),
        "cheap" => Ok(f64::INFINITY),
        _ => match s.parse::<f64>() {
            Ok(v) if v >= 0.0 => Ok(v),
            _ => Err(CliError::Usage(format!("invalid target {s:?}"))),
        },
    }
}

/// 25, 50 and 75% targets between the fast and cheap latencies.
pub fn derive_targets(fast: f64, cheap: f64) -> [f64; 3] {
    let mid = (fast + cheap) / 2.0;
    [(fast + mid) / 2.0, mid, (cheap + mid) / 2.0]
}

fn metadata_dir(explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .or_else(|| std::env::var_os(METADATA_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("metadata"))
}

/// Everything needed for a run after inputs are resolved.
pub struct Loaded {
    pub bundle: Bundle,
    pub prepared: Prepared,
    pub trace: Vec<TraceRecord>,
    pub source: String,
}

/// Resolves inputs, applies tuning overrides and profiles what is missing.
pub fn load_inputs(input: &InputArgs, tune: &TuneArgs) -> Result<Loaded, CliError> {
    let (mut bundle, source) = match &input.bundled {
        Some(name) => (bundled(name)?, format!("bundled:{name}")),
        None => {
            let pipeline = input.pipeline.as_ref().expect("clap requires it");
            let scenario_path = input.scenario.as_ref().expect("clap requires it");
            let dag: PipelineDag = read_json(pipeline)?;
            let scenario: Scenario = read_json(scenario_path)?;
            let operations: Vec<OperationSpec> = match &input.operations {
                Some(p) => read_json(p)?,
                None => Vec::new(),
            };
            (
                Bundle {
                    dag,
                    operations,
                    scenario,
                },
                pipeline.display().to_string(),
            )
        }
    };
    if let Some(p) = &input.operations {
        if input.bundled.is_some() {
            bundle.operations = read_json(p)?;
        }
    }
    let policy = &mut bundle.scenario.model.policy;
    if let Some(v) = tune.noise {
        policy.noise_sigma = v;
    }
    if let Some(v) = tune.failure_rate {
        policy.failure_rate = v;
    }
    if let Some(v) = tune.straggle_rate {
        policy.straggle_rate = v;
    }
    if let Some(v) = tune.straggle_factor {
        policy.straggle_factor = v;
    }
    if let Some(v) = tune.latency_bias {
        policy.latency_bias = v;
    }
    if let Some(s) = tune.seed {
        bundle.scenario.seed = s;
    }
    bundle.scenario.validate()?;

    let store = if input.no_store {
        None
    } else {
        let dir = metadata_dir(&input.metadata_dir);
        Some(MetadataStore::open(&dir).map_err(ScenarioError::from)?)
    };
    let mut prepared = if bundle.operations.is_empty() {
        // profiles must already be in the store
        let store = store
            .as_ref()
            .ok_or_else(|| CliError::Usage("--no-store needs --operations".into()))?;
        let paths = store.paths(&bundle.dag).map_err(ScenarioError::from)?.0;
        let mut profiles = BTreeMap::new();
        for op in &bundle.dag.operations {
            let spec = store
                .load_spec(op)
                .map_err(ScenarioError::from)?
                .ok_or_else(|| RunError::MissingProfile(op.clone()))?;
            profiles.insert(op.clone(), spec);
        }
        Prepared { paths, profiles }
    } else {
        bundle.prepare(store.as_ref())?
    };
    if let Some(f) = tune.misprofile {
        if !(f > 0.0 && f.is_finite()) {
            return Err(CliError::Usage(format!("invalid misprofile factor {f}")));
        }
        for spec in prepared.profiles.values_mut() {
            spec.scale_latencies(f);
        }
    }
    let trace = match &input.trace {
        Some(p) => {
            let f = fs::File::open(p).map_err(io_err(p))?;
            read_trace(BufReader::new(f))?
        }
        None => bundle.trace()?,
    };
    Ok(Loaded {
        bundle,
        prepared,
        trace,
        source,
    })
}

/// Run settings from the scenario defaults and command-line overrides.
pub fn run_config(loaded: &Loaded, tune: &TuneArgs, run_id: String, target: f64) -> Result<RunConfig, CliError> {
    let s = &loaded.bundle.scenario;
    let mut params = s.params.clone();
    if let Some(a) = tune.alpha {
        params.alpha = a;
    }
    if let Some(b) = tune.beta {
        params.smoothing_beta = b;
    }
    params
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let techniques = Techniques::default()
        .ablate(&tune.ablate)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(RunConfig {
        run_id,
        target,
        params,
        techniques,
        seed: s.seed,
        dispatch_overhead: s.dispatch_overhead_s,
        ..RunConfig::default()
    })
}

fn annotate(report: &mut RunReport, loaded: &Loaded, tune: &TuneArgs) {
    let m = &mut report.metadata;
    let p = &loaded.bundle.scenario.model.policy;
    m.insert("scenario".into(), loaded.bundle.scenario.name.clone());
    m.insert("source".into(), loaded.source.clone());
    m.insert("frames".into(), loaded.trace.len().to_string());
    m.insert("noise".into(), p.noise_sigma.to_string());
    m.insert("failure_rate".into(), p.failure_rate.to_string());
    m.insert("latency_bias".into(), p.latency_bias.to_string());
    m.insert(
        "misprofile".into(),
        tune.misprofile.map_or("1".into(), |f| f.to_string()),
    );
}

/// Runs once with the loaded inputs.
pub fn execute(
    loaded: &Loaded,
    cfg: RunConfig,
    tune: &TuneArgs,
) -> Result<crate::manager::RunOutput, CliError> {
    let b = &loaded.bundle;
    let mut out = run_pipeline(
        &b.dag,
        &loaded.prepared.paths,
        &loaded.prepared.profiles,
        &b.scenario.backends,
        b.scenario.model.clone(),
        &loaded.trace,
        cfg,
    )?;
    annotate(&mut out.report, loaded, tune);
    Ok(out)
}

fn cmd_profile(args: &ProfileArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let ops: Vec<OperationSpec> = read_json(&args.operations)?;
    let scenario: Scenario = read_json(&args.scenario)?;
    scenario.validate()?;
    let dir = metadata_dir(&args.metadata_dir);
    let store = MetadataStore::open(&dir).map_err(ScenarioError::from)?;
    for op in &ops {
        let model = scenario.model.op(&op.name).map_err(ScenarioError::from)?;
        let (spec, status) = store
            .profile_cached(op, model, &scenario.backends, scenario.profile_samples)
            .map_err(ScenarioError::from)?;
        let status = match status {
            CacheStatus::Hit => "cached",
            CacheStatus::Miss => "profiled",
        };
        let _ = writeln!(out, "{}\t{}\t{} configs", op.name, status, spec.entries.len());
    }
    Ok(EXIT_MET)
}

fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let target = parse_target(&args.target)?;
    let loaded = load_inputs(&args.input, &args.tune)?;
    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{}-{}", loaded.bundle.scenario.name, args.target));
    let mut cfg = run_config(&loaded, &args.tune, run_id, target)?;
    cfg.decision_log = args.decision_log.is_some();
    cfg.event_trace = args.event_trace.is_some();
    let output = execute(&loaded, cfg, &args.tune)?;
    let report = &output.report;
    let _ = write!(out, "{}", report.summary());
    if let Some(p) = &args.report {
        write_file(p, &report.csv())?;
    }
    if let Some(p) = &args.report_json {
        let json = serde_json::to_string_pretty(report).expect("report serializes");
        write_file(p, &json)?;
    }
    if let (Some(p), Some(log)) = (&args.decision_log, &output.decision_log) {
        write_file(p, log)?;
    }
    if let (Some(p), Some(trace)) = (&args.event_trace, &output.event_trace) {
        write_file(p, trace)?;
    }
    Ok(if report.met_target() { EXIT_MET } else { EXIT_MISSED })
}

/// Runs every requested target in order; percentage targets need fast and
/// cheap results, which are run first if not listed.
pub fn sweep(loaded: &Loaded, tune: &TuneArgs, labels: &[String]) -> Result<Vec<(String, RunReport)>, CliError> {
    for l in labels {
        if !matches!(l.as_str(), "fast" | "cheap" | "25" | "50" | "75") {
            return Err(CliError::Usage(format!("unknown sweep target {l:?}")));
        }
    }
    let name = &loaded.bundle.scenario.name;
    let run = |label: &str, target: f64| -> Result<RunReport, CliError> {
        let cfg = run_config(loaded, tune, format!("{name}-{label}"), target)?;
        let mut r = execute(loaded, cfg, tune)?.report;
        r.metadata.insert("sweep_label".into(), label.to_string());
        Ok(r)
    };
    let mut done: BTreeMap<String, RunReport> = BTreeMap::new();
    let needs_ends = labels.iter().any(|l| matches!(l.as_str(), "25" | "50" | "75"));
    let mut order: Vec<String> = Vec::new();
    for l in ["fast", "cheap"] {
        if needs_ends || labels.iter().any(|x| x == l) {
            order.push(l.to_string());
        }
    }
    for l in labels {
        if !order.contains(l) {
            order.push(l.clone());
        }
    }
    for label in &order {
        let target = match label.as_str() {
            "fast" => 0.0,
            "cheap" => f64::INFINITY,
            pct => {
                let (fast, cheap) = (done["fast"].latency_s, done["cheap"].latency_s);
                if fast >= cheap {
                    return Err(CliError::Degenerate { fast, cheap });
                }
                let t = derive_targets(fast, cheap);
                match pct {
                    "25" => t[0],
                    "50" => t[1],
                    _ => t[2],
                }
            }
        };
        let r = run(label, target)?;
        done.insert(label.clone(), r);
    }
    Ok(labels
        .iter()
        .map(|l| (l.clone(), done[l].clone()))
        .collect())
}

fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let labels: Vec<String> = args
        .targets
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let loaded = load_inputs(&args.input, &args.tune)?;
    let results = sweep(&loaded, &args.tune, &labels)?;
    let mut csv = format!("{CSV_HEADER}\n");
    let mut code = EXIT_MET;
    for (label, r) in &results {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        if matches!(label.as_str(), "25" | "50" | "75") && !r.met_target() {
            code = EXIT_MISSED;
        }
    }
    let _ = write!(out, "{csv}");
    if let Some(p) = &args.report {
        write_file(p, &csv)?;
    }
    Ok(code)
}

fn cmd_gen_trace(args: &GenTraceArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let scenario = match (&args.bundled, &args.scenario) {
        (Some(name), _) => bundled(name)?.scenario,
        (None, Some(p)) => read_json(p)?,
        (None, None) => unreachable!("clap requires one"),
    };
    let mut workload = scenario
        .workload
        .clone()
        .ok_or_else(|| CliError::Usage(format!("scenario {} has no workload section", scenario.name)))?;
    if let Some(n) = args.frames {
        workload.frames = n;
    }
    let trace = workload.generate(args.seed.unwrap_or(scenario.seed))?;
    let mut buf = Vec::new();
    write_trace(&mut buf, &trace).map_err(io_err(&args.out))?;
    fs::write(&args.out, buf).map_err(io_err(&args.out))?;
    let _ = writeln!(out, "wrote {} frames to {}", trace.len(), args.out.display());
    Ok(EXIT_MET)
}

fn cmd_bundled(name: &Option<String>, dir: &Option<PathBuf>, out: &mut dyn Write) -> Result<i32, CliError> {
    let Some(name) = name else {
        for n in BUNDLED {
            let b = bundled(n)?;
            let _ = writeln!(out, "{n}\t{} operations", b.dag.operations.len());
        }
        return Ok(EXIT_MET);
    };
    let (p, o, s) = bundled_files(name).ok_or_else(|| ScenarioError::UnknownBundle(name.clone()))?;
    let dir = dir.clone().unwrap_or_else(|| PathBuf::from(name));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (file, text) in [("pipeline.json", p), ("operations.json", o), ("scenario.json", s)] {
        write_file(&dir.join(file), text)?;
    }
    let _ = writeln!(out, "exported {name} to {}", dir.display());
    Ok(EXIT_MET)
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_MET };
        }
    };
    let result = match &cli.command {
        Command::Profile(a) => cmd_profile(a, out),
        Command::Run(a) => cmd_run(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::GenTrace(a) => cmd_gen_trace(a, out),
        Command::Bundled { name, out: dir } => cmd_bundled(name, dir, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets() {
        assert_eq!(parse_target("fast").unwrap(), 0.0);
        assert_eq!(parse_target("cheap").unwrap(), f64::INFINITY);
        assert_eq!(parse_target("12.5").unwrap(), 12.5);
        assert!(parse_target("-1").is_err());
        assert!(parse_target("soon").is_err());
    }

    #[test]
    fn derived_targets_are_nested_means() {
        // fast 155 s, cheap 423 s
        assert_eq!(derive_targets(155.0, 423.0), [222.0, 289.0, 356.0]);
        assert_eq!(derive_targets(10.0, 10.0), [10.0, 10.0, 10.0]);
    }

    #[test]
    fn usage_errors_exit_two() {
        let mut o = Vec::new();
        let mut e = Vec::new();
        assert_eq!(main_with(["slackpipe", "bogus"], &mut o, &mut e), EXIT_USAGE);
        let code = main_with(
            ["slackpipe", "run", "--bundled", "amber", "--target", "5", "--ablate", "xyz", "--no-store"],
            &mut o,
            &mut e,
        );
        assert_eq!(code, EXIT_USAGE);
        assert!(String::from_utf8_lossy(&e).contains("xyz"));
    }

    #[test]
    fn missing_scenario_file_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let ops = dir.path().join("ops.json");
        fs::write(&ops, "[]").unwrap();
        let mut o = Vec::new();
        let mut e = Vec::new();
        let code = main_with(
            [
                "slackpipe".into(),
                "profile".into(),
                "--operations".into(),
                ops.into_os_string(),
                "--scenario".into(),
                dir.path().join("missing.json").into_os_string(),
                "--metadata-dir".into(),
                dir.path().join("meta").into_os_string(),
            ],
            &mut o,
            &mut e,
        );
        assert_eq!(code, EXIT_USAGE);
    }
}
