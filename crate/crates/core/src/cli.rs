//! Command-line front end: `run`, `bound` and `sweep`.
//!
//! Flags are parsed with clap and then validated by hand so that every
//! usage error names the offending flag. A `--config` file holds
//! `key=value` lines named after the long flags (`#` starts a comment);
//! its entries override flags given on the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use crate::agents::AgentKind;
use crate::bounds::bound_for_spec;
use crate::gauss_core::PsdMatrix;
use crate::harness::{
    aggregate, final_regret, final_stderr, realized_spec, run_experiment, AggregateCurve, ExperimentConfig, RunTrace,
};
use crate::hierarchy::{ActionSet, BetaParams, EnvironmentSpec, GaussianHierarchy, Prior};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Half-width of the cube random linear actions are drawn from.
pub const LINEAR_HALF_WIDTH: f64 = 0.5;

/// Linear environments default to this many actions per dimension.
pub const ACTIONS_PER_DIM: usize = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn usage<T>(flag: &str, msg: impl std::fmt::Display) -> Result<T, CliError> {
    Err(CliError::Usage(format!("--{flag}: {msg}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnvKind {
    Gaussian,
    Linear,
    Semibandit,
    BernoulliMixture,
}

impl EnvKind {
    fn name(self) -> &'static str {
        match self {
            EnvKind::Gaussian => "gaussian",
            EnvKind::Linear => "linear",
            EnvKind::Semibandit => "semibandit",
            EnvKind::BernoulliMixture => "bernoulli-mixture",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(name = "adats", version, about = "Meta-learning Thompson sampling experiments")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Command {
    /// Run agents and write the aggregated regret curve as CSV.
    Run(RunArgs),
    /// Print the regret upper bound as `name=value` lines.
    Bound(BoundArgs),
    /// Run a grid over prior widths and sizes, one CSV per cell.
    Sweep(SweepArgs),
}

/// Environment and horizon flags shared by all subcommands.
#[derive(Debug, Clone, PartialEq, Default, Args)]
pub struct EnvArgs {
    #[arg(long, value_enum)]
    pub env: Option<EnvKind>,
    /// Number of arms (linear: number of actions, default 5 x dim).
    #[arg(long)]
    pub arms: Option<String>,
    #[arg(long)]
    pub dim: Option<String>,
    /// Subset size for semi-bandits.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Meta-prior width: a scalar or a per-coordinate comma list.
    #[arg(long = "sigma-q", allow_hyphen_values = true)]
    pub sigma_q: Option<String>,
    /// Task-prior width: a scalar or a per-coordinate comma list.
    #[arg(long = "sigma-0", allow_hyphen_values = true)]
    pub sigma_0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Beta-mixture components: `a:b/a:b;a:b/a:b` (components split by `;`,
    /// arms by `/`).
    #[arg(long)]
    pub components: Option<String>,
    /// Mixture weights, comma list (normalized; default uniform).
    #[arg(long)]
    pub weights: Option<String>,
    /// `key=value` file overriding command-line flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Flags shared by `run` and `sweep`.
#[derive(Debug, Clone, PartialEq, Default, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma list, e.g. `ts,oracle-ts,meta-ts,ada-ts,ada-ts+,ada-ts-`.
    #[arg(long)]
    pub agents: Option<String>,
    #[arg(long = "common-tasks")]
    pub common_tasks: Option<bool>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Aggregated curve CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional per-run trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct BoundArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Failure probability; defaults to 1/rounds².
    #[arg(long)]
    pub delta: Option<f64>,
    /// Exploration constant; defaults to lambda_min of the exploration Gram matrix.
    #[arg(long)]
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Formatting back to arguments
// ---------------------------------------------------------------------------

fn push<T: ToString>(out: &mut Vec<String>, flag: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push(format!("--{flag}"));
        out.push(v.to_string());
    }
}

fn push_path(out: &mut Vec<String>, flag: &str, v: &Option<PathBuf>) {
    push(out, flag, &v.as_ref().map(|p| p.to_string_lossy().into_owned()));
}

impl EnvArgs {
    fn to_args(&self, out: &mut Vec<String>) {
        push(out, "env", &self.env.map(EnvKind::name));
        push(out, "arms", &self.arms);
        push(out, "dim", &self.dim);
        push(out, "budget", &self.budget);
        push(out, "sigma-q", &self.sigma_q);
        push(out, "sigma-0", &self.sigma_0);
        push(out, "noise", &self.noise);
        push(out, "tasks", &self.tasks);
        push(out, "rounds", &self.rounds);
        push(out, "seed", &self.seed);
        push(out, "components", &self.components);
        push(out, "weights", &self.weights);
        push_path(out, "config", &self.config);
    }
}

impl ExperimentArgs {
    fn to_args(&self, out: &mut Vec<String>) {
        push(out, "runs", &self.runs);
        push(out, "agents", &self.agents);
        push(out, "common-tasks", &self.common_tasks);
        push(out, "threads", &self.threads);
    }
}

impl Cli {
    /// Arguments (without the program name) that parse back to `self`.
    pub fn to_args(&self) -> Vec<String> {
        let mut out = Vec::new();
        match &self.command {
            Command::Run(a) => {
                out.push("run".into());
                a.env.to_args(&mut out);
                a.experiment.to_args(&mut out);
                push_path(&mut out, "out", &a.out);
                push_path(&mut out, "trace", &a.trace);
            }
            Command::Bound(a) => {
                out.push("bound".into());
                a.env.to_args(&mut out);
                push(&mut out, "delta", &a.delta);
                push(&mut out, "eta", &a.eta);
            }
            Command::Sweep(a) => {
                out.push("sweep".into());
                a.env.to_args(&mut out);
                a.experiment.to_args(&mut out);
                push_path(&mut out, "out-dir", &a.out_dir);
            }
        }
        out
    }

    fn env(&self) -> &EnvArgs {
        match &self.command {
            Command::Run(a) => &a.env,
            Command::Bound(a) => &a.env,
            Command::Sweep(a) => &a.env,
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing and validation
// ---------------------------------------------------------------------------

/// Reads `key=value` lines into `--key value` argument pairs.
pub fn read_config_file(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("--config: cannot read {}: {e}", path.display())))?;
    parse_config_text(&text)
}

pub fn parse_config_text(text: &str) -> Result<Vec<String>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return usage("config", format!("line {} is not key=value: '{raw}'", i + 1));
        };
        let key = key.trim().trim_start_matches("--");
        if key == "config" {
            return usage("config", "a config file cannot include another");
        }
        out.push(format!("--{key}"));
        out.push(value.trim().to_string());
    }
    Ok(out)
}

/// Parses arguments (first element is the program name) and applies the
/// config file, if any.
pub fn parse<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

fn parse_with_config(argv: Vec<OsString>) -> Result<Cli, CliError> {
    let cli = parse(argv.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let Some(path) = cli.env().config.clone() else {
        return Ok(cli);
    };
    let mut merged = argv;
    merged.extend(read_config_file(&path)?.into_iter().map(OsString::from));
    parse(merged).map_err(|e| CliError::Usage(format!("in config file {}: {e}", path.display())))
}

fn require<T: Clone>(flag: &str, v: &Option<T>) -> Result<T, CliError> {
    match v {
        Some(v) => Ok(v.clone()),
        None => usage(flag, "is required"),
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, CliError> {
    let items: Result<Vec<T>, _> = s.split(',').map(|x| x.trim().parse::<T>()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => usage(flag, format!("cannot parse '{s}'")),
    }
}

fn parse_single<T: std::str::FromStr + Copy>(flag: &str, s: &Option<String>) -> Result<Option<T>, CliError> {
    match s {
        None => Ok(None),
        Some(s) => {
            let v: Vec<T> = parse_list(flag, s)?;
            if v.len() != 1 {
                return usage(flag, "expects a single value here");
            }
            Ok(Some(v[0]))
        }
    }
}

fn positive_count(flag: &str, v: usize) -> Result<usize, CliError> {
    if v == 0 {
        return usage(flag, "must be at least 1");
    }
    Ok(v)
}

fn widths(flag: &str, list: &[f64], k: usize) -> Result<Vec<f64>, CliError> {
    if list.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return usage(flag, "widths must be non-negative");
    }
    match list.len() {
        1 => Ok(vec![list[0]; k]),
        n if n == k => Ok(list.to_vec()),
        n => usage(flag, format!("has {n} values, expected 1 or {k}")),
    }
}

fn parse_components(s: &str) -> Result<Vec<Vec<BetaParams>>, CliError> {
    let bad = || usage("components", format!("cannot parse '{s}', expected a:b/a:b;a:b/a:b"));
    let mut out = Vec::new();
    for comp in s.split(';') {
        let mut arms = Vec::new();
        for arm in comp.split('/') {
            let Some((a, b)) = arm.split_once(':') else {
                return bad();
            };
            let (Ok(a), Ok(b)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) else {
                return bad();
            };
            if !(a > 0.0 && b > 0.0) {
                return usage("components", "Beta parameters must be positive");
            }
            arms.push(BetaParams::new(a, b));
        }
        out.push(arms);
    }
    if out.iter().any(|c| c.len() != out[0].len()) {
        return usage("components", "all components need the same number of arms");
    }
    Ok(out)
}

/// Environment sizes resolved from flags; `sigma_q` may be overridden by a
/// sweep cell.
struct EnvShape {
    kind: EnvKind,
    arms: Option<usize>,
    dim: Option<usize>,
}

fn build_spec(env: &EnvArgs, shape: &EnvShape, sigma_q_override: Option<f64>) -> Result<EnvironmentSpec, CliError> {
    let spec_err = |e: crate::hierarchy::EnvError| CliError::Usage(e.to_string());
    if shape.kind == EnvKind::BernoulliMixture {
        let components = parse_components(&require("components", &env.components)?)?;
        let weights = match &env.weights {
            Some(w) => parse_list::<f64>("weights", w)?,
            None => vec![1.0; components.len()],
        };
        if weights.len() != components.len() {
            return usage("weights", format!("need {} weights", components.len()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
            return usage("weights", "must be non-negative with a positive sum");
        }
        let weights = weights.iter().map(|w| w / total).collect();
        return EnvironmentSpec::bernoulli_mixture(components, weights).map_err(spec_err);
    }

    let noise = require("noise", &env.noise)?;
    if !(noise > 0.0) || !noise.is_finite() {
        return usage("noise", "must be positive");
    }
    let sq_list = match sigma_q_override {
        Some(v) => vec![v],
        None => parse_list::<f64>("sigma-q", &require("sigma-q", &env.sigma_q)?)?,
    };
    let s0_list = parse_list::<f64>("sigma-0", &require("sigma-0", &env.sigma_0)?)?;
    let (action_set, k) = match shape.kind {
        EnvKind::Gaussian => {
            let k = positive_count("arms", shape.arms.ok_or(()).or_else(|_| usage("arms", "is required"))?)?;
            (ActionSet::Arms { count: k }, k)
        }
        EnvKind::Semibandit => {
            let k = positive_count("arms", shape.arms.ok_or(()).or_else(|_| usage("arms", "is required"))?)?;
            let budget = positive_count("budget", require("budget", &env.budget)?)?;
            if budget > k {
                return usage("budget", format!("{budget} exceeds --arms {k}"));
            }
            (ActionSet::Subsets { arms: k, budget }, k)
        }
        EnvKind::Linear => {
            let d = positive_count("dim", shape.dim.ok_or(()).or_else(|_| usage("dim", "is required"))?)?;
            let count = positive_count("arms", shape.arms.unwrap_or(ACTIONS_PER_DIM * d))?;
            (
                ActionSet::RandomLinear {
                    count,
                    dim: d,
                    half_width: LINEAR_HALF_WIDTH,
                },
                d,
            )
        }
        EnvKind::BernoulliMixture => unreachable!(),
    };
    let sq: Vec<f64> = widths("sigma-q", &sq_list, k)?.iter().map(|s| s * s).collect();
    let s0: Vec<f64> = widths("sigma-0", &s0_list, k)?.iter().map(|s| s * s).collect();
    let prior = Prior::Gaussian(GaussianHierarchy {
        mu_q: vec![0.0; k],
        sigma_q: PsdMatrix::diagonal(&sq).map_err(|e| CliError::Usage(e.to_string()))?,
        sigma_0: PsdMatrix::diagonal(&s0).map_err(|e| CliError::Usage(e.to_string()))?,
    });
    EnvironmentSpec::new(prior, noise, action_set).map_err(spec_err)
}

fn shape_single(env: &EnvArgs) -> Result<EnvShape, CliError> {
    Ok(EnvShape {
        kind: require("env", &env.env)?,
        arms: parse_single("arms", &env.arms)?,
        dim: parse_single("dim", &env.dim)?,
    })
}

fn parse_agents(s: &str) -> Result<Vec<AgentKind>, CliError> {
    let agents: Result<Vec<_>, _> = s.split(',').map(AgentKind::parse).collect();
    match agents {
        Ok(a) if !a.is_empty() => Ok(a),
        Ok(_) => usage("agents", "needs at least one agent"),
        Err(e) => usage("agents", e),
    }
}

fn experiment_config(env: &EnvArgs, exp: &ExperimentArgs, spec: EnvironmentSpec) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig {
        spec,
        agents: parse_agents(&require("agents", &exp.agents)?)?,
        tasks: positive_count("tasks", require("tasks", &env.tasks)?)?,
        rounds: positive_count("rounds", require("rounds", &env.rounds)?)?,
        runs: positive_count("runs", require("runs", &exp.runs)?)?,
        seed: env.seed.unwrap_or(0),
        common_tasks: exp.common_tasks.unwrap_or(true),
    })
}

fn threads(exp: &ExperimentArgs) -> Result<Option<usize>, CliError> {
    exp.threads.map(|t| positive_count("threads", t)).transpose()
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

pub const TRACE_HEADER: [&str; 6] = ["agent", "run", "task", "round", "instant_regret", "cum_regret"];
pub const CURVE_HEADER: [&str; 5] = ["agent", "task", "round", "mean_cum_regret", "stderr"];

/// Shortest decimal that parses back to the same `f64`; never uses a
/// locale-dependent separator.
fn real(x: f64) -> String {
    // adding zero folds -0 into 0
    format!("{}", x + 0.0)
}

pub fn write_trace_csv<W: Write>(traces: &[RunTrace], w: W) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_HEADER)?;
    for t in traces {
        let label = t.agent.label();
        for (i, (inst, cum)) in t.instant.iter().zip(&t.cumulative).enumerate() {
            out.write_record([
                label.clone(),
                t.run.to_string(),
                (i / t.rounds + 1).to_string(),
                (i % t.rounds + 1).to_string(),
                real(*inst),
                real(*cum),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_curve_csv<W: Write>(curve: &AggregateCurve, w: W) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CURVE_HEADER)?;
    for a in &curve.agents {
        for (i, (m, se)) in a.mean.iter().zip(&a.stderr).enumerate() {
            out.write_record([
                a.agent.clone(),
                (i / curve.rounds + 1).to_string(),
                (i % curve.rounds + 1).to_string(),
                real(*m),
                real(*se),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn emit_curve_csv(curve: &AggregateCurve, path: &Path) -> Result<(), CliError> {
    write_curve_csv(curve, io::BufWriter::new(File::create(path)?))
}

pub fn emit_trace_csv(traces: &[RunTrace], path: &Path) -> Result<(), CliError> {
    write_trace_csv(traces, io::BufWriter::new(File::create(path)?))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn run_and_report(
    config: &ExperimentConfig,
    threads: Option<usize>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(AggregateCurve, Vec<RunTrace>, usize), CliError> {
    let result = run_experiment(config, threads).map_err(|e| CliError::Usage(e.to_string()))?;
    for f in &result.failures {
        writeln!(stderr, "run failed: {f}")?;
    }
    let curve = aggregate(&result.traces).map_err(|e| CliError::Runtime(e.to_string()))?;
    for a in &curve.agents {
        writeln!(
            stdout,
            "agent={} runs={} final_regret={} stderr={}",
            a.agent,
            a.runs,
            final_regret(&curve, &a.agent).unwrap_or(f64::NAN),
            final_stderr(&curve, &a.agent).unwrap_or(f64::NAN)
        )?;
    }
    Ok((curve, result.traces, result.failures.len()))
}

fn failures_to_error(failures: usize) -> Result<(), CliError> {
    if failures > 0 {
        return Err(CliError::Runtime(format!("{failures} run(s) failed")));
    }
    Ok(())
}

fn cmd_run(args: &RunArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let out = require("out", &args.out)?;
    let spec = build_spec(&args.env, &shape_single(&args.env)?, None)?;
    let config = experiment_config(&args.env, &args.experiment, spec)?;
    let threads = threads(&args.experiment)?;
    let (curve, traces, failures) = run_and_report(&config, threads, stdout, stderr)?;
    emit_curve_csv(&curve, &out)?;
    if let Some(path) = &args.trace {
        emit_trace_csv(&traces, path)?;
    }
    failures_to_error(failures)
}

fn cmd_bound(args: &BoundArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let env = &args.env;
    let spec = build_spec(env, &shape_single(env)?, None)?;
    let tasks = positive_count("tasks", require("tasks", &env.tasks)?)?;
    let rounds = positive_count("rounds", require("rounds", &env.rounds)?)?;
    let delta = args.delta.unwrap_or(1.0 / (rounds as f64).powi(2));
    if !(delta > 0.0 && delta <= 1.0) {
        return usage("delta", "must lie in (0, 1]");
    }
    if let Some(eta) = args.eta {
        if !(eta > 0.0) {
            return usage("eta", "must be positive");
        }
    }
    let spec = realized_spec(&spec, env.seed.unwrap_or(0), 0);
    let breakdown =
        bound_for_spec(&spec, tasks, rounds, delta, args.eta).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(stderr, "delta={delta}")?;
    for (name, value) in &breakdown.terms {
        writeln!(stdout, "{name}={}", real(*value))?;
    }
    writeln!(stdout, "total={}", real(breakdown.total))?;
    Ok(())
}

fn cell_name(kind: EnvKind, sigma_q: f64, size_flag: &str, size: Option<usize>) -> String {
    let size = size.map_or(String::new(), |s| format!("_{size_flag}{s}"));
    format!("{}_sq{}{}.csv", kind.name(), sigma_q, size)
}

fn cmd_sweep(args: &SweepArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let env = &args.env;
    let out_dir = require("out-dir", &args.out_dir)?;
    let kind = require("env", &env.env)?;
    if kind == EnvKind::BernoulliMixture {
        return usage("env", "sweep needs a Gaussian family");
    }
    let sigma_qs = parse_list::<f64>("sigma-q", &require("sigma-q", &env.sigma_q)?)?;
    let (size_flag, sizes): (&str, Vec<Option<usize>>) = match kind {
        EnvKind::Linear => (
            "dim",
            match &env.dim {
                Some(d) => parse_list::<usize>("dim", d)?.into_iter().map(Some).collect(),
                None => vec![None],
            },
        ),
        _ => (
            "arms",
            match &env.arms {
                Some(k) => parse_list::<usize>("arms", k)?.into_iter().map(Some).collect(),
                None => vec![None],
            },
        ),
    };
    let linear_arms = if kind == EnvKind::Linear {
        parse_single("arms", &env.arms)?
    } else {
        None
    };
    std::fs::create_dir_all(&out_dir)?;
    let threads = threads(&args.experiment)?;
    let mut failures = 0;
    for &sq in &sigma_qs {
        for &size in &sizes {
            let shape = match kind {
                EnvKind::Linear => EnvShape {
                    kind,
                    arms: linear_arms,
                    dim: size,
                },
                _ => EnvShape {
                    kind,
                    arms: size,
                    dim: None,
                },
            };
            let spec = build_spec(env, &shape, Some(sq))?;
            let config = experiment_config(env, &args.experiment, spec)?;
            let name = cell_name(kind, sq, size_flag, size);
            writeln!(stdout, "cell={name}")?;
            let (curve, _, f) = run_and_report(&config, threads, stdout, stderr)?;
            failures += f;
            emit_curve_csv(&curve, &out_dir.join(&name))?;
        }
    }
    failures_to_error(failures)
}

/// Runs a parsed invocation.
pub fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, stdout, stderr),
        Command::Bound(a) => cmd_bound(a, stdout, stderr),
        Command::Sweep(a) => cmd_sweep(a, stdout, stderr),
    }
}

/// Full entry point; returns the process exit code.
pub fn main_with_args<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    if let Err(e) = parse(argv.clone()) {
        if !e.use_stderr() {
            let _ = write!(stdout, "{e}");
            return 0;
        }
    }
    let result = parse_with_config(argv).and_then(|cli| execute(&cli, stdout, stderr));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PANEL: &str = "adats run --env gaussian --arms 2 --sigma-q 0.5 --sigma-0 0.1 --noise 1 --tasks 20 \
                         --rounds 200 --runs 100 --agents ts,oracle-ts,meta-ts,ada-ts --seed 7 --out curves.csv";

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn panel_invocation_is_valid() {
        let cli = parse(argv(PANEL)).unwrap();
        let Command::Run(a) = &cli.command else { panic!() };
        let spec = build_spec(&a.env, &shape_single(&a.env).unwrap(), None).unwrap();
        let config = experiment_config(&a.env, &a.experiment, spec).unwrap();
        assert_eq!(config.agents.len(), 4);
        assert_eq!(
            (config.tasks, config.rounds, config.runs, config.seed),
            (20, 200, 100, 7)
        );
        assert!(config.common_tasks);
    }

    #[test]
    fn missing_rounds_names_flag() {
        let cli = parse(argv(&PANEL.replace("--rounds 200", ""))).unwrap();
        let Command::Run(a) = &cli.command else { panic!() };
        let spec = build_spec(&a.env, &shape_single(&a.env).unwrap(), None).unwrap();
        let err = experiment_config(&a.env, &a.experiment, spec).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("--rounds"));
    }

    #[test]
    fn linear_defaults_to_five_actions_per_dim() {
        let cli = parse(argv(
            "adats bound --env linear --dim 2 --sigma-q 1 --sigma-0 0.1 --noise 1",
        ))
        .unwrap();
        let spec = build_spec(cli.env(), &shape_single(cli.env()).unwrap(), None).unwrap();
        assert_eq!(spec.action_set.len(), 10);
        let cli = parse(argv(
            "adats bound --env linear --dim 2 --arms 7 --sigma-q 1 --sigma-0 0.1 --noise 1",
        ))
        .unwrap();
        let spec = build_spec(cli.env(), &shape_single(cli.env()).unwrap(), None).unwrap();
        assert_eq!(spec.action_set.len(), 7);
    }

    #[test]
    fn per_arm_widths() {
        let cli = parse(argv(
            "adats bound --env semibandit --arms 3 --budget 2 --sigma-q 0.5 --sigma-0 0,0.1,0.2 --noise 1",
        ))
        .unwrap();
        let spec = build_spec(cli.env(), &shape_single(cli.env()).unwrap(), None).unwrap();
        let g = spec.gaussian().unwrap();
        assert_eq!(g.sigma_0.diag(), vec![0.0, 0.010000000000000002, 0.04000000000000001]);
        let cli = parse(argv(
            "adats bound --env semibandit --arms 3 --budget 2 --sigma-q 0.5 --sigma-0 0,0.1 --noise 1",
        ))
        .unwrap();
        let err = build_spec(cli.env(), &shape_single(cli.env()).unwrap(), None)
            .err()
            .unwrap();
        assert!(err.to_string().contains("--sigma-0"));
    }

    #[test]
    fn config_text_parsing() {
        let args = parse_config_text("# comment\nrounds = 50\n\nseed=3 # trailing\n").unwrap();
        assert_eq!(args, vec!["--rounds", "50", "--seed", "3"]);
        assert!(parse_config_text("rounds 50").is_err());
    }

    #[test]
    fn mixture_components() {
        let c = parse_components("9:1/1:9;1:9/9:1").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1][1], BetaParams::new(9.0, 1.0));
        assert!(parse_components("9:1/1:9;1:9").is_err());
        assert!(parse_components("9-1").is_err());
    }

    #[test]
    fn csv_structure() {
        let trace = RunTrace {
            agent: AgentKind::parse("ada-ts").unwrap(),
            agent_index: 0,
            run: 0,
            tasks: 1,
            rounds: 2,
            instant: vec![0.25, 0.0],
            cumulative: vec![0.25, 0.25],
            task_hashes: vec![1],
        };
        let mut buf = Vec::new();
        write_trace_csv(std::slice::from_ref(&trace), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "agent,run,task,round,instant_regret,cum_regret\nada-ts,0,1,1,0.25,0.25\nada-ts,0,1,2,0,0.25\n"
        );

        let empty = AggregateCurve {
            tasks: 1,
            rounds: 1,
            agents: vec![],
        };
        let mut buf = Vec::new();
        write_curve_csv(&empty, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "agent,task,round,mean_cum_regret,stderr\n"
        );
    }

    #[test]
    fn real_formatting_round_trips() {
        for x in [0.1, 1e-7, 123456.789, 1.0 / 3.0, 0.0, 2.5e300] {
            assert_eq!(real(x).parse::<f64>().unwrap(), x);
            assert!(!real(x).contains(','));
        }
    }

    fn opt<S: Strategy>(s: S) -> impl Strategy<Value = Option<S::Value>> {
        proptest::option::of(s)
    }

    fn env_args() -> impl Strategy<Value = EnvArgs> {
        (
            opt(prop_oneof![
                Just(EnvKind::Gaussian),
                Just(EnvKind::Linear),
                Just(EnvKind::Semibandit),
                Just(EnvKind::BernoulliMixture)
            ]),
            opt(1usize..50),
            opt(1usize..9),
            opt(1usize..5),
            opt(0.0f64..3.0),
            opt(-1.0e3f64..1.0e3),
            opt(1usize..100),
            opt(any::<u64>()),
        )
            .prop_map(|(env, arms, dim, budget, sq, noise, tasks, seed)| EnvArgs {
                env,
                arms: arms.map(|a| a.to_string()),
                dim: dim.map(|d| format!("{d},{}", d + 1)),
                budget,
                sigma_q: sq.map(|s| s.to_string()),
                sigma_0: sq.map(|s| format!("{},{}", s / 2.0, s)),
                noise,
                tasks,
                rounds: tasks.map(|t| t * 3),
                seed,
                components: None,
                weights: None,
                config: None,
            })
    }

    proptest! {
        #[test]
        fn parse_format_round_trip(env in env_args(), runs in opt(1usize..200), common in opt(any::<bool>()),
                                   threads in opt(1usize..9), which in 0u8..3, delta in opt(0.0f64..1.0)) {
            let experiment = ExperimentArgs {
                runs,
                agents: runs.map(|_| "ts,ada-ts+,ada-ts-".to_string()),
                common_tasks: common,
                threads,
            };
            let command = match which {
                0 => Command::Run(RunArgs { env, experiment, out: Some(PathBuf::from("o.csv")), trace: None }),
                1 => Command::Bound(BoundArgs { env, delta, eta: delta.map(|d| d * 2.0) }),
                _ => Command::Sweep(SweepArgs { env, experiment, out_dir: Some(PathBuf::from("cells")) }),
            };
            let cli = Cli { command };
            let mut args = vec!["adats".to_string()];
            args.extend(cli.to_args());
            let back = parse(args).unwrap();
            prop_assert_eq!(back, cli);
        }
    }
}
