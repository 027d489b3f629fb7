//! Experiment orchestration: runs every (agent, run) pair through `m` tasks
//! of `n` rounds, records regret and aggregates across runs.
//!
//! Randomness is split into three streams per unit of work. The task
//! stream draws the action set, `mu*` and every task; with `common_tasks`
//! it ignores the agent so all agents face the same problems. Reward noise
//! and the agent's own sampling use separate per-agent streams. Results
//! therefore depend only on `(config, seed)`, never on scheduling.

use crate::agents::{Agent, AgentError, AgentKind};
use crate::gauss_core::RngStream;
use crate::hierarchy::{instant_regret, realize_reward, sample_meta_parameter, sample_task, EnvError, EnvironmentSpec};
use rayon::prelude::*;
use std::fmt;
use thiserror::Error;

const PURPOSE_TASK: u64 = 1;
const PURPOSE_REWARD: u64 = 2;
const PURPOSE_AGENT: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub spec: EnvironmentSpec,
    pub agents: Vec<AgentKind>,
    pub tasks: usize,
    pub rounds: usize,
    pub runs: usize,
    pub seed: u64,
    pub common_tasks: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.into()));
        if self.tasks == 0 {
            return bad("tasks must be at least 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        if self.agents.is_empty() {
            return bad("at least one agent is required");
        }
        self.spec
            .validate()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidConfig(String),
    #[error("no successful runs to aggregate")]
    EmptyTrace,
    #[error("unknown agent '{0}'")]
    UnknownAgent(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Failure of a single (agent, run), located to the task and round.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub agent: String,
    pub run: usize,
    /// 1-based task index; 0 if the failure happened before the first task.
    pub task: usize,
    /// 1-based round index; 0 outside the round loop.
    pub round: usize,
    pub message: String,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "agent {} run {} task {} round {}: {}",
            self.agent, self.run, self.task, self.round, self.message
        )
    }
}

impl std::error::Error for RunFailure {}

/// Regret of one (agent, run) over the flattened task-major, round-minor
/// order. Cell `(s, t)` (1-based) sits at index `(s - 1) * rounds + t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub agent: AgentKind,
    pub agent_index: usize,
    pub run: usize,
    pub tasks: usize,
    pub rounds: usize,
    pub instant: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// Digest of each realized task, for checking shared task sequences.
    pub task_hashes: Vec<u64>,
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.instant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instant.is_empty()
    }

    pub fn final_regret(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    /// Successful traces ordered by (agent index, run).
    pub traces: Vec<RunTrace>,
    pub failures: Vec<RunFailure>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stream id for `(run, agent, purpose)`; `None` marks a stream shared by
/// all agents.
pub fn stream_id(run: usize, agent: Option<usize>, purpose: u64) -> u64 {
    let a = agent.map_or(u64::MAX, |a| a as u64);
    splitmix(splitmix(splitmix(run as u64) ^ a) ^ purpose)
}

/// Task stream of a run; `agent` is `None` when tasks are shared.
pub fn task_stream(seed: u64, run: usize, agent: Option<usize>) -> RngStream {
    RngStream::new(seed, stream_id(run, agent, PURPOSE_TASK))
}

/// The environment of run `run` with its random action set resolved, as
/// seen by every agent when tasks are shared.
pub fn realized_spec(spec: &EnvironmentSpec, seed: u64, run: usize) -> EnvironmentSpec {
    spec.realize(&mut task_stream(seed, run, None))
}

/// Runs one agent for one replication.
pub fn run_single(config: &ExperimentConfig, agent_index: usize, run: usize) -> Result<RunTrace, RunFailure> {
    let kind = *config.agents.get(agent_index).ok_or_else(|| RunFailure {
        agent: format!("#{agent_index}"),
        run,
        task: 0,
        round: 0,
        message: "agent index out of range".into(),
    })?;
    let fail = |task: usize, round: usize, message: String| RunFailure {
        agent: kind.label(),
        run,
        task,
        round,
        message,
    };
    let env_err = |task, round| move |e: EnvError| fail(task, round, e.to_string());
    let agent_err = |task, round| move |e: AgentError| fail(task, round, e.to_string());

    let task_agent = if config.common_tasks { None } else { Some(agent_index) };
    let mut task_rng = task_stream(config.seed, run, task_agent);
    let mut reward_rng = RngStream::new(config.seed, stream_id(run, Some(agent_index), PURPOSE_REWARD));
    let mut agent_rng = RngStream::new(config.seed, stream_id(run, Some(agent_index), PURPOSE_AGENT));

    let spec = config.spec.realize(&mut task_rng);
    let meta = sample_meta_parameter(&spec, &mut task_rng).map_err(env_err(0, 0))?;
    let tasks = (0..config.tasks)
        .map(|s| sample_task(&spec, &meta, &mut task_rng).map_err(env_err(s + 1, 0)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut agent = Agent::new(kind, &spec, &meta, config.tasks).map_err(agent_err(0, 0))?;
    let cells = config.tasks * config.rounds;
    let mut instant = Vec::with_capacity(cells);
    let mut cumulative = Vec::with_capacity(cells);
    let mut total = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        let s = i + 1;
        agent.begin_task(s, &mut agent_rng).map_err(agent_err(s, 0))?;
        for t in 1..=config.rounds {
            let action = agent.select(&mut agent_rng).map_err(agent_err(s, t))?;
            let obs = realize_reward(&spec, task, &action, &mut reward_rng).map_err(env_err(s, t))?;
            let r = instant_regret(&spec.action_set, task, &action).map_err(env_err(s, t))?;
            agent.observe(&action, &obs).map_err(agent_err(s, t))?;
            total += r;
            instant.push(r);
            cumulative.push(total);
        }
        agent.end_task().map_err(agent_err(s, 0))?;
    }
    Ok(RunTrace {
        agent: kind,
        agent_index,
        run,
        tasks: config.tasks,
        rounds: config.rounds,
        instant,
        cumulative,
        task_hashes: tasks.iter().map(|t| t.digest()).collect(),
    })
}

/// Runs every (agent, run) pair on a pool of `threads` workers (all cores
/// when `None`). Output order and content do not depend on `threads`.
pub fn run_experiment(config: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder.build().map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
    let units: Vec<(usize, usize)> = (0..config.agents.len())
        .flat_map(|a| (0..config.runs).map(move |r| (a, r)))
        .collect();
    let outcomes: Vec<Result<RunTrace, RunFailure>> =
        pool.install(|| units.par_iter().map(|&(a, r)| run_single(config, a, r)).collect());
    let mut traces = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(t) => traces.push(t),
            Err(f) => failures.push(f),
        }
    }
    Ok(ExperimentResult { traces, failures })
}

/// Pointwise mean and standard error of cumulative regret for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentCurve {
    pub agent: String,
    pub runs: usize,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub tasks: usize,
    pub rounds: usize,
    /// In order of first appearance in the trace list.
    pub agents: Vec<AgentCurve>,
}

/// Averages traces per agent. Standard error is the sample standard
/// deviation over runs divided by `sqrt(runs)`; a single run gives 0.
pub fn aggregate(traces: &[RunTrace]) -> Result<AggregateCurve, HarnessError> {
    let first = traces.first().ok_or(HarnessError::EmptyTrace)?;
    let (tasks, rounds) = (first.tasks, first.rounds);
    let mut order: Vec<usize> = Vec::new();
    for t in traces {
        if t.tasks != tasks || t.rounds != rounds {
            return Err(HarnessError::InvalidConfig("traces have different shapes".into()));
        }
        if !order.contains(&t.agent_index) {
            order.push(t.agent_index);
        }
    }
    let cells = tasks * rounds;
    let agents = order
        .into_iter()
        .map(|idx| {
            let group: Vec<&RunTrace> = traces.iter().filter(|t| t.agent_index == idx).collect();
            let runs = group.len();
            let n = runs as f64;
            let mut mean = vec![0.0; cells];
            let mut stderr = vec![0.0; cells];
            for c in 0..cells {
                let m = group.iter().map(|t| t.cumulative[c]).sum::<f64>() / n;
                mean[c] = m;
                if runs > 1 {
                    let var = group.iter().map(|t| (t.cumulative[c] - m).powi(2)).sum::<f64>() / (n - 1.0);
                    stderr[c] = (var / n).sqrt();
                }
            }
            AgentCurve {
                agent: group[0].agent.label(),
                runs,
                mean,
                stderr,
            }
        })
        .collect();
    Ok(AggregateCurve { tasks, rounds, agents })
}

impl AggregateCurve {
    pub fn agent(&self, label: &str) -> Result<&AgentCurve, HarnessError> {
        self.agents
            .iter()
            .find(|a| a.agent == label)
            .ok_or_else(|| HarnessError::UnknownAgent(label.into()))
    }
}

/// Mean cumulative regret at the last cell `(s = m, t = n)`.
pub fn final_regret(curve: &AggregateCurve, agent: &str) -> Result<f64, HarnessError> {
    let a = curve.agent(agent)?;
    a.mean.last().copied().ok_or(HarnessError::EmptyTrace)
}

/// Standard error of the final mean cumulative regret.
pub fn final_stderr(curve: &AggregateCurve, agent: &str) -> Result<f64, HarnessError> {
    let a = curve.agent(agent)?;
    a.stderr.last().copied().ok_or(HarnessError::EmptyTrace)
}
