//! Thompson sampling policies with a learned prior.
//!
//! Gaussian families keep a Gaussian meta-posterior over the task-prior
//! mean. At the start of each task it is turned into a task prior; how
//! depends on the policy:
//!
//! * `AdaTs` marginalizes the meta-parameter: `N(mu_hat, Sigma_hat + Sigma_0)`.
//! * `MetaTs` samples `mu ~ N(mu_hat, Sigma_hat)` once and uses `N(mu, Sigma_0)`.
//! * `OracleTs` knows the true meta-parameter: `N(mu*, Sigma_0)`.
//! * `AgnosticTs` ignores the hierarchy: `N(mu_q, Sigma_q + Sigma_0)`.
//!
//! After a task, its sufficient statistics enter the meta-posterior in
//! closed form. Beta-mixture environments follow the same scheme with a
//! categorical meta-posterior over candidate priors.

use crate::gauss_core::{cholesky, mvn_sample, spd_inverse, LinalgError, Matrix, PsdMatrix, RngStream};
use crate::hierarchy::{
    argmax_index, norm, sample_beta, sample_categorical, Action, ActionSet, BetaParams, EnvError, EnvironmentSpec,
    Family, GaussianHierarchy, MetaDraw, MixturePrior, Observation, Prior,
};
use statrs::function::beta::ln_beta;
use std::collections::VecDeque;
use std::fmt;
use thiserror::Error;

/// Minimum `lambda_min` of the forced-exploration Gram matrix before the
/// scaled standard basis is used instead of members of the action set.
pub const EXPLORATION_MIN_EIGENVALUE: f64 = 1e-6;

/// Feature length of the standard-basis fallback exploration actions.
pub const FALLBACK_EXPLORATION_SCALE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{0}")]
    Unsupported(String),
    #[error("agent used out of order: {0}")]
    State(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    AgnosticTs,
    OracleTs,
    MetaTs,
    AdaTs,
    AdaTsForced,
    /// TS with the prior of a wrong mixture component (Beta mixtures only).
    MisassignedTs,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::AgnosticTs => "ts",
            Policy::OracleTs => "oracle-ts",
            Policy::MetaTs => "meta-ts",
            Policy::AdaTs => "ada-ts",
            Policy::AdaTsForced => "ada-ts-forced",
            Policy::MisassignedTs => "misassigned-ts",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "ts" => Policy::AgnosticTs,
            "oracle-ts" => Policy::OracleTs,
            "meta-ts" => Policy::MetaTs,
            "ada-ts" => Policy::AdaTs,
            "ada-ts-forced" => Policy::AdaTsForced,
            "misassigned-ts" => Policy::MisassignedTs,
            _ => return None,
        })
    }

    fn learns_meta(self) -> bool {
        matches!(self, Policy::MetaTs | Policy::AdaTs | Policy::AdaTsForced)
    }
}

/// A policy plus the width multiplier applied to its meta-prior.
///
/// A scale of 3 widens the meta-prior standard deviation threefold
/// (`ada-ts+`), 1/3 narrows it (`ada-ts-`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentKind {
    pub policy: Policy,
    pub meta_prior_scale: f64,
}

impl AgentKind {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            meta_prior_scale: 1.0,
        }
    }

    pub fn with_scale(policy: Policy, meta_prior_scale: f64) -> Self {
        Self {
            policy,
            meta_prior_scale,
        }
    }

    pub fn label(&self) -> String {
        let s = self.meta_prior_scale;
        let suffix = if s == 1.0 {
            String::new()
        } else if (s - 3.0).abs() < 1e-12 {
            "+".into()
        } else if (s - 1.0 / 3.0).abs() < 1e-12 {
            "-".into()
        } else {
            format!("@{s}")
        };
        format!("{}{}", self.policy.name(), suffix)
    }

    pub fn parse(label: &str) -> Result<Self, String> {
        let label = label.trim();
        let bad = || format!("unknown agent '{label}'");
        if let Some((name, scale)) = label.split_once('@') {
            let policy = Policy::from_name(name).ok_or_else(bad)?;
            let scale: f64 = scale.parse().map_err(|_| bad())?;
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(format!("meta-prior scale must be positive in '{label}'"));
            }
            return Ok(Self::with_scale(policy, scale));
        }
        if let Some(p) = Policy::from_name(label) {
            return Ok(Self::new(p));
        }
        if let Some(name) = label.strip_suffix('+') {
            return Policy::from_name(name)
                .map(|p| Self::with_scale(p, 3.0))
                .ok_or_else(bad);
        }
        if let Some(name) = label.strip_suffix('-') {
            return Policy::from_name(name)
                .map(|p| Self::with_scale(p, 1.0 / 3.0))
                .ok_or_else(bad);
        }
        Err(bad())
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Copy of `spec` with the meta-prior covariance multiplied by `scale²`.
pub fn scale_meta_prior(spec: &EnvironmentSpec, scale: f64) -> EnvironmentSpec {
    let mut out = spec.clone();
    if let Prior::Gaussian(g) = &mut out.prior {
        if scale != 1.0 {
            g.sigma_q = g.sigma_q.scale(scale * scale);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Gaussian meta-posterior
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// Per-coordinate variances.
    Diagonal(Vec<f64>),
    Dense(PsdMatrix),
}

impl Covariance {
    pub fn to_matrix(&self) -> PsdMatrix {
        match self {
            Covariance::Diagonal(v) => PsdMatrix::symmetrized(Matrix::from_diag(v)),
            Covariance::Dense(m) => m.clone(),
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        match self {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::Dense(m) => m.diag(),
        }
    }
}

/// `N(mean, cov)` belief over the task-prior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMetaPosterior {
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl GaussianMetaPosterior {
    /// The meta-prior itself; diagonal storage requires diagonal `sigma_q`.
    pub fn from_prior(h: &GaussianHierarchy, diagonal: bool) -> Self {
        let cov = if diagonal && h.sigma_q.is_diagonal() {
            Covariance::Diagonal(h.sigma_q.diag())
        } else {
            Covariance::Dense(h.sigma_q.clone())
        };
        Self {
            mean: h.mu_q.clone(),
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-task sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSummary {
    /// Pull counts and reward sums per arm.
    PerArm { counts: Vec<u64>, sums: Vec<f64> },
    /// Gram matrix `sum a aᵀ` and reward-weighted feature sum `sum a y`.
    Linear { gram: Matrix, weighted_sum: Vec<f64> },
}

impl TaskSummary {
    pub fn per_arm(k: usize) -> Self {
        TaskSummary::PerArm {
            counts: vec![0; k],
            sums: vec![0.0; k],
        }
    }

    pub fn linear(d: usize) -> Self {
        TaskSummary::Linear {
            gram: Matrix::zeros(d, d),
            weighted_sum: vec![0.0; d],
        }
    }

    pub fn record_arm(&mut self, arm: usize, reward: f64) {
        if let TaskSummary::PerArm { counts, sums } = self {
            counts[arm] += 1;
            sums[arm] += reward;
        }
    }

    pub fn record_features(&mut self, a: &[f64], reward: f64) {
        if let TaskSummary::Linear { gram, weighted_sum } = self {
            gram.add_outer(a, 1.0);
            for (w, x) in weighted_sum.iter_mut().zip(a) {
                *w += x * reward;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            TaskSummary::PerArm { counts, .. } => counts.iter().all(|&c| c == 0),
            TaskSummary::Linear { gram, .. } => gram.max_abs() == 0.0,
        }
    }

    /// Linear form of the statistics; per-arm counts become a diagonal Gram
    /// matrix over the standard basis.
    pub fn to_linear(&self) -> (Matrix, Vec<f64>) {
        match self {
            TaskSummary::PerArm { counts, sums } => {
                let c: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
                (Matrix::from_diag(&c), sums.clone())
            }
            TaskSummary::Linear { gram, weighted_sum } => (gram.clone(), weighted_sum.clone()),
        }
    }
}

/// Per-arm meta-posterior update from one task.
///
/// Arm `i` gains precision `T_i / (T_i sigma_0i² + sigma²)`; its mean moves
/// toward `B_i / T_i` with that weight. Written in covariance form so that
/// zero meta-variances stay exactly zero.
fn diagonal_meta_update(
    meta: &GaussianMetaPosterior,
    counts: &[u64],
    sums: &[f64],
    sigma_0_var: &[f64],
    noise_sigma: f64,
) -> Result<GaussianMetaPosterior, AgentError> {
    let Covariance::Diagonal(var) = &meta.cov else {
        return Err(AgentError::Unsupported(
            "diagonal update needs a diagonal meta-posterior".into(),
        ));
    };
    let k = meta.dim();
    if counts.len() != k || sums.len() != k || sigma_0_var.len() != k {
        return Err(LinalgError::DimensionMismatch {
            expected: k,
            got: counts.len(),
        }
        .into());
    }
    let noise_var = noise_sigma * noise_sigma;
    let mut mean = meta.mean.clone();
    let mut new_var = var.clone();
    for i in 0..k {
        if counts[i] == 0 {
            continue;
        }
        let t = counts[i] as f64;
        let denom = t * sigma_0_var[i] + noise_var;
        let gain = t / denom;
        let info = sums[i] / denom;
        let shrink = 1.0 + var[i] * gain;
        new_var[i] = var[i] / shrink;
        mean[i] = (meta.mean[i] + var[i] * info) / shrink;
    }
    Ok(GaussianMetaPosterior {
        mean,
        cov: Covariance::Diagonal(new_var),
    })
}

/// Meta-posterior update for a `K`-armed Gaussian bandit task.
pub fn end_task_gaussian(
    meta: &GaussianMetaPosterior,
    summary: &TaskSummary,
    sigma_0: &PsdMatrix,
    noise_sigma: f64,
) -> Result<GaussianMetaPosterior, AgentError> {
    let TaskSummary::PerArm { counts, sums } = summary else {
        return Err(AgentError::Unsupported("per-arm summary expected".into()));
    };
    diagonal_meta_update(meta, counts, sums, &sigma_0.diag(), noise_sigma)
}

/// Meta-posterior update for a semi-bandit task. Counts are the number of
/// rounds each arm was part of the pulled subset; arms with zero task
/// variance gain precision `N / sigma²`.
pub fn end_task_semibandit(
    meta: &GaussianMetaPosterior,
    summary: &TaskSummary,
    sigma_0: &PsdMatrix,
    noise_sigma: f64,
) -> Result<GaussianMetaPosterior, AgentError> {
    end_task_gaussian(meta, summary, sigma_0, noise_sigma)
}

/// Meta-posterior update for a linear-bandit task.
///
/// With `P = G/sigma²` and `b = B/sigma²`, the task contributes precision
/// `P - P (Sigma_0^-1 + P)^-1 P = (I + P Sigma_0)^-1 P` and information
/// `(I + P Sigma_0)^-1 b`. The update is applied in covariance form,
/// `Sigma' = (I + Sigma J)^-1 Sigma` and `mu' = (I + Sigma J)^-1 (mu + Sigma h)`,
/// which needs neither `Sigma_0^-1` nor `Sigma^-1`.
pub fn end_task_linear(
    meta: &GaussianMetaPosterior,
    summary: &TaskSummary,
    sigma_0: &PsdMatrix,
    noise_sigma: f64,
) -> Result<GaussianMetaPosterior, AgentError> {
    let d = meta.dim();
    let (gram, weighted) = summary.to_linear();
    if gram.rows() != d || sigma_0.dim() != d {
        return Err(LinalgError::DimensionMismatch {
            expected: d,
            got: gram.rows(),
        }
        .into());
    }
    if gram.max_abs() == 0.0 {
        return Ok(meta.clone());
    }
    let noise_var = noise_sigma * noise_sigma;
    let p = gram.scale(1.0 / noise_var);
    let b: Vec<f64> = weighted.iter().map(|x| x / noise_var).collect();
    let lhs = Matrix::identity(d).add(&p.matmul(sigma_0.matrix()));
    let info_matrix = PsdMatrix::symmetrized(lhs.solve(&p)?);
    let info = lhs.solve_vec(&b)?;

    let cov = meta.cov.to_matrix();
    let m = Matrix::identity(d).add(&cov.matrix().matmul(info_matrix.matrix()));
    let new_cov = PsdMatrix::symmetrized(m.solve(cov.matrix())?);
    let shifted: Vec<f64> = meta
        .mean
        .iter()
        .zip(cov.matrix().mul_vec(&info))
        .map(|(a, b)| a + b)
        .collect();
    let mean = m.solve_vec(&shifted)?;
    Ok(GaussianMetaPosterior {
        mean,
        cov: Covariance::Dense(new_cov),
    })
}

// ---------------------------------------------------------------------------
// Within-task posterior
// ---------------------------------------------------------------------------

/// Independent per-arm Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalPosterior {
    prior_mean: Vec<f64>,
    prior_var: Vec<f64>,
    counts: Vec<f64>,
    sums: Vec<f64>,
    noise_var: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagonalPosterior {
    pub fn new(prior_mean: Vec<f64>, prior_var: Vec<f64>, noise_sigma: f64) -> Self {
        let k = prior_mean.len();
        Self {
            mean: prior_mean.clone(),
            var: prior_var.clone(),
            prior_mean,
            prior_var,
            counts: vec![0.0; k],
            sums: vec![0.0; k],
            noise_var: noise_sigma * noise_sigma,
        }
    }

    pub fn update_arm(&mut self, arm: usize, reward: f64) {
        self.counts[arm] += 1.0;
        self.sums[arm] += reward;
        let v0 = self.prior_var[arm];
        if v0 <= 0.0 {
            // point-mass prior: data cannot move it
            return;
        }
        let precision = 1.0 / v0 + self.counts[arm] / self.noise_var;
        self.mean[arm] = (self.prior_mean[arm] / v0 + self.sums[arm] / self.noise_var) / precision;
        self.var[arm] = 1.0 / precision;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }
}

/// Full-covariance Gaussian posterior for linear rewards, kept in
/// precision form and refactored after every observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePosterior {
    prior_precision: PsdMatrix,
    prior_info: Vec<f64>,
    gram: Matrix,
    weighted: Vec<f64>,
    noise_var: f64,
    mean: Vec<f64>,
    cov: PsdMatrix,
}

impl DensePosterior {
    pub fn new(prior_mean: Vec<f64>, prior_cov: PsdMatrix, noise_sigma: f64) -> Result<Self, LinalgError> {
        let d = prior_mean.len();
        let prior_precision = spd_inverse(&prior_cov)?;
        let prior_info = prior_precision.matrix().mul_vec(&prior_mean);
        Ok(Self {
            prior_precision,
            prior_info,
            gram: Matrix::zeros(d, d),
            weighted: vec![0.0; d],
            noise_var: noise_sigma * noise_sigma,
            mean: prior_mean,
            cov: prior_cov,
        })
    }

    pub fn update(&mut self, features: &[f64], reward: f64) -> Result<(), LinalgError> {
        self.gram.add_outer(features, 1.0);
        for (w, a) in self.weighted.iter_mut().zip(features) {
            *w += a * reward;
        }
        let precision = self.precision();
        let chol = cholesky(&precision)?;
        let rhs: Vec<f64> = self
            .prior_info
            .iter()
            .zip(&self.weighted)
            .map(|(p, w)| p + w / self.noise_var)
            .collect();
        self.mean = chol.solve(&rhs);
        self.cov = chol.inverse();
        Ok(())
    }

    /// `(Sigma_0 + Sigma_hat)^-1 + sum a aᵀ / sigma²`
    pub fn precision(&self) -> PsdMatrix {
        PsdMatrix::symmetrized(
            self.prior_precision
                .matrix()
                .add(&self.gram.scale(1.0 / self.noise_var)),
        )
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &PsdMatrix {
        &self.cov
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskPosterior {
    Diagonal(DiagonalPosterior),
    Dense(DensePosterior),
}

impl TaskPosterior {
    pub fn new(prior_mean: Vec<f64>, prior_cov: Covariance, noise_sigma: f64) -> Result<Self, LinalgError> {
        Ok(match prior_cov {
            Covariance::Diagonal(v) => TaskPosterior::Diagonal(DiagonalPosterior::new(prior_mean, v, noise_sigma)),
            Covariance::Dense(c) => TaskPosterior::Dense(DensePosterior::new(prior_mean, c, noise_sigma)?),
        })
    }

    pub fn mean(&self) -> &[f64] {
        match self {
            TaskPosterior::Diagonal(p) => p.mean(),
            TaskPosterior::Dense(p) => p.mean(),
        }
    }

    pub fn cov(&self) -> Covariance {
        match self {
            TaskPosterior::Diagonal(p) => Covariance::Diagonal(p.var().to_vec()),
            TaskPosterior::Dense(p) => Covariance::Dense(p.cov().clone()),
        }
    }

    /// Posterior precision matrix (infinite entries for point masses).
    pub fn precision(&self) -> Result<PsdMatrix, LinalgError> {
        match self {
            TaskPosterior::Diagonal(p) => PsdMatrix::diagonal(&p.var().iter().map(|v| 1.0 / v).collect::<Vec<_>>()),
            TaskPosterior::Dense(p) => Ok(p.precision()),
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<Vec<f64>, LinalgError> {
        match self {
            TaskPosterior::Diagonal(p) => Ok(p
                .mean()
                .iter()
                .zip(p.var())
                .map(|(m, v)| m + v.sqrt() * rng.standard_normal())
                .collect()),
            TaskPosterior::Dense(p) => mvn_sample(p.mean(), p.cov(), rng),
        }
    }

    /// Folds one observation in. `features` resolves linear actions.
    pub fn update(
        &mut self,
        action_set: &ActionSet,
        action: &Action,
        observation: &Observation,
    ) -> Result<(), AgentError> {
        for (features, arm, y) in observation_terms(action_set, action, observation)? {
            match self {
                TaskPosterior::Diagonal(p) => {
                    let arm = arm.ok_or_else(|| AgentError::Unsupported("diagonal posterior needs arm ids".into()))?;
                    p.update_arm(arm, y);
                }
                TaskPosterior::Dense(p) => p.update(&features, y)?,
            }
        }
        Ok(())
    }
}

/// One scalar observation: features, the arm it belongs to (if any), reward.
type ObservationTerm = (Vec<f64>, Option<usize>, f64);

/// Expands an observation into its scalar terms.
fn observation_terms(
    action_set: &ActionSet,
    action: &Action,
    observation: &Observation,
) -> Result<Vec<ObservationTerm>, AgentError> {
    let basis = |k: usize, i: usize| {
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        e
    };
    let dim = action_set.dim();
    match (action_set, action, observation) {
        (ActionSet::Arms { count }, Action::Arm(i), Observation::Scalar(y)) if i < count => {
            Ok(vec![(basis(dim, *i), Some(*i), *y)])
        }
        (ActionSet::Linear { .. }, _, Observation::Scalar(y)) => {
            Ok(vec![(action_set.features(action)?.to_vec(), None, *y)])
        }
        (ActionSet::Subsets { .. }, Action::Subset(_), Observation::PerArm(v)) => {
            Ok(v.iter().map(|&(k, y)| (basis(dim, k), Some(k), y)).collect())
        }
        _ => Err(EnvError::InvalidAction(format!("{action:?} / {observation:?} do not match the action set")).into()),
    }
}

/// Standalone posterior update: returns the updated copy.
pub fn update_task_posterior(
    posterior: &TaskPosterior,
    action_set: &ActionSet,
    action: &Action,
    observation: &Observation,
) -> Result<TaskPosterior, AgentError> {
    let mut next = posterior.clone();
    next.update(action_set, action, observation)?;
    Ok(next)
}

/// Samples from the posterior and plays the best action for the sample.
pub fn ts_select(posterior: &TaskPosterior, actions: &ActionSet, rng: &mut RngStream) -> Result<Action, AgentError> {
    let theta = posterior.sample(rng)?;
    Ok(actions.argmax(&theta)?.0)
}

// ---------------------------------------------------------------------------
// Forced exploration
// ---------------------------------------------------------------------------

/// Tasks `{i² + 1 : 0 <= i <= floor(sqrt(m - 1))}` (1-based).
pub fn exploring_tasks(m: usize) -> Vec<usize> {
    (0..).map(|i: usize| i * i + 1).take_while(|&s| s <= m).collect()
}

pub fn is_exploring_task(s: usize, m: usize) -> bool {
    if s == 0 || s > m {
        return false;
    }
    let r = ((s - 1) as f64).sqrt().round() as usize;
    r * r == s - 1
}

/// Disjoint size-`budget` subsets covering all arms; the last one wraps
/// around to arm 0.
pub fn covering_subsets(arms: usize, budget: usize) -> Vec<Action> {
    let count = arms.div_ceil(budget);
    (0..count)
        .map(|c| {
            let mut s: Vec<usize> = (0..budget).map(|j| (c * budget + j) % arms).collect();
            s.sort_unstable();
            s.dedup();
            Action::Subset(s)
        })
        .collect()
}

/// `d` members of a linear action set spanning all directions.
///
/// Picks greedily by largest `aᵀ (G + eps I)^-1 a`, the log-determinant gain
/// of the running Gram matrix `G`. Falls back to `0.5 e_i` when the picked
/// set has `lambda_min(G) < 1e-6`.
pub fn linear_exploration_actions(actions: &[Vec<f64>]) -> Vec<Action> {
    let d = actions.first().map_or(0, Vec::len);
    let fallback = || {
        (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = FALLBACK_EXPLORATION_SCALE;
                Action::Vector(e)
            })
            .collect()
    };
    if actions.len() < d {
        return fallback();
    }
    let mut gram = Matrix::zeros(d, d);
    let mut chosen: Vec<usize> = Vec::with_capacity(d);
    for _ in 0..d {
        let reg = PsdMatrix::symmetrized(gram.add(&Matrix::identity(d).scale(1e-9)));
        let Ok(chol) = cholesky(&reg) else {
            return fallback();
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in actions.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let gain: f64 = a.iter().zip(chol.solve(a)).map(|(x, y)| x * y).sum();
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let Some((i, _)) = best else { break };
        chosen.push(i);
        gram.add_outer(&actions[i], 1.0);
    }
    let lambda_min = crate::gauss_core::min_eigenvalue(&PsdMatrix::symmetrized(gram));
    if lambda_min < EXPLORATION_MIN_EIGENVALUE {
        return fallback();
    }
    chosen.into_iter().map(Action::Arm).collect()
}

/// Exploration actions for an action set: every arm, a covering family of
/// subsets, or `d` spanning feature vectors.
pub fn exploration_actions(action_set: &ActionSet) -> Vec<Action> {
    match action_set {
        ActionSet::Arms { count } => (0..*count).map(Action::Arm).collect(),
        ActionSet::Subsets { arms, budget } => covering_subsets(*arms, *budget),
        ActionSet::Linear { actions } => linear_exploration_actions(actions),
        ActionSet::RandomLinear { .. } => Vec::new(),
    }
}

/// Actions prescribed for the opening rounds of task `s` (1-based).
pub fn forced_exploration_plan(s: usize, m: usize, action_set: &ActionSet) -> Vec<Action> {
    if is_exploring_task(s, m) {
        exploration_actions(action_set)
    } else {
        Vec::new()
    }
}

/// `lambda_min(sum a aᵀ)` over the exploration actions.
pub fn exploration_eta(action_set: &ActionSet, plan: &[Action]) -> Result<f64, EnvError> {
    let d = action_set.dim();
    let mut gram = Matrix::zeros(d, d);
    for a in plan {
        match (action_set, a) {
            (ActionSet::Linear { .. }, _) => gram.add_outer(action_set.features(a)?, 1.0),
            (_, Action::Arm(i)) => gram[(*i, *i)] += 1.0,
            (_, Action::Subset(s)) => s.iter().for_each(|&k| gram[(k, k)] += 1.0),
            _ => return Err(EnvError::InvalidAction(format!("{a:?}"))),
        }
    }
    Ok(crate::gauss_core::min_eigenvalue(&PsdMatrix::symmetrized(gram)))
}

// ---------------------------------------------------------------------------
// Beta mixtures
// ---------------------------------------------------------------------------

/// Normalizes log-weights in place with log-sum-exp.
pub fn normalize_log_weights(log_w: &mut [f64]) {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return;
    }
    let lse = max + log_w.iter().map(|w| (w - max).exp()).sum::<f64>().ln();
    log_w.iter_mut().for_each(|w| *w -= lse);
}

fn softmax(log_w: &[f64]) -> Vec<f64> {
    let mut w = log_w.to_vec();
    normalize_log_weights(&mut w);
    w.into_iter().map(f64::exp).collect()
}

/// Categorical belief over which candidate prior generated the tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureMetaPosterior {
    pub log_weights: Vec<f64>,
    pub components: Vec<Vec<BetaParams>>,
}

impl MixtureMetaPosterior {
    pub fn from_prior(prior: &MixturePrior) -> Self {
        Self {
            log_weights: prior.weights.iter().map(|w| w.ln()).collect(),
            components: prior.components.clone(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.log_weights)
    }
}

/// Per-arm success and failure counts of one task.
pub fn bernoulli_counts(arms: usize, history: &[(usize, bool)]) -> (Vec<f64>, Vec<f64>) {
    let mut succ = vec![0.0; arms];
    let mut fail = vec![0.0; arms];
    for &(arm, hit) in history {
        if hit {
            succ[arm] += 1.0;
        } else {
            fail[arm] += 1.0;
        }
    }
    (succ, fail)
}

/// Log marginal likelihood of per-arm counts under a product of Betas:
/// `sum_k ln B(a_k + s_k, b_k + f_k) - ln B(a_k, b_k)`.
pub fn log_marginal_likelihood(component: &[BetaParams], succ: &[f64], fail: &[f64]) -> f64 {
    component
        .iter()
        .zip(succ.iter().zip(fail))
        .filter(|(_, (s, f))| **s + **f > 0.0)
        .map(|(p, (s, f))| ln_beta(p.alpha + s, p.beta + f) - ln_beta(p.alpha, p.beta))
        .sum()
}

/// Meta-posterior update after a finished task of `(arm, success)` pulls.
pub fn mixture_update(meta: &MixtureMetaPosterior, history: &[(usize, bool)]) -> MixtureMetaPosterior {
    if history.is_empty() {
        return meta.clone();
    }
    let arms = meta.components.first().map_or(0, Vec::len);
    let (succ, fail) = bernoulli_counts(arms, history);
    let mut log_weights: Vec<f64> = meta
        .log_weights
        .iter()
        .zip(&meta.components)
        .map(|(w, c)| w + log_marginal_likelihood(c, &succ, &fail))
        .collect();
    normalize_log_weights(&mut log_weights);
    MixtureMetaPosterior {
        log_weights,
        components: meta.components.clone(),
    }
}

/// Within-task posterior under a mixture prior: component log-weights plus
/// the shared per-arm counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTaskState {
    pub log_weights: Vec<f64>,
    pub successes: Vec<f64>,
    pub failures: Vec<f64>,
}

impl MixtureTaskState {
    pub fn new(log_weights: Vec<f64>, arms: usize) -> Self {
        Self {
            log_weights,
            successes: vec![0.0; arms],
            failures: vec![0.0; arms],
        }
    }

    /// Reweights each component by its predictive probability of the
    /// outcome, then counts it.
    pub fn observe(&mut self, components: &[Vec<BetaParams>], arm: usize, success: bool) {
        let (s, f) = (self.successes[arm], self.failures[arm]);
        for (w, c) in self.log_weights.iter_mut().zip(components) {
            let p = c[arm];
            let hit = (p.alpha + s) / (p.alpha + p.beta + s + f);
            *w += if success { hit.ln() } else { (1.0 - hit).ln() };
        }
        normalize_log_weights(&mut self.log_weights);
        if success {
            self.successes[arm] += 1.0;
        } else {
            self.failures[arm] += 1.0;
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.log_weights)
    }
}

/// Samples a component from the within-task weights, then per-arm means
/// from its Beta posterior, and returns the best arm.
pub fn mixture_ts_select(components: &[Vec<BetaParams>], state: &MixtureTaskState, rng: &mut RngStream) -> usize {
    let j = sample_categorical(&state.weights(), rng);
    let theta: Vec<f64> = components[j]
        .iter()
        .enumerate()
        .map(|(k, p)| {
            sample_beta(
                BetaParams::new(p.alpha + state.successes[k], p.beta + state.failures[k]),
                rng,
            )
        })
        .collect();
    argmax_index(&theta)
}

// ---------------------------------------------------------------------------
// Agents
// ---------------------------------------------------------------------------

/// Prior handed to the within-task posterior at the start of a task.
pub fn task_prior(
    policy: Policy,
    meta: &GaussianMetaPosterior,
    hierarchy: &GaussianHierarchy,
    mu_star: Option<&[f64]>,
    diagonal: bool,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Covariance), AgentError> {
    let wrap = |m: &PsdMatrix| {
        if diagonal {
            Covariance::Diagonal(m.diag())
        } else {
            Covariance::Dense(m.clone())
        }
    };
    Ok(match policy {
        Policy::AgnosticTs => (hierarchy.mu_q.clone(), wrap(&hierarchy.sigma_q.add(&hierarchy.sigma_0))),
        Policy::OracleTs => {
            let mu = mu_star.ok_or_else(|| AgentError::Unsupported("oracle needs the true meta-parameter".into()))?;
            (mu.to_vec(), wrap(&hierarchy.sigma_0))
        }
        Policy::MetaTs => {
            let sampled = match &meta.cov {
                Covariance::Diagonal(v) => meta
                    .mean
                    .iter()
                    .zip(v)
                    .map(|(m, v)| m + v.sqrt() * rng.standard_normal())
                    .collect(),
                Covariance::Dense(c) => mvn_sample(&meta.mean, c, rng)?,
            };
            (sampled, wrap(&hierarchy.sigma_0))
        }
        Policy::AdaTs | Policy::AdaTsForced => {
            let cov = match &meta.cov {
                Covariance::Diagonal(v) => {
                    Covariance::Diagonal(v.iter().zip(hierarchy.sigma_0.diag()).map(|(a, b)| a + b).collect())
                }
                Covariance::Dense(c) => wrap(&c.add(&hierarchy.sigma_0)),
            };
            (meta.mean.clone(), cov)
        }
        Policy::MisassignedTs => {
            return Err(AgentError::Unsupported(
                "misassigned-ts needs a Beta-mixture environment".into(),
            ))
        }
    })
}

/// Thompson sampling agent for Gaussian families.
#[derive(Debug, Clone)]
pub struct GaussianAgent {
    kind: AgentKind,
    action_set: ActionSet,
    hierarchy: GaussianHierarchy,
    noise_sigma: f64,
    diagonal: bool,
    tasks: usize,
    mu_star: Option<Vec<f64>>,
    meta: GaussianMetaPosterior,
    exploration: Vec<Action>,
    posterior: Option<TaskPosterior>,
    summary: TaskSummary,
    forced: VecDeque<Action>,
}

impl GaussianAgent {
    pub fn new(
        kind: AgentKind,
        spec: &EnvironmentSpec,
        meta_draw: &MetaDraw,
        tasks: usize,
    ) -> Result<Self, AgentError> {
        let belief = scale_meta_prior(spec, kind.meta_prior_scale);
        let hierarchy = belief
            .gaussian()
            .cloned()
            .ok_or_else(|| AgentError::Unsupported("Gaussian agent needs a Gaussian prior".into()))?;
        if matches!(spec.action_set, ActionSet::RandomLinear { .. }) {
            return Err(EnvError::InvalidSpec("random action set was not realized".into()).into());
        }
        if kind.policy == Policy::MisassignedTs {
            return Err(AgentError::Unsupported(
                "misassigned-ts needs a Beta-mixture environment".into(),
            ));
        }
        let diagonal = matches!(spec.family(), Family::GaussianArms | Family::SemiBandit)
            && hierarchy.sigma_q.is_diagonal()
            && hierarchy.sigma_0.is_diagonal();
        let summary = if spec.family() == Family::LinearGaussian {
            TaskSummary::linear(spec.dim())
        } else {
            TaskSummary::per_arm(spec.dim())
        };
        let exploration = if kind.policy == Policy::AdaTsForced {
            exploration_actions(&spec.action_set)
        } else {
            Vec::new()
        };
        Ok(Self {
            kind,
            action_set: spec.action_set.clone(),
            meta: GaussianMetaPosterior::from_prior(&hierarchy, diagonal),
            hierarchy,
            noise_sigma: spec.noise_sigma,
            diagonal,
            tasks,
            mu_star: meta_draw.as_vector().map(<[f64]>::to_vec),
            exploration,
            posterior: None,
            summary,
            forced: VecDeque::new(),
        })
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn meta(&self) -> &GaussianMetaPosterior {
        &self.meta
    }

    pub fn posterior(&self) -> Option<&TaskPosterior> {
        self.posterior.as_ref()
    }

    pub fn exploration(&self) -> &[Action] {
        &self.exploration
    }

    /// Starts task `s` (1-based) and returns its prior.
    pub fn begin_task(&mut self, s: usize, rng: &mut RngStream) -> Result<&TaskPosterior, AgentError> {
        let (mean, cov) = task_prior(
            self.kind.policy,
            &self.meta,
            &self.hierarchy,
            self.mu_star.as_deref(),
            self.diagonal,
            rng,
        )?;
        self.summary = match self.summary {
            TaskSummary::PerArm { .. } => TaskSummary::per_arm(self.meta.dim()),
            TaskSummary::Linear { .. } => TaskSummary::linear(self.meta.dim()),
        };
        self.forced = if is_exploring_task(s, self.tasks) {
            self.exploration.iter().cloned().collect()
        } else {
            VecDeque::new()
        };
        Ok(self.posterior.insert(TaskPosterior::new(mean, cov, self.noise_sigma)?))
    }

    pub fn select(&mut self, rng: &mut RngStream) -> Result<Action, AgentError> {
        if let Some(a) = self.forced.pop_front() {
            return Ok(a);
        }
        let posterior = self
            .posterior
            .as_ref()
            .ok_or(AgentError::State("select before begin_task"))?;
        ts_select(posterior, &self.action_set, rng)
    }

    pub fn observe(&mut self, action: &Action, observation: &Observation) -> Result<(), AgentError> {
        let posterior = self
            .posterior
            .as_mut()
            .ok_or(AgentError::State("observe before begin_task"))?;
        posterior.update(&self.action_set, action, observation)?;
        for (features, arm, y) in observation_terms(&self.action_set, action, observation)? {
            match arm {
                Some(k) if matches!(self.summary, TaskSummary::PerArm { .. }) => self.summary.record_arm(k, y),
                _ => self.summary.record_features(&features, y),
            }
        }
        Ok(())
    }

    pub fn end_task(&mut self) -> Result<(), AgentError> {
        self.posterior = None;
        if !self.kind.policy.learns_meta() {
            return Ok(());
        }
        self.meta = if self.diagonal {
            match self.action_set {
                ActionSet::Subsets { .. } => {
                    end_task_semibandit(&self.meta, &self.summary, &self.hierarchy.sigma_0, self.noise_sigma)?
                }
                _ => end_task_gaussian(&self.meta, &self.summary, &self.hierarchy.sigma_0, self.noise_sigma)?,
            }
        } else {
            end_task_linear(&self.meta, &self.summary, &self.hierarchy.sigma_0, self.noise_sigma)?
        };
        Ok(())
    }
}

/// Thompson sampling agent for Bernoulli bandits with a Beta-mixture prior.
#[derive(Debug, Clone)]
pub struct MixtureAgent {
    kind: AgentKind,
    arms: usize,
    tasks: usize,
    prior: MixtureMetaPosterior,
    meta: MixtureMetaPosterior,
    true_component: Option<usize>,
    state: Option<MixtureTaskState>,
    history: Vec<(usize, bool)>,
    forced: VecDeque<Action>,
}

impl MixtureAgent {
    pub fn new(
        kind: AgentKind,
        spec: &EnvironmentSpec,
        meta_draw: &MetaDraw,
        tasks: usize,
    ) -> Result<Self, AgentError> {
        let mixture = spec
            .mixture()
            .ok_or_else(|| AgentError::Unsupported("mixture agent needs a Beta-mixture prior".into()))?;
        let meta = MixtureMetaPosterior::from_prior(mixture);
        Ok(Self {
            kind,
            arms: spec.dim(),
            tasks,
            prior: meta.clone(),
            meta,
            true_component: meta_draw.as_component(),
            state: None,
            history: Vec::new(),
            forced: VecDeque::new(),
        })
    }

    pub fn meta(&self) -> &MixtureMetaPosterior {
        &self.meta
    }

    pub fn task_state(&self) -> Option<&MixtureTaskState> {
        self.state.as_ref()
    }

    fn single(&self, j: usize) -> Vec<f64> {
        (0..self.meta.components.len())
            .map(|i| if i == j { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }

    pub fn begin_task(&mut self, s: usize, rng: &mut RngStream) -> Result<&MixtureTaskState, AgentError> {
        let components = self.meta.components.len();
        let truth = || {
            self.true_component
                .ok_or_else(|| AgentError::Unsupported("oracle needs the true component".into()))
        };
        let log_weights = match self.kind.policy {
            Policy::AdaTs | Policy::AdaTsForced => self.meta.log_weights.clone(),
            Policy::AgnosticTs => self.prior.log_weights.clone(),
            Policy::OracleTs => self.single(truth()?),
            Policy::MisassignedTs => self.single((truth()? + 1) % components),
            Policy::MetaTs => self.single(sample_categorical(&self.meta.weights(), rng)),
        };
        self.history.clear();
        self.forced = if self.kind.policy == Policy::AdaTsForced && is_exploring_task(s, self.tasks) {
            (0..self.arms).map(Action::Arm).collect()
        } else {
            VecDeque::new()
        };
        Ok(self.state.insert(MixtureTaskState::new(log_weights, self.arms)))
    }

    pub fn select(&mut self, rng: &mut RngStream) -> Result<Action, AgentError> {
        if let Some(a) = self.forced.pop_front() {
            return Ok(a);
        }
        let state = self
            .state
            .as_ref()
            .ok_or(AgentError::State("select before begin_task"))?;
        Ok(Action::Arm(mixture_ts_select(&self.meta.components, state, rng)))
    }

    pub fn observe(&mut self, action: &Action, observation: &Observation) -> Result<(), AgentError> {
        let state = self
            .state
            .as_mut()
            .ok_or(AgentError::State("observe before begin_task"))?;
        let (Action::Arm(arm), Observation::Scalar(y)) = (action, observation) else {
            return Err(EnvError::InvalidAction(format!("{action:?} / {observation:?}")).into());
        };
        if *arm >= self.arms {
            return Err(EnvError::InvalidAction(format!("arm {arm} out of range")).into());
        }
        let hit = *y > 0.5;
        state.observe(&self.meta.components, *arm, hit);
        self.history.push((*arm, hit));
        Ok(())
    }

    pub fn end_task(&mut self) -> Result<(), AgentError> {
        self.state = None;
        if self.kind.policy.learns_meta() {
            self.meta = mixture_update(&self.meta, &self.history);
        }
        Ok(())
    }
}

/// Any agent the harness can drive.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Agent {
    Gaussian(GaussianAgent),
    Mixture(MixtureAgent),
}

impl Agent {
    /// Builds the agent for a realized environment. `meta_draw` is only read
    /// by oracle-style policies.
    pub fn new(
        kind: AgentKind,
        spec: &EnvironmentSpec,
        meta_draw: &MetaDraw,
        tasks: usize,
    ) -> Result<Self, AgentError> {
        if !(kind.meta_prior_scale > 0.0) {
            return Err(AgentError::Unsupported("meta-prior scale must be positive".into()));
        }
        match spec.family() {
            Family::BernoulliMixture => Ok(Agent::Mixture(MixtureAgent::new(kind, spec, meta_draw, tasks)?)),
            _ => Ok(Agent::Gaussian(GaussianAgent::new(kind, spec, meta_draw, tasks)?)),
        }
    }

    pub fn begin_task(&mut self, s: usize, rng: &mut RngStream) -> Result<(), AgentError> {
        match self {
            Agent::Gaussian(a) => a.begin_task(s, rng).map(|_| ()),
            Agent::Mixture(a) => a.begin_task(s, rng).map(|_| ()),
        }
    }

    pub fn select(&mut self, rng: &mut RngStream) -> Result<Action, AgentError> {
        match self {
            Agent::Gaussian(a) => a.select(rng),
            Agent::Mixture(a) => a.select(rng),
        }
    }

    pub fn observe(&mut self, action: &Action, observation: &Observation) -> Result<(), AgentError> {
        match self {
            Agent::Gaussian(a) => a.observe(action, observation),
            Agent::Mixture(a) => a.observe(action, observation),
        }
    }

    pub fn end_task(&mut self) -> Result<(), AgentError> {
        match self {
            Agent::Gaussian(a) => a.end_task(),
            Agent::Mixture(a) => a.end_task(),
        }
    }
}

/// Euclidean norm helper re-exported for bound inputs.
pub fn feature_norm(a: &[f64]) -> f64 {
    norm(a)
}
