//! Generative model: meta-parameter, per-task instances, rewards and regret.
//!
//! A meta-parameter is drawn once per run (a Gaussian vector, or a component
//! index for Beta mixtures). Each task then draws its own instance from the
//! task prior it parameterizes, and rewards are drawn per pull.

use crate::gauss_core::{mvn_sample, LinalgError, PsdMatrix, RngStream};
use rand_distr::{Beta, Distribution};
use thiserror::Error;

/// Bernoulli means drawn from a Beta prior are clamped into this interval.
pub const BERNOULLI_CLAMP: f64 = 1e-6;

const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid environment: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    GaussianArms,
    LinearGaussian,
    SemiBandit,
    BernoulliMixture,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSet {
    /// `count` independent arms.
    Arms { count: usize },
    /// Explicit feature vectors, each with norm at most one.
    Linear { actions: Vec<Vec<f64>> },
    /// Placeholder resolved per run: `count` vectors uniform on
    /// `[-half_width, half_width]^dim`, restricted to the unit ball.
    RandomLinear { count: usize, dim: usize, half_width: f64 },
    /// All subsets of exactly `budget` arms out of `arms`.
    Subsets { arms: usize, budget: usize },
}

impl ActionSet {
    /// Dimension of the parameter vector the action set acts on.
    pub fn dim(&self) -> usize {
        match self {
            ActionSet::Arms { count } => *count,
            ActionSet::Linear { actions } => actions.first().map_or(0, Vec::len),
            ActionSet::RandomLinear { dim, .. } => *dim,
            ActionSet::Subsets { arms, .. } => *arms,
        }
    }

    /// Number of actions, `|A|`. For subsets this is `C(K, L)`.
    pub fn len(&self) -> usize {
        match self {
            ActionSet::Arms { count } => *count,
            ActionSet::Linear { actions } => actions.len(),
            ActionSet::RandomLinear { count, .. } => *count,
            ActionSet::Subsets { arms, budget } => binomial(*arms, *budget),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Resolves random action sets; other variants are returned unchanged.
    pub fn realize(&self, rng: &mut RngStream) -> ActionSet {
        match self {
            ActionSet::RandomLinear { count, dim, half_width } => {
                let mut actions = Vec::with_capacity(*count);
                while actions.len() < *count {
                    let a: Vec<f64> = (0..*dim).map(|_| (2.0 * rng.uniform() - 1.0) * half_width).collect();
                    if norm(&a) <= 1.0 {
                        actions.push(a);
                    }
                }
                ActionSet::Linear { actions }
            }
            other => other.clone(),
        }
    }

    /// Features of a linear action (explicit index or injected vector).
    pub fn features<'a>(&'a self, action: &'a Action) -> Result<&'a [f64], EnvError> {
        match (self, action) {
            (ActionSet::Linear { actions }, Action::Arm(i)) => actions
                .get(*i)
                .map(Vec::as_slice)
                .ok_or_else(|| EnvError::InvalidAction(format!("action index {i} out of range"))),
            (ActionSet::Linear { .. }, Action::Vector(v)) => {
                if v.len() != self.dim() {
                    return Err(EnvError::InvalidAction("feature dimension mismatch".into()));
                }
                if norm(v) > 1.0 + NORM_SLACK {
                    return Err(EnvError::InvalidAction("feature vector norm exceeds 1".into()));
                }
                Ok(v)
            }
            _ => Err(EnvError::InvalidAction(format!(
                "{action:?} has no feature vector here"
            ))),
        }
    }

    /// True mean reward of `action` under instance parameters `theta`.
    pub fn mean_reward(&self, theta: &[f64], action: &Action) -> Result<f64, EnvError> {
        match (self, action) {
            (ActionSet::Arms { count }, Action::Arm(i)) if i < count => Ok(theta[*i]),
            (ActionSet::Linear { .. }, _) => Ok(dot(self.features(action)?, theta)),
            (ActionSet::Subsets { .. }, Action::Subset(arms)) => {
                self.check_subset(arms)?;
                Ok(arms.iter().map(|&k| theta[k]).sum())
            }
            (ActionSet::RandomLinear { .. }, _) => {
                Err(EnvError::InvalidSpec("random action set was not realized".into()))
            }
            _ => Err(EnvError::InvalidAction(format!("{action:?} not in action set"))),
        }
    }

    fn check_subset(&self, arms: &[usize]) -> Result<(), EnvError> {
        let ActionSet::Subsets { arms: k, budget } = self else {
            return Err(EnvError::InvalidAction("not a subset action set".into()));
        };
        if arms.len() != *budget {
            return Err(EnvError::InvalidAction(format!(
                "subset has {} arms, budget is {budget}",
                arms.len()
            )));
        }
        let mut seen = vec![false; *k];
        for &a in arms {
            if a >= *k || seen[a] {
                return Err(EnvError::InvalidAction(format!("bad subset {arms:?}")));
            }
            seen[a] = true;
        }
        Ok(())
    }

    /// Best action for a parameter vector; ties go to the lowest index.
    pub fn argmax(&self, theta: &[f64]) -> Result<(Action, f64), EnvError> {
        match self {
            ActionSet::Arms { count } => {
                let i = argmax_index(&theta[..*count]);
                Ok((Action::Arm(i), theta[i]))
            }
            ActionSet::Linear { actions } => {
                let values: Vec<f64> = actions.iter().map(|a| dot(a, theta)).collect();
                let i = argmax_index(&values);
                Ok((Action::Arm(i), values[i]))
            }
            ActionSet::Subsets { arms, budget } => {
                let top = top_l(&theta[..*arms], *budget);
                let value = top.iter().map(|&k| theta[k]).sum();
                Ok((Action::Subset(top), value))
            }
            ActionSet::RandomLinear { .. } => Err(EnvError::InvalidSpec("random action set was not realized".into())),
        }
    }
}

/// Indices of the `l` largest entries (ties to lower index), sorted ascending.
pub fn top_l(values: &[f64], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(l);
    idx.sort_unstable();
    idx
}

/// First index of the maximum value.
pub fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Arm index, or index into a linear action list.
    Arm(usize),
    /// Sorted arm subset (semi-bandit).
    Subset(Vec<usize>),
    /// Feature vector outside the listed actions (forced-exploration fallback).
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Scalar(f64),
    /// Semi-bandit feedback keyed by arm id, in subset order.
    PerArm(Vec<(usize, f64)>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }
}

/// Gaussian meta-prior `N(mu_q, sigma_q)` over the mean of the task prior
/// `N(mu, sigma_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHierarchy {
    pub mu_q: Vec<f64>,
    pub sigma_q: PsdMatrix,
    pub sigma_0: PsdMatrix,
}

/// Finite set of candidate per-arm Beta priors with categorical weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    /// `components[j][k]` is the Beta prior of arm `k` under component `j`.
    pub components: Vec<Vec<BetaParams>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Gaussian(GaussianHierarchy),
    BetaMixture(MixturePrior),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    pub prior: Prior,
    /// Reward noise standard deviation (Gaussian families).
    pub noise_sigma: f64,
    pub action_set: ActionSet,
}

impl EnvironmentSpec {
    /// Isotropic `K`-armed Gaussian bandit with `mu_q = 0`.
    pub fn gaussian_arms(arms: usize, sigma_q: f64, sigma_0: f64, noise: f64) -> Result<Self, EnvError> {
        Self::new(
            Prior::Gaussian(GaussianHierarchy {
                mu_q: vec![0.0; arms],
                sigma_q: PsdMatrix::scaled_identity(arms, sigma_q * sigma_q),
                sigma_0: PsdMatrix::scaled_identity(arms, sigma_0 * sigma_0),
            }),
            noise,
            ActionSet::Arms { count: arms },
        )
    }

    /// Isotropic linear bandit with `mu_q = 0` over the given action set.
    pub fn linear(action_set: ActionSet, sigma_q: f64, sigma_0: f64, noise: f64) -> Result<Self, EnvError> {
        let d = action_set.dim();
        Self::new(
            Prior::Gaussian(GaussianHierarchy {
                mu_q: vec![0.0; d],
                sigma_q: PsdMatrix::scaled_identity(d, sigma_q * sigma_q),
                sigma_0: PsdMatrix::scaled_identity(d, sigma_0 * sigma_0),
            }),
            noise,
            action_set,
        )
    }

    /// Semi-bandit with per-arm prior widths (standard deviations).
    pub fn semibandit(budget: usize, sigma_q: &[f64], sigma_0: &[f64], noise: f64) -> Result<Self, EnvError> {
        let k = sigma_q.len();
        let sq: Vec<f64> = sigma_q.iter().map(|s| s * s).collect();
        let s0: Vec<f64> = sigma_0.iter().map(|s| s * s).collect();
        Self::new(
            Prior::Gaussian(GaussianHierarchy {
                mu_q: vec![0.0; k],
                sigma_q: PsdMatrix::diagonal(&sq)?,
                sigma_0: PsdMatrix::diagonal(&s0)?,
            }),
            noise,
            ActionSet::Subsets { arms: k, budget },
        )
    }

    pub fn bernoulli_mixture(components: Vec<Vec<BetaParams>>, weights: Vec<f64>) -> Result<Self, EnvError> {
        let arms = components.first().map_or(0, Vec::len);
        Self::new(
            Prior::BetaMixture(MixturePrior { components, weights }),
            1.0,
            ActionSet::Arms { count: arms },
        )
    }

    pub fn new(prior: Prior, noise_sigma: f64, action_set: ActionSet) -> Result<Self, EnvError> {
        let spec = Self {
            prior,
            noise_sigma,
            action_set,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn family(&self) -> Family {
        match (&self.prior, &self.action_set) {
            (Prior::BetaMixture(_), _) => Family::BernoulliMixture,
            (Prior::Gaussian(_), ActionSet::Arms { .. }) => Family::GaussianArms,
            (Prior::Gaussian(_), ActionSet::Subsets { .. }) => Family::SemiBandit,
            (Prior::Gaussian(_), _) => Family::LinearGaussian,
        }
    }

    /// Parameter dimension: `K` for arm-indexed families, `d` for linear.
    pub fn dim(&self) -> usize {
        self.action_set.dim()
    }

    pub fn gaussian(&self) -> Option<&GaussianHierarchy> {
        match &self.prior {
            Prior::Gaussian(g) => Some(g),
            Prior::BetaMixture(_) => None,
        }
    }

    pub fn mixture(&self) -> Option<&MixturePrior> {
        match &self.prior {
            Prior::BetaMixture(m) => Some(m),
            Prior::Gaussian(_) => None,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidSpec(m));
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise sigma must be positive, got {}", self.noise_sigma));
        }
        let d = self.dim();
        if d == 0 {
            return bad("empty action set".into());
        }
        match &self.action_set {
            ActionSet::Linear { actions } => {
                for (i, a) in actions.iter().enumerate() {
                    if a.len() != d {
                        return bad(format!("action {i} has dimension {}, expected {d}", a.len()));
                    }
                    if norm(a) > 1.0 + NORM_SLACK {
                        return bad(format!("action {i} has norm {} > 1", norm(a)));
                    }
                }
            }
            ActionSet::RandomLinear { count, half_width, .. } => {
                if *count == 0 || !(*half_width > 0.0) {
                    return bad("random action set needs count > 0 and half_width > 0".into());
                }
            }
            ActionSet::Subsets { arms, budget } => {
                if *budget == 0 || budget > arms {
                    return bad(format!("budget {budget} must be in 1..={arms}"));
                }
            }
            ActionSet::Arms { .. } => {}
        }
        match &self.prior {
            Prior::Gaussian(g) => {
                if g.mu_q.len() != d || g.sigma_q.dim() != d || g.sigma_0.dim() != d {
                    return bad(format!(
                        "prior dimensions ({}, {}, {}) disagree with action dimension {d}",
                        g.mu_q.len(),
                        g.sigma_q.dim(),
                        g.sigma_0.dim()
                    ));
                }
                let arm_indexed = matches!(self.action_set, ActionSet::Arms { .. } | ActionSet::Subsets { .. });
                if arm_indexed && !g.sigma_0.is_diagonal() {
                    return bad("task covariance must be diagonal for arm-indexed families".into());
                }
            }
            Prior::BetaMixture(m) => {
                if !matches!(self.action_set, ActionSet::Arms { .. }) {
                    return bad("Beta mixtures need a plain arm action set".into());
                }
                if m.components.is_empty() || m.components.len() != m.weights.len() {
                    return bad("mixture needs one weight per component".into());
                }
                if m.components.iter().any(|c| c.len() != d) {
                    return bad(format!("every component needs {d} per-arm Beta priors"));
                }
                if m.components.iter().flatten().any(|p| !(p.alpha > 0.0 && p.beta > 0.0)) {
                    return bad("Beta parameters must be positive".into());
                }
                if m.weights.iter().any(|w| *w < 0.0) {
                    return bad("mixture weights must be non-negative".into());
                }
                let total: f64 = m.weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return bad(format!("mixture weights sum to {total}, not 1"));
                }
            }
        }
        Ok(())
    }

    /// Copy with random action sets resolved.
    pub fn realize(&self, rng: &mut RngStream) -> EnvironmentSpec {
        EnvironmentSpec {
            prior: self.prior.clone(),
            noise_sigma: self.noise_sigma,
            action_set: self.action_set.realize(rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetaDraw {
    Vector(Vec<f64>),
    Component(usize),
}

impl MetaDraw {
    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            MetaDraw::Vector(v) => Some(v),
            MetaDraw::Component(_) => None,
        }
    }

    pub fn as_component(&self) -> Option<usize> {
        match self {
            MetaDraw::Component(j) => Some(*j),
            MetaDraw::Vector(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub theta: Vec<f64>,
    pub optimal_action: Action,
    pub optimal_value: f64,
}

impl TaskInstance {
    pub fn new(action_set: &ActionSet, theta: Vec<f64>) -> Result<Self, EnvError> {
        let (optimal_action, optimal_value) = action_set.argmax(&theta)?;
        Ok(Self {
            theta,
            optimal_action,
            optimal_value,
        })
    }

    /// 64-bit FNV-1a digest of the instance parameters.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.theta {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Draws the meta-parameter: `mu* ~ N(mu_q, sigma_q)`, or a mixture component.
pub fn sample_meta_parameter(spec: &EnvironmentSpec, rng: &mut RngStream) -> Result<MetaDraw, EnvError> {
    match &spec.prior {
        Prior::Gaussian(g) => Ok(MetaDraw::Vector(mvn_sample(&g.mu_q, &g.sigma_q, rng)?)),
        Prior::BetaMixture(m) => Ok(MetaDraw::Component(sample_categorical(&m.weights, rng))),
    }
}

/// Index drawn with probability proportional to `weights`.
pub fn sample_categorical(weights: &[f64], rng: &mut RngStream) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = j;
        }
        acc += w;
        if u < acc && w > 0.0 {
            return j;
        }
    }
    last_positive
}

pub fn sample_beta(p: BetaParams, rng: &mut RngStream) -> f64 {
    // Parameters are validated positive, so construction cannot fail.
    let dist = Beta::new(p.alpha, p.beta).expect("positive Beta parameters");
    dist.sample(rng)
}

/// Draws one task instance given the meta-parameter.
pub fn sample_task(spec: &EnvironmentSpec, meta: &MetaDraw, rng: &mut RngStream) -> Result<TaskInstance, EnvError> {
    let theta = match (&spec.prior, meta) {
        (Prior::Gaussian(g), MetaDraw::Vector(mu)) => {
            if mu.len() != g.mu_q.len() {
                return Err(EnvError::InvalidSpec("meta-parameter dimension mismatch".into()));
            }
            mvn_sample(mu, &g.sigma_0, rng)?
        }
        (Prior::BetaMixture(m), MetaDraw::Component(j)) => {
            let comp = m
                .components
                .get(*j)
                .ok_or_else(|| EnvError::InvalidSpec(format!("component {j} out of range")))?;
            comp.iter()
                .map(|&p| sample_beta(p, rng).clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP))
                .collect()
        }
        _ => return Err(EnvError::InvalidSpec("meta-parameter does not match prior".into())),
    };
    TaskInstance::new(&spec.action_set, theta)
}

/// Draws the stochastic reward of `action`.
pub fn realize_reward(
    spec: &EnvironmentSpec,
    task: &TaskInstance,
    action: &Action,
    rng: &mut RngStream,
) -> Result<Observation, EnvError> {
    let sigma = spec.noise_sigma;
    match (spec.family(), action) {
        (Family::SemiBandit, Action::Subset(arms)) => {
            spec.action_set.check_subset(arms)?;
            Ok(Observation::PerArm(
                arms.iter()
                    .map(|&k| (k, task.theta[k] + sigma * rng.standard_normal()))
                    .collect(),
            ))
        }
        (Family::BernoulliMixture, _) => {
            let p = spec.action_set.mean_reward(&task.theta, action)?;
            Ok(Observation::Scalar(if rng.uniform() < p { 1.0 } else { 0.0 }))
        }
        (Family::SemiBandit, _) => Err(EnvError::InvalidAction(format!("{action:?} is not a subset"))),
        _ => {
            let mean = spec.action_set.mean_reward(&task.theta, action)?;
            Ok(Observation::Scalar(mean + sigma * rng.standard_normal()))
        }
    }
}

/// Gap between the optimal and the chosen action's true mean reward.
pub fn instant_regret(action_set: &ActionSet, task: &TaskInstance, action: &Action) -> Result<f64, EnvError> {
    let value = action_set.mean_reward(&task.theta, action)?;
    Ok((task.optimal_value - value).max(0.0))
}
