//! Closed-form Bayes-regret upper bounds and mutual-information caps.
//!
//! All functions are pure; inputs are validated and every term of a total
//! is reported separately so callers can print or inspect the breakdown.

use crate::agents::{exploration_actions, exploration_eta};
use crate::gauss_core::{max_eigenvalue, min_eigenvalue};
use crate::hierarchy::{ActionSet, EnvironmentSpec, Family};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("invalid bound input: {0}")]
    InvalidInput(String),
}

type Result<T> = std::result::Result<T, BoundError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(BoundError::InvalidInput(msg.into()))
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        invalid(format!("{name} must be positive and finite, got {x}"))
    }
}

fn check_non_negative(name: &str, x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        invalid(format!("{name} must be non-negative and finite, got {x}"))
    }
}

fn check_count(name: &str, x: usize) -> Result<()> {
    if x >= 1 {
        Ok(())
    } else {
        invalid(format!("{name} must be at least 1"))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        invalid(format!("delta must lie in (0, 1], got {delta}"))
    }
}

/// `x / log(1 + x / s2)`, continuous at `x = 0` where it equals `s2`.
fn width_ratio(x: f64, s2: f64) -> f64 {
    if x == 0.0 {
        s2
    } else {
        x / (x / s2).ln_1p()
    }
}

/// Labeled terms of a regret bound and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundBreakdown {
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
}

impl BoundBreakdown {
    fn new(terms: Vec<(&'static str, f64)>) -> Self {
        let total = terms.iter().map(|(_, v)| v).sum();
        Self { terms, total }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// Inputs for the linear-bandit bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBoundInputs {
    pub tasks: usize,
    pub rounds: usize,
    pub dim: usize,
    pub action_count: usize,
    pub lambda1_sigma_q: f64,
    pub lambda1_sigma_0: f64,
    pub lambda_d_sigma_0: f64,
    pub noise_sigma: f64,
    /// `lambda_min` of the Gram matrix of the exploration actions.
    pub eta: f64,
    pub delta: f64,
    pub mu_star_norm_sq: f64,
    /// `tr(Sigma_q + Sigma_0)`.
    pub trace_terms: f64,
}

impl LinearBoundInputs {
    /// Derives eigenvalues, traces and `eta` from a realized environment.
    /// `‖mu*‖²` is replaced by its prior mean `‖mu_q‖² + tr(Sigma_q)`.
    pub fn from_spec(
        spec: &EnvironmentSpec,
        tasks: usize,
        rounds: usize,
        delta: f64,
        eta: Option<f64>,
    ) -> Result<Self> {
        let g = spec
            .gaussian()
            .ok_or_else(|| BoundError::InvalidInput("bounds need a Gaussian prior".into()))?;
        let action_count = match &spec.action_set {
            ActionSet::RandomLinear { .. } => return invalid("action set must be realized first"),
            set => set.len(),
        };
        let eta = match eta {
            Some(e) => e,
            None => exploration_eta(&spec.action_set, &exploration_actions(&spec.action_set))
                .map_err(|e| BoundError::InvalidInput(e.to_string()))?,
        };
        let mu_sq: f64 = g.mu_q.iter().map(|x| x * x).sum();
        Ok(Self {
            tasks,
            rounds,
            dim: spec.dim(),
            action_count,
            lambda1_sigma_q: max_eigenvalue(&g.sigma_q),
            lambda1_sigma_0: max_eigenvalue(&g.sigma_0),
            lambda_d_sigma_0: min_eigenvalue(&g.sigma_0),
            noise_sigma: spec.noise_sigma,
            eta,
            delta,
            mu_star_norm_sq: mu_sq + g.sigma_q.matrix().trace(),
            trace_terms: g.sigma_q.matrix().trace() + g.sigma_0.matrix().trace(),
        })
    }

    fn validate_common(&self) -> Result<()> {
        check_count("tasks", self.tasks)?;
        check_count("rounds", self.rounds)?;
        check_count("dim", self.dim)?;
        check_count("action_count", self.action_count)?;
        check_non_negative("lambda1_sigma_q", self.lambda1_sigma_q)?;
        check_non_negative("lambda1_sigma_0", self.lambda1_sigma_0)?;
        check_non_negative("lambda_d_sigma_0", self.lambda_d_sigma_0)?;
        check_positive("noise_sigma", self.noise_sigma)?;
        check_non_negative("mu_star_norm_sq", self.mu_star_norm_sq)?;
        check_non_negative("trace_terms", self.trace_terms)?;
        check_delta(self.delta)
    }
}

/// Per-task regret bound when the meta-parameter is known:
///
/// `4 sqrt(l0 / log(1 + l0/σ²) · log(4|A|/δ)) · sqrt(n (d/2) log(1 + n l0/σ²)) + n sqrt(2 δ l0)`
/// with `l0 = lambda_1(Sigma_0)`.
pub fn per_task_bound_linear(inputs: &LinearBoundInputs) -> Result<f64> {
    inputs.validate_common()?;
    let s2 = inputs.noise_sigma.powi(2);
    let l0 = inputs.lambda1_sigma_0;
    let n = inputs.rounds as f64;
    let d = inputs.dim as f64;
    let confidence = (width_ratio(l0, s2) * (4.0 * inputs.action_count as f64 / inputs.delta).ln()).sqrt();
    let info = (n * d / 2.0 * (n * l0 / s2).ln_1p()).sqrt();
    Ok(4.0 * confidence * info + n * (2.0 * inputs.delta * l0).sqrt())
}

/// Bayes-regret bound for the linear bandit with forced exploration, as
/// three terms: `learning_mu`, `per_task` and `forced_exploration`.
pub fn total_bound_linear(inputs: &LinearBoundInputs) -> Result<BoundBreakdown> {
    inputs.validate_common()?;
    check_positive("lambda1_sigma_0", inputs.lambda1_sigma_0)?;
    check_positive("eta", inputs.eta)?;
    let s2 = inputs.noise_sigma.powi(2);
    let m = inputs.tasks as f64;
    let n = inputs.rounds as f64;
    let d = inputs.dim as f64;
    let lq = inputs.lambda1_sigma_q;
    let l0 = inputs.lambda1_sigma_0;

    let confidence = (width_ratio(lq + l0, s2) * (4.0 * inputs.action_count as f64 / inputs.delta).ln()).sqrt();
    let meta_info = (m * lq / (inputs.lambda_d_sigma_0 + s2 / n)).ln_1p();
    let learning_mu = 4.0 * confidence * (m * n * d / 2.0 * meta_info).sqrt();

    let multiplier = m + (1.0 + s2 / (inputs.eta * l0)) * m.sqrt();
    let per_task = multiplier * per_task_bound_linear(inputs)?;

    let forced = (m * d * (inputs.mu_star_norm_sq + inputs.trace_terms)).sqrt();
    Ok(BoundBreakdown::new(vec![
        ("learning_mu", learning_mu),
        ("per_task", per_task),
        ("forced_exploration", forced),
    ]))
}

/// Per-task and meta-level mutual-information caps:
/// `(d/2) log(1 + n l0/σ²)` and `(d/2) log(1 + m lq / (l0_min + σ²/n))`.
pub fn mutual_info_caps(inputs: &LinearBoundInputs) -> Result<(f64, f64)> {
    inputs.validate_common()?;
    let s2 = inputs.noise_sigma.powi(2);
    let m = inputs.tasks as f64;
    let n = inputs.rounds as f64;
    let half_d = inputs.dim as f64 / 2.0;
    let per_task = half_d * (n * inputs.lambda1_sigma_0 / s2).ln_1p();
    let meta = half_d * (m * inputs.lambda1_sigma_q / (inputs.lambda_d_sigma_0 + s2 / n)).ln_1p();
    Ok((per_task, meta))
}

/// Inputs for the semi-bandit bounds. Widths are standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiBanditBoundInputs {
    pub tasks: usize,
    pub rounds: usize,
    pub budget: usize,
    pub noise_sigma: f64,
    pub delta: f64,
    pub sigma_q: Vec<f64>,
    pub sigma_0: Vec<f64>,
    /// Per-arm `mu*(k)²`.
    pub mu_star_sq: Vec<f64>,
}

impl SemiBanditBoundInputs {
    /// Reads per-arm widths from a semi-bandit spec; `mu*(k)²` is replaced
    /// by its prior mean `mu_q(k)² + sigma_qk²`.
    pub fn from_spec(spec: &EnvironmentSpec, tasks: usize, rounds: usize, delta: f64) -> Result<Self> {
        let ActionSet::Subsets { budget, .. } = spec.action_set else {
            return invalid("semi-bandit bound needs a subset action set");
        };
        let g = spec
            .gaussian()
            .ok_or_else(|| BoundError::InvalidInput("bounds need a Gaussian prior".into()))?;
        if !g.sigma_q.is_diagonal() || !g.sigma_0.is_diagonal() {
            return invalid("semi-bandit bound needs diagonal covariances");
        }
        let vq = g.sigma_q.diag();
        Ok(Self {
            tasks,
            rounds,
            budget,
            noise_sigma: spec.noise_sigma,
            delta,
            sigma_q: vq.iter().map(|v| v.sqrt()).collect(),
            sigma_0: g.sigma_0.diag().iter().map(|v| v.sqrt()).collect(),
            mu_star_sq: g.mu_q.iter().zip(&vq).map(|(m, v)| m * m + v).collect(),
        })
    }

    fn validate(&self) -> Result<()> {
        check_count("tasks", self.tasks)?;
        check_count("rounds", self.rounds)?;
        check_count("budget", self.budget)?;
        check_positive("noise_sigma", self.noise_sigma)?;
        check_delta(self.delta)?;
        let k = self.sigma_q.len();
        check_count("arms", k)?;
        if self.sigma_0.len() != k || self.mu_star_sq.len() != k {
            return invalid("per-arm vectors must have equal length");
        }
        if self.budget > k {
            return invalid("budget exceeds the number of arms");
        }
        for (i, ((q, z), u)) in self.sigma_q.iter().zip(&self.sigma_0).zip(&self.mu_star_sq).enumerate() {
            check_non_negative(&format!("sigma_q[{i}]"), *q)?;
            check_non_negative(&format!("sigma_0[{i}]"), *z)?;
            check_non_negative(&format!("mu_star_sq[{i}]"), *u)?;
        }
        Ok(())
    }

    fn arms(&self) -> usize {
        self.sigma_q.len()
    }
}

/// Per-task semi-bandit bound with a known meta-parameter.
pub fn per_task_bound_semibandit(inputs: &SemiBanditBoundInputs) -> Result<f64> {
    inputs.validate()?;
    let s2 = inputs.noise_sigma.powi(2);
    let k = inputs.arms() as f64;
    let n = inputs.rounds as f64;
    let l = inputs.budget as f64;
    let avg: f64 = inputs
        .sigma_0
        .iter()
        .map(|z| {
            let v = z * z;
            width_ratio(v, s2) * (n * v / s2).ln_1p()
        })
        .sum::<f64>()
        / k;
    let avg_var: f64 = inputs.sigma_0.iter().map(|z| z * z).sum::<f64>() / k;
    let first = 4.0 * (avg * (4.0 * k / inputs.delta).ln()).sqrt() * (n * k * l).sqrt();
    Ok(first + n * (2.0 * inputs.delta * avg_var).sqrt())
}

/// Bayes-regret bound for the semi-bandit, as four terms: `learning_mu`,
/// `per_task`, `zero_width_arms` and `forced_exploration`.
pub fn total_bound_semibandit(inputs: &SemiBanditBoundInputs) -> Result<BoundBreakdown> {
    inputs.validate()?;
    let s2 = inputs.noise_sigma.powi(2);
    let k = inputs.arms() as f64;
    let m = inputs.tasks as f64;
    let n = inputs.rounds as f64;
    let l = inputs.budget as f64;

    let avg: f64 = inputs
        .sigma_q
        .iter()
        .zip(&inputs.sigma_0)
        .map(|(q, z)| {
            let (vq, v0) = (q * q, z * z);
            width_ratio(vq + v0, s2) * (m * vq / (v0 + s2 / n)).ln_1p()
        })
        .sum::<f64>()
        / k;
    let learning_mu = 4.0 * (avg * (4.0 * k / inputs.delta).ln()).sqrt() * (m * n * k * l).sqrt();

    let worst_ratio = inputs
        .sigma_0
        .iter()
        .filter(|z| **z > 0.0)
        .map(|z| s2 / (z * z))
        .fold(0.0, f64::max);
    let per_task = (m + (1.0 + worst_ratio) * m.sqrt()) * per_task_bound_semibandit(inputs)?;

    let zero_width = inputs
        .sigma_0
        .iter()
        .filter(|z| **z == 0.0)
        .fold(0.0, |acc, _| acc + s2)
        / k;
    let zero_width_arms = 2.0 * m.powf(0.75) * n * (inputs.delta * zero_width).sqrt();

    let spread: f64 = inputs
        .mu_star_sq
        .iter()
        .zip(inputs.sigma_q.iter().zip(&inputs.sigma_0))
        .map(|(u, (q, z))| u + z * z + q * q)
        .sum();
    let forced = 2.0 * (m * k * spread).sqrt();

    Ok(BoundBreakdown::new(vec![
        ("learning_mu", learning_mu),
        ("per_task", per_task),
        ("zero_width_arms", zero_width_arms),
        ("forced_exploration", forced),
    ]))
}

/// Bound breakdown for any supported family, derived from a realized spec.
pub fn bound_for_spec(
    spec: &EnvironmentSpec,
    tasks: usize,
    rounds: usize,
    delta: f64,
    eta: Option<f64>,
) -> Result<BoundBreakdown> {
    match spec.family() {
        Family::SemiBandit => total_bound_semibandit(&SemiBanditBoundInputs::from_spec(spec, tasks, rounds, delta)?),
        Family::LinearGaussian | Family::GaussianArms => {
            total_bound_linear(&LinearBoundInputs::from_spec(spec, tasks, rounds, delta, eta)?)
        }
        Family::BernoulliMixture => invalid("no regret bound is available for Beta-mixture priors"),
    }
}
