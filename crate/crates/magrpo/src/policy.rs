//! Exact-gradient softmax-linear policies.
//!
//! Logits are `weights · state` with `weights` of shape actions × features, so
//! the score function (the log-probability gradient) has the closed form
//! `row a' = (1{a'=a} − π(a'|s)) · stateᵀ`. The clipped surrogate gradient is
//! assembled analytically from per-step terms; no autodiff is involved, which
//! keeps the gradient-norm diagnostics exact.

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

use crate::core::Step;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Parameters of one softmax-linear policy, owned by a worker group.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Shape actions × feature dimension.
    pub weights: Array2<f64>,
    pub model_id: String,
}

impl PolicyParams {
    pub fn zeros(action_count: usize, feature_dim: usize, model_id: impl Into<String>) -> Self {
        PolicyParams {
            weights: Array2::zeros((action_count, feature_dim)),
            model_id: model_id.into(),
        }
    }

    pub fn action_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Gradient of the mean clipped surrogate over a step batch (ascent
/// direction), plus how many steps contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGradient {
    pub grad: Array2<f64>,
    pub contributing_step_count: usize,
}

fn check_state(params: &PolicyParams, state: &Array1<f64>) -> Result<(), PolicyError> {
    if state.len() != params.feature_dim() {
        return Err(PolicyError::DimensionMismatch(format!(
            "state dimension {} != feature dimension {}",
            state.len(),
            params.feature_dim()
        )));
    }
    Ok(())
}

fn check_action(params: &PolicyParams, action: usize) -> Result<(), PolicyError> {
    if action >= params.action_count() {
        return Err(PolicyError::DimensionMismatch(format!(
            "action {} out of range for {} actions",
            action,
            params.action_count()
        )));
    }
    Ok(())
}

fn logits(params: &PolicyParams, state: &Array1<f64>) -> Array1<f64> {
    params.weights.dot(state)
}

/// `π(·|s)`: softmax of the logits. Entries are positive and sum to 1.
pub fn action_distribution(
    params: &PolicyParams,
    state: &Array1<f64>,
) -> Result<Array1<f64>, PolicyError> {
    check_state(params, state)?;
    let l = logits(params, state);
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = l.mapv(|v| (v - max).exp());
    let z = exp.sum();
    Ok(exp / z)
}

/// `ln π(a|s)` via log-softmax; always ≤ 0.
pub fn log_prob(params: &PolicyParams, state: &Array1<f64>, action: usize) -> Result<f64, PolicyError> {
    check_state(params, state)?;
    check_action(params, action)?;
    let l = logits(params, state);
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + l.mapv(|v| (v - max).exp()).sum().ln();
    Ok(l[action] - log_z)
}

/// Importance ratio `π_θ(a|s) / π_θold(a|s)`.
pub fn ratio(
    params: &PolicyParams,
    params_old: &PolicyParams,
    state: &Array1<f64>,
    action: usize,
) -> Result<f64, PolicyError> {
    let lp = log_prob(params, state, action)?;
    let lp_old = log_prob(params_old, state, action)?;
    Ok((lp - lp_old).exp())
}

/// Score function `z = ∇ log π(a|s)`: row `a'` equals
/// `(1{a'=a} − π(a'|s)) · stateᵀ`. Equals `∇ρ` at the snapshot point.
pub fn score(
    params: &PolicyParams,
    state: &Array1<f64>,
    action: usize,
) -> Result<Array2<f64>, PolicyError> {
    check_action(params, action)?;
    let dist = action_distribution(params, state)?;
    let a = params.action_count();
    let d = params.feature_dim();
    Ok(Array2::from_shape_fn((a, d), |(row, col)| {
        let indicator = if row == action { 1.0 } else { 0.0 };
        (indicator - dist[row]) * state[col]
    }))
}

/// Exact categorical KL divergence `KL(π_θ(·|s) ‖ π_θold(·|s))`.
pub fn kl_divergence(
    params: &PolicyParams,
    params_old: &PolicyParams,
    state: &Array1<f64>,
) -> Result<f64, PolicyError> {
    check_state(params, state)?;
    check_state(params_old, state)?;
    let mut kl = 0.0;
    let dist = action_distribution(params, state)?;
    for action in 0..params.action_count() {
        let lp = log_prob(params, state, action)?;
        let lq = log_prob(params_old, state, action)?;
        kl += dist[action] * (lp - lq);
    }
    Ok(kl)
}

/// Analytic gradient of `KL(π_θ(·|s) ‖ π_θold(·|s))` with respect to the
/// weights: per-logit term `p_b · ((ln p_b − ln q_b) − KL)`, outer with state.
fn kl_gradient(
    params: &PolicyParams,
    params_old: &PolicyParams,
    state: &Array1<f64>,
) -> Result<Array2<f64>, PolicyError> {
    let dist = action_distribution(params, state)?;
    let kl = kl_divergence(params, params_old, state)?;
    let a = params.action_count();
    let d = params.feature_dim();
    let mut per_logit = Array1::zeros(a);
    for action in 0..a {
        let lp = log_prob(params, state, action)?;
        let lq = log_prob(params_old, state, action)?;
        per_logit[action] = dist[action] * ((lp - lq) - kl);
    }
    Ok(Array2::from_shape_fn((a, d), |(row, col)| {
        per_logit[row] * state[col]
    }))
}

/// Un-averaged gradient term of one step's clipped objective
/// `min(ρ·A, clip(ρ, 1±ε)·A) − β·KL`, evaluated at the current `params`.
///
/// Outside the trust band on the clipped side the policy term is exactly the
/// zero matrix; inside it is `A · ρ · ∇log π`.
pub fn step_surrogate_gradient(
    params: &PolicyParams,
    params_old: &PolicyParams,
    step: &Step,
    advantage: f64,
    clip_epsilon: f64,
    kl_beta: f64,
) -> Result<Array2<f64>, PolicyError> {
    let state = &step.state_features;
    let rho = ratio(params, params_old, state, step.action)?;
    let clipped_out = (advantage > 0.0 && rho > 1.0 + clip_epsilon)
        || (advantage < 0.0 && rho < 1.0 - clip_epsilon);
    let mut grad = if clipped_out || advantage == 0.0 {
        Array2::zeros((params.action_count(), params.feature_dim()))
    } else {
        let mut z = score(params, state, step.action)?;
        z *= advantage * rho;
        z
    };
    if kl_beta > 0.0 {
        let klg = kl_gradient(params, params_old, state)?;
        grad.scaled_add(-kl_beta, &klg);
    }
    Ok(grad)
}

/// Gradient of the mean-over-steps clipped surrogate (ascent direction),
/// averaged by `1/|steps|`. Returns the zero matrix for an empty batch.
pub fn clipped_surrogate_gradient(
    params: &PolicyParams,
    params_old: &PolicyParams,
    steps_with_advantages: &[(&Step, f64)],
    clip_epsilon: f64,
    kl_beta: f64,
) -> Result<SurrogateGradient, PolicyError> {
    let mut grad = Array2::zeros((params.action_count(), params.feature_dim()));
    for (step, advantage) in steps_with_advantages {
        let term =
            step_surrogate_gradient(params, params_old, step, *advantage, clip_epsilon, kl_beta)?;
        grad += &term;
    }
    let n = steps_with_advantages.len();
    if n > 0 {
        grad /= n as f64;
    }
    Ok(SurrogateGradient {
        grad,
        contributing_step_count: n,
    })
}

/// Samples an action from `π(·|s)` and returns it with its log-probability.
pub fn sample_action(
    params: &PolicyParams,
    state: &Array1<f64>,
    rng: &mut impl Rng,
) -> Result<(usize, f64), PolicyError> {
    let dist = action_distribution(params, state)?;
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut chosen = params.action_count() - 1;
    for (action, p) in dist.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            chosen = action;
            break;
        }
    }
    let lp = log_prob(params, state, chosen)?;
    Ok((chosen, lp))
}

/// Squared Frobenius norm, the `‖·‖²` used for all matrix gradients.
pub fn frobenius_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}
