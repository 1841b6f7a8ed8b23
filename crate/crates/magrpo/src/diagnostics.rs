//! Gradient-norm diagnostics: per-agent second moments, the exact second-
//! moment decomposition with its covariance correction, and a Monte-Carlo
//! probe of the inflation multiplier.
//!
//! For an agent whose active-set reward statistics are `(μ_k, σ_k)` against
//! group statistics `(μ, σ)`, the second moment of its globally normalized
//! gradient contribution factors as
//!
//! ```text
//! E[‖g̃‖²] = E[‖z‖²] · (σ_k² + (μ_k − μ)²) / σ²  +  Δ_k
//! ```
//!
//! with `Δ_k = Cov(‖z‖², ((R − μ)/σ)²)`. The identity is algebraic, so the
//! residual is checked at 1e-9 relative tolerance on every empirical batch.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::advantage::{agent_stats, group_stats, AdvantageError, AgentStats, GroupStats};
use crate::core::{active_set, AgentId, RolloutGroup};
use crate::orchestration::{generate_task, rollout, EnvSpec, Topology};
use crate::policy::{frobenius_sq, score, PolicyParams};
use crate::rng::{substream, Purpose};

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("agent {0} has an empty active set")]
    EmptyActiveSet(AgentId),
    #[error("aligned lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate group: global reward std is zero")]
    DegenerateGroup,
    #[error("verification batch generation failed: {0}")]
    BatchGeneration(String),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
}

/// Empirical decomposition of one agent's globally normalized gradient second
/// moment. `residual` is `lhs − (score_second_moment · multiplier + delta_k)`
/// and vanishes up to floating-point roundoff.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMomentReport {
    pub agent: AgentId,
    pub lhs_second_moment: f64,
    pub score_second_moment: f64,
    pub multiplier: f64,
    pub delta_k: f64,
    pub residual: f64,
}

/// Per-agent gradient-norm and second-moment trace over training iterations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradNormSeries {
    /// Outer index: agent offset; inner: one entry per iteration.
    pub per_agent: Vec<Vec<(f64, f64)>>,
}

impl GradNormSeries {
    pub fn new(agent_count: usize) -> Self {
        GradNormSeries {
            per_agent: vec![Vec::new(); agent_count],
        }
    }

    pub fn push(&mut self, agent: AgentId, grad_norm: f64, second_moment: f64) {
        self.per_agent[agent.offset()].push((grad_norm, second_moment));
    }

    pub fn max_grad_norm(&self) -> f64 {
        self.per_agent
            .iter()
            .flatten()
            .map(|(g, _)| *g)
            .fold(0.0, f64::max)
    }
}

/// The inflation factor `(σ_k² + (μ_k − μ)²) / (σ² + floor²)` from
/// precomputed statistics.
pub fn multiplier_from_stats(global: &GroupStats, agent: &AgentStats, std_floor: f64) -> f64 {
    let mean_gap = agent.mean - global.mean;
    (agent.std * agent.std + mean_gap * mean_gap)
        / (global.std * global.std + std_floor * std_floor)
}

/// The inflation factor of agent `k` within a group.
///
/// Equals 1 whenever the agent's statistics match the group's, and grows with
/// either mean misalignment or variance mismatch.
pub fn inflation_multiplier(
    group: &RolloutGroup,
    k: AgentId,
    std_floor: f64,
) -> Result<f64, DiagnosticsError> {
    let global = group_stats(group)?;
    let agent = agent_stats(group, k);
    if agent.sample_count == 0 {
        return Err(DiagnosticsError::EmptyActiveSet(k));
    }
    Ok(multiplier_from_stats(&global, &agent, std_floor))
}

/// Mean over steps of `advantage² · ‖z‖²` for aligned advantage/score-norm
/// lists. Scores are passed as squared Frobenius norms.
pub fn empirical_second_moment(
    advantages: &[f64],
    score_sq_norms: &[f64],
) -> Result<f64, DiagnosticsError> {
    if advantages.len() != score_sq_norms.len() {
        return Err(DiagnosticsError::LengthMismatch(
            advantages.len(),
            score_sq_norms.len(),
        ));
    }
    if advantages.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = advantages
        .iter()
        .zip(score_sq_norms)
        .map(|(a, n)| a * a * n)
        .sum();
    Ok(total / advantages.len() as f64)
}

/// Decomposes agent `k`'s second moment under global normalization with a
/// zero floor. `score_sq_norms` holds `‖z‖²` per active step, aligned with
/// `active_set(group, k)` order.
pub fn second_moment_decompose(
    group: &RolloutGroup,
    k: AgentId,
    score_sq_norms: &[f64],
) -> Result<SecondMomentReport, DiagnosticsError> {
    let global = group_stats(group)?;
    if global.std == 0.0 {
        return Err(DiagnosticsError::DegenerateGroup);
    }
    let steps = active_set(group, k);
    if steps.is_empty() {
        return Err(DiagnosticsError::EmptyActiveSet(k));
    }
    if score_sq_norms.len() != steps.len() {
        return Err(DiagnosticsError::LengthMismatch(
            score_sq_norms.len(),
            steps.len(),
        ));
    }
    let n = steps.len() as f64;
    // q_j = ((R_j − μ)/σ)² over the active set.
    let q: Vec<f64> = steps
        .iter()
        .map(|(i, _)| {
            let d = (group.trajectories[*i].reward - global.mean) / global.std;
            d * d
        })
        .collect();
    let lhs = q
        .iter()
        .zip(score_sq_norms)
        .map(|(q, z)| q * z)
        .sum::<f64>()
        / n;
    let score_second_moment = score_sq_norms.iter().sum::<f64>() / n;
    let q_mean = q.iter().sum::<f64>() / n;
    let delta_k = q
        .iter()
        .zip(score_sq_norms)
        .map(|(q, z)| (q - q_mean) * (z - score_second_moment))
        .sum::<f64>()
        / n;
    let multiplier = inflation_multiplier(group, k, 0.0)?;
    let residual = lhs - (score_second_moment * multiplier + delta_k);
    Ok(SecondMomentReport {
        agent: k,
        lhs_second_moment: lhs,
        score_second_moment,
        multiplier,
        delta_k,
        residual,
    })
}

/// One point of the inflation sweep: a group with `successes` unit-reward and
/// `failures` zero-reward trajectories in which the probed agent acts on
/// exactly one success step and one failure step, pinning its conditional
/// reward spread at 0.5 while the global success rate moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbePoint {
    pub successes: usize,
    pub failures: usize,
}

impl ProbePoint {
    /// Six-point sweep with analytic multipliers 1.0 … 50.5.
    pub const DEFAULT_SWEEP: [ProbePoint; 6] = [
        ProbePoint { successes: 4, failures: 4 },
        ProbePoint { successes: 6, failures: 2 },
        ProbePoint { successes: 7, failures: 1 },
        ProbePoint { successes: 15, failures: 1 },
        ProbePoint { successes: 31, failures: 1 },
        ProbePoint { successes: 101, failures: 1 },
    ];

    fn success_rate(self) -> f64 {
        self.successes as f64 / (self.successes + self.failures) as f64
    }

    /// Closed-form multiplier `(0.25 + (0.5 − p)²) / (p(1 − p))`.
    pub fn analytic_multiplier(self) -> f64 {
        let p = self.success_rate();
        let gap = 0.5 - p;
        (0.25 + gap * gap) / (p * (1.0 - p))
    }
}

/// Analytic multiplier and measured global/agent second-moment ratio for one
/// sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub analytic_multiplier: f64,
    pub measured_ratio: f64,
}

/// Monte-Carlo verification of the inflation direction: steps are sampled
/// uniformly from the probed agent's active set with constant-norm scores, and
/// the ratio of global-mode to agent-mode second moments is measured per sweep
/// point. The measured ratio tracks the analytic multiplier because the
/// covariance correction vanishes for norm-constant scores.
pub fn inflation_probe(
    sweep: &[ProbePoint],
    samples_per_point: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ProbeResult>, DiagnosticsError> {
    let mut out = Vec::with_capacity(sweep.len());
    for point in sweep {
        if point.successes == 0 || point.failures == 0 {
            return Err(DiagnosticsError::DegenerateGroup);
        }
        let p = point.success_rate();
        let sigma = (p * (1.0 - p)).sqrt();
        // Active-set rewards are {1, 0}: μ_k = 0.5, σ_k = 0.5.
        let (mu_k, sigma_k) = (0.5, 0.5);
        let mut global_sum = 0.0;
        let mut agent_sum = 0.0;
        for _ in 0..samples_per_point {
            let reward = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let adv_global = (reward - p) / sigma;
            let adv_agent = (reward - mu_k) / sigma_k;
            // Constant-norm score: ‖z‖² = 1.
            global_sum += adv_global * adv_global;
            agent_sum += adv_agent * adv_agent;
        }
        out.push(ProbeResult {
            analytic_multiplier: point.analytic_multiplier(),
            measured_ratio: global_sum / agent_sum,
        });
    }
    Ok(out)
}

/// A randomly generated empirical batch for identity verification: a rollout
/// group from random three-agent policies on a randomized environment, plus
/// the per-agent policies that sampled it.
#[derive(Debug, Clone)]
pub struct VerificationBatch {
    pub group: RolloutGroup,
    pub policies: Vec<PolicyParams>,
}

impl VerificationBatch {
    /// `‖z‖²` per active step of `k`, in active-set order, at the sampling
    /// parameters.
    pub fn score_sq_norms(&self, k: AgentId) -> Vec<f64> {
        active_set(&self.group, k)
            .into_iter()
            .map(|(i, t)| {
                let step = &self.group.trajectories[i].steps[t];
                let z = score(&self.policies[k.offset()], &step.state_features, step.action)
                    .expect("batch policies match batch steps");
                frobenius_sq(&z)
            })
            .collect()
    }
}

/// Generates batch `index` of the verification suite: three agents, eight
/// trajectories, random policy weights, and random difficulty/skew. Retries
/// until the group's reward spread is nonzero.
pub fn verification_batch(seed: u64, index: u64) -> Result<VerificationBatch, DiagnosticsError> {
    const GROUP_SIZE: usize = 8;
    for attempt in 0..64u64 {
        let mut setup_rng = substream(seed, Purpose::Verify, index, attempt, 0);
        let mut env = EnvSpec::defaults(Topology::SearchPipeline);
        env.difficulty = setup_rng.gen_range(0.0..1.0);
        env.skew = setup_rng.gen_range(0.0..1.0);
        let policies: Vec<PolicyParams> = (0..env.topology.agent_count())
            .map(|_| PolicyParams {
                weights: Array2::from_shape_fn((env.action_count, env.feature_dim), |_| {
                    setup_rng.gen_range(-0.8..0.8)
                }),
                model_id: "verify".to_string(),
            })
            .collect();
        let task = generate_task(&env, format!("verify-{index}-{attempt}"), &mut setup_rng);
        let mut trajectories = Vec::with_capacity(GROUP_SIZE);
        for r in 0..GROUP_SIZE {
            let mut rng = substream(seed, Purpose::Verify, index, attempt, 1 + r as u64);
            let traj = rollout(&env, &task, |a| policies.get(a.offset()), &mut rng)
                .map_err(|e| DiagnosticsError::BatchGeneration(e.to_string()))?;
            trajectories.push(traj);
        }
        let group = RolloutGroup::new(task.task_id.clone(), trajectories)
            .map_err(|e| DiagnosticsError::BatchGeneration(e.to_string()))?;
        if group_stats(&group)?.std > 0.0 {
            return Ok(VerificationBatch { group, policies });
        }
    }
    Err(DiagnosticsError::DegenerateGroup)
}

/// Runs the decomposition over `batches` random batches and returns the
/// largest relative residual seen across batches and agents.
pub fn second_moment_verification(batches: usize, seed: u64) -> Result<f64, DiagnosticsError> {
    let mut max_relative = 0.0f64;
    for index in 0..batches {
        let batch = verification_batch(seed, index as u64)?;
        for k in 1..=batch.policies.len() {
            let k = AgentId(k);
            if active_set(&batch.group, k).is_empty() {
                continue;
            }
            let norms = batch.score_sq_norms(k);
            let report = second_moment_decompose(&batch.group, k, &norms)?;
            let relative = report.residual.abs() / report.lhs_second_moment.abs().max(1.0);
            max_relative = max_relative.max(relative);
        }
    }
    Ok(max_relative)
}
