//! Shared domain types: agents, steps, trajectories, rollout groups, and the
//! run configuration.
//!
//! Everything here is immutable after construction and safe to share across
//! concurrent readers.

use ndarray::Array1;
use thiserror::Error;

use crate::advantage::NormalizationMode;
use crate::orchestration::EnvSpec;

/// Logical agent index, 1-based as in `k ∈ {1, …, K}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub usize);

impl AgentId {
    /// 0-based position, for indexing per-agent lists of length K.
    pub fn offset(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("invalid config: {}", violations.join("; "))]
    InvalidConfig { violations: Vec<String> },
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("rollout group needs at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),
    #[error("trajectory task id {got:?} does not match group task id {expected:?}")]
    TaskIdMismatch { expected: String, got: String },
}

/// One agent turn: the observed state, the discrete action taken, which agent
/// acted, the behavior log-probability at sampling time, and a synthetic token
/// count used only for cost telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state_features: Array1<f64>,
    pub action: usize,
    pub agent: AgentId,
    pub behavior_logprob: f64,
    pub token_count: u64,
}

impl Step {
    pub fn new(
        state_features: Array1<f64>,
        action: usize,
        agent: AgentId,
        behavior_logprob: f64,
        token_count: u64,
    ) -> Result<Self, CoreError> {
        if !state_features.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvalidStep("non-finite state feature".into()));
        }
        if !(behavior_logprob <= 0.0) {
            return Err(CoreError::InvalidStep(format!(
                "behavior_logprob must be <= 0, got {behavior_logprob}"
            )));
        }
        if agent.0 == 0 {
            return Err(CoreError::InvalidStep("agent index is 1-based".into()));
        }
        Ok(Self {
            state_features,
            action,
            agent,
            behavior_logprob,
            token_count,
        })
    }
}

/// One multi-agent episode with its scalar terminal reward, shared by all
/// steps of the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub reward: f64,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, reward: f64) -> Result<Self, CoreError> {
        if steps.is_empty() {
            return Err(CoreError::InvalidTrajectory("no steps".into()));
        }
        if !reward.is_finite() {
            return Err(CoreError::InvalidTrajectory(format!(
                "non-finite reward {reward}"
            )));
        }
        Ok(Self { steps, reward })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// The N trajectories sampled for one task — the unit over which advantages
/// are normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    pub fn new(task_id: String, trajectories: Vec<Trajectory>) -> Result<Self, CoreError> {
        if trajectories.len() < 2 {
            return Err(CoreError::GroupTooSmall(trajectories.len()));
        }
        Ok(Self {
            task_id,
            trajectories,
        })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    /// Total step count across all trajectories.
    pub fn step_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Whether normalization statistics are computed within each task's rollout
/// group or over the whole aggregated iteration batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsScope {
    PerGroup,
    PerBatch,
}

impl StatsScope {
    pub fn token(self) -> &'static str {
        match self {
            StatsScope::PerGroup => "per_group",
            StatsScope::PerBatch => "per_batch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_group" => Some(StatsScope::PerGroup),
            "per_batch" => Some(StatsScope::PerBatch),
            _ => None,
        }
    }
}

/// Full run configuration consumed by the trainer and the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Number of logical agents K.
    pub agent_count: usize,
    /// Map same-model agents onto one shared worker group.
    pub sharing: bool,
    /// Model identifier per agent, length K.
    pub model_id_per_agent: Vec<String>,
    /// Rollout group size N.
    pub group_size: usize,
    /// Clipping half-width ε of the surrogate objective.
    pub clip_epsilon: f64,
    /// Optional KL penalty weight β (0 disables the term).
    pub kl_beta: f64,
    /// Additive floor on normalization divisors.
    pub std_floor: f64,
    pub normalization_mode: NormalizationMode,
    /// Learning rate per agent, length K.
    pub learning_rate_per_agent: Vec<f64>,
    pub seed: u64,
    pub iterations: usize,
    /// Tasks sampled per iteration; each contributes one rollout group.
    pub tasks_per_iteration: usize,
    /// Passes over a collected batch per iteration.
    pub update_epochs: usize,
    pub stats_scope: StatsScope,
    pub env: EnvSpec,
}

impl RunConfig {
    /// Desk-scale defaults for an environment; group size and penalties follow
    /// the environment's own defaults.
    pub fn default_for(env: EnvSpec) -> Self {
        let k = env.topology.agent_count();
        RunConfig {
            agent_count: k,
            sharing: false,
            model_id_per_agent: (0..k).map(|_| "base-model".to_string()).collect(),
            group_size: env.default_group_size(),
            clip_epsilon: 0.2,
            kl_beta: 0.0,
            std_floor: 1e-6,
            normalization_mode: NormalizationMode::AgentMeanAgentStd,
            learning_rate_per_agent: vec![1e-2; k],
            seed: 0,
            iterations: 100,
            tasks_per_iteration: 4,
            update_epochs: 1,
            stats_scope: StatsScope::PerGroup,
            env,
        }
    }
}

/// Checks every `RunConfig` invariant and reports all violations at once.
pub fn validate_config(config: RunConfig) -> Result<RunConfig, CoreError> {
    let mut violations = Vec::new();
    let k = config.agent_count;
    if k == 0 {
        violations.push("agent_count must be >= 1".to_string());
    }
    let topo_k = config.env.topology.agent_count();
    if k != 0 && k != topo_k {
        violations.push(format!(
            "agent_count {k} does not match topology {} which has {topo_k} agents",
            config.env.topology.token()
        ));
    }
    if config.model_id_per_agent.len() != k {
        violations.push(format!(
            "model list length {} != agent_count {k}",
            config.model_id_per_agent.len()
        ));
    }
    if config.learning_rate_per_agent.len() != k {
        violations.push(format!(
            "learning rate list length {} != agent_count {k}",
            config.learning_rate_per_agent.len()
        ));
    }
    for (i, lr) in config.learning_rate_per_agent.iter().enumerate() {
        if !lr.is_finite() || *lr < 0.0 {
            violations.push(format!("agent {} learning rate {lr} invalid", i + 1));
        }
    }
    if config.group_size < 2 {
        violations.push(format!("group_size must be >= 2, got {}", config.group_size));
    }
    if !(config.clip_epsilon > 0.0 && config.clip_epsilon < 1.0) {
        violations.push(format!(
            "clip_epsilon must lie in (0, 1), got {}",
            config.clip_epsilon
        ));
    }
    if !(config.kl_beta >= 0.0) {
        violations.push(format!("kl_beta must be >= 0, got {}", config.kl_beta));
    }
    if !(config.std_floor > 0.0) {
        violations.push(format!("std_floor must be > 0, got {}", config.std_floor));
    }
    if config.tasks_per_iteration == 0 {
        violations.push("tasks_per_iteration must be >= 1".to_string());
    }
    if config.update_epochs == 0 {
        violations.push("update_epochs must be >= 1".to_string());
    }
    if let Err(e) = config.env.validate() {
        violations.push(e);
    }
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(CoreError::InvalidConfig { violations })
    }
}

/// All steps of the group at which agent `k` acted, as `(trajectory, step)`
/// index pairs in lexicographic order. May be empty.
pub fn active_set(group: &RolloutGroup, k: AgentId) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, traj) in group.trajectories.iter().enumerate() {
        for (t, step) in traj.steps.iter().enumerate() {
            if step.agent == k {
                out.push((i, t));
            }
        }
    }
    out
}
