//! Multi-agent orchestration over two synthetic topologies.
//!
//! `MathLoop` runs a solver/verifier refinement loop: the solver proposes a
//! candidate answer, the verifier approves (terminating the episode) or
//! rejects (triggering another round, up to the round budget). `SearchPipeline`
//! runs a verifier/search/answer hierarchy: each turn the verifier routes to
//! the search agent until it judges the gathered information sufficient, then
//! the answer agent produces the final output; the answer is forced on the
//! last turn.
//!
//! States are feature vectors: a one-hot role segment, a target-encoding
//! segment with per-task distractor noise, a scalar hint slot, and optional
//! filler noise. The reserved last action index models a malformed output and
//! draws the invalid-action penalty. The `skew` knob couples failure to extra
//! invocations of a designated agent: with probability `skew` per verifier
//! step, routing follows the ground truth instead of the verifier's sampled
//! decision, so failing episodes loop longer.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::core::{AgentId, CoreError, Step, Trajectory};
use crate::policy::{sample_action, PolicyError, PolicyParams};

#[derive(Debug, Error, PartialEq)]
pub enum OrchestrationError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("no worker group dispatches agent {0}")]
    DispatchMiss(AgentId),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// What the orchestra does next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrchestraDecision {
    Invoke(AgentId),
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    MathLoop,
    SearchPipeline,
}

impl Topology {
    pub fn agent_count(self) -> usize {
        match self {
            Topology::MathLoop => 2,
            Topology::SearchPipeline => 3,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Topology::MathLoop => "math_loop",
            Topology::SearchPipeline => "search_pipeline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "math_loop" => Some(Topology::MathLoop),
            "search_pipeline" => Some(Topology::SearchPipeline),
            _ => None,
        }
    }
}

/// Role of an agent within its topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Solver,
    MathVerifier,
    SearchVerifier,
    Search,
    Answer,
}

pub fn role_of(topology: Topology, agent: AgentId) -> Option<Role> {
    match (topology, agent.0) {
        (Topology::MathLoop, 1) => Some(Role::Solver),
        (Topology::MathLoop, 2) => Some(Role::MathVerifier),
        (Topology::SearchPipeline, 1) => Some(Role::SearchVerifier),
        (Topology::SearchPipeline, 2) => Some(Role::Search),
        (Topology::SearchPipeline, 3) => Some(Role::Answer),
        _ => None,
    }
}

pub const SOLVER: AgentId = AgentId(1);
pub const MATH_VERIFIER: AgentId = AgentId(2);
pub const SEARCH_VERIFIER: AgentId = AgentId(1);
pub const SEARCH: AgentId = AgentId(2);
pub const ANSWER: AgentId = AgentId(3);

/// One task instance: the value the final answer must match, a substream id
/// seeding the task's distractor features, and a difficulty in [0, 1] that
/// corrupts verifier hints and retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub hidden_target: usize,
    pub feature_seed: u64,
    pub difficulty: f64,
}

/// Environment descriptor; expressible in the run configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub topology: Topology,
    /// Total state dimension d; must fit role one-hot + target segment + hint.
    pub feature_dim: usize,
    /// Discrete action count A; the last index is the reserved malformed
    /// action, so targets range over [0, A−2].
    pub action_count: usize,
    /// Round budget (MathLoop) or turn budget (SearchPipeline).
    pub max_rounds: usize,
    pub invalid_action_penalty: f64,
    /// In [0, 1]: probability per verifier step that routing follows ground
    /// truth, coupling failure to extra invocations of the designated agent.
    pub skew: f64,
    /// Base difficulty copied into generated tasks.
    pub difficulty: f64,
    /// SearchPipeline only: probability that an episode starts with the
    /// information already sufficient, so no retrieval is needed. Decouples
    /// part of the success mass from search invocations, sharpening the
    /// per-agent reward heterogeneity the skew knob creates.
    pub known_info_rate: f64,
    /// Lower bound on the trajectory reward after penalties.
    pub reward_floor: f64,
}

impl EnvSpec {
    /// Environment defaults; budgets and penalties differ by topology.
    pub fn defaults(topology: Topology) -> Self {
        let action_count = 5;
        let k = topology.agent_count();
        let (max_rounds, invalid_action_penalty) = match topology {
            Topology::MathLoop => (2, 0.1),
            Topology::SearchPipeline => (4, 0.01),
        };
        EnvSpec {
            topology,
            feature_dim: k + action_count + 1,
            action_count,
            max_rounds,
            invalid_action_penalty,
            skew: 0.0,
            difficulty: 0.25,
            known_info_rate: 0.0,
            reward_floor: -1.0,
        }
    }

    pub fn default_group_size(&self) -> usize {
        match self.topology {
            Topology::MathLoop => 8,
            Topology::SearchPipeline => 5,
        }
    }

    /// The agent whose invocation count the skew knob couples to failure.
    pub fn designated_agent(&self) -> AgentId {
        match self.topology {
            Topology::MathLoop => SOLVER,
            Topology::SearchPipeline => SEARCH,
        }
    }

    /// Upper bound on trajectory length.
    pub fn max_steps(&self) -> usize {
        match self.topology {
            Topology::MathLoop => 2 * self.max_rounds,
            Topology::SearchPipeline => 2 * self.max_rounds - 1,
        }
    }

    fn hint_slot(&self) -> usize {
        self.topology.agent_count() + self.action_count
    }

    pub fn validate(&self) -> Result<(), String> {
        let k = self.topology.agent_count();
        if self.action_count < 3 {
            return Err(format!(
                "action_count must be >= 3 (answer values, control actions, reserved invalid), got {}",
                self.action_count
            ));
        }
        if self.feature_dim < k + self.action_count + 1 {
            return Err(format!(
                "feature_dim {} too small: need {} role + {} target + 1 hint slots",
                self.feature_dim, k, self.action_count
            ));
        }
        if self.max_rounds < 1 {
            return Err("max_rounds must be >= 1".to_string());
        }
        if !(self.invalid_action_penalty >= 0.0) {
            return Err(format!(
                "invalid_action_penalty must be >= 0, got {}",
                self.invalid_action_penalty
            ));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(format!("skew must lie in [0, 1], got {}", self.skew));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(format!("difficulty must lie in [0, 1], got {}", self.difficulty));
        }
        if !(0.0..=1.0).contains(&self.known_info_rate) {
            return Err(format!(
                "known_info_rate must lie in [0, 1], got {}",
                self.known_info_rate
            ));
        }
        if !self.reward_floor.is_finite() {
            return Err("reward_floor must be finite".to_string());
        }
        Ok(())
    }
}

/// Routing outcome of the most recent verifier step, after any skew override.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    Approve,
    Reject,
    Sufficient,
    Insufficient,
}

/// Walk state consumed by [`next_agent`]: the invocation history plus the
/// effective routing of the latest verifier step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrchestraState {
    pub invoked: Vec<AgentId>,
    pub last_routing: Option<Routing>,
}

impl OrchestraState {
    fn count(&self, agent: AgentId) -> usize {
        self.invoked.iter().filter(|a| **a == agent).count()
    }

    fn last(&self) -> Option<AgentId> {
        self.invoked.last().copied()
    }
}

/// Pure scheduling rule: which agent acts next given the walk so far.
pub fn next_agent(
    env: &EnvSpec,
    state: &OrchestraState,
) -> Result<OrchestraDecision, OrchestrationError> {
    let k = env.topology.agent_count();
    if let Some(bad) = state.invoked.iter().find(|a| a.0 == 0 || a.0 > k) {
        return Err(OrchestrationError::ProtocolViolation(format!(
            "history invokes agent {bad} outside topology {}",
            env.topology.token()
        )));
    }
    match env.topology {
        Topology::MathLoop => match state.last() {
            None => Ok(OrchestraDecision::Invoke(SOLVER)),
            Some(a) if a == SOLVER => Ok(OrchestraDecision::Invoke(MATH_VERIFIER)),
            Some(_) => match state.last_routing {
                Some(Routing::Approve) => Ok(OrchestraDecision::Terminate),
                Some(Routing::Reject) => {
                    if state.count(MATH_VERIFIER) >= env.max_rounds {
                        Ok(OrchestraDecision::Terminate)
                    } else {
                        Ok(OrchestraDecision::Invoke(SOLVER))
                    }
                }
                _ => Err(OrchestrationError::ProtocolViolation(
                    "verifier step without a routing outcome".to_string(),
                )),
            },
        },
        Topology::SearchPipeline => {
            let turn = state.count(SEARCH_VERIFIER) + 1;
            match state.last() {
                Some(a) if a == ANSWER => Ok(OrchestraDecision::Terminate),
                None => {
                    if env.max_rounds == 1 {
                        Ok(OrchestraDecision::Invoke(ANSWER))
                    } else {
                        Ok(OrchestraDecision::Invoke(SEARCH_VERIFIER))
                    }
                }
                Some(a) if a == SEARCH_VERIFIER => match state.last_routing {
                    Some(Routing::Sufficient) => Ok(OrchestraDecision::Invoke(ANSWER)),
                    Some(Routing::Insufficient) => Ok(OrchestraDecision::Invoke(SEARCH)),
                    _ => Err(OrchestrationError::ProtocolViolation(
                        "verifier step without a routing outcome".to_string(),
                    )),
                },
                Some(_) => {
                    // After a search step: next turn, forced answer on the last.
                    if turn >= env.max_rounds {
                        Ok(OrchestraDecision::Invoke(ANSWER))
                    } else {
                        Ok(OrchestraDecision::Invoke(SEARCH_VERIFIER))
                    }
                }
            }
        }
    }
}

/// Builds the state vector one agent observes: role one-hot, target segment
/// (revealed or hidden) over per-task distractor noise, and the hint slot.
fn features_for(env: &EnvSpec, task: &TaskSpec, agent: AgentId, target_visible: bool, hint: f64) -> Array1<f64> {
    let k = env.topology.agent_count();
    let hint_slot = env.hint_slot();
    let mut f = Array1::zeros(env.feature_dim);
    f[agent.offset()] = 1.0;
    let mut noise = ChaCha8Rng::seed_from_u64(task.feature_seed);
    for j in k..env.feature_dim {
        let u = noise.gen_range(-0.3..0.3);
        if j != hint_slot {
            f[j] = u;
        }
    }
    if target_visible {
        f[k + task.hidden_target] += 1.0;
    }
    f[hint_slot] = hint;
    f
}

/// A hint that is correct with probability `1 − difficulty/2`.
fn noisy_hint(truth: bool, difficulty: f64, rng: &mut ChaCha8Rng) -> f64 {
    let flip = rng.gen::<f64>() < 0.5 * difficulty;
    if truth != flip {
        1.0
    } else {
        -1.0
    }
}

fn draw_tokens(rng: &mut ChaCha8Rng) -> u64 {
    64 + rng.gen_range(0..448u64)
}

/// Runs one episode under the environment's topology, sampling each step from
/// the dispatched agent's policy. The reward is binary task success minus the
/// invalid-action penalty per malformed action, floored at the configured
/// minimum.
pub fn rollout<'p, F>(
    env: &EnvSpec,
    task: &TaskSpec,
    policy_for: F,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, OrchestrationError>
where
    F: Fn(AgentId) -> Option<&'p PolicyParams>,
{
    debug_assert!(env.validate().is_ok());
    debug_assert!(task.hidden_target + 1 < env.action_count);
    let invalid_action = env.action_count - 1;
    let mut state = OrchestraState::default();
    let mut steps: Vec<Step> = Vec::new();
    let mut invalid_count: usize = 0;

    // MathLoop bookkeeping.
    let mut candidate_correct = false;
    // SearchPipeline bookkeeping.
    let mut info_gathered = match env.topology {
        Topology::SearchPipeline => rng.gen::<f64>() < env.known_info_rate,
        Topology::MathLoop => false,
    };
    let mut success = false;

    loop {
        let agent = match next_agent(env, &state)? {
            OrchestraDecision::Terminate => break,
            OrchestraDecision::Invoke(agent) => agent,
        };
        let params = policy_for(agent).ok_or(OrchestrationError::DispatchMiss(agent))?;
        let role = role_of(env.topology, agent).ok_or_else(|| {
            OrchestrationError::ProtocolViolation(format!("agent {agent} has no role"))
        })?;
        let (target_visible, hint) = match role {
            Role::Solver => (true, 0.0),
            Role::MathVerifier => (false, noisy_hint(candidate_correct, task.difficulty, rng)),
            Role::SearchVerifier => (false, noisy_hint(info_gathered, task.difficulty, rng)),
            Role::Search => (true, 0.0),
            Role::Answer => (info_gathered, if info_gathered { 1.0 } else { -1.0 }),
        };
        let features = features_for(env, task, agent, target_visible, hint);
        let (action, logprob) = sample_action(params, &features, rng)?;
        let tokens = draw_tokens(rng);
        steps.push(Step::new(features, action, agent, logprob, tokens)?);
        state.invoked.push(agent);

        match role {
            Role::Solver => {
                if action == invalid_action {
                    invalid_count += 1;
                }
                candidate_correct = action == task.hidden_target;
            }
            Role::MathVerifier => {
                if action > 1 {
                    invalid_count += 1;
                }
                let sampled_approve = action == 0;
                let informed = rng.gen::<f64>() < env.skew;
                let approve = if informed { candidate_correct } else { sampled_approve };
                state.last_routing = Some(if approve { Routing::Approve } else { Routing::Reject });
            }
            Role::SearchVerifier => {
                if action > 1 {
                    invalid_count += 1;
                }
                let sampled_sufficient = action == 0;
                let informed = rng.gen::<f64>() < env.skew;
                let sufficient = if informed { info_gathered } else { sampled_sufficient };
                state.last_routing = Some(if sufficient {
                    Routing::Sufficient
                } else {
                    Routing::Insufficient
                });
            }
            Role::Search => {
                if action == invalid_action {
                    invalid_count += 1;
                }
                // Retrieval is stochastic in difficulty: the precise query
                // (the hidden target) retrieves at rate 1 − difficulty/2,
                // vague valid queries at that rate shrunk by 1 − difficulty,
                // malformed ones never.
                let full_rate = 1.0 - 0.5 * task.difficulty;
                let rate = if action == task.hidden_target {
                    full_rate
                } else if action != invalid_action {
                    full_rate * (1.0 - task.difficulty)
                } else {
                    0.0
                };
                if rng.gen::<f64>() < rate {
                    info_gathered = true;
                }
            }
            Role::Answer => {
                if action == invalid_action {
                    invalid_count += 1;
                }
                success = action == task.hidden_target;
            }
        }
    }

    let succeeded = match env.topology {
        Topology::MathLoop => candidate_correct,
        Topology::SearchPipeline => success,
    };
    let raw = if succeeded { 1.0 } else { 0.0 }
        - env.invalid_action_penalty * invalid_count as f64;
    let reward = raw.max(env.reward_floor);
    Ok(Trajectory::new(steps, reward)?)
}

/// Copies of `base` at each skew level. Higher skew couples failure to extra
/// invocations of the designated agent, pushing its active-set mean below the
/// group mean and raising the inflation multiplier.
pub fn make_skewed_family(base: &EnvSpec, skew_levels: &[f64]) -> Vec<EnvSpec> {
    skew_levels
        .iter()
        .map(|&skew| EnvSpec { skew, ..base.clone() })
        .collect()
}

/// Samples a fresh task: a uniform hidden target over the valid answer range
/// and a new distractor seed. Difficulty is inherited from the environment.
pub fn generate_task(env: &EnvSpec, task_id: String, rng: &mut ChaCha8Rng) -> TaskSpec {
    let hidden_target = rng.gen_range(0..env.action_count - 1);
    let feature_seed: u64 = rng.gen();
    TaskSpec {
        task_id,
        hidden_target,
        feature_seed,
        difficulty: env.difficulty,
    }
}
