//! The training loop: snapshot, parallel rollout collection, advantage
//! normalization, and clipped per-worker-group updates, plus the four-way
//! normalization ablation runner.
//!
//! Rollouts are mutually independent given a parameter snapshot; each one owns
//! an RNG substream addressed by (seed, iteration, task, rollout), so the
//! collected batch is identical for any rollout thread count. Updates walk
//! worker groups in ascending id order and agents in ascending index order
//! within a group, keeping runs bit-reproducible.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::advantage::{
    compute_advantages, compute_advantages_batch, pooled_stats, AdvantageError, AdvantageTable,
    NormalizationMode,
};
use crate::core::{
    validate_config, AgentId, CoreError, RolloutGroup, RunConfig, StatsScope, Step,
};
use crate::diagnostics::{multiplier_from_stats, GradNormSeries};
use crate::orchestration::{generate_task, rollout, OrchestrationError};
use crate::policy::{frobenius_sq, step_surrogate_gradient, PolicyError, PolicyParams};
use crate::rng::{substream, Purpose};
use crate::scheduler::{
    build_assignment, partition_batch, validate_shared_configs, AssignmentMaps, OptimSettings,
    SchedulerError, WorkerGroup,
};

#[derive(Debug, Error, PartialEq)]
pub enum TrainerError {
    #[error("non-finite gradient contribution from agent {agent}")]
    NonFiniteGradient { agent: AgentId },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Orchestration(#[from] OrchestrationError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Per-agent slice of one iteration's telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    pub agent: AgentId,
    pub mu_k: f64,
    pub sigma_k: f64,
    pub y_k_size: usize,
    /// Frobenius norm of the agent's contribution to its worker group's
    /// update direction at the first epoch, before the learning rate.
    pub grad_norm: f64,
    pub multiplier: f64,
}

/// One row group of the telemetry stream: statistics are pooled over the
/// iteration's full batch.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mode: NormalizationMode,
    pub per_agent: Vec<AgentRecord>,
    pub group_mu: f64,
    pub group_sigma: f64,
    pub mean_reward: f64,
}

/// Mutable training state: validated config, worker groups with their
/// parameters, dispatch tables, and cumulative telemetry counters.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub worker_groups: Vec<WorkerGroup>,
    pub maps: AssignmentMaps,
    /// Synthetic tokens generated per model id, for the cost estimator.
    pub token_totals: BTreeMap<String, u64>,
    /// Steps zeroed by the small-sample advantage fallback.
    pub fallback_steps_total: usize,
    /// Per-agent gradient norms and second-moment estimates over iterations.
    pub grad_series: GradNormSeries,
}

/// Validates the config, checks per-agent settings against the sharing
/// layout, and builds zero-initialized worker groups.
pub fn init_state(config: RunConfig) -> Result<TrainState, TrainerError> {
    let config = validate_config(config)?;
    let optim: Vec<OptimSettings> = config
        .learning_rate_per_agent
        .iter()
        .map(|lr| OptimSettings { learning_rate: *lr })
        .collect();
    let (a, d) = (config.env.action_count, config.env.feature_dim);
    let (worker_groups, maps) = build_assignment(
        &config.model_id_per_agent,
        config.sharing,
        &optim,
        |model| PolicyParams::zeros(a, d, model),
    );
    validate_shared_configs(&optim, &maps)?;
    let grad_series = GradNormSeries::new(config.agent_count);
    Ok(TrainState {
        config,
        worker_groups,
        maps,
        token_totals: BTreeMap::new(),
        fallback_steps_total: 0,
        grad_series,
    })
}

/// Collects `tasks_per_iteration` rollout groups of N trajectories each.
/// Rollouts within a task run in parallel; results are ordered by rollout
/// index, not completion order.
pub fn collect_rollouts(
    state: &TrainState,
    iteration: usize,
) -> Result<Vec<RolloutGroup>, TrainerError> {
    let cfg = &state.config;
    let policy_for = |agent: AgentId| {
        cfg_wg_params(&state.maps, &state.worker_groups, agent)
    };
    let mut groups = Vec::with_capacity(cfg.tasks_per_iteration);
    for task_idx in 0..cfg.tasks_per_iteration {
        let mut task_rng = substream(cfg.seed, Purpose::Task, iteration as u64, task_idx as u64, 0);
        let task = generate_task(
            &cfg.env,
            format!("iter{iteration}-task{task_idx}"),
            &mut task_rng,
        );
        let trajectories = (0..cfg.group_size)
            .into_par_iter()
            .map(|r| {
                let mut rng = substream(
                    cfg.seed,
                    Purpose::Rollout,
                    iteration as u64,
                    task_idx as u64,
                    r as u64,
                );
                rollout(&cfg.env, &task, policy_for, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        groups.push(RolloutGroup::new(task.task_id.clone(), trajectories)?);
    }
    Ok(groups)
}

fn cfg_wg_params<'a>(
    maps: &AssignmentMaps,
    worker_groups: &'a [WorkerGroup],
    agent: AgentId,
) -> Option<&'a PolicyParams> {
    maps.agent_to_wg
        .get(&agent)
        .map(|wg| &worker_groups[wg.0].params)
}

/// Per-agent gradient aggregates over one worker group's micro-batch.
#[derive(Debug, Clone)]
pub struct MicroBatchGradients {
    /// Sum of step gradients per agent.
    pub partials: BTreeMap<AgentId, Array2<f64>>,
    /// Mean of `‖g_step‖²` over each agent's steps: the empirical second
    /// moment of that agent's gradient contribution.
    pub second_moments: BTreeMap<AgentId, f64>,
}

/// Per-agent sums of step gradients over one micro-batch, evaluated at
/// `params` against the `snapshot`. Fails fast on a non-finite contribution.
pub fn per_agent_gradients(
    params: &PolicyParams,
    snapshot: &PolicyParams,
    micro_batch: &[(&Step, f64)],
    clip_epsilon: f64,
    kl_beta: f64,
) -> Result<MicroBatchGradients, TrainerError> {
    let mut partials: BTreeMap<AgentId, Array2<f64>> = BTreeMap::new();
    let mut sq_sums: BTreeMap<AgentId, (f64, usize)> = BTreeMap::new();
    for (step, advantage) in micro_batch {
        let term = step_surrogate_gradient(params, snapshot, step, *advantage, clip_epsilon, kl_beta)?;
        let entry = sq_sums.entry(step.agent).or_insert((0.0, 0));
        entry.0 += frobenius_sq(&term);
        entry.1 += 1;
        partials
            .entry(step.agent)
            .and_modify(|g| *g += &term)
            .or_insert(term);
    }
    for (agent, partial) in &partials {
        if !frobenius_sq(partial).is_finite() {
            return Err(TrainerError::NonFiniteGradient { agent: *agent });
        }
    }
    let second_moments = sq_sums
        .into_iter()
        .map(|(agent, (sum, n))| (agent, sum / n as f64))
        .collect();
    Ok(MicroBatchGradients {
        partials,
        second_moments,
    })
}

fn advantage_tables(
    cfg: &RunConfig,
    batch: &[RolloutGroup],
) -> Result<Vec<AdvantageTable>, AdvantageError> {
    match cfg.stats_scope {
        StatsScope::PerGroup => batch
            .iter()
            .map(|g| compute_advantages(g, cfg.normalization_mode, cfg.std_floor))
            .collect(),
        StatsScope::PerBatch => compute_advantages_batch(
            batch,
            cfg.agent_count,
            cfg.normalization_mode,
            cfg.std_floor,
        ),
    }
}

/// One pass of the loop: snapshot, rollouts, normalization, per-worker-group
/// clipped updates, telemetry record.
pub fn run_iteration(
    state: &mut TrainState,
    iteration: usize,
) -> Result<IterationRecord, TrainerError> {
    let snapshots: Vec<PolicyParams> = state
        .worker_groups
        .iter()
        .map(|g| g.params.clone())
        .collect();

    let batch = collect_rollouts(state, iteration)?;

    // Token accounting per model id.
    for group in &batch {
        for traj in &group.trajectories {
            for step in &traj.steps {
                let wg = state.maps.wg_of(step.agent)?;
                let model = state.worker_groups[wg.0].model_id.clone();
                *state.token_totals.entry(model).or_insert(0) += step.token_count;
            }
        }
    }

    let tables = advantage_tables(&state.config, &batch)?;
    state.fallback_steps_total += tables.iter().map(|t| t.fallback_steps).sum::<usize>();

    // Flatten (step, advantage) pairs in batch order.
    let mut flat: Vec<(&Step, f64)> = Vec::new();
    for (group, table) in batch.iter().zip(&tables) {
        for (i, traj) in group.trajectories.iter().enumerate() {
            for (t, step) in traj.steps.iter().enumerate() {
                flat.push((step, table.get(i, t)));
            }
        }
    }
    let partition = partition_batch(&flat, |(step, _)| step.agent, &state.maps)?;

    let k = state.config.agent_count;
    let mut grad_norms = vec![0.0f64; k];
    let mut second_moments = vec![0.0f64; k];

    // Update each worker group on its micro-batch, ascending wg id.
    for wg_idx in 0..state.worker_groups.len() {
        let wg_id = state.worker_groups[wg_idx].wg_id;
        let idxs = &partition[&wg_id];
        if idxs.is_empty() {
            continue;
        }
        let micro: Vec<(&Step, f64)> = idxs.iter().map(|i| flat[*i]).collect();
        let scale = 1.0 / micro.len() as f64;
        let lr = state.worker_groups[wg_idx].optim.learning_rate;
        for epoch in 0..state.config.update_epochs {
            let grads = per_agent_gradients(
                &state.worker_groups[wg_idx].params,
                &snapshots[wg_idx],
                &micro,
                state.config.clip_epsilon,
                state.config.kl_beta,
            )?;
            if epoch == 0 {
                for (agent, partial) in &grads.partials {
                    grad_norms[agent.offset()] = frobenius_sq(partial).sqrt() * scale;
                }
                for (agent, moment) in &grads.second_moments {
                    second_moments[agent.offset()] = *moment;
                }
            }
            if lr == 0.0 {
                break;
            }
            let mut update: Array2<f64> =
                Array2::zeros(state.worker_groups[wg_idx].params.weights.raw_dim());
            for partial in grads.partials.values() {
                update += partial;
            }
            state.worker_groups[wg_idx]
                .params
                .weights
                .scaled_add(lr * scale, &update);
        }
    }
    for agent in 1..=k {
        let agent = AgentId(agent);
        state
            .grad_series
            .push(agent, grad_norms[agent.offset()], second_moments[agent.offset()]);
    }

    // Telemetry statistics are pooled over the whole batch.
    let (global, per_agent_stats) = pooled_stats(&batch, k)?;
    let per_agent = per_agent_stats
        .iter()
        .map(|s| AgentRecord {
            agent: s.agent,
            mu_k: s.mean,
            sigma_k: s.std,
            y_k_size: s.sample_count,
            grad_norm: grad_norms[s.agent.offset()],
            multiplier: if s.sample_count == 0 {
                0.0
            } else {
                multiplier_from_stats(&global, s, state.config.std_floor)
            },
        })
        .collect();
    let total_trajectories: usize = batch.iter().map(RolloutGroup::size).sum();
    let mean_reward = batch
        .iter()
        .flat_map(|g| g.trajectories.iter().map(|t| t.reward))
        .sum::<f64>()
        / total_trajectories as f64;

    Ok(IterationRecord {
        iteration,
        mode: state.config.normalization_mode,
        per_agent,
        group_mu: global.mean,
        group_sigma: global.std,
        mean_reward,
    })
}

/// Runs the configured number of iterations from zero-initialized policies.
/// Deterministic given the seed.
pub fn run_training(config: RunConfig) -> Result<(Vec<IterationRecord>, TrainState), TrainerError> {
    let mut state = init_state(config)?;
    let mut records = Vec::with_capacity(state.config.iterations);
    for iteration in 0..state.config.iterations {
        records.push(run_iteration(&mut state, iteration)?);
    }
    Ok((records, state))
}

/// Record stream and summary figures of one ablation arm.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub mode: NormalizationMode,
    pub records: Vec<IterationRecord>,
    pub final_mean_reward: f64,
    pub max_grad_norm: f64,
    pub state: TrainState,
}

/// Mean training reward over the last `min(20, n)` records.
pub fn final_window_mean_reward(records: &[IterationRecord]) -> f64 {
    let window = records.len().min(20);
    if window == 0 {
        return 0.0;
    }
    records[records.len() - window..]
        .iter()
        .map(|r| r.mean_reward)
        .sum::<f64>()
        / window as f64
}

/// Largest per-agent gradient norm across a record stream.
pub fn max_grad_norm(records: &[IterationRecord]) -> f64 {
    records
        .iter()
        .flat_map(|r| r.per_agent.iter().map(|a| a.grad_norm))
        .fold(0.0, f64::max)
}

/// Runs each normalization mode from identical initial parameters and seed.
pub fn run_ablation(
    base: &RunConfig,
    modes: &[NormalizationMode],
) -> Result<Vec<AblationOutcome>, TrainerError> {
    let mut outcomes = Vec::with_capacity(modes.len());
    for mode in modes {
        let mut config = base.clone();
        config.normalization_mode = *mode;
        let (records, state) = run_training(config)?;
        outcomes.push(AblationOutcome {
            mode: *mode,
            final_mean_reward: final_window_mean_reward(&records),
            max_grad_norm: max_grad_norm(&records),
            records,
            state,
        });
    }
    Ok(outcomes)
}
