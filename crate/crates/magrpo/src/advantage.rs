//! Group and per-agent reward statistics and the four advantage normalization
//! configurations.
//!
//! Global statistics are population moments over the N trajectory rewards of a
//! group. Per-agent statistics are step-weighted: a trajectory's reward is
//! counted once per step at which the agent was active, matching uniform
//! sampling of time steps from the agent's active set. The normalization
//! divisor always adds the configured floor, in all four modes.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::core::{active_set, AgentId, RolloutGroup};

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("group statistics need at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),
}

/// Population mean and standard deviation of a group's trajectory rewards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
}

/// Step-weighted reward statistics of one agent's active set.
///
/// `sample_count == 0` means the agent never acted; mean and std are then 0
/// and consumers must check before dividing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentStats {
    pub agent: AgentId,
    pub mean: f64,
    pub std: f64,
    pub sample_count: usize,
}

/// Which (mean, std) sources normalize each step's reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormalizationMode {
    GlobalMeanGlobalStd,
    AgentMeanGlobalStd,
    GlobalMeanAgentStd,
    AgentMeanAgentStd,
}

impl NormalizationMode {
    pub const ALL: [NormalizationMode; 4] = [
        NormalizationMode::GlobalMeanGlobalStd,
        NormalizationMode::AgentMeanGlobalStd,
        NormalizationMode::GlobalMeanAgentStd,
        NormalizationMode::AgentMeanAgentStd,
    ];

    pub fn token(self) -> &'static str {
        match self {
            NormalizationMode::GlobalMeanGlobalStd => "global_mean_global_std",
            NormalizationMode::AgentMeanGlobalStd => "agent_mean_global_std",
            NormalizationMode::GlobalMeanAgentStd => "global_mean_agent_std",
            NormalizationMode::AgentMeanAgentStd => "agent_mean_agent_std",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.token() == s)
    }

    pub fn mean_is_agent(self) -> bool {
        matches!(
            self,
            NormalizationMode::AgentMeanGlobalStd | NormalizationMode::AgentMeanAgentStd
        )
    }

    pub fn std_is_agent(self) -> bool {
        matches!(
            self,
            NormalizationMode::GlobalMeanAgentStd | NormalizationMode::AgentMeanAgentStd
        )
    }

    /// True when either statistic comes from the agent's own active set.
    pub fn uses_agent_stats(self) -> bool {
        self.mean_is_agent() || self.std_is_agent()
    }
}

/// Per-step advantages of one rollout group, keyed by `(trajectory, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    pub values: BTreeMap<(usize, usize), f64>,
    pub mode: NormalizationMode,
    pub std_floor: f64,
    /// Steps zeroed because their agent had fewer than 2 active samples while
    /// the mode consults agent statistics.
    pub fallback_steps: usize,
}

impl AdvantageTable {
    pub fn get(&self, trajectory: usize, step: usize) -> f64 {
        self.values[&(trajectory, step)]
    }
}

fn population_stats(rewards: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = rewards.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let first = rewards.clone().next().unwrap();
    if rewards.clone().all(|r| r == first) {
        // Exact for constant inputs, so zero-spread groups normalize to
        // exactly zero instead of roundoff noise divided by the floor.
        return (first, 0.0, n);
    }
    let mean = rewards.clone().sum::<f64>() / n as f64;
    let var = rewards.map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

/// Population mean and std of the group's trajectory rewards (one sample per
/// trajectory).
pub fn group_stats(group: &RolloutGroup) -> Result<GroupStats, AdvantageError> {
    if group.size() < 2 {
        return Err(AdvantageError::GroupTooSmall(group.size()));
    }
    let (mean, std, _) = population_stats(group.trajectories.iter().map(|t| t.reward));
    Ok(GroupStats { mean, std })
}

/// Step-weighted statistics of agent `k`'s active set: the trajectory reward
/// is repeated once per active step.
pub fn agent_stats(group: &RolloutGroup, k: AgentId) -> AgentStats {
    let rewards: Vec<f64> = active_set(group, k)
        .into_iter()
        .map(|(i, _)| group.trajectories[i].reward)
        .collect();
    let (mean, std, n) = population_stats(rewards.iter().copied());
    AgentStats {
        agent: k,
        mean,
        std,
        sample_count: n,
    }
}

/// Stats over several groups pooled into one batch: global moments over all
/// trajectory rewards, agent moments over all active steps.
pub(crate) fn pooled_stats(
    groups: &[RolloutGroup],
    agent_count: usize,
) -> Result<(GroupStats, Vec<AgentStats>), AdvantageError> {
    let total: usize = groups.iter().map(RolloutGroup::size).sum();
    if total < 2 {
        return Err(AdvantageError::GroupTooSmall(total));
    }
    let rewards: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.trajectories.iter().map(|t| t.reward))
        .collect();
    let (mean, std, _) = population_stats(rewards.iter().copied());
    let per_agent = (1..=agent_count)
        .map(|k| {
            let k = AgentId(k);
            let step_rewards: Vec<f64> = groups
                .iter()
                .flat_map(|g| {
                    active_set(g, k)
                        .into_iter()
                        .map(|(i, _)| g.trajectories[i].reward)
                })
                .collect();
            let (m, s, n) = population_stats(step_rewards.iter().copied());
            AgentStats {
                agent: k,
                mean: m,
                std: s,
                sample_count: n,
            }
        })
        .collect();
    Ok((GroupStats { mean, std }, per_agent))
}

fn table_from_stats(
    group: &RolloutGroup,
    global: GroupStats,
    agent_of: &impl Fn(AgentId) -> AgentStats,
    mode: NormalizationMode,
    std_floor: f64,
) -> AdvantageTable {
    let mut values = BTreeMap::new();
    let mut fallback_steps = 0;
    for (i, traj) in group.trajectories.iter().enumerate() {
        for (t, step) in traj.steps.iter().enumerate() {
            let stats = agent_of(step.agent);
            let adv = if mode.uses_agent_stats() && stats.sample_count < 2 {
                fallback_steps += 1;
                0.0
            } else {
                let m = if mode.mean_is_agent() { stats.mean } else { global.mean };
                let s = if mode.std_is_agent() { stats.std } else { global.std };
                (traj.reward - m) / (s + std_floor)
            };
            values.insert((i, t), adv);
        }
    }
    AdvantageTable {
        values,
        mode,
        std_floor,
        fallback_steps,
    }
}

/// Advantage table for one group with statistics computed within the group.
pub fn compute_advantages(
    group: &RolloutGroup,
    mode: NormalizationMode,
    std_floor: f64,
) -> Result<AdvantageTable, AdvantageError> {
    let global = group_stats(group)?;
    let mut cache: BTreeMap<AgentId, AgentStats> = BTreeMap::new();
    for traj in &group.trajectories {
        for step in &traj.steps {
            cache
                .entry(step.agent)
                .or_insert_with(|| agent_stats(group, step.agent));
        }
    }
    Ok(table_from_stats(
        group,
        global,
        &|k| cache[&k],
        mode,
        std_floor,
    ))
}

/// Advantage tables for a multi-group batch with statistics pooled over the
/// entire batch (one table per group, aligned with the input order).
pub fn compute_advantages_batch(
    groups: &[RolloutGroup],
    agent_count: usize,
    mode: NormalizationMode,
    std_floor: f64,
) -> Result<Vec<AdvantageTable>, AdvantageError> {
    let (global, per_agent) = pooled_stats(groups, agent_count)?;
    Ok(groups
        .iter()
        .map(|g| {
            table_from_stats(
                g,
                global,
                &|k: AgentId| per_agent[k.offset()],
                mode,
                std_floor,
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{AgentId, RolloutGroup, Step, Trajectory};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn step_by(agent: usize) -> Step {
        Step::new(array![1.0], 0, AgentId(agent), -0.3, 5).unwrap()
    }

    /// One trajectory per (agent list, reward) pair.
    fn group_of(agent_lists: &[&[usize]], rewards: &[f64]) -> RolloutGroup {
        let trajectories = agent_lists
            .iter()
            .zip(rewards)
            .map(|(agents, r)| {
                Trajectory::new(agents.iter().map(|&a| step_by(a)).collect(), *r).unwrap()
            })
            .collect();
        RolloutGroup::new("task".into(), trajectories).unwrap()
    }

    #[test]
    fn group_stats_on_mixed_rewards() {
        let g = group_of(&[&[1], &[1], &[1], &[1]], &[1.0, 0.0, 0.0, 1.0]);
        let s = group_stats(&g).unwrap();
        assert_relative_eq!(s.mean, 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.std, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn group_stats_on_constant_rewards() {
        let g = group_of(&[&[1], &[1], &[1]], &[0.7, 0.7, 0.7]);
        let s = group_stats(&g).unwrap();
        assert_relative_eq!(s.mean, 0.7, epsilon = 1e-12);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn group_stats_on_seven_one_fixture() {
        let g = group_of(
            &[&[1], &[1], &[1], &[1], &[1], &[1], &[1], &[1]],
            &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
        );
        let s = group_stats(&g).unwrap();
        assert_relative_eq!(s.mean, 0.875, epsilon = 1e-12);
        assert_relative_eq!(s.std * s.std, 0.109375, epsilon = 1e-12);
    }

    #[test]
    fn agent_stats_weight_by_step_count() {
        // T1 (R=1) has one step by agent 1; T2 (R=0) has three.
        let g = group_of(&[&[1], &[1, 1, 1]], &[1.0, 0.0]);
        let s = agent_stats(&g, AgentId(1));
        assert_eq!(s.sample_count, 4);
        assert_relative_eq!(s.mean, 0.25, epsilon = 1e-12);
        assert_relative_eq!(s.std * s.std, 0.1875, epsilon = 1e-12);
    }

    #[test]
    fn agent_stats_two_step_case() {
        let g = group_of(&[&[1], &[1]], &[1.0, 0.0]);
        let s = agent_stats(&g, AgentId(1));
        assert_relative_eq!(s.mean, 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.std, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn agent_stats_empty_when_never_active() {
        let g = group_of(&[&[1], &[1]], &[1.0, 0.0]);
        let s = agent_stats(&g, AgentId(2));
        assert_eq!(s.sample_count, 0);
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn global_mode_advantages_follow_trajectory_reward() {
        let g = group_of(
            &[&[1, 2], &[2, 1], &[1], &[2]],
            &[1.0, 0.0, 0.0, 1.0],
        );
        let table =
            compute_advantages(&g, NormalizationMode::GlobalMeanGlobalStd, 0.0).unwrap();
        for ((i, _), adv) in &table.values {
            let expected = if g.trajectories[*i].reward == 1.0 { 1.0 } else { -1.0 };
            assert_relative_eq!(*adv, expected, epsilon = 1e-12);
        }
        // All steps of one trajectory share one value.
        assert_eq!(table.get(0, 0), table.get(0, 1));
    }

    #[test]
    fn agent_mode_advantages_use_active_set_stats() {
        let g = group_of(&[&[1, 2], &[1, 2]], &[1.0, 0.0]);
        let table = compute_advantages(&g, NormalizationMode::AgentMeanAgentStd, 0.0).unwrap();
        assert_relative_eq!(table.get(0, 0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(table.get(1, 0), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_rewards_zero_every_mode() {
        let g = group_of(&[&[1, 2], &[2, 1], &[1, 2]], &[0.5, 0.5, 0.5]);
        for mode in NormalizationMode::ALL {
            let table = compute_advantages(&g, mode, 1e-6).unwrap();
            assert!(table.values.values().all(|v| *v == 0.0), "mode {mode:?}");
        }
    }

    #[test]
    fn agent_modes_calibrate_mean_and_std() {
        let g = group_of(
            &[&[1, 2, 1], &[1, 2], &[2, 1], &[1, 1, 2]],
            &[1.0, 0.0, 0.25, 0.75],
        );
        let floor = 1e-6;
        let table = compute_advantages(&g, NormalizationMode::AgentMeanAgentStd, floor).unwrap();
        for k in [AgentId(1), AgentId(2)] {
            let stats = agent_stats(&g, k);
            assert!(stats.std >= 0.01);
            let advs: Vec<f64> = active_set(&g, k)
                .into_iter()
                .map(|(i, t)| table.get(i, t))
                .collect();
            let mean = advs.iter().sum::<f64>() / advs.len() as f64;
            let var =
                advs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / advs.len() as f64;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-9);
            assert_relative_eq!(var.sqrt(), stats.std / (stats.std + floor), epsilon = 1e-9);
        }
    }

    #[test]
    fn one_step_per_trajectory_collapses_all_modes() {
        // Every agent's step multiset equals the trajectory-reward multiset.
        let g = group_of(&[&[1], &[1], &[1]], &[1.0, 0.0, 0.5]);
        let reference =
            compute_advantages(&g, NormalizationMode::GlobalMeanGlobalStd, 1e-6).unwrap();
        for mode in NormalizationMode::ALL {
            let table = compute_advantages(&g, mode, 1e-6).unwrap();
            for (key, adv) in &table.values {
                assert_relative_eq!(*adv, reference.values[key], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn std_source_change_preserves_signs() {
        let g = group_of(
            &[&[1, 2], &[1, 1, 2], &[2, 1], &[1, 2, 2]],
            &[1.0, 0.0, 0.0, 1.0],
        );
        let a = compute_advantages(&g, NormalizationMode::AgentMeanGlobalStd, 1e-6).unwrap();
        let b = compute_advantages(&g, NormalizationMode::AgentMeanAgentStd, 1e-6).unwrap();
        for (key, adv) in &a.values {
            let other = b.values[key];
            assert!(
                adv.signum() == other.signum() || (*adv == 0.0 && other == 0.0),
                "sign flipped at {key:?}: {adv} vs {other}"
            );
        }
    }

    #[test]
    fn single_sample_agents_fall_back_to_zero() {
        // Agent 2 acts exactly once; agent-stat modes zero that step.
        let g = group_of(&[&[1, 2], &[1], &[1]], &[1.0, 0.0, 0.5]);
        let table = compute_advantages(&g, NormalizationMode::GlobalMeanAgentStd, 1e-6).unwrap();
        assert_eq!(table.get(0, 1), 0.0);
        assert_eq!(table.fallback_steps, 1);
        // The pure global mode keeps the raw normalized value.
        let global =
            compute_advantages(&g, NormalizationMode::GlobalMeanGlobalStd, 1e-6).unwrap();
        assert!(global.get(0, 1) != 0.0);
        assert_eq!(global.fallback_steps, 0);
    }

    #[test]
    fn table_domain_covers_every_step() {
        let g = group_of(&[&[1, 2, 1], &[2], &[1, 1]], &[1.0, 0.0, 0.5]);
        let table = compute_advantages(&g, NormalizationMode::AgentMeanAgentStd, 1e-6).unwrap();
        assert_eq!(table.values.len(), g.step_count());
        assert!(table.values.values().all(|v| v.is_finite()));
    }

    #[test]
    fn pooled_stats_merge_groups() {
        let g1 = group_of(&[&[1], &[1]], &[1.0, 0.0]);
        let g2 = group_of(&[&[1], &[1]], &[1.0, 1.0]);
        let (global, per_agent) = pooled_stats(&[g1, g2], 1).unwrap();
        assert_relative_eq!(global.mean, 0.75, epsilon = 1e-12);
        assert_eq!(per_agent[0].sample_count, 4);
        assert_relative_eq!(per_agent[0].mean, 0.75, epsilon = 1e-12);
    }
}
