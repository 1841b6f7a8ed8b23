//! Agent-to-worker-group assignment, dispatch tables, shared-config checks,
//! batch partitioning, and a simulated slot pool.
//!
//! Without sharing every agent owns a dedicated worker group. With sharing,
//! agents configured with the same model id map onto one group whose
//! parameters are physically shared; worker group ids are assigned in
//! first-appearance order of the model id, so assignment is deterministic.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::core::AgentId;
use crate::policy::PolicyParams;

/// Worker group identifier, dense from 0 in first-appearance order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WgId(pub usize);

impl std::fmt::Display for WgId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("worker group {wg_id} has agents with differing settings: {fields:?}")]
    SharedConfigMismatch { wg_id: WgId, fields: Vec<String> },
    #[error("no worker group dispatches agent {0}")]
    DispatchMiss(AgentId),
    #[error("insufficient slots: need {needed}, have {available}")]
    InsufficientSlots { needed: usize, available: usize },
    #[error("slot requests must be positive")]
    InvalidSlotRequest,
}

/// Per-group optimizer settings; agents sharing a group must agree on these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimSettings {
    pub learning_rate: f64,
}

/// A physical parameter-holding unit serving one or more logical agents.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerGroup {
    pub wg_id: WgId,
    pub model_id: String,
    pub params: PolicyParams,
    pub assigned_agents: BTreeSet<AgentId>,
    pub optim: OptimSettings,
}

/// Mutually inverse dispatch tables between worker groups and agents.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMaps {
    pub wg_to_agents: BTreeMap<WgId, BTreeSet<AgentId>>,
    pub agent_to_wg: BTreeMap<AgentId, WgId>,
}

impl AssignmentMaps {
    pub fn wg_of(&self, agent: AgentId) -> Result<WgId, SchedulerError> {
        self.agent_to_wg
            .get(&agent)
            .copied()
            .ok_or(SchedulerError::DispatchMiss(agent))
    }
}

/// Simulated placement of worker groups onto a fixed slot budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourcePool {
    pub total_slots: usize,
    pub placements: BTreeMap<WgId, usize>,
}

impl ResourcePool {
    pub fn new(total_slots: usize) -> Self {
        ResourcePool {
            total_slots,
            placements: BTreeMap::new(),
        }
    }
}

/// Maps logical agents to worker groups. Non-sharing yields one singleton
/// group per agent; sharing yields one group per distinct model id, grouping
/// the agents configured with it. Parameters are built per group via
/// `init_params`.
pub fn build_assignment(
    model_id_per_agent: &[String],
    sharing: bool,
    optim_per_agent: &[OptimSettings],
    mut init_params: impl FnMut(&str) -> PolicyParams,
) -> (Vec<WorkerGroup>, AssignmentMaps) {
    assert_eq!(model_id_per_agent.len(), optim_per_agent.len());
    let mut groups: Vec<WorkerGroup> = Vec::new();
    let mut wg_to_agents = BTreeMap::new();
    let mut agent_to_wg = BTreeMap::new();

    if sharing {
        let mut by_model: Vec<(String, Vec<AgentId>)> = Vec::new();
        for (i, model) in model_id_per_agent.iter().enumerate() {
            let agent = AgentId(i + 1);
            match by_model.iter_mut().find(|(m, _)| m == model) {
                Some((_, agents)) => agents.push(agent),
                None => by_model.push((model.clone(), vec![agent])),
            }
        }
        for (idx, (model, agents)) in by_model.into_iter().enumerate() {
            let wg_id = WgId(idx);
            let assigned: BTreeSet<AgentId> = agents.iter().copied().collect();
            // Settings are taken from the first assigned agent; consistency is
            // enforced separately by validate_shared_configs.
            let optim = optim_per_agent[agents[0].offset()];
            for agent in &assigned {
                agent_to_wg.insert(*agent, wg_id);
            }
            wg_to_agents.insert(wg_id, assigned.clone());
            groups.push(WorkerGroup {
                wg_id,
                model_id: model.clone(),
                params: init_params(&model),
                assigned_agents: assigned,
                optim,
            });
        }
    } else {
        for (i, model) in model_id_per_agent.iter().enumerate() {
            let agent = AgentId(i + 1);
            let wg_id = WgId(i);
            let assigned: BTreeSet<AgentId> = [agent].into_iter().collect();
            agent_to_wg.insert(agent, wg_id);
            wg_to_agents.insert(wg_id, assigned.clone());
            groups.push(WorkerGroup {
                wg_id,
                model_id: model.clone(),
                params: init_params(model),
                assigned_agents: assigned,
                optim: optim_per_agent[i],
            });
        }
    }

    (
        groups,
        AssignmentMaps {
            wg_to_agents,
            agent_to_wg,
        },
    )
}

/// Runtime check that all agents sharing a worker group use identical
/// settings.
pub fn validate_shared_configs(
    optim_per_agent: &[OptimSettings],
    maps: &AssignmentMaps,
) -> Result<(), SchedulerError> {
    for (wg_id, agents) in &maps.wg_to_agents {
        let mut iter = agents.iter();
        let first = match iter.next() {
            Some(a) => optim_per_agent[a.offset()],
            None => continue,
        };
        for agent in iter {
            let other = optim_per_agent[agent.offset()];
            let mut fields = Vec::new();
            if other.learning_rate != first.learning_rate {
                fields.push("learning_rate".to_string());
            }
            if !fields.is_empty() {
                return Err(SchedulerError::SharedConfigMismatch {
                    wg_id: *wg_id,
                    fields,
                });
            }
        }
    }
    Ok(())
}

/// Splits a batch into per-worker-group micro-batches, preserving relative
/// order. Every item lands in exactly the group owning its agent.
pub fn partition_batch<T>(
    items: &[T],
    agent_of: impl Fn(&T) -> AgentId,
    maps: &AssignmentMaps,
) -> Result<BTreeMap<WgId, Vec<usize>>, SchedulerError> {
    let mut out: BTreeMap<WgId, Vec<usize>> = maps
        .wg_to_agents
        .keys()
        .map(|wg| (*wg, Vec::new()))
        .collect();
    for (idx, item) in items.iter().enumerate() {
        let wg = maps.wg_of(agent_of(item))?;
        out.get_mut(&wg)
            .expect("wg_of returned an id missing from wg_to_agents")
            .push(idx);
    }
    Ok(out)
}

/// Places every worker group with `slots_per_wg` slots, or fails without
/// mutating the pool.
pub fn place(
    pool: &ResourcePool,
    worker_groups: &[WorkerGroup],
    slots_per_wg: usize,
) -> Result<ResourcePool, SchedulerError> {
    if slots_per_wg == 0 {
        return Err(SchedulerError::InvalidSlotRequest);
    }
    let already: usize = pool.placements.values().sum();
    let needed = worker_groups.len() * slots_per_wg;
    if already + needed > pool.total_slots {
        return Err(SchedulerError::InsufficientSlots {
            needed: already + needed,
            available: pool.total_slots,
        });
    }
    let mut placed = pool.clone();
    for wg in worker_groups {
        placed.placements.insert(wg.wg_id, slots_per_wg);
    }
    Ok(placed)
}
