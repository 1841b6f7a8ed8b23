//! Monte-Carlo checks of the two topologies against independent decision-tree
//! enumerations, and the skew family's effect on per-agent reward statistics.

use magrpo::core::{active_set, AgentId};
use magrpo::orchestration::{
    generate_task, make_skewed_family, rollout, EnvSpec, Topology, SEARCH, SOLVER,
};
use magrpo::policy::PolicyParams;
use magrpo::rng::{substream, Purpose};

/// Uniform policy over the env's action space.
fn uniform(env: &EnvSpec) -> PolicyParams {
    PolicyParams::zeros(env.action_count, env.feature_dim, "m")
}

/// A solver that reads the target one-hot: logit weight `c` from target slot
/// `j` to action `j`, giving roughly `e^c / (e^c + A − 1)` accuracy. The
/// inflation regime needs a global success rate above one half, which uniform
/// policies cannot reach, so the skew tests use this competent solver.
fn pointer_policy(env: &EnvSpec, c: f64) -> PolicyParams {
    let k = env.topology.agent_count();
    let mut p = PolicyParams::zeros(env.action_count, env.feature_dim, "m");
    for action in 0..env.action_count - 1 {
        p.weights[(action, k + action)] = c;
    }
    p
}

/// Expected success probability, per-role step counts, and expected reward of
/// the MathLoop decision tree under uniform policies. Derived directly from
/// the scheduling rules, independent of the rollout implementation.
fn math_loop_expectations(env: &EnvSpec) -> (f64, f64, f64) {
    let a = env.action_count as f64;
    let p = 1.0 / a;
    let s = env.skew;
    let q_correct = s + (1.0 - s) / a;
    let q_wrong = (1.0 - s) / a;

    // success(m): probability the final scored candidate is correct with m
    // rounds remaining; steps(m): expected rounds actually played.
    fn success(m: usize, p: f64, qc: f64, qw: f64) -> f64 {
        if m == 1 {
            return p;
        }
        let next = success(m - 1, p, qc, qw);
        p * (qc + (1.0 - qc) * next) + (1.0 - p) * (1.0 - qw) * next
    }
    fn rounds(m: usize, p: f64, qc: f64, qw: f64) -> f64 {
        if m == 1 {
            return 1.0;
        }
        let cont = p * (1.0 - qc) + (1.0 - p) * (1.0 - qw);
        1.0 + cont * rounds(m - 1, p, qc, qw)
    }

    let p_success = success(env.max_rounds, p, q_correct, q_wrong);
    let expected_rounds = rounds(env.max_rounds, p, q_correct, q_wrong);
    // One solver and one verifier step per round; invalid probabilities are
    // 1/A for the solver and (A−2)/A for the verifier.
    let expected_invalid = expected_rounds * (1.0 / a) + expected_rounds * ((a - 2.0) / a);
    let expected_reward = p_success - env.invalid_action_penalty * expected_invalid;
    (p_success, expected_rounds, expected_reward)
}

/// Expected reward and per-role step counts of the SearchPipeline tree under
/// uniform policies: a forward pass over the (turn, info) state distribution.
fn search_expectations(env: &EnvSpec) -> (f64, f64, f64, f64) {
    let a = env.action_count as f64;
    let full_rate = 1.0 - 0.5 * env.difficulty;
    // Info probability per search step: precise query at full rate, vague
    // valid queries shrunk by (1 − difficulty).
    let hit = (1.0 / a) * full_rate + ((a - 2.0) / a) * full_rate * (1.0 - env.difficulty);
    let s = env.skew;
    let suff_info = s + (1.0 - s) / a;
    let suff_noinfo = (1.0 - s) / a;

    let mut prob_info = env.known_info_rate;
    let mut prob_noinfo = 1.0 - env.known_info_rate;
    let mut verifier_steps = 0.0;
    let mut search_steps = 0.0;
    // Turns 1..max-1 run verifier (+ search unless routed to answer); the
    // final turn forces the answer.
    for _turn in 1..env.max_rounds {
        verifier_steps += prob_info + prob_noinfo;
        // Routed to answer: episode leaves the loop.
        let leave_info = prob_info * suff_info;
        let leave_noinfo = prob_noinfo * suff_noinfo;
        let stay_info = prob_info - leave_info;
        let stay_noinfo = prob_noinfo - leave_noinfo;
        // Remaining episodes run one search step; info can be gathered.
        search_steps += stay_info + stay_noinfo;
        prob_info = stay_info + stay_noinfo * hit;
        prob_noinfo = stay_noinfo * (1.0 - hit);
    }
    // Uniform answer is correct with probability 1/A regardless of info.
    let p_success = 1.0 / a;
    let expected_invalid =
        verifier_steps * ((a - 2.0) / a) + search_steps * (1.0 / a) + 1.0 / a;
    let expected_reward = p_success - env.invalid_action_penalty * expected_invalid;
    (p_success, verifier_steps, search_steps, expected_reward)
}

struct MonteCarlo {
    mean_reward: f64,
    success_rate: f64,
    mean_steps_per_agent: Vec<f64>,
    /// Step-weighted reward mean of the designated agent minus the
    /// trajectory-reward mean.
    designated_gap: f64,
    inflation_multiplier: f64,
}

fn simulate(env: &EnvSpec, runs: usize, seed: u64) -> MonteCarlo {
    let policy = uniform(env);
    let policies: Vec<PolicyParams> = (0..env.topology.agent_count())
        .map(|_| policy.clone())
        .collect();
    simulate_with(env, &policies, runs, seed)
}

fn simulate_with(env: &EnvSpec, policies: &[PolicyParams], runs: usize, seed: u64) -> MonteCarlo {
    let k = env.topology.agent_count();
    let mut rewards = Vec::with_capacity(runs);
    let mut steps_per_agent = vec![0usize; k];
    let mut designated: Vec<f64> = Vec::new();
    let designated_agent = env.designated_agent();
    for i in 0..runs {
        let mut task_rng = substream(seed, Purpose::Task, 0, i as u64, 0);
        let task = generate_task(env, format!("t{i}"), &mut task_rng);
        let mut rng = substream(seed, Purpose::Rollout, 0, i as u64, 0);
        let traj = rollout(env, &task, |a| policies.get(a.offset()), &mut rng).unwrap();
        for step in &traj.steps {
            steps_per_agent[step.agent.offset()] += 1;
            if step.agent == designated_agent {
                designated.push(traj.reward);
            }
        }
        rewards.push(traj.reward);
    }
    let n = runs as f64;
    let mean_reward = rewards.iter().sum::<f64>() / n;
    let success_rate = rewards.iter().filter(|r| **r >= 0.5).count() as f64 / n;
    let mu = mean_reward;
    let sigma_sq = rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / n;
    let mu_k = designated.iter().sum::<f64>() / designated.len() as f64;
    let sigma_k_sq =
        designated.iter().map(|r| (r - mu_k) * (r - mu_k)).sum::<f64>() / designated.len() as f64;
    MonteCarlo {
        mean_reward,
        success_rate,
        mean_steps_per_agent: steps_per_agent.iter().map(|c| *c as f64 / n).collect(),
        designated_gap: mu_k - mu,
        inflation_multiplier: (sigma_k_sq + (mu_k - mu) * (mu_k - mu)) / sigma_sq,
    }
}

#[test]
fn math_loop_matches_tree_enumeration() {
    for skew in [0.0, 0.5, 1.0] {
        let mut env = EnvSpec::defaults(Topology::MathLoop);
        env.skew = skew;
        let (p_success, rounds, reward) = math_loop_expectations(&env);
        let mc = simulate(&env, 10_000, 42);
        assert!(
            (mc.success_rate - p_success).abs() <= 0.03,
            "skew {skew}: success {} vs analytic {p_success}",
            mc.success_rate
        );
        assert!(
            (mc.mean_reward - reward).abs() <= 0.03,
            "skew {skew}: reward {} vs analytic {reward}",
            mc.mean_reward
        );
        assert!(
            (mc.mean_steps_per_agent[SOLVER.offset()] - rounds).abs() <= 0.05,
            "skew {skew}: solver steps {} vs analytic {rounds}",
            mc.mean_steps_per_agent[SOLVER.offset()]
        );
    }
}

#[test]
fn search_pipeline_matches_tree_enumeration() {
    for (skew, known) in [(0.0, 0.0), (1.0, 0.0), (1.0, 0.6), (0.5, 0.3)] {
        let mut env = EnvSpec::defaults(Topology::SearchPipeline);
        env.skew = skew;
        env.known_info_rate = known;
        let (p_success, verifier_steps, search_steps, reward) = search_expectations(&env);
        let mc = simulate(&env, 10_000, 43);
        assert!(
            (mc.success_rate - p_success).abs() <= 0.03,
            "skew {skew} known {known}: success {} vs analytic {p_success}",
            mc.success_rate
        );
        assert!(
            (mc.mean_reward - reward).abs() <= 0.03,
            "skew {skew} known {known}: reward {} vs analytic {reward}",
            mc.mean_reward
        );
        assert!(
            (mc.mean_steps_per_agent[0] - verifier_steps).abs() <= 0.05,
            "verifier steps {} vs analytic {verifier_steps}",
            mc.mean_steps_per_agent[0]
        );
        assert!(
            (mc.mean_steps_per_agent[SEARCH.offset()] - search_steps).abs() <= 0.05,
            "search steps {} vs analytic {search_steps}",
            mc.mean_steps_per_agent[SEARCH.offset()]
        );
    }
}

/// Competent solver + uniform verifier: the regime the skew knob targets,
/// with a global success rate above one half.
fn skew_fixture_policies(env: &EnvSpec) -> Vec<PolicyParams> {
    vec![pointer_policy(env, 6.0f64.ln()), uniform(env)]
}

#[test]
fn zero_skew_decouples_designated_agent_statistics() {
    let base = EnvSpec::defaults(Topology::MathLoop);
    let family = make_skewed_family(&base, &[0.0]);
    let policies = skew_fixture_policies(&family[0]);
    let mc = simulate_with(&family[0], &policies, 10_000, 44);
    assert!(
        mc.designated_gap.abs() <= 0.02,
        "unexpected coupling at skew 0: gap {}",
        mc.designated_gap
    );
}

#[test]
fn full_skew_pushes_designated_mean_below_global() {
    let base = EnvSpec::defaults(Topology::MathLoop);
    let family = make_skewed_family(&base, &[1.0]);
    let policies = skew_fixture_policies(&family[0]);
    let mc = simulate_with(&family[0], &policies, 10_000, 45);
    assert!(
        mc.mean_reward > 0.5,
        "fixture must sit in the high-success regime, got {}",
        mc.mean_reward
    );
    assert!(
        mc.designated_gap < -0.02,
        "skew 1 should depress the solver's step-weighted mean, gap {}",
        mc.designated_gap
    );
}

#[test]
fn multiplier_grows_monotonically_with_skew() {
    let base = EnvSpec::defaults(Topology::MathLoop);
    let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
    let family = make_skewed_family(&base, &levels);
    let multipliers: Vec<f64> = family
        .iter()
        .map(|env| {
            let policies = skew_fixture_policies(env);
            simulate_with(env, &policies, 10_000, 46).inflation_multiplier
        })
        .collect();
    for pair in multipliers.windows(2) {
        assert!(
            pair[1] >= pair[0] - 0.05,
            "multiplier not nondecreasing: {multipliers:?}"
        );
    }
    assert!(multipliers[4] > multipliers[0] + 0.1);
}

#[test]
fn trajectories_have_no_orphan_agents_and_bounded_length() {
    for topology in [Topology::MathLoop, Topology::SearchPipeline] {
        let env = EnvSpec::defaults(topology);
        let policy = uniform(&env);
        let k = env.topology.agent_count();
        for i in 0..300u64 {
            let mut task_rng = substream(47, Purpose::Task, 0, i, 0);
            let task = generate_task(&env, format!("t{i}"), &mut task_rng);
            let mut rng = substream(47, Purpose::Rollout, 0, i, 0);
            let traj = rollout(&env, &task, |_| Some(&policy), &mut rng).unwrap();
            assert!(traj.len() <= env.max_steps());
            assert!(traj.steps.iter().all(|s| s.agent.0 >= 1 && s.agent.0 <= k));
        }
    }
}

#[test]
fn active_sets_partition_rollout_groups() {
    let env = EnvSpec::defaults(Topology::SearchPipeline);
    let policy = uniform(&env);
    let mut task_rng = substream(48, Purpose::Task, 0, 0, 0);
    let task = generate_task(&env, "t".into(), &mut task_rng);
    let trajectories: Vec<_> = (0..6u64)
        .map(|r| {
            let mut rng = substream(48, Purpose::Rollout, 0, 0, r);
            rollout(&env, &task, |_| Some(&policy), &mut rng).unwrap()
        })
        .collect();
    let group = magrpo::core::RolloutGroup::new(task.task_id.clone(), trajectories).unwrap();
    let total: usize = (1..=3).map(|k| active_set(&group, AgentId(k)).len()).sum();
    assert_eq!(total, group.step_count());
}
