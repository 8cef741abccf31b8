//! Actor-critic with community-level Q critics.
//!
//! Each community `k` keeps a linear critic `Q(s,a; ω^(k)) = φ(s,a)'ω^(k)`
//! and an average-reward estimate `μ^(k)`, both driven by community rewards
//! obtained by inverting the agent rewards against `Γ`. Agents aggregate
//! the community parameters with their membership weights and run a
//! projected policy-gradient step with a counterfactual advantage.

use serde::{Deserialize, Serialize};

use crate::env::{sample_actions, AgentPolicy, FeatureMap, MultiAgentMdp, StepSchedule, TrajectoryRng};
use crate::membership::{Inverter, MembershipMatrix};
use crate::oracle;
use crate::trace::{block_columns, should_log, TrailingMean, TrainingTrace, J_WINDOW};
use crate::transfer::{select_communities, uncertainty_scores_from_td};
use crate::{Error, Result};

/// Per-community critic parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticStateQ {
    pub omega: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub t: u64,
}

impl CriticStateQ {
    /// `ω_0 = 0`, `μ_0 = 0`.
    pub fn zeros(k: usize, feature_dim: usize) -> Self {
        Self { omega: vec![vec![0.0; feature_dim]; k], mu: vec![0.0; k], t: 0 }
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    /// Agent parameter `ω^i = Σ_k γ_i(k) ω^(k)`.
    pub fn agent_omega(&self, gamma: &MembershipMatrix, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.omega.first().map_or(0, Vec::len)];
        gamma.aggregate_vector_into(i, &self.omega, &mut out);
        out
    }
}

/// One SARSA-style transition `(s_t, a_t, r_{a,t+1}, s_{t+1}, a_{t+1})`.
#[derive(Clone, Copy, Debug)]
pub struct TransitionRecord<'a> {
    pub state: usize,
    pub action: u64,
    pub rewards: &'a [f64],
    pub next_state: usize,
    pub next_action: u64,
}

/// Result of a critic step.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticStep {
    /// TD errors `e^(k)`, evaluated with the pre-update `μ_t` and `ω_t`.
    pub td: Vec<f64>,
    pub community_rewards: Vec<f64>,
    /// `‖φ(s_t, a_t)‖₂`, so that `‖e^(k) φ‖ = |e^(k)| · feature_norm`.
    pub feature_norm: f64,
}

/// TD errors for a transition without changing the critic.
pub fn td_errors(critic: &CriticStateQ, inv: &Inverter, rec: &TransitionRecord, phi: &FeatureMap) -> Result<CriticStep> {
    let k = critic.k();
    let community_rewards = inv.apply(rec.rewards)?;
    let m = phi.dim();
    let mut cur = vec![0.0; m];
    let mut next = vec![0.0; m];
    phi.fill(rec.state, rec.action, &mut cur);
    phi.fill(rec.next_state, rec.next_action, &mut next);
    let td: Vec<f64> = (0..k)
        .map(|c| {
            let w = &critic.omega[c];
            let q_next: f64 = next.iter().zip(w).map(|(x, y)| x * y).sum();
            let q_cur: f64 = cur.iter().zip(w).map(|(x, y)| x * y).sum();
            community_rewards[c] - critic.mu[c] + q_next - q_cur
        })
        .collect();
    if let Some(c) = td.iter().position(|e| !e.is_finite()) {
        return Err(Error::NumericAbort {
            step: critic.t,
            what: format!("TD error of community {} is {} (reward {}, μ {})", c + 1, td[c], community_rewards[c], critic.mu[c]),
        });
    }
    let feature_norm = cur.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(CriticStep { td, community_rewards, feature_norm })
}

/// Applies a computed step: `μ ← (1−η)μ + ηr` for every community and
/// `ω ← ω + η e φ(s_t,a_t)` for communities with `update[k]` set.
pub fn apply_critic_step(critic: &mut CriticStateQ, step: &CriticStep, rec: &TransitionRecord, phi: &FeatureMap, eta: f64, update: &[bool]) {
    let mut cur = vec![0.0; phi.dim()];
    phi.fill(rec.state, rec.action, &mut cur);
    for c in 0..critic.k() {
        critic.mu[c] = (1.0 - eta) * critic.mu[c] + eta * step.community_rewards[c];
        if update[c] {
            let scale = eta * step.td[c];
            for (w, x) in critic.omega[c].iter_mut().zip(&cur) {
                *w += scale * x;
            }
        }
    }
    critic.t += 1;
}

/// TD(0) critic step for every community.
pub fn critic_step(critic: &mut CriticStateQ, inv: &Inverter, rec: &TransitionRecord, phi: &FeatureMap, eta: f64) -> Result<CriticStep> {
    let step = td_errors(critic, inv, rec, phi)?;
    let all = vec![true; critic.k()];
    apply_critic_step(critic, &step, rec, phi, eta, &all);
    Ok(step)
}

/// `A^i = φ(s,a)'ω^i − Σ_b π^i(s,b) φ(s,(b, a^{−i}))'ω^i`.
pub fn advantage_estimate(mdp: &MultiAgentMdp, phi: &FeatureMap, policy: &AgentPolicy, omega_i: &[f64], i: usize, s: usize, a: u64) -> f64 {
    let space = mdp.space();
    let mut buf = vec![0.0; phi.dim()];
    let q = phi.dot(s, a, omega_i, &mut buf);
    let probs = policy.probs(s);
    let baseline: f64 = probs
        .iter()
        .enumerate()
        .map(|(b, p)| p * phi.dot(s, space.with_local(a, i, b), omega_i, &mut buf))
        .sum();
    q - baseline
}

/// `θ ← Π_Θ(θ + η A ψ)`.
pub fn actor_step(policy: &mut AgentPolicy, advantage: f64, score: &[f64], eta: f64) {
    for (t, g) in policy.theta.iter_mut().zip(score) {
        *t += eta * advantage * g;
    }
    policy.project();
}

/// Loop settings shared by the training variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub schedule: StepSchedule,
    /// Seed of the trajectory streams (sampling and reward noise).
    pub seed: u64,
    pub log_stride: u64,
    /// Ridge `ε` of the reward inversion; 0 requires full column rank.
    pub ridge: f64,
    /// Keeps θ fixed (critic evaluation only).
    pub freeze_actor: bool,
    pub initial_state: usize,
    /// Optional drift constant `c` of `γ_it = (1 − c/t)γ_i + (c/t)/K`.
    pub membership_drift: Option<f64>,
    /// Adds a `J_oracle` column with the exact `J(θ_t)` (small instances only).
    pub oracle_j: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            schedule: StepSchedule::default(),
            seed: 0,
            log_stride: 1,
            ridge: 0.0,
            freeze_actor: false,
            initial_state: 0,
            membership_drift: None,
            oracle_j: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, mdp: &MultiAgentMdp) -> Result<()> {
        self.schedule.validate()?;
        if self.initial_state >= mdp.num_states() {
            return Err(Error::InvalidArgument(format!("initial state {} out of range", self.initial_state)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which communities update `ω` each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    All,
    /// Top-`budget` communities by uncertainty score. `force_all` selects
    /// every community and reproduces [`Selection::All`] exactly.
    Active { budget: usize, force_all: bool },
}

/// Output of a training run.
#[derive(Clone, Debug)]
pub struct QRun {
    pub trace: TrainingTrace,
    pub critic: CriticStateQ,
    pub policies: Vec<AgentPolicy>,
    /// Visits per pair `s·|A| + a` when the instance is enumerable.
    pub visits: Option<Vec<u64>>,
}

fn check_inputs(mdp: &MultiAgentMdp, gamma: &MembershipMatrix, policies: &[AgentPolicy]) -> Result<()> {
    if gamma.n() != mdp.num_agents() || policies.len() != mdp.num_agents() {
        return Err(Error::Shape(format!(
            "{} agents, Γ has {} rows, {} policies",
            mdp.num_agents(),
            gamma.n(),
            policies.len()
        )));
    }
    Ok(())
}

pub(crate) fn membership_at(gamma: &MembershipMatrix, drift: Option<f64>, iter: u64) -> MembershipMatrix {
    match drift {
        Some(c) => gamma.drifted(iter + 1, c),
        None => gamma.clone(),
    }
}

pub(crate) fn oracle_j(mdp: &MultiAgentMdp, policies: &[AgentPolicy]) -> f64 {
    oracle::global_average_return(mdp, policies).unwrap_or(f64::NAN)
}

pub(crate) fn visit_table(mdp: &MultiAgentMdp) -> Option<Vec<u64>> {
    oracle::check_enumerable(mdp, oracle::DEFAULT_ENUMERATION_CAP).ok().map(|_| vec![0; mdp.num_pairs()])
}

/// Community-level actor-critic.
pub fn train(mdp: &MultiAgentMdp, gamma: &MembershipMatrix, phi: &FeatureMap, policies: Vec<AgentPolicy>, cfg: &TrainConfig) -> Result<QRun> {
    train_with_selection(mdp, gamma, phi, policies, cfg, Selection::All)
}

pub fn train_with_selection(
    mdp: &MultiAgentMdp,
    gamma: &MembershipMatrix,
    phi: &FeatureMap,
    mut policies: Vec<AgentPolicy>,
    cfg: &TrainConfig,
    selection: Selection,
) -> Result<QRun> {
    cfg.validate(mdp)?;
    check_inputs(mdp, gamma, &policies)?;
    let k = gamma.k();
    let n = mdp.num_agents();
    let m = phi.dim();
    let space = mdp.space().clone();
    let log_selection = match selection {
        Selection::All => false,
        Selection::Active { budget, force_all } => {
            if budget == 0 || budget >= k {
                return Err(Error::InvalidArgument(format!("query budget {budget} must satisfy 1 ≤ M < K = {k}")));
            }
            !force_all
        }
    };

    let mut columns = vec!["t".to_string(), "J_hat".to_string()];
    columns.extend((1..=k).map(|c| format!("mu_{c}")));
    columns.extend(block_columns("omega", k, m));
    for (i, p) in policies.iter().enumerate() {
        columns.extend((1..=p.dim()).map(|d| format!("theta_{}_{d}", i + 1)));
    }
    columns.push("td_abs_mean".into());
    if log_selection {
        columns.extend((1..=k).map(|c| format!("sel_{c}")));
    }
    if cfg.oracle_j {
        columns.push("J_oracle".into());
    }
    let mut trace = TrainingTrace::new(columns);

    let mut critic = CriticStateQ::zeros(k, m);
    let mut rng = TrajectoryRng::new(cfg.seed);
    let mut window = TrailingMean::new(J_WINDOW);
    let mut visits = visit_table(mdp);
    let mut selected = vec![true; k];
    let mut last_td_abs = f64::NAN;

    let log = |trace: &mut TrainingTrace, t: u64, j: f64, critic: &CriticStateQ, policies: &[AgentPolicy], td_abs: f64, sel: Option<&[bool]>| {
        let mut row = Vec::with_capacity(trace.columns.len());
        row.push(t as f64);
        row.push(j);
        row.extend(&critic.mu);
        for w in &critic.omega {
            row.extend(w);
        }
        for p in policies {
            row.extend(&p.theta);
        }
        row.push(td_abs);
        if log_selection {
            match sel {
                Some(s) => row.extend(s.iter().map(|&b| if b { 1.0 } else { 0.0 })),
                None => row.extend(std::iter::repeat_n(0.0, k)),
            }
        }
        if cfg.oracle_j {
            row.push(oracle_j(mdp, policies));
        }
        trace.push(row);
    };

    log(&mut trace, 0, window.mean(), &critic, &policies, last_td_abs, None);

    let fixed_inv = if cfg.membership_drift.is_none() { Some(Inverter::new(gamma, cfg.ridge)?) } else { None };
    let mut s = cfg.initial_state;
    let mut a = space.encode(&sample_actions(&policies, s, &mut rng.sampling));
    let mut omega_i = vec![0.0; m];

    for iter in 0..cfg.steps {
        let gamma_t = membership_at(gamma, cfg.membership_drift, iter);
        let drift_inv;
        let inv = match &fixed_inv {
            Some(inv) => inv,
            None => {
                drift_inv = Inverter::new(&gamma_t, cfg.ridge)?;
                &drift_inv
            }
        };
        let (s_next, rewards) = mdp.transition(s, a, &mut rng);
        let a_next = space.encode(&sample_actions(&policies, s_next, &mut rng.sampling));
        let rec = TransitionRecord { state: s, action: a, rewards: &rewards, next_state: s_next, next_action: a_next };
        let eta_w = cfg.schedule.critic(iter);
        let eta_t = cfg.schedule.actor(iter);

        let step = td_errors(&critic, inv, &rec, phi)?;

        if !cfg.freeze_actor {
            for i in 0..n {
                gamma_t.aggregate_vector_into(i, &critic.omega, &mut omega_i);
                let adv = advantage_estimate(mdp, phi, &policies[i], &omega_i, i, s, a);
                let psi = policies[i].score(s, space.local(a, i));
                actor_step(&mut policies[i], adv, &psi, eta_t);
                if policies[i].theta.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericAbort { step: iter, what: format!("θ of agent {} is not finite", i + 1) });
                }
            }
        }

        if let Selection::Active { budget, force_all } = selection {
            if !force_all {
                let scores = uncertainty_scores_from_td(&gamma_t, &step.td, step.feature_norm);
                let chosen = select_communities(&scores, budget)?;
                selected.iter_mut().for_each(|x| *x = false);
                for c in chosen {
                    selected[c] = true;
                }
            }
        }
        apply_critic_step(&mut critic, &step, &rec, phi, eta_w, &selected);
        last_td_abs = step.td.iter().map(|e| e.abs()).sum::<f64>() / k as f64;

        if let Some(v) = visits.as_mut() {
            v[mdp.pair_index(s, a)] += 1;
        }
        window.push(rewards.iter().sum::<f64>() / n as f64);
        if should_log(iter, cfg.log_stride, cfg.steps) {
            log(&mut trace, iter + 1, window.mean(), &critic, &policies, last_td_abs, Some(&selected));
        }
        s = s_next;
        a = a_next;
    }
    Ok(QRun { trace, critic, policies, visits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{random_policies, MdpShape, Storage, DEFAULT_TABLE_CAP};
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;

    fn desk() -> (MultiAgentMdp, MembershipMatrix, FeatureMap, Vec<AgentPolicy>) {
        let shape = MdpShape { num_agents: 2, num_states: 3, actions_per_agent: 2 };
        let mdp = MultiAgentMdp::random(shape, 1, Storage::ExplicitTable, DEFAULT_TABLE_CAP).unwrap();
        let gamma = MembershipMatrix::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let phi = FeatureMap::random(&mdp, 4, 1, stream::FEATURES, true).unwrap();
        let pol = random_policies(2, 3, 2, 5, 1);
        (mdp, gamma, phi, pol)
    }

    #[test]
    fn zero_td_leaves_omega_unchanged() {
        let (_, gamma, phi, _) = desk();
        let inv = Inverter::new(&gamma, 0.0).unwrap();
        let mut critic = CriticStateQ::zeros(2, 4);
        critic.omega = vec![vec![0.5, -1.0, 2.0, 0.25], vec![1.0, 1.0, -1.0, 0.0]];
        let community = [1.5, 2.5];
        critic.mu = community.to_vec();
        let agent = gamma.aggregate(&community).unwrap();
        let rec = TransitionRecord { state: 1, action: 2, rewards: &agent, next_state: 1, next_action: 2 };
        let before = critic.omega.clone();
        let step = critic_step(&mut critic, &inv, &rec, &phi, 0.3).unwrap();
        for (e, w) in step.td.iter().zip(&critic.omega).zip(&before).map(|((e, a), b)| (e, (a, b))) {
            assert!(e.abs() < 1e-12);
            for (x, y) in w.0.iter().zip(w.1) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_stepsize_changes_nothing() {
        let (_, gamma, phi, _) = desk();
        let inv = Inverter::new(&gamma, 0.0).unwrap();
        let mut critic = CriticStateQ::zeros(2, 4);
        critic.omega[0] = vec![1.0, 2.0, 3.0, 4.0];
        critic.mu = vec![0.3, -0.7];
        let snapshot = critic.clone();
        let rewards = [3.0, 1.0];
        let rec = TransitionRecord { state: 0, action: 1, rewards: &rewards, next_state: 2, next_action: 3 };
        critic_step(&mut critic, &inv, &rec, &phi, 0.0).unwrap();
        assert_eq!(critic.omega, snapshot.omega);
        assert_eq!(critic.mu, snapshot.mu);
    }

    #[test]
    fn td_uses_pre_update_mu() {
        let (_, gamma, phi, _) = desk();
        let inv = Inverter::new(&gamma, 0.0).unwrap();
        let mut critic = CriticStateQ::zeros(2, 4);
        critic.mu = vec![1.0, 1.0];
        let community = [3.0, 5.0];
        let agent = gamma.aggregate(&community).unwrap();
        let rec = TransitionRecord { state: 0, action: 0, rewards: &agent, next_state: 0, next_action: 0 };
        let step = critic_step(&mut critic, &inv, &rec, &phi, 0.5).unwrap();
        assert_abs_diff_eq!(step.td[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(step.td[1], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(critic.mu[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(critic.mu[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_reward_aborts() {
        let (_, gamma, phi, _) = desk();
        let inv = Inverter::new(&gamma, 0.0).unwrap();
        let mut critic = CriticStateQ::zeros(2, 4);
        let rewards = [f64::NAN, 1.0];
        let rec = TransitionRecord { state: 0, action: 0, rewards: &rewards, next_state: 0, next_action: 0 };
        assert!(matches!(critic_step(&mut critic, &inv, &rec, &phi, 0.5), Err(Error::NumericAbort { .. })));
    }

    #[test]
    fn advantage_vanishes_in_trivial_cases() {
        let (mdp, _, phi, pol) = desk();
        assert_eq!(advantage_estimate(&mdp, &phi, &pol[0], &[0.0; 4], 0, 1, 3), 0.0);
        // Features that ignore agent 0's action and a uniform policy.
        let ind = FeatureMap::action_indicators(mdp.space()).unwrap();
        let mut uniform = pol[0].clone();
        uniform.theta.iter_mut().for_each(|t| *t = 0.0);
        let omega = [0.0, 2.5];
        for a in 0..4 {
            assert_abs_diff_eq!(advantage_estimate(&mdp, &ind, &uniform, &omega, 0, 2, a), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn actor_step_projects() {
        let (_, _, _, pol) = desk();
        let mut p = pol[0].clone();
        let before = p.theta.clone();
        actor_step(&mut p, 0.0, &[1.0; 5], 1.0);
        assert_eq!(p.theta, before);
        actor_step(&mut p, 100.0, &[1.0, -1.0, 0.0, 0.0, 0.0], 1.0);
        assert_eq!(p.theta[0], 10.0);
        assert_eq!(p.theta[1], -10.0);
    }

    #[test]
    fn zero_steps_logs_initial_row_only() {
        let (mdp, gamma, phi, pol) = desk();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let run = train(&mdp, &gamma, &phi, pol.clone(), &cfg).unwrap();
        assert_eq!(run.trace.len(), 1);
        assert_eq!(run.trace.rows[0][0], 0.0);
        assert_eq!(run.policies, pol);
    }

    #[test]
    fn runs_are_deterministic_and_stay_in_the_box() {
        let (mdp, gamma, phi, pol) = desk();
        let cfg = TrainConfig { steps: 3000, seed: 4, log_stride: 10, ..TrainConfig::default() };
        let a = train(&mdp, &gamma, &phi, pol.clone(), &cfg).unwrap();
        let b = train(&mdp, &gamma, &phi, pol, &cfg).unwrap();
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        assert_eq!(a.trace.len(), 301);
        let thetas = a.trace.columns_with_prefix("theta_");
        for name in thetas {
            assert!(a.trace.column(&name).unwrap().iter().all(|x| (-10.0..=10.0).contains(x)));
        }
    }

    #[test]
    fn rank_deficient_membership_needs_ridge() {
        let (mdp, _, phi, pol) = desk();
        let gamma = MembershipMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let cfg = TrainConfig { steps: 10, ..TrainConfig::default() };
        assert!(matches!(train(&mdp, &gamma, &phi, pol.clone(), &cfg), Err(Error::RankDeficient { .. })));
        let cfg = TrainConfig { steps: 10, ridge: 1e-8, ..TrainConfig::default() };
        assert!(train(&mdp, &gamma, &phi, pol, &cfg).is_ok());
    }

    #[test]
    fn drifting_membership_runs() {
        let (mdp, gamma, phi, pol) = desk();
        let cfg = TrainConfig { steps: 200, membership_drift: Some(0.5), ..TrainConfig::default() };
        let run = train(&mdp, &gamma, &phi, pol, &cfg).unwrap();
        assert!(run.trace.rows[1..].iter().flatten().all(|x| x.is_finite()));
    }
}
