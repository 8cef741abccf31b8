//! Actor-critic with community-level state-value critics.
//!
//! Communities keep `V(s; v^(k)) = φ_V(s)'v^(k)`, an average-reward
//! estimate `μ^(k)` and a linear reward model `R̄(s,a; ρ^(k)) = f(s,a)'ρ^(k)`.
//! The actor uses the state-value TD error
//! `R̄^i − μ^i + V^i(s_{t+1}) − V^i(s_t)` as its advantage.

use serde::{Deserialize, Serialize};

use crate::acq::{actor_step, membership_at, oracle_j, TrainConfig};
use crate::env::{sample_actions, AgentPolicy, FeatureMap, MultiAgentMdp, StateFeatureMap, TrajectoryRng};
use crate::membership::{Inverter, MembershipMatrix};
use crate::oracle::Chain;
use crate::trace::{block_columns, should_log, TrailingMean, TrainingTrace, J_WINDOW};
use crate::{Error, Result};

/// Default state-feature dimension `m_V`.
pub const DEFAULT_STATE_FEATURE_DIM: usize = 6;
/// Default reward-feature dimension `m_ϱ`.
pub const DEFAULT_REWARD_FEATURE_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticStateV {
    pub v: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    pub t: u64,
}

impl CriticStateV {
    pub fn zeros(k: usize, state_dim: usize, reward_dim: usize) -> Self {
        Self { v: vec![vec![0.0; state_dim]; k], mu: vec![0.0; k], rho: vec![vec![0.0; reward_dim]; k], t: 0 }
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    /// `V^i(s) = Σ_k γ_i(k) φ_V(s)'v^(k)`.
    pub fn agent_value(&self, gamma: &MembershipMatrix, i: usize, phi_v: &StateFeatureMap, s: usize) -> f64 {
        (0..self.k()).map(|c| gamma.weight(i, c) * phi_v.dot(s, &self.v[c])).sum()
    }

    pub fn agent_mu(&self, gamma: &MembershipMatrix, i: usize) -> f64 {
        (0..self.k()).map(|c| gamma.weight(i, c) * self.mu[c]).sum()
    }

    /// `R̄^i(s,a) = Σ_k γ_i(k) f(s,a)'ρ^(k)`, given `f(s,a)`.
    pub fn agent_reward(&self, gamma: &MembershipMatrix, i: usize, f_sa: &[f64]) -> f64 {
        (0..self.k()).map(|c| gamma.weight(i, c) * dot(f_sa, &self.rho[c])).sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// TD errors and community rewards of a state-value critic step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepV {
    pub td: Vec<f64>,
    pub community_rewards: Vec<f64>,
}

/// `e^(k) = r^(k) − μ^(k) + φ_V(s')'v^(k) − φ_V(s)'v^(k)` with pre-update
/// parameters, then `μ ← (1−η)μ + ηr` and `v ← v + η e φ_V(s)`.
pub fn critic_step_v(
    critic: &mut CriticStateV,
    inv: &Inverter,
    s: usize,
    rewards: &[f64],
    s_next: usize,
    phi_v: &StateFeatureMap,
    eta: f64,
) -> Result<StepV> {
    let community_rewards = inv.apply(rewards)?;
    critic_step_v_community(critic, community_rewards, s, s_next, phi_v, eta)
}

fn critic_step_v_community(
    critic: &mut CriticStateV,
    community_rewards: Vec<f64>,
    s: usize,
    s_next: usize,
    phi_v: &StateFeatureMap,
    eta: f64,
) -> Result<StepV> {
    let k = critic.k();
    let td: Vec<f64> = (0..k)
        .map(|c| community_rewards[c] - critic.mu[c] + phi_v.dot(s_next, &critic.v[c]) - phi_v.dot(s, &critic.v[c]))
        .collect();
    if let Some(c) = td.iter().position(|e| !e.is_finite()) {
        return Err(Error::NumericAbort { step: critic.t, what: format!("state-value TD error of community {} is {}", c + 1, td[c]) });
    }
    let row = phi_v.row(s);
    for c in 0..k {
        critic.mu[c] = (1.0 - eta) * critic.mu[c] + eta * community_rewards[c];
        for (w, x) in critic.v[c].iter_mut().zip(row) {
            *w += eta * td[c] * x;
        }
    }
    critic.t += 1;
    Ok(StepV { td, community_rewards })
}

/// `ρ^(k) ← ρ^(k) + β (r^(k) − f'ρ^(k)) f` for each community.
pub fn reward_model_step(critic: &mut CriticStateV, community_rewards: &[f64], f_sa: &[f64], beta: f64) {
    for (rho, r) in critic.rho.iter_mut().zip(community_rewards) {
        let resid = r - dot(f_sa, rho);
        for (w, x) in rho.iter_mut().zip(f_sa) {
            *w += beta * resid * x;
        }
    }
}

/// `A^i = R̄^i − μ^i + V^i_{t+1} − V^i_t`, then a projected ascent step.
pub fn actor_step_v(policy: &mut AgentPolicy, reward_est: f64, mu: f64, v_t: f64, v_next: f64, score: &[f64], eta: f64) -> f64 {
    let adv = reward_est - mu + v_next - v_t;
    actor_step(policy, adv, score, eta);
    adv
}

/// `E[R̄(s,a) − J + V(s') − V(s) | s, a]` for every pair, given a
/// reward model, an average reward and state values.
pub fn expected_td_advantage(chain: &Chain, reward_model: &[f64], j: f64, v: &[f64]) -> Vec<f64> {
    let ns = chain.num_states();
    let jc = chain.num_pairs() / ns;
    let next = chain.next_expectation(&nalgebra::DVector::from_column_slice(v));
    (0..chain.num_pairs()).map(|p| reward_model[p] - j + next[p] - v[p / jc]).collect()
}

#[derive(Clone, Debug)]
pub struct VRun {
    pub trace: TrainingTrace,
    pub critic: CriticStateV,
    pub policies: Vec<AgentPolicy>,
}

/// State-value actor-critic. `β_ρ` and `η_v` share the critic schedule.
pub fn train_v(
    mdp: &MultiAgentMdp,
    gamma: &MembershipMatrix,
    phi_v: &StateFeatureMap,
    f: &FeatureMap,
    mut policies: Vec<AgentPolicy>,
    cfg: &TrainConfig,
) -> Result<VRun> {
    cfg.validate(mdp)?;
    let n = mdp.num_agents();
    if gamma.n() != n || policies.len() != n {
        return Err(Error::Shape(format!("{n} agents, Γ has {} rows, {} policies", gamma.n(), policies.len())));
    }
    if phi_v.values.len() != mdp.num_states() * phi_v.dim {
        return Err(Error::Shape("state features do not cover every state".into()));
    }
    let k = gamma.k();
    let (mv, mr) = (phi_v.dim, f.dim());
    let space = mdp.space().clone();

    let mut columns = vec!["t".to_string(), "J_hat".to_string()];
    columns.extend((1..=k).map(|c| format!("mu_{c}")));
    columns.extend(block_columns("v", k, mv));
    columns.extend(block_columns("rho", k, mr));
    for (i, p) in policies.iter().enumerate() {
        columns.extend((1..=p.dim()).map(|d| format!("theta_{}_{d}", i + 1)));
    }
    columns.push("td_abs_mean".into());
    if cfg.oracle_j {
        columns.push("J_oracle".into());
    }
    let mut trace = TrainingTrace::new(columns);
    let log = |trace: &mut TrainingTrace, t: u64, j: f64, critic: &CriticStateV, policies: &[AgentPolicy], td_abs: f64| {
        let mut row = Vec::with_capacity(trace.columns.len());
        row.push(t as f64);
        row.push(j);
        row.extend(&critic.mu);
        critic.v.iter().for_each(|w| row.extend(w));
        critic.rho.iter().for_each(|w| row.extend(w));
        policies.iter().for_each(|p| row.extend(&p.theta));
        row.push(td_abs);
        if cfg.oracle_j {
            row.push(oracle_j(mdp, policies));
        }
        trace.push(row);
    };

    let mut critic = CriticStateV::zeros(k, mv, mr);
    let mut rng = TrajectoryRng::new(cfg.seed);
    let mut window = TrailingMean::new(J_WINDOW);
    log(&mut trace, 0, window.mean(), &critic, &policies, f64::NAN);

    let fixed_inv = if cfg.membership_drift.is_none() { Some(Inverter::new(gamma, cfg.ridge)?) } else { None };
    let mut s = cfg.initial_state;
    let mut f_sa = vec![0.0; mr];
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
        let a = space.encode(&sample_actions(&policies, s, &mut rng.sampling));
        let (s_next, rewards) = mdp.transition(s, a, &mut rng);
        let eta_v = cfg.schedule.critic(iter);
        let eta_t = cfg.schedule.actor(iter);
        f.fill(s, a, &mut f_sa);

        // Actor quantities use the parameters from before this step's critic updates.
        if !cfg.freeze_actor {
            let snapshot = critic.clone();
            for (i, policy) in policies.iter_mut().enumerate() {
                let r_bar = snapshot.agent_reward(&gamma_t, i, &f_sa);
                let mu = snapshot.agent_mu(&gamma_t, i);
                let v_t = snapshot.agent_value(&gamma_t, i, phi_v, s);
                let v_next = snapshot.agent_value(&gamma_t, i, phi_v, s_next);
                let psi = policy.score(s, space.local(a, i));
                actor_step_v(policy, r_bar, mu, v_t, v_next, &psi, eta_t);
                if policy.theta.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericAbort { step: iter, what: format!("θ of agent {} is not finite", i + 1) });
                }
            }
        }

        let community = inv.apply(&rewards)?;
        reward_model_step(&mut critic, &community, &f_sa, eta_v);
        let step = critic_step_v_community(&mut critic, community, s, s_next, phi_v, eta_v)?;
        let td_abs = step.td.iter().map(|e| e.abs()).sum::<f64>() / k as f64;

        window.push(rewards.iter().sum::<f64>() / n as f64);
        if should_log(iter, cfg.log_stride, cfg.steps) {
            log(&mut trace, iter + 1, window.mean(), &critic, &policies, td_abs);
        }
        s = s_next;
    }
    Ok(VRun { trace, critic, policies })
}
