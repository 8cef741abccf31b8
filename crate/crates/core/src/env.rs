//! Community-based multi-agent MDP, Boltzmann policies and feature maps.
//!
//! Joint actions are encoded as little-endian mixed-radix integers with
//! agent 0 the least significant digit. Transition rows, reward tables and
//! features are pure functions of `(seed, coordinates)` drawn from the
//! counter-based generator in [`crate::rng`]; the explicit storage mode is a
//! materialization of exactly the same values.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::membership::MembershipMatrix;
use crate::rng::{stream, CounterRng, StreamRng};
use crate::{Error, Result};

/// Lower bound added to every transition probability.
pub const ERGODICITY_FLOOR: f64 = 1e-5;

/// Default cap on explicitly stored kernel entries (`|S|² · |A^i|^N`).
pub const DEFAULT_TABLE_CAP: u64 = 1 << 22;

pub const DEFAULT_POLICY_DIM: usize = 5;
pub const DEFAULT_FEATURE_DIM: usize = 10;
pub const DEFAULT_THETA_BOUND: f64 = 10.0;
pub const DEFAULT_REWARD_NOISE: f64 = 0.5;

/// Encoding between per-agent actions and joint-action indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionSpace {
    num_agents: usize,
    actions_per_agent: usize,
    joint_count: u64,
    radix_pow: Vec<u64>,
}

impl ActionSpace {
    pub fn new(num_agents: usize, actions_per_agent: usize) -> Result<Self> {
        if num_agents == 0 || actions_per_agent == 0 {
            return Err(Error::InvalidArgument("action space sizes must be positive".into()));
        }
        let mut radix_pow = Vec::with_capacity(num_agents);
        let mut acc: u64 = 1;
        for _ in 0..num_agents {
            radix_pow.push(acc);
            acc = acc.checked_mul(actions_per_agent as u64).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{actions_per_agent}^{num_agents} joint actions overflow a 64-bit index"
                ))
            })?;
        }
        Ok(Self { num_agents, actions_per_agent, joint_count: acc, radix_pow })
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn actions_per_agent(&self) -> usize {
        self.actions_per_agent
    }

    /// `|A^i|^N`.
    pub fn joint_count(&self) -> u64 {
        self.joint_count
    }

    pub fn encode(&self, actions: &[usize]) -> u64 {
        debug_assert_eq!(actions.len(), self.num_agents);
        actions.iter().zip(&self.radix_pow).map(|(&a, &p)| a as u64 * p).sum()
    }

    pub fn decode(&self, joint: u64) -> Vec<usize> {
        (0..self.num_agents).map(|i| self.local(joint, i)).collect()
    }

    /// Action of agent `i` inside a joint index.
    #[inline]
    pub fn local(&self, joint: u64, i: usize) -> usize {
        ((joint / self.radix_pow[i]) % self.actions_per_agent as u64) as usize
    }

    /// Joint index with agent `i`'s action replaced by `b`.
    #[inline]
    pub fn with_local(&self, joint: u64, i: usize, b: usize) -> u64 {
        let current = self.local(joint, i) as u64;
        joint - current * self.radix_pow[i] + b as u64 * self.radix_pow[i]
    }
}

/// Requested storage for kernel and reward tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Storage {
    /// Explicit when under the cap, lazy otherwise.
    #[default]
    Auto,
    ExplicitTable,
    LazySeeded,
}

#[derive(Clone, Debug)]
pub enum Kernel {
    /// Row-major `[s][a][s']`.
    Explicit(Vec<f64>),
    Lazy(CounterRng),
}

#[derive(Clone, Debug)]
pub enum RewardModel {
    /// Row-major `[i][s][a]`.
    Explicit(Vec<f64>),
    /// `R^i(s,a) ~ Uniform[lo, hi]`, generated on demand.
    Lazy { gen: CounterRng, lo: f64, hi: f64 },
    /// `R^i(s,a) = Σ_k γ_i(k) R^(k)(s, a^i)` with community tables over
    /// `(state, own action)`, stored `[k][s][b]`.
    CommunityAligned { membership: MembershipMatrix, tables: Vec<f64> },
}

/// Shape of a multi-agent MDP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdpShape {
    pub num_agents: usize,
    pub num_states: usize,
    pub actions_per_agent: usize,
}

#[derive(Clone, Debug)]
pub struct MultiAgentMdp {
    space: ActionSpace,
    num_states: usize,
    kernel: Kernel,
    rewards: RewardModel,
    noise_halfwidth: f64,
}

/// One environment transition with per-agent rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub actions: Vec<usize>,
    pub joint_action: u64,
    pub next_state: usize,
    pub rewards: Vec<f64>,
}

/// Random sources owned by one trajectory.
#[derive(Clone, Debug)]
pub struct TrajectoryRng {
    pub sampling: StreamRng,
    pub noise: StreamRng,
}

impl TrajectoryRng {
    pub fn new(seed: u64) -> Self {
        Self {
            sampling: StreamRng::new(seed, stream::TRAJECTORY),
            noise: StreamRng::new(seed, stream::NOISE),
        }
    }
}

fn lazy_transition_row(gen: &CounterRng, s: usize, a: u64, out: &mut [f64]) {
    let n = out.len();
    let mut total = 0.0;
    for (j, p) in out.iter_mut().enumerate() {
        *p = gen.uniform_at(&[s as u64, a, j as u64]);
        total += *p;
    }
    if total <= 0.0 {
        out.iter_mut().for_each(|p| *p = 1.0 / n as f64);
        return;
    }
    // Mixture with a floor keeps every entry >= 1e-5 while summing to one.
    let scale = 1.0 - n as f64 * ERGODICITY_FLOOR;
    let mut sum = 0.0;
    for p in out.iter_mut() {
        *p = scale * (*p / total) + ERGODICITY_FLOOR;
        sum += *p;
    }
    out.iter_mut().for_each(|p| *p /= sum);
}

impl MultiAgentMdp {
    /// Random MDP following the uniform recipe: kernel rows Uniform[0,1]
    /// floored and normalized, `R^i(s,a) ~ Uniform[0,4]`, reward noise 0.5.
    pub fn random(shape: MdpShape, seed: u64, storage: Storage, table_cap: u64) -> Result<Self> {
        if shape.num_states == 0 {
            return Err(Error::InvalidArgument("num_states must be positive".into()));
        }
        if shape.num_states as f64 * ERGODICITY_FLOOR >= 1.0 {
            return Err(Error::InvalidArgument("too many states for the ergodicity floor".into()));
        }
        let space = ActionSpace::new(shape.num_agents, shape.actions_per_agent)?;
        let entries = (shape.num_states as u64)
            .checked_mul(shape.num_states as u64)
            .and_then(|x| x.checked_mul(space.joint_count()));
        let fits = entries.is_some_and(|e| e <= table_cap);
        let explicit = match storage {
            Storage::Auto => fits,
            Storage::ExplicitTable if !fits => {
                return Err(Error::TableTooLarge {
                    entries: entries.unwrap_or(u64::MAX),
                    cap: table_cap,
                })
            }
            Storage::ExplicitTable => true,
            Storage::LazySeeded => false,
        };
        let mdp = Self {
            space,
            num_states: shape.num_states,
            kernel: Kernel::Lazy(CounterRng::new(seed, stream::KERNEL)),
            rewards: RewardModel::Lazy { gen: CounterRng::new(seed, stream::REWARDS), lo: 0.0, hi: 4.0 },
            noise_halfwidth: DEFAULT_REWARD_NOISE,
        };
        Ok(if explicit { mdp.materialized() } else { mdp })
    }

    /// Assembles an MDP from explicit tables, validating them.
    pub fn from_tables(
        shape: MdpShape,
        kernel: Vec<f64>,
        rewards: Vec<f64>,
        noise_halfwidth: f64,
    ) -> Result<Self> {
        let space = ActionSpace::new(shape.num_agents, shape.actions_per_agent)?;
        let pairs = shape.num_states * space.joint_count() as usize;
        if kernel.len() != pairs * shape.num_states {
            return Err(Error::Shape(format!(
                "kernel has {} entries, expected {}",
                kernel.len(),
                pairs * shape.num_states
            )));
        }
        if rewards.len() != pairs * shape.num_agents {
            return Err(Error::Shape(format!(
                "reward table has {} entries, expected {}",
                rewards.len(),
                pairs * shape.num_agents
            )));
        }
        for row in kernel.chunks(shape.num_states) {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidArgument("kernel rows must be probability vectors".into()));
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) || !(noise_halfwidth >= 0.0) {
            return Err(Error::InvalidArgument("rewards must be finite and noise nonnegative".into()));
        }
        Ok(Self {
            space,
            num_states: shape.num_states,
            kernel: Kernel::Explicit(kernel),
            rewards: RewardModel::Explicit(rewards),
            noise_halfwidth,
        })
    }

    pub fn with_rewards(mut self, rewards: RewardModel) -> Self {
        self.rewards = rewards;
        self
    }

    pub fn with_noise_halfwidth(mut self, w: f64) -> Self {
        self.noise_halfwidth = w;
        self
    }

    /// Copy with kernel and rewards stored as explicit tables.
    pub fn materialized(&self) -> Self {
        let pairs = self.num_pairs();
        let ns = self.num_states;
        let mut kernel = vec![0.0; pairs * ns];
        for (p, row) in kernel.chunks_mut(ns).enumerate() {
            let (s, a) = self.split_pair(p);
            self.transition_row_into(s, a, row);
        }
        let mut rewards = vec![0.0; pairs * self.num_agents()];
        for i in 0..self.num_agents() {
            for p in 0..pairs {
                let (s, a) = self.split_pair(p);
                rewards[i * pairs + p] = self.reward(i, s, a);
            }
        }
        Self {
            space: self.space.clone(),
            num_states: ns,
            kernel: Kernel::Explicit(kernel),
            rewards: match &self.rewards {
                RewardModel::Lazy { .. } => RewardModel::Explicit(rewards),
                other => other.clone(),
            },
            noise_halfwidth: self.noise_halfwidth,
        }
    }

    pub fn shape(&self) -> MdpShape {
        MdpShape {
            num_agents: self.space.num_agents(),
            num_states: self.num_states,
            actions_per_agent: self.space.actions_per_agent(),
        }
    }

    pub fn space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn num_agents(&self) -> usize {
        self.space.num_agents()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// `|S| · |A^i|^N` (saturating for large lazy instances).
    pub fn num_pairs(&self) -> usize {
        (self.num_states as u64).saturating_mul(self.space.joint_count()) as usize
    }

    pub fn pair_index(&self, s: usize, a: u64) -> usize {
        s * self.space.joint_count() as usize + a as usize
    }

    pub fn split_pair(&self, p: usize) -> (usize, u64) {
        let jc = self.space.joint_count() as usize;
        (p / jc, (p % jc) as u64)
    }

    pub fn noise_halfwidth(&self) -> f64 {
        self.noise_halfwidth
    }

    pub fn is_explicit(&self) -> bool {
        matches!(self.kernel, Kernel::Explicit(_))
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn reward_model(&self) -> &RewardModel {
        &self.rewards
    }

    pub fn transition_row_into(&self, s: usize, a: u64, out: &mut [f64]) {
        match &self.kernel {
            Kernel::Explicit(table) => {
                let start = self.pair_index(s, a) * self.num_states;
                out.copy_from_slice(&table[start..start + self.num_states]);
            }
            Kernel::Lazy(gen) => lazy_transition_row(gen, s, a, out),
        }
    }

    pub fn transition_row(&self, s: usize, a: u64) -> Vec<f64> {
        let mut row = vec![0.0; self.num_states];
        self.transition_row_into(s, a, &mut row);
        row
    }

    /// Mean reward `R^i(s,a)`.
    pub fn reward(&self, i: usize, s: usize, a: u64) -> f64 {
        match &self.rewards {
            RewardModel::Explicit(table) => table[i * self.num_pairs() + self.pair_index(s, a)],
            RewardModel::Lazy { gen, lo, hi } => lo + (hi - lo) * gen.uniform_at(&[i as u64, s as u64, a]),
            RewardModel::CommunityAligned { membership, tables } => {
                let b = self.space.local(a, i);
                let na = self.space.actions_per_agent();
                (0..membership.k())
                    .map(|k| membership.weight(i, k) * tables[(k * self.num_states + s) * na + b])
                    .sum()
            }
        }
    }

    /// Globally averaged mean reward `R̄(s,a)`.
    pub fn mean_reward(&self, s: usize, a: u64) -> f64 {
        let n = self.num_agents();
        (0..n).map(|i| self.reward(i, s, a)).sum::<f64>() / n as f64
    }

    /// Next state and noisy per-agent rewards for a given joint action.
    pub fn transition(&self, s: usize, joint: u64, rng: &mut TrajectoryRng) -> (usize, Vec<f64>) {
        let row = self.transition_row(s, joint);
        let next = rng.sampling.categorical(&row);
        let w = self.noise_halfwidth;
        let rewards = (0..self.num_agents())
            .map(|i| {
                let u = rng.noise.next_f64();
                self.reward(i, s, joint) + w * (2.0 * u - 1.0)
            })
            .collect();
        (next, rewards)
    }

    /// Samples `a ~ π(s,·)`, then the next state and rewards.
    pub fn step(&self, policies: &[AgentPolicy], s: usize, rng: &mut TrajectoryRng) -> Transition {
        let actions = sample_actions(policies, s, &mut rng.sampling);
        let joint_action = self.space.encode(&actions);
        let (next_state, rewards) = self.transition(s, joint_action, rng);
        Transition { state: s, actions, joint_action, next_state, rewards }
    }

    /// Copy with bounded perturbations: every reward shifted by
    /// `Uniform[-reward_shift, reward_shift]` and every kernel row mixed as
    /// `(1-λ)P + λ·Q` with a fresh random row `Q`. Result is explicit.
    pub fn perturbed(&self, reward_shift: f64, kernel_mix: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kernel_mix) || !(reward_shift >= 0.0) {
            return Err(Error::InvalidArgument("perturbation sizes out of range".into()));
        }
        let base = self.materialized();
        let gen = CounterRng::new(seed, stream::PERTURBATION);
        let fresh = CounterRng::new(seed, stream::KERNEL);
        let ns = self.num_states;
        let pairs = self.num_pairs();
        let Kernel::Explicit(mut kernel) = base.kernel else { unreachable!() };
        let mut q = vec![0.0; ns];
        for (p, row) in kernel.chunks_mut(ns).enumerate() {
            let (s, a) = self.split_pair(p);
            lazy_transition_row(&fresh, s, a, &mut q);
            let mut sum = 0.0;
            for (x, y) in row.iter_mut().zip(&q) {
                *x = (1.0 - kernel_mix) * *x + kernel_mix * y;
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let mut rewards = vec![0.0; pairs * self.num_agents()];
        for i in 0..self.num_agents() {
            for p in 0..pairs {
                let (s, a) = self.split_pair(p);
                let u = gen.uniform_at(&[i as u64, p as u64]);
                rewards[i * pairs + p] = self.reward(i, s, a) + reward_shift * (2.0 * u - 1.0);
            }
        }
        Ok(Self {
            space: self.space.clone(),
            num_states: ns,
            kernel: Kernel::Explicit(kernel),
            rewards: RewardModel::Explicit(rewards),
            noise_halfwidth: self.noise_halfwidth,
        })
    }
}

/// Community reward tables where community 0 prefers action 0, community 1
/// prefers action 1, community 2 prefers even states and community 3 odd
/// states (further communities alternate the same four roles). Preferred
/// entries are Uniform[3,4], the rest Uniform[1,2]. Layout `[k][s][b]`.
pub fn community_aligned_tables(k: usize, num_states: usize, actions: usize, seed: u64) -> Vec<f64> {
    let gen = CounterRng::new(seed, stream::REWARDS);
    let mut tables = vec![0.0; k * num_states * actions];
    for c in 0..k {
        for s in 0..num_states {
            for b in 0..actions {
                let preferred = match c % 4 {
                    0 => b == 0,
                    1 => b == 1,
                    2 => s % 2 == 0,
                    _ => s % 2 == 1,
                };
                let u = gen.uniform_at(&[c as u64, s as u64, b as u64]);
                tables[(c * num_states + s) * actions + b] = if preferred { 3.0 + u } else { 1.0 + u };
            }
        }
    }
    tables
}

/// Boltzmann policy `π(s,b) ∝ exp(q_{s,b}'θ)` with box-projected parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    pub theta: Vec<f64>,
    /// Row-major `[s][b][d]`.
    features: Vec<f64>,
    num_states: usize,
    num_actions: usize,
    lo: f64,
    hi: f64,
}

impl AgentPolicy {
    pub fn new(
        theta: Vec<f64>,
        features: Vec<f64>,
        num_states: usize,
        num_actions: usize,
        bound: (f64, f64),
    ) -> Result<Self> {
        let dim = theta.len();
        if features.len() != num_states * num_actions * dim {
            return Err(Error::Shape("policy feature table does not match θ dimension".into()));
        }
        if !(bound.0 < bound.1) {
            return Err(Error::InvalidArgument("empty projection box".into()));
        }
        let mut p = Self { theta, features, num_states, num_actions, lo: bound.0, hi: bound.1 };
        p.project();
        Ok(p)
    }

    /// Features `q_{s,b} ~ Uniform[0,1]^dim` for agent `agent`; θ ~ Uniform[−0.1, 0.1].
    pub fn random(agent: usize, num_states: usize, num_actions: usize, dim: usize, seed: u64) -> Self {
        let fgen = CounterRng::new(seed, stream::POLICY_FEATURES);
        let tgen = CounterRng::new(seed, stream::POLICY_INIT);
        let i = agent as u64;
        let mut features = Vec::with_capacity(num_states * num_actions * dim);
        for s in 0..num_states as u64 {
            for b in 0..num_actions as u64 {
                for d in 0..dim as u64 {
                    features.push(fgen.uniform_at(&[i, s, b, d]));
                }
            }
        }
        let theta = (0..dim as u64).map(|d| 0.2 * tgen.uniform_at(&[i, d]) - 0.1).collect();
        Self {
            theta,
            features,
            num_states,
            num_actions,
            lo: -DEFAULT_THETA_BOUND,
            hi: DEFAULT_THETA_BOUND,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn feature(&self, s: usize, b: usize) -> &[f64] {
        let d = self.dim();
        let start = (s * self.num_actions + b) * d;
        &self.features[start..start + d]
    }

    fn logit(&self, s: usize, b: usize) -> f64 {
        self.feature(s, b).iter().zip(&self.theta).map(|(q, t)| q * t).sum()
    }

    /// Action probabilities at `s`, log-sum-exp stabilized.
    pub fn probs(&self, s: usize) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.num_actions).map(|b| self.logit(s, b)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn prob(&self, s: usize, b: usize) -> f64 {
        self.probs(s)[b]
    }

    /// `∇_θ log π(s,b) = q_{s,b} − Σ_c π(s,c) q_{s,c}`.
    pub fn score(&self, s: usize, b: usize) -> Vec<f64> {
        let probs = self.probs(s);
        let mut out = self.feature(s, b).to_vec();
        for (c, p) in probs.iter().enumerate() {
            for (o, q) in out.iter_mut().zip(self.feature(s, c)) {
                *o -= p * q;
            }
        }
        out
    }

    /// Clamps every coordinate of θ into the box.
    pub fn project(&mut self) {
        let (lo, hi) = (self.lo, self.hi);
        self.theta.iter_mut().for_each(|t| *t = t.clamp(lo, hi));
    }

    pub fn in_box(&self) -> bool {
        self.theta.iter().all(|t| (self.lo..=self.hi).contains(t))
    }
}

/// Default random policies for every agent.
pub fn random_policies(n: usize, num_states: usize, num_actions: usize, dim: usize, seed: u64) -> Vec<AgentPolicy> {
    (0..n).map(|i| AgentPolicy::random(i, num_states, num_actions, dim, seed)).collect()
}

/// Each agent draws `a^i ~ π^i(s,·)` independently, in agent order.
pub fn sample_actions(policies: &[AgentPolicy], s: usize, rng: &mut StreamRng) -> Vec<usize> {
    policies.iter().map(|p| rng.categorical(&p.probs(s))).collect()
}

/// Joint policy probability `π(s,a) = Π_i π^i(s,a^i)`.
pub fn joint_prob(space: &ActionSpace, policies: &[AgentPolicy], s: usize, a: u64) -> f64 {
    policies.iter().enumerate().map(|(i, p)| p.prob(s, space.local(a, i))).product()
}

/// Stepsizes `η_ω,t = t^{−α}` and `η_θ,t = t^{−β}` with `t` counted from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub critic_exponent: f64,
    pub actor_exponent: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { critic_exponent: 0.65, actor_exponent: 0.85 }
    }
}

impl StepSchedule {
    pub fn new(critic_exponent: f64, actor_exponent: f64) -> Result<Self> {
        let s = Self { critic_exponent, actor_exponent };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.critic_exponent, self.actor_exponent);
        if !(a > 0.5 && a <= 1.0) {
            return Err(Error::InvalidArgument(format!("critic exponent {a} outside (0.5, 1]")));
        }
        if !(b > a && b <= 1.0) {
            return Err(Error::InvalidArgument(format!("actor exponent {b} outside ({a}, 1]")));
        }
        Ok(())
    }

    /// Critic stepsize at loop iteration `iter` (iteration 0 uses t = 1).
    pub fn critic(&self, iter: u64) -> f64 {
        ((iter + 1) as f64).powf(-self.critic_exponent)
    }

    pub fn actor(&self, iter: u64) -> f64 {
        ((iter + 1) as f64).powf(-self.actor_exponent)
    }
}

/// Feature map `φ(s,a) ∈ [0,1]^m` over state/joint-action pairs.
#[derive(Clone, Debug)]
pub enum FeatureMap {
    /// Row-major `[s·|A| + a][d]`.
    Materialized { dim: usize, joint_count: u64, values: Vec<f64> },
    Lazy { dim: usize, gen: CounterRng },
    /// `φ(s,a)` holds one indicator `1{a^j = b}` per agent `j` and action
    /// `b ≥ 1`, dimension `N(|A|−1)`; state-independent.
    ActionIndicators { space: ActionSpace },
}

impl FeatureMap {
    /// Uniform `[0,1]^dim` features drawn from `stream_id`. Materialized
    /// maps are redrawn until `[Φ | 1]` has full column rank.
    pub fn random(mdp: &MultiAgentMdp, dim: usize, seed: u64, stream_id: u64, materialize: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        if !materialize {
            return Ok(Self::Lazy { dim, gen: CounterRng::new(seed, stream_id) });
        }
        let pairs = mdp.num_pairs();
        if dim + 1 > pairs {
            return Err(Error::Assumption(format!(
                "{dim} features plus the constant cannot be independent over {pairs} pairs"
            )));
        }
        let gen = CounterRng::new(seed, stream_id);
        for attempt in 0..16u64 {
            let mut values = Vec::with_capacity(pairs * dim);
            for p in 0..pairs {
                let (s, a) = mdp.split_pair(p);
                for d in 0..dim as u64 {
                    values.push(gen.uniform_at(&[attempt, s as u64, a, d]));
                }
            }
            let map = Self::Materialized { dim, joint_count: mdp.space().joint_count(), values };
            if map.check_assumption().is_ok() {
                return Ok(map);
            }
        }
        Err(Error::Assumption("could not draw a full-rank feature matrix".into()))
    }

    /// Wraps a dense `Φ` whose rows are ordered `s·|A| + a`.
    pub fn from_matrix(phi: &DMatrix<f64>, joint_count: u64) -> Self {
        let dim = phi.ncols();
        let mut values = Vec::with_capacity(phi.len());
        for r in 0..phi.nrows() {
            values.extend(phi.row(r).iter());
        }
        Self::Materialized { dim, joint_count, values }
    }

    /// Aggregation features: a random permutation of the pairs is dealt
    /// round-robin into `dim + 1` groups of near-equal size and
    /// `φ_d(s,a) = 1{(s,a) in group d}` for the first `dim` groups. The
    /// uncovered group keeps `1` outside `span(Φ)`.
    pub fn aggregation(mdp: &MultiAgentMdp, dim: usize, seed: u64, stream_id: u64) -> Result<Self> {
        let pairs = mdp.num_pairs();
        if dim == 0 || dim + 1 > pairs {
            return Err(Error::Assumption(format!("{dim} aggregation groups need more than {dim} pairs")));
        }
        let gen = CounterRng::new(seed, stream_id);
        let mut order: Vec<usize> = (0..pairs).collect();
        order.sort_by_key(|&p| gen.u64_at(&[p as u64]));
        let mut group = vec![0usize; pairs];
        for (rank, &p) in order.iter().enumerate() {
            group[p] = rank % (dim + 1);
        }
        let mut values = vec![0.0; pairs * dim];
        for (p, &g) in group.iter().enumerate() {
            if g < dim {
                values[p * dim + g] = 1.0;
            }
        }
        Ok(Self::Materialized { dim, joint_count: mdp.space().joint_count(), values })
    }

    pub fn action_indicators(space: &ActionSpace) -> Result<Self> {
        if space.actions_per_agent() < 2 {
            return Err(Error::InvalidArgument("indicator features need at least two actions".into()));
        }
        Ok(Self::ActionIndicators { space: space.clone() })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Materialized { dim, .. } | Self::Lazy { dim, .. } => *dim,
            Self::ActionIndicators { space } => space.num_agents() * (space.actions_per_agent() - 1),
        }
    }

    #[inline]
    pub fn fill(&self, s: usize, a: u64, out: &mut [f64]) {
        match self {
            Self::Materialized { dim, joint_count, values } => {
                let row = s * *joint_count as usize + a as usize;
                out.copy_from_slice(&values[row * dim..(row + 1) * dim]);
            }
            Self::Lazy { gen, .. } => {
                for (d, o) in out.iter_mut().enumerate() {
                    *o = gen.uniform_at(&[0, s as u64, a, d as u64]);
                }
            }
            Self::ActionIndicators { space } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let m = space.actions_per_agent() - 1;
                for i in 0..space.num_agents() {
                    let b = space.local(a, i);
                    if b > 0 {
                        out[i * m + b - 1] = 1.0;
                    }
                }
            }
        }
    }

    pub fn value(&self, s: usize, a: u64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.fill(s, a, &mut v);
        v
    }

    /// `φ(s,a)'ω`.
    #[inline]
    pub fn dot(&self, s: usize, a: u64, omega: &[f64], buf: &mut [f64]) -> f64 {
        self.fill(s, a, buf);
        buf.iter().zip(omega).map(|(x, w)| x * w).sum()
    }

    /// Dense `Φ` with one row per pair `s·|A| + a`.
    pub fn matrix(&self, mdp: &MultiAgentMdp) -> DMatrix<f64> {
        let pairs = mdp.num_pairs();
        let m = self.dim();
        let mut phi = DMatrix::zeros(pairs, m);
        let mut buf = vec![0.0; m];
        for p in 0..pairs {
            let (s, a) = mdp.split_pair(p);
            self.fill(s, a, &mut buf);
            for d in 0..m {
                phi[(p, d)] = buf[d];
            }
        }
        phi
    }

    /// Full column rank of `Φ` and `1 ∉ span(Φ)`, checked as
    /// `rank [Φ | 1] = m + 1`. Only materialized maps are checked.
    pub fn check_assumption(&self) -> Result<()> {
        let Self::Materialized { dim, values, .. } = self else { return Ok(()) };
        let pairs = values.len() / dim;
        check_full_rank_with_constant(&DMatrix::from_row_slice(pairs, *dim, values))
    }
}

/// `rank [Φ | 1] = m + 1`.
pub fn check_full_rank_with_constant(phi: &DMatrix<f64>) -> Result<()> {
    let (rows, m) = phi.shape();
    let mut aug = DMatrix::from_element(rows, m + 1, 1.0);
    aug.view_mut((0, 0), (rows, m)).copy_from(phi);
    let rank = aug.rank(1e-9);
    if rank == m + 1 {
        Ok(())
    } else {
        Err(Error::Assumption(format!("rank of [Φ | 1] is {rank}, expected {}", m + 1)))
    }
}

/// State-only feature map `φ_V(s) ∈ [0,1]^m`, row-major `[s][d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateFeatureMap {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl StateFeatureMap {
    /// Uniform features, redrawn until `[Φ_V | 1]` has full column rank.
    pub fn random(num_states: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || dim + 1 > num_states {
            return Err(Error::Assumption(format!(
                "{dim} state features plus the constant cannot be independent over {num_states} states"
            )));
        }
        let gen = CounterRng::new(seed, stream::STATE_FEATURES);
        for attempt in 0..16u64 {
            let values: Vec<f64> = (0..num_states as u64)
                .flat_map(|s| (0..dim as u64).map(move |d| (s, d)))
                .map(|(s, d)| gen.uniform_at(&[attempt, s, d]))
                .collect();
            let map = Self { dim, values };
            if check_full_rank_with_constant(&map.matrix()).is_ok() {
                return Ok(map);
            }
        }
        Err(Error::Assumption("could not draw full-rank state features".into()))
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.dim..(s + 1) * self.dim]
    }

    pub fn dot(&self, s: usize, v: &[f64]) -> f64 {
        self.row(s).iter().zip(v).map(|(x, w)| x * w).sum()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.values.len() / self.dim, self.dim, &self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn shape(n: usize, s: usize, a: usize) -> MdpShape {
        MdpShape { num_agents: n, num_states: s, actions_per_agent: a }
    }

    fn desk(seed: u64) -> MultiAgentMdp {
        MultiAgentMdp::random(shape(2, 3, 2), seed, Storage::ExplicitTable, DEFAULT_TABLE_CAP).unwrap()
    }

    #[test]
    fn joint_action_encoding_round_trips() {
        let space = ActionSpace::new(3, 3).unwrap();
        assert_eq!(space.joint_count(), 27);
        assert_eq!(space.encode(&[1, 0, 0]), 1);
        assert_eq!(space.encode(&[0, 1, 0]), 3);
        for a in 0..27 {
            let acts = space.decode(a);
            assert_eq!(space.encode(&acts), a);
            for i in 0..3 {
                for b in 0..3 {
                    let mut expect = acts.clone();
                    expect[i] = b;
                    assert_eq!(space.decode(space.with_local(a, i, b)), expect);
                }
            }
        }
        assert!(ActionSpace::new(80, 2).is_err());
    }

    #[test]
    fn full_scale_instance_is_lazy_with_rewards_in_range() {
        let mdp = MultiAgentMdp::random(shape(20, 20, 2), 3, Storage::Auto, DEFAULT_TABLE_CAP).unwrap();
        assert!(!mdp.is_explicit());
        assert_eq!(mdp.noise_halfwidth(), 0.5);
        for i in 0..20 {
            for a in [0u64, 17, 1 << 19, (1 << 20) - 1] {
                for s in 0..20 {
                    let r = mdp.reward(i, s, a);
                    assert!((0.0..=4.0).contains(&r));
                }
            }
        }
        let err = MultiAgentMdp::random(shape(20, 20, 2), 3, Storage::ExplicitTable, DEFAULT_TABLE_CAP).unwrap_err();
        assert!(matches!(err, Error::TableTooLarge { .. }));
    }

    #[test]
    fn single_state_single_action() {
        let mdp = MultiAgentMdp::random(shape(1, 1, 1), 0, Storage::Auto, DEFAULT_TABLE_CAP).unwrap();
        assert_eq!(mdp.transition_row(0, 0), vec![1.0]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = MultiAgentMdp::random(shape(3, 4, 2), 99, Storage::LazySeeded, DEFAULT_TABLE_CAP).unwrap();
        let b = MultiAgentMdp::random(shape(3, 4, 2), 99, Storage::LazySeeded, DEFAULT_TABLE_CAP).unwrap();
        let c = MultiAgentMdp::random(shape(3, 4, 2), 100, Storage::LazySeeded, DEFAULT_TABLE_CAP).unwrap();
        for s in 0..4 {
            for a_ in 0..8 {
                assert_eq!(a.transition_row(s, a_), b.transition_row(s, a_));
                assert_eq!(a.reward(1, s, a_).to_bits(), b.reward(1, s, a_).to_bits());
                assert_ne!(a.transition_row(s, a_), c.transition_row(s, a_));
            }
        }
        let pol = random_policies(3, 4, 2, 5, 99);
        let mut ra = TrajectoryRng::new(5);
        let mut rb = TrajectoryRng::new(5);
        let mut s = 0;
        for _ in 0..200 {
            let ta = a.step(&pol, s, &mut ra);
            let tb = b.step(&pol, s, &mut rb);
            assert_eq!(ta, tb);
            s = ta.next_state;
        }
    }

    #[test]
    fn explicit_storage_materializes_lazy_values() {
        let lazy = MultiAgentMdp::random(shape(2, 5, 3), 7, Storage::LazySeeded, DEFAULT_TABLE_CAP).unwrap();
        let explicit = MultiAgentMdp::random(shape(2, 5, 3), 7, Storage::ExplicitTable, DEFAULT_TABLE_CAP).unwrap();
        for s in 0..5 {
            for a in 0..9 {
                assert_eq!(lazy.transition_row(s, a), explicit.transition_row(s, a));
                for i in 0..2 {
                    assert_eq!(lazy.reward(i, s, a), explicit.reward(i, s, a));
                }
            }
        }
    }

    #[test]
    fn kernel_rows_are_floored_probability_vectors() {
        for ns in [1, 2, 7, 40] {
            let mdp = MultiAgentMdp::random(shape(2, ns, 2), ns as u64, Storage::Auto, DEFAULT_TABLE_CAP).unwrap();
            for s in 0..ns {
                for a in 0..4 {
                    let row = mdp.transition_row(s, a);
                    assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                    assert!(row.iter().all(|&p| p >= ERGODICITY_FLOOR * (1.0 - 1e-12)));
                }
            }
        }
    }

    #[test]
    fn induced_chain_is_irreducible() {
        let mdp = desk(4);
        let pol = random_policies(2, 3, 2, 5, 4);
        let ns = mdp.num_states();
        let mut reach = vec![vec![false; ns]; ns];
        for s in 0..ns {
            for a in 0..mdp.space().joint_count() {
                let pi = joint_prob(mdp.space(), &pol, s, a);
                for (t, p) in mdp.transition_row(s, a).iter().enumerate() {
                    if pi * p > 0.0 {
                        reach[s][t] = true;
                    }
                }
            }
        }
        // Transitive closure.
        for k in 0..ns {
            for i in 0..ns {
                for j in 0..ns {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        assert!(reach.iter().all(|r| r.iter().all(|&x| x)));
    }

    fn policy(theta: Vec<f64>, ns: usize, na: usize, seed: u64) -> AgentPolicy {
        let mut p = AgentPolicy::random(0, ns, na, theta.len(), seed);
        p.theta = theta;
        p
    }

    #[test]
    fn zero_theta_is_uniform_and_single_action_is_certain() {
        let p = policy(vec![0.0; 5], 3, 4, 1);
        for s in 0..3 {
            for b in 0..4 {
                assert_abs_diff_eq!(p.prob(s, b), 0.25, epsilon = 1e-15);
            }
        }
        let single = policy(vec![3.0, -1.0], 2, 1, 1);
        assert_eq!(single.prob(1, 0), 1.0);
        assert!(single.score(1, 0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn softmax_matches_reciprocal_form() {
        let p = policy(vec![4.0, -7.5, 9.0, 0.3, -2.0], 4, 3, 12);
        for s in 0..4 {
            let logits: Vec<f64> = (0..3)
                .map(|b| p.feature(s, b).iter().zip(&p.theta).map(|(q, t)| q * t).sum())
                .collect();
            let probs = p.probs(s);
            assert_abs_diff_eq!(probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            for b in 0..3 {
                // p_b = 1 / Σ_c exp(l_c − l_b)
                let direct = 1.0 / logits.iter().map(|l| (l - logits[b]).exp()).sum::<f64>();
                assert!(probs[b] > 0.0);
                assert_abs_diff_eq!(probs[b], direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let p = policy(vec![0.4, -1.2, 2.0, 0.0, 0.7], 3, 3, 5);
        let h = 1e-6;
        for s in 0..3 {
            for b in 0..3 {
                let score = p.score(s, b);
                for d in 0..5 {
                    let mut up = p.clone();
                    up.theta[d] += h;
                    let mut down = p.clone();
                    down.theta[d] -= h;
                    let fd = (up.prob(s, b).ln() - down.prob(s, b).ln()) / (2.0 * h);
                    assert!((fd - score[d]).abs() <= 1e-6, "{fd} vs {}", score[d]);
                }
            }
        }
    }

    #[test]
    fn score_has_zero_mean_and_vanishes_for_identical_features() {
        let p = policy(vec![1.0, -2.0, 0.5, 3.0, -0.1], 5, 4, 8);
        for s in 0..5 {
            let probs = p.probs(s);
            let mut mean = vec![0.0; 5];
            for b in 0..4 {
                for (m, x) in mean.iter_mut().zip(p.score(s, b)) {
                    *m += probs[b] * x;
                }
            }
            assert!(mean.iter().all(|m| m.abs() < 1e-10));
        }
        let flat = AgentPolicy::new(vec![1.0, 2.0], vec![0.3, 0.6, 0.3, 0.6], 1, 2, (-10.0, 10.0)).unwrap();
        assert!(flat.score(0, 1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projection_clamps_to_box() {
        let p = AgentPolicy::new(vec![12.0, -30.0, 4.0], vec![0.0; 3 * 2 * 2], 2, 2, (-10.0, 10.0)).unwrap();
        assert_eq!(p.theta, vec![10.0, -10.0, 4.0]);
        assert!(p.in_box());
    }

    #[test]
    fn deterministic_policy_and_kernel_give_fixed_transition() {
        // Two states, one agent with two actions; action 1 moves to state 1.
        let kernel = vec![
            1.0, 0.0, 0.0, 1.0, //
            1.0, 0.0, 0.0, 1.0,
        ];
        let rewards = vec![0.0, 1.0, 0.0, 1.0];
        let mdp = MultiAgentMdp::from_tables(shape(1, 2, 2), kernel, rewards, 0.0).unwrap();
        // Feature 1 only on action 1 and θ at the upper corner.
        let features = vec![0.0, 1.0, 0.0, 1.0];
        let pol = vec![AgentPolicy::new(vec![10.0], features, 2, 2, (-10.0, 10.0)).unwrap()];
        assert!(pol[0].prob(0, 1) > 1.0 - 1e-4);
        let mut rng = TrajectoryRng::new(1);
        let mut hits = 0;
        for _ in 0..1000 {
            let t = mdp.step(&pol, 0, &mut rng);
            if t.actions == vec![1] {
                hits += 1;
                assert_eq!(t.next_state, 1);
                assert_eq!(t.rewards, vec![1.0]);
            }
        }
        assert!(hits >= 995);
    }

    #[test]
    fn zero_noise_gives_mean_rewards() {
        let mdp = desk(2).with_noise_halfwidth(0.0);
        let mut rng = TrajectoryRng::new(3);
        for s in 0..3 {
            for a in 0..4 {
                let (_, r) = mdp.transition(s, a, &mut rng);
                for i in 0..2 {
                    assert_eq!(r[i], mdp.reward(i, s, a));
                }
            }
        }
    }

    #[test]
    fn noisy_rewards_stay_in_band() {
        let mdp = desk(2);
        let mut rng = TrajectoryRng::new(3);
        for _ in 0..1000 {
            let (_, r) = mdp.transition(1, 2, &mut rng);
            for i in 0..2 {
                assert!((r[i] - mdp.reward(i, 1, 2)).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn next_state_frequencies_match_kernel_row() {
        let mdp = MultiAgentMdp::random(shape(1, 4, 2), 21, Storage::ExplicitTable, DEFAULT_TABLE_CAP).unwrap();
        let row = mdp.transition_row(2, 1);
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = TrajectoryRng::new(8);
        for _ in 0..n {
            counts[mdp.transition(2, 1, &mut rng).0] += 1;
        }
        for j in 0..4 {
            let freq = counts[j] as f64 / n as f64;
            let se = (row[j] * (1.0 - row[j]) / n as f64).sqrt();
            assert!((freq - row[j]).abs() <= 3.0 * se, "state {j}: {freq} vs {}", row[j]);
        }
    }

    #[test]
    fn schedule_enforces_two_time_scales() {
        let s = StepSchedule::default();
        assert!(s.validate().is_ok());
        assert_eq!(s.critic(0), 1.0);
        for iter in 1..10_000 {
            assert!(s.actor(iter) < s.critic(iter));
        }
        assert!(StepSchedule::new(0.5, 0.8).is_err());
        assert!(StepSchedule::new(0.7, 0.7).is_err());
        assert!(StepSchedule::new(0.7, 1.1).is_err());
    }

    #[test]
    fn feature_maps() {
        let mdp = desk(1);
        let phi = FeatureMap::random(&mdp, 4, 1, stream::FEATURES, true).unwrap();
        assert!(phi.check_assumption().is_ok());
        let m = phi.matrix(&mdp);
        assert!(m.iter().all(|x| (0.0..1.0).contains(x)));
        let lazy = FeatureMap::random(&mdp, 4, 1, stream::FEATURES, false).unwrap();
        assert_eq!(lazy.value(2, 3), lazy.value(2, 3));
        assert!(FeatureMap::random(&mdp, 12, 1, stream::FEATURES, true).is_err());

        let agg = FeatureMap::aggregation(&mdp, 4, 1, stream::FEATURES).unwrap();
        assert!(agg.check_assumption().is_ok());
        let m = agg.matrix(&mdp);
        for r in 0..m.nrows() {
            assert!(m.row(r).sum() <= 1.0);
        }
        for c in 0..4 {
            assert!(m.column(c).sum() >= 1.0);
        }

        let ind = FeatureMap::action_indicators(mdp.space()).unwrap();
        assert_eq!(ind.dim(), 2);
        assert_eq!(ind.value(0, 0), vec![0.0, 0.0]);
        assert_eq!(ind.value(0, 3), vec![1.0, 1.0]);

        let ones = DMatrix::from_element(4, 1, 1.0);
        assert!(check_full_rank_with_constant(&ones).is_err());
    }

    #[test]
    fn community_tables_follow_preferences() {
        let t = community_aligned_tables(4, 6, 2, 3);
        let at = |k: usize, s: usize, b: usize| t[(k * 6 + s) * 2 + b];
        for s in 0..6 {
            assert!((3.0..=4.0).contains(&at(0, s, 0)) && (1.0..=2.0).contains(&at(0, s, 1)));
            assert!((3.0..=4.0).contains(&at(1, s, 1)) && (1.0..=2.0).contains(&at(1, s, 0)));
            let even = s % 2 == 0;
            for b in 0..2 {
                assert_eq!((3.0..=4.0).contains(&at(2, s, b)), even);
                assert_eq!((3.0..=4.0).contains(&at(3, s, b)), !even);
            }
        }
    }

    #[test]
    fn perturbation_is_bounded() {
        let mdp = desk(6);
        let p = mdp.perturbed(0.2, 0.1, 9).unwrap();
        for s in 0..3 {
            for a in 0..4 {
                assert!((p.reward(0, s, a) - mdp.reward(0, s, a)).abs() <= 0.2);
                let row = p.transition_row(s, a);
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
        let same = mdp.perturbed(0.0, 0.0, 9).unwrap();
        assert_eq!(same.transition_row(1, 1), mdp.transition_row(1, 1));
    }
}
