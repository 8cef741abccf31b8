//! Exact quantities on small instances by enumerating every state and joint
//! action: stationary distributions, average returns, relative values, the
//! linear critic fixed point and policy gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{AgentPolicy, FeatureMap, MultiAgentMdp};
use crate::membership::{Inverter, MembershipMatrix};
use crate::{Error, Result};

/// Default cap on `|S| · |A^i|^N`.
pub const DEFAULT_ENUMERATION_CAP: u64 = 50_000;

pub fn check_enumerable(mdp: &MultiAgentMdp, cap: u64) -> Result<()> {
    let entries = (mdp.num_states() as u64).saturating_mul(mdp.space().joint_count());
    if entries > cap {
        return Err(Error::EnumerationCap { entries, cap });
    }
    Ok(())
}

fn check_policies(mdp: &MultiAgentMdp, policies: &[AgentPolicy]) -> Result<()> {
    if policies.len() != mdp.num_agents() {
        return Err(Error::Shape(format!("{} policies for {} agents", policies.len(), mdp.num_agents())));
    }
    for p in policies {
        if p.num_states() != mdp.num_states() || p.num_actions() != mdp.space().actions_per_agent() {
            return Err(Error::Shape("policy table does not match the MDP".into()));
        }
    }
    Ok(())
}

/// Joint policy `π(s,a)` over pairs, row-major `[s][a]`.
pub fn joint_policy_table(mdp: &MultiAgentMdp, policies: &[AgentPolicy]) -> Vec<f64> {
    let space = mdp.space();
    let jc = space.joint_count() as usize;
    let mut out = Vec::with_capacity(mdp.num_pairs());
    for s in 0..mdp.num_states() {
        let local: Vec<Vec<f64>> = policies.iter().map(|p| p.probs(s)).collect();
        for a in 0..jc as u64 {
            out.push(local.iter().enumerate().map(|(i, pr)| pr[space.local(a, i)]).product());
        }
    }
    out
}

/// Enumerated Markov chain induced by a joint policy.
#[derive(Clone, Debug)]
pub struct Chain {
    /// `π(s,a)` per pair.
    pub pi: Vec<f64>,
    /// `P^θ(s'|s)`.
    pub p_state: DMatrix<f64>,
    /// Stationary distribution `d_θ`.
    pub d: DVector<f64>,
    /// Kernel rows `P(·|s,a)` per pair, row-major `[pair][s']`.
    pub kernel: Vec<f64>,
}

impl Chain {
    pub fn new(mdp: &MultiAgentMdp, policies: &[AgentPolicy]) -> Result<Self> {
        Self::with_cap(mdp, policies, DEFAULT_ENUMERATION_CAP)
    }

    pub fn with_cap(mdp: &MultiAgentMdp, policies: &[AgentPolicy], cap: u64) -> Result<Self> {
        check_enumerable(mdp, cap)?;
        check_policies(mdp, policies)?;
        let ns = mdp.num_states();
        let pairs = mdp.num_pairs();
        let pi = joint_policy_table(mdp, policies);
        let mut kernel = vec![0.0; pairs * ns];
        let mut p_state = DMatrix::zeros(ns, ns);
        for (p, row) in kernel.chunks_mut(ns).enumerate() {
            let (s, a) = mdp.split_pair(p);
            mdp.transition_row_into(s, a, row);
            for (t, x) in row.iter().enumerate() {
                p_state[(s, t)] += pi[p] * x;
            }
        }
        let d = stationary_of(&p_state)?;
        Ok(Self { pi, p_state, d, kernel })
    }

    pub fn num_states(&self) -> usize {
        self.d.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pi.len()
    }

    fn joint_count(&self) -> usize {
        self.num_pairs() / self.num_states()
    }

    /// Occupancy `d(s)π(s,a)` per pair.
    pub fn occupancy(&self) -> Vec<f64> {
        let jc = self.joint_count();
        self.pi.iter().enumerate().map(|(p, x)| self.d[p / jc] * x).collect()
    }

    /// `Σ_{s,a} d(s)π(s,a) f(s,a)`.
    pub fn expectation(&self, f: &[f64]) -> f64 {
        self.occupancy().iter().zip(f).map(|(w, x)| w * x).sum()
    }

    /// `r_π(s) = Σ_a π(s,a) f(s,a)`.
    pub fn state_average(&self, f: &[f64]) -> DVector<f64> {
        let jc = self.joint_count();
        DVector::from_fn(self.num_states(), |s, _| {
            (0..jc).map(|a| self.pi[s * jc + a] * f[s * jc + a]).sum()
        })
    }

    /// `Σ_{s'} P(s'|s,a) g(s')` per pair.
    pub fn next_expectation(&self, g: &DVector<f64>) -> Vec<f64> {
        let ns = self.num_states();
        self.kernel.chunks(ns).map(|row| row.iter().zip(g.iter()).map(|(p, x)| p * x).sum()).collect()
    }

    /// Relative values for the reward `f` over pairs, normalized so that
    /// `Σ d π Q = d'V = 0`.
    pub fn relative_values(&self, f: &[f64]) -> Result<RelativeValues> {
        let ns = self.num_states();
        let j = self.expectation(f);
        let r_pi = self.state_average(f);
        // (I − P + 1d') V = r_π − J·1 has the unique solution with d'V = 0.
        let mut lhs = DMatrix::identity(ns, ns) - &self.p_state;
        for s in 0..ns {
            for t in 0..ns {
                lhs[(s, t)] += self.d[t];
            }
        }
        let rhs = r_pi.add_scalar(-j);
        let v = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("relative value system".into()))?;
        let pv = self.next_expectation(&v);
        let q = f.iter().zip(&pv).map(|(r, x)| r - j + x).collect();
        Ok(RelativeValues { j, v: v.iter().cloned().collect(), q })
    }
}

fn stationary_of(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let ns = p.nrows();
    // (P' − I) d = 0 with the last equation replaced by Σd = 1.
    let mut a = p.transpose() - DMatrix::identity(ns, ns);
    for t in 0..ns {
        a[(ns - 1, t)] = 1.0;
    }
    let mut b = DVector::zeros(ns);
    b[ns - 1] = 1.0;
    let d = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("stationary system; the induced chain is not ergodic".into()))?;
    if d.iter().any(|x| !x.is_finite() || *x < -1e-12) {
        return Err(Error::Singular("stationary system returned an invalid distribution".into()));
    }
    Ok(d.map(|x| x.max(0.0)))
}

/// `d_θ` with `d'P^θ = d'` and `Σd = 1`.
pub fn stationary_distribution(mdp: &MultiAgentMdp, policies: &[AgentPolicy]) -> Result<DVector<f64>> {
    Ok(Chain::new(mdp, policies)?.d)
}

/// Mean reward table `R̄(s,a)` over pairs.
pub fn mean_reward_table(mdp: &MultiAgentMdp) -> Vec<f64> {
    (0..mdp.num_pairs())
        .map(|p| {
            let (s, a) = mdp.split_pair(p);
            mdp.mean_reward(s, a)
        })
        .collect()
}

/// Community reward tables `R^(k)(s,a)` from the least-squares inversion of
/// the agent tables against `Γ`, layout `[k][pair]`.
pub fn community_rewards(mdp: &MultiAgentMdp, gamma: &MembershipMatrix) -> Result<Vec<Vec<f64>>> {
    if gamma.n() != mdp.num_agents() {
        return Err(Error::Shape(format!("Γ has {} rows for {} agents", gamma.n(), mdp.num_agents())));
    }
    let inv = Inverter::new(gamma, 0.0)?;
    let pairs = mdp.num_pairs();
    let mut out = vec![vec![0.0; pairs]; gamma.k()];
    let mut agent = vec![0.0; mdp.num_agents()];
    let mut comm = vec![0.0; gamma.k()];
    for p in 0..pairs {
        let (s, a) = mdp.split_pair(p);
        for (i, r) in agent.iter_mut().enumerate() {
            *r = mdp.reward(i, s, a);
        }
        inv.apply_into(&agent, &mut comm);
        for (k, c) in comm.iter().enumerate() {
            out[k][p] = *c;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageReturn {
    pub j: f64,
    pub per_community: Vec<f64>,
}

/// `J(θ)` and `J^(k)(θ)`.
pub fn average_return(mdp: &MultiAgentMdp, policies: &[AgentPolicy], gamma: &MembershipMatrix) -> Result<AverageReturn> {
    let chain = Chain::new(mdp, policies)?;
    let j = chain.expectation(&mean_reward_table(mdp));
    let per_community = community_rewards(mdp, gamma)?.iter().map(|r| chain.expectation(r)).collect();
    Ok(AverageReturn { j, per_community })
}

/// `J(θ)` alone.
pub fn global_average_return(mdp: &MultiAgentMdp, policies: &[AgentPolicy]) -> Result<f64> {
    Ok(Chain::new(mdp, policies)?.expectation(&mean_reward_table(mdp)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeValues {
    pub j: f64,
    pub v: Vec<f64>,
    /// Per pair `s·|A| + a`.
    pub q: Vec<f64>,
}

impl RelativeValues {
    /// `A(s,a) = Q(s,a) − V(s)`.
    pub fn advantage(&self) -> Vec<f64> {
        let jc = self.q.len() / self.v.len();
        self.q.iter().enumerate().map(|(p, q)| q - self.v[p / jc]).collect()
    }
}

/// Relative action values of the globally averaged reward.
pub fn relative_q(mdp: &MultiAgentMdp, policies: &[AgentPolicy]) -> Result<RelativeValues> {
    Chain::new(mdp, policies)?.relative_values(&mean_reward_table(mdp))
}

/// Projected Bellman fixed point for one reward table:
/// `Φ'D(P_π Φ − Φ) ω = −Φ'D(R − J·1)`.
pub fn critic_fixed_point(chain: &Chain, phi: &DMatrix<f64>, reward: &[f64]) -> Result<DVector<f64>> {
    let (lhs, rhs) = critic_system(chain, phi, reward)?;
    lhs.lu().solve(&rhs).ok_or_else(|| {
        Error::Assumption("projected critic system is singular; [Φ | 1] must have full column rank".into())
    })
}

fn critic_system(chain: &Chain, phi: &DMatrix<f64>, reward: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let pairs = chain.num_pairs();
    if phi.nrows() != pairs || reward.len() != pairs {
        return Err(Error::Shape(format!("Φ has {} rows and reward {} entries for {pairs} pairs", phi.nrows(), reward.len())));
    }
    let j = chain.expectation(reward);
    let next = next_features(chain, phi);
    let occ = chain.occupancy();
    let m = phi.ncols();
    let mut lhs = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    for p in 0..pairs {
        let w = occ[p];
        if w == 0.0 {
            continue;
        }
        for r in 0..m {
            let wr = w * phi[(p, r)];
            rhs[r] -= wr * (reward[p] - j);
            for c in 0..m {
                lhs[(r, c)] += wr * (next[(p, c)] - phi[(p, c)]);
            }
        }
    }
    Ok((lhs, rhs))
}

/// `(P_π Φ)(s,a) = Σ_{s'} P(s'|s,a) Σ_{a'} π(s',a') φ(s',a')`.
fn next_features(chain: &Chain, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let ns = chain.num_states();
    let jc = chain.joint_count();
    let m = phi.ncols();
    let mut bar = DMatrix::<f64>::zeros(ns, m);
    for s in 0..ns {
        for a in 0..jc {
            let p = s * jc + a;
            for c in 0..m {
                bar[(s, c)] += chain.pi[p] * phi[(p, c)];
            }
        }
    }
    let mut next = DMatrix::<f64>::zeros(chain.num_pairs(), m);
    for (p, row) in chain.kernel.chunks(ns).enumerate() {
        for (t, x) in row.iter().enumerate() {
            for c in 0..m {
                next[(p, c)] += x * bar[(t, c)];
            }
        }
    }
    next
}

/// `‖Φ'D(T(Φω) − Φω)‖_∞` for the Bellman operator of `reward`.
pub fn critic_residual(chain: &Chain, phi: &DMatrix<f64>, reward: &[f64], omega: &[f64]) -> Result<f64> {
    let (lhs, rhs) = critic_system(chain, phi, reward)?;
    let w = DVector::from_column_slice(omega);
    Ok((lhs * w - rhs).amax())
}

/// Same residual with an arbitrary (e.g. empirical) occupancy over pairs.
pub fn critic_residual_weighted(chain: &Chain, phi: &DMatrix<f64>, reward: &[f64], j: f64, omega: &[f64], occupancy: &[f64]) -> f64 {
    let next = next_features(chain, phi);
    let w = DVector::from_column_slice(omega);
    let q = phi * &w;
    let qn = next * &w;
    let m = phi.ncols();
    let mut res = vec![0.0; m];
    for p in 0..chain.num_pairs() {
        let td = reward[p] - j + qn[p] - q[p];
        for (c, r) in res.iter_mut().enumerate() {
            *r += occupancy[p] * phi[(p, c)] * td;
        }
    }
    res.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Per-agent gradients of `J(θ)` in both forms: with the global advantage
/// `A(s,a)` and with the local advantage
/// `A^i(s,a) = Q(s,a) − Σ_b π^i(s,b) Q(s, b, a^{−i})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyGradient {
    pub global: Vec<Vec<f64>>,
    pub local: Vec<Vec<f64>>,
}

pub fn policy_gradient(mdp: &MultiAgentMdp, policies: &[AgentPolicy]) -> Result<PolicyGradient> {
    let chain = Chain::new(mdp, policies)?;
    let values = chain.relative_values(&mean_reward_table(mdp))?;
    let adv = values.advantage();
    let occ = chain.occupancy();
    let space = mdp.space();
    let na = space.actions_per_agent();
    let mut global = Vec::with_capacity(policies.len());
    let mut local = Vec::with_capacity(policies.len());
    for (i, pol) in policies.iter().enumerate() {
        let dim = pol.dim();
        let mut g = vec![0.0; dim];
        let mut l = vec![0.0; dim];
        for p in 0..chain.num_pairs() {
            let (s, a) = mdp.split_pair(p);
            let b = space.local(a, i);
            let probs = pol.probs(s);
            let counterfactual: f64 = (0..na)
                .map(|c| probs[c] * values.q[mdp.pair_index(s, space.with_local(a, i, c))])
                .sum();
            let local_adv = values.q[p] - counterfactual;
            let psi = pol.score(s, b);
            for d in 0..dim {
                g[d] += occ[p] * psi[d] * adv[p];
                l[d] += occ[p] * psi[d] * local_adv;
            }
        }
        global.push(g);
        local.push(l);
    }
    Ok(PolicyGradient { global, local })
}

/// State-level projected Bellman fixed point
/// `Φ_V'D(R_π − J·1 + P^θ Φ_V v − Φ_V v) = 0` for the reward `reward`.
pub fn state_critic_fixed_point(chain: &Chain, phi_v: &DMatrix<f64>, reward: &[f64]) -> Result<DVector<f64>> {
    let ns = chain.num_states();
    if phi_v.nrows() != ns {
        return Err(Error::Shape("state feature matrix has the wrong number of rows".into()));
    }
    let j = chain.expectation(reward);
    let r = chain.state_average(reward).add_scalar(-j);
    let dphi_t = {
        let mut m = phi_v.transpose();
        for s in 0..ns {
            m.column_mut(s).scale_mut(chain.d[s]);
        }
        m
    };
    let lhs = &dphi_t * (&chain.p_state * phi_v - phi_v);
    let rhs = -(&dphi_t * r);
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Assumption("projected state-value system is singular".into()))
}

/// Weighted least squares `argmin Σ d(s)π(s,a) (f(s,a)'ρ − R(s,a))²`.
pub fn reward_regression(chain: &Chain, f: &DMatrix<f64>, reward: &[f64]) -> Result<DVector<f64>> {
    let occ = chain.occupancy();
    let mut wf = f.transpose();
    for (p, w) in occ.iter().enumerate() {
        wf.column_mut(p).scale_mut(*w);
    }
    let lhs = &wf * f;
    let rhs = &wf * DVector::from_column_slice(reward);
    lhs.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Singular("weighted normal equations for the reward model".into()))
}

/// Everything the oracle knows about one `(mdp, θ, Γ, Φ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactSolution {
    pub stationary: Vec<f64>,
    /// `d(s)π(s,a)` per pair.
    pub occupancy: Vec<f64>,
    pub j: f64,
    pub j_community: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    /// Critic fixed point per community.
    pub omega: Vec<Vec<f64>>,
}

pub fn exact_solution(
    mdp: &MultiAgentMdp,
    policies: &[AgentPolicy],
    gamma: &MembershipMatrix,
    phi: &FeatureMap,
) -> Result<ExactSolution> {
    let chain = Chain::new(mdp, policies)?;
    let values = chain.relative_values(&mean_reward_table(mdp))?;
    let comm = community_rewards(mdp, gamma)?;
    let phi_m = phi.matrix(mdp);
    let omega = comm
        .iter()
        .map(|r| critic_fixed_point(&chain, &phi_m, r).map(|w| w.iter().cloned().collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(ExactSolution {
        stationary: chain.d.iter().cloned().collect(),
        occupancy: chain.occupancy(),
        j: values.j,
        j_community: comm.iter().map(|r| chain.expectation(r)).collect(),
        q: values.q,
        v: values.v,
        omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{random_policies, MdpShape, Storage, TrajectoryRng, DEFAULT_TABLE_CAP};
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;

    fn desk(n: usize, ns: usize, na: usize, seed: u64) -> (MultiAgentMdp, Vec<AgentPolicy>) {
        let shape = MdpShape { num_agents: n, num_states: ns, actions_per_agent: na };
        let mdp = MultiAgentMdp::random(shape, seed, Storage::ExplicitTable, DEFAULT_TABLE_CAP).unwrap();
        let mut pol = random_policies(n, ns, na, 5, seed);
        // Spread θ so the policy is far from uniform.
        for (i, p) in pol.iter_mut().enumerate() {
            for (d, t) in p.theta.iter_mut().enumerate() {
                *t = ((i * 7 + d * 3) as f64).sin() * 2.0;
            }
        }
        (mdp, pol)
    }

    #[test]
    fn single_state_has_unit_mass() {
        let (mdp, pol) = desk(2, 1, 2, 1);
        assert_eq!(stationary_distribution(&mdp, &pol).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn symmetric_two_state_chain() {
        let shape = MdpShape { num_agents: 1, num_states: 2, actions_per_agent: 1 };
        let mdp = MultiAgentMdp::from_tables(shape, vec![0.3, 0.7, 0.7, 0.3], vec![0.0, 0.0], 0.0).unwrap();
        let pol = random_policies(1, 2, 1, 2, 0);
        let d = stationary_distribution(&mdp, &pol).unwrap();
        assert_abs_diff_eq!(d[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(d[1], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn stationary_matches_power_iteration() {
        let (mdp, pol) = desk(2, 3, 2, 5);
        let chain = Chain::new(&mdp, &pol).unwrap();
        let mut x = DVector::from_element(3, 1.0 / 3.0);
        let pt = chain.p_state.transpose();
        for _ in 0..10_000 {
            x = &pt * x;
        }
        assert!((chain.d.clone() - x).amax() < 1e-9);
        let resid = (chain.p_state.transpose() * &chain.d - &chain.d).amax();
        assert!(resid <= 1e-10);
        assert_abs_diff_eq!(chain.d.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let shape = MdpShape { num_agents: 12, num_states: 20, actions_per_agent: 2 };
        let mdp = MultiAgentMdp::random(shape, 1, Storage::LazySeeded, DEFAULT_TABLE_CAP).unwrap();
        let pol = random_policies(12, 20, 2, 5, 1);
        assert!(matches!(Chain::new(&mdp, &pol), Err(Error::EnumerationCap { .. })));
    }

    #[test]
    fn constant_rewards() {
        let (mdp, pol) = desk(2, 3, 2, 8);
        let pairs = mdp.num_pairs();
        let shape = mdp.shape();
        let crate::env::Kernel::Explicit(kernel) = mdp.kernel().clone() else { unreachable!() };
        let flat = MultiAgentMdp::from_tables(shape, kernel, vec![1.75; pairs * 2], 0.0).unwrap();
        let gamma = MembershipMatrix::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let ret = average_return(&flat, &pol, &gamma).unwrap();
        assert_abs_diff_eq!(ret.j, 1.75, epsilon = 1e-12);
        let q = relative_q(&flat, &pol).unwrap();
        assert!(q.q.iter().all(|x| x.abs() < 1e-12));
        let g = policy_gradient(&flat, &pol).unwrap();
        assert!(g.global.iter().flatten().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn average_return_decomposes_over_communities() {
        let (mdp, pol) = desk(3, 3, 2, 9);
        let gamma = MembershipMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        // Agent rewards that follow Γ exactly.
        let tables = crate::env::community_aligned_tables(2, 3, 2, 4);
        let mdp = mdp.with_rewards(crate::env::RewardModel::CommunityAligned { membership: gamma.clone(), tables }).materialized();
        let ret = average_return(&mdp, &pol, &gamma).unwrap();
        let agg: f64 = (0..3).map(|i| gamma.aggregate_row(i, &ret.per_community)).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(ret.j, agg, epsilon = 1e-10);

        let single = MembershipMatrix::identity(1);
        let (m1, p1) = desk(1, 3, 2, 2);
        let r1 = average_return(&m1, &p1, &single).unwrap();
        assert_abs_diff_eq!(r1.j, r1.per_community[0], epsilon = 1e-12);
    }

    #[test]
    fn average_return_shifts_with_constant() {
        let (mdp, pol) = desk(2, 3, 2, 10);
        let base = global_average_return(&mdp, &pol).unwrap();
        let pairs = mdp.num_pairs();
        let crate::env::Kernel::Explicit(kernel) = mdp.kernel().clone() else { unreachable!() };
        let mut rewards = Vec::with_capacity(pairs * 2);
        for i in 0..2 {
            for p in 0..pairs {
                let (s, a) = mdp.split_pair(p);
                rewards.push(mdp.reward(i, s, a) + 2.5);
            }
        }
        let shifted = MultiAgentMdp::from_tables(mdp.shape(), kernel, rewards, 0.5).unwrap();
        assert_abs_diff_eq!(global_average_return(&shifted, &pol).unwrap(), base + 2.5, epsilon = 1e-12);
    }

    #[test]
    fn average_return_matches_simulation() {
        let (mdp, pol) = desk(2, 3, 2, 11);
        let exact = global_average_return(&mdp, &pol).unwrap();
        let mut rng = TrajectoryRng::new(3);
        let n = 1_000_000;
        // Batch means over 1000 blocks give the standard error under correlation.
        let blocks = 1000;
        let per = n / blocks;
        let mut s = 0;
        let mut means = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            let mut acc = 0.0;
            for _ in 0..per {
                let t = mdp.step(&pol, s, &mut rng);
                acc += t.rewards.iter().sum::<f64>() / 2.0;
                s = t.next_state;
            }
            means.push(acc / per as f64);
        }
        let mean = means.iter().sum::<f64>() / blocks as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (blocks - 1) as f64;
        let se = (var / blocks as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn relative_q_normalization_and_bellman() {
        let (mdp, pol) = desk(2, 4, 2, 12);
        let chain = Chain::new(&mdp, &pol).unwrap();
        let r = mean_reward_table(&mdp);
        let vals = chain.relative_values(&r).unwrap();
        assert!(chain.expectation(&vals.q).abs() <= 1e-12);
        assert!(chain.expectation(&vals.advantage()).abs() <= 1e-10);
        // Q = R̄ − J + P^θ Q evaluated pairwise.
        let jc = 4;
        let qbar = DVector::from_fn(4, |s, _| (0..jc).map(|a| chain.pi[s * jc + a] * vals.q[s * jc + a]).sum());
        let next = chain.next_expectation(&qbar);
        for p in 0..chain.num_pairs() {
            assert_abs_diff_eq!(vals.q[p], r[p] - vals.j + next[p], epsilon = 1e-12);
        }
    }

    #[test]
    fn relative_q_matches_truncated_series() {
        let (mdp, pol) = desk(1, 3, 2, 13);
        let chain = Chain::new(&mdp, &pol).unwrap();
        let r = mean_reward_table(&mdp);
        let vals = chain.relative_values(&r).unwrap();
        let pairs = chain.num_pairs();
        // Pair-to-pair kernel P((s,a) → (s',a')) = P(s'|s,a) π(s',a').
        let jc = pairs / 3;
        let mut big = DMatrix::zeros(pairs, pairs);
        for p in 0..pairs {
            for t in 0..3 {
                for b in 0..jc {
                    big[(p, t * jc + b)] = chain.kernel[p * 3 + t] * chain.pi[t * jc + b];
                }
            }
        }
        let mut dist = DMatrix::<f64>::identity(pairs, pairs);
        let rv = DVector::from_column_slice(&r);
        let mut acc = DVector::zeros(pairs);
        for _ in 0..10_000 {
            acc += (&dist * &rv).add_scalar(-vals.j);
            dist = &dist * &big;
        }
        for p in 0..pairs {
            assert!((acc[p] - vals.q[p]).abs() <= 1e-4, "{} vs {}", acc[p], vals.q[p]);
        }
    }

    #[test]
    fn critic_fixed_point_in_tabular_basis() {
        let (mdp, pol) = desk(2, 3, 2, 14);
        let chain = Chain::new(&mdp, &pol).unwrap();
        let pairs = chain.num_pairs();
        // Orthonormal complement of the all-ones vector: a tabular basis
        // without the constant direction.
        let mut basis = DMatrix::from_fn(pairs, pairs, |r, c| if c == 0 || r == c { 1.0 } else { 0.0 });
        basis.column_mut(0).fill(1.0);
        let qr = basis.qr();
        let q = qr.q();
        let phi = q.columns(1, pairs - 1).into_owned();
        let r = mean_reward_table(&mdp);
        let w = critic_fixed_point(&chain, &phi, &r).unwrap();
        let approx = &phi * &w;
        let exact = chain.relative_values(&r).unwrap();
        // Zero-mean projection of Q: remove the unweighted mean.
        let qv = DVector::from_column_slice(&exact.q);
        let proj = qv.add_scalar(-qv.mean());
        assert!((approx - proj).amax() <= 1e-8);
        assert!(critic_residual(&chain, &phi, &r, w.as_slice()).unwrap() <= 1e-10);
    }

    #[test]
    fn critic_fixed_point_basics() {
        let (mdp, pol) = desk(2, 3, 2, 15);
        let chain = Chain::new(&mdp, &pol).unwrap();
        let phi = FeatureMap::random(&mdp, 4, 15, stream::FEATURES, true).unwrap().matrix(&mdp);
        let zero = vec![0.0; chain.num_pairs()];
        let w = critic_fixed_point(&chain, &phi, &zero).unwrap();
        assert!(w.iter().all(|x| *x == 0.0));
        let r = mean_reward_table(&mdp);
        let w = critic_fixed_point(&chain, &phi, &r).unwrap();
        assert!(critic_residual(&chain, &phi, &r, w.as_slice()).unwrap() <= 1e-10);
    }

    fn fd_gradient(mdp: &MultiAgentMdp, pol: &[AgentPolicy], h: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for i in 0..pol.len() {
            let mut g = Vec::new();
            for d in 0..pol[i].dim() {
                let mut up = pol.to_vec();
                up[i].theta[d] += h;
                let mut down = pol.to_vec();
                down[i].theta[d] -= h;
                g.push((global_average_return(mdp, &up).unwrap() - global_average_return(mdp, &down).unwrap()) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn gradient_forms_agree_and_match_finite_differences() {
        for seed in 0..4 {
            let (mdp, pol) = desk(2, 3, 2, 100 + seed);
            let g = policy_gradient(&mdp, &pol).unwrap();
            let fd = fd_gradient(&mdp, &pol, 1e-5);
            for i in 0..2 {
                for d in 0..5 {
                    assert!((g.global[i][d] - g.local[i][d]).abs() <= 1e-10);
                    let scale = fd[i][d].abs().max(1e-8);
                    assert!((g.global[i][d] - fd[i][d]).abs() / scale <= 1e-4, "{} vs {}", g.global[i][d], fd[i][d]);
                }
            }
        }
    }

    #[test]
    fn outputs_are_continuous_in_theta() {
        let (mdp, pol) = desk(2, 3, 2, 16);
        let base = global_average_return(&mdp, &pol).unwrap();
        for delta in [1e-3, 1e-4, 1e-5] {
            let mut moved = pol.clone();
            moved[0].theta[0] += delta;
            let j = global_average_return(&mdp, &moved).unwrap();
            assert!((j - base).abs() <= 10.0 * delta);
        }
    }

    #[test]
    fn state_critic_and_regression_residuals() {
        let (mdp, pol) = desk(2, 5, 2, 17);
        let chain = Chain::new(&mdp, &pol).unwrap();
        let r = mean_reward_table(&mdp);
        let phi_v = crate::env::StateFeatureMap::random(5, 3, 17).unwrap().matrix();
        let v = state_critic_fixed_point(&chain, &phi_v, &r).unwrap();
        // Projected residual of the state equation.
        let j = chain.expectation(&r);
        let td = chain.state_average(&r).add_scalar(-j) + &chain.p_state * &phi_v * &v - &phi_v * &v;
        let proj = phi_v.transpose() * DVector::from_fn(5, |s, _| chain.d[s] * td[s]);
        assert!(proj.amax() < 1e-10);

        let f = FeatureMap::random(&mdp, 6, 17, stream::REWARD_FEATURES, true).unwrap().matrix(&mdp);
        let rho = reward_regression(&chain, &f, &r).unwrap();
        let fit = &f * &rho;
        let occ = chain.occupancy();
        let grad = f.transpose() * DVector::from_fn(chain.num_pairs(), |p, _| occ[p] * (fit[p] - r[p]));
        assert!(grad.amax() < 1e-10);
    }

    #[test]
    fn exact_solution_is_consistent() {
        let (mdp, pol) = desk(2, 3, 2, 18);
        let gamma = MembershipMatrix::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let phi = FeatureMap::random(&mdp, 4, 18, stream::FEATURES, true).unwrap();
        let sol = exact_solution(&mdp, &pol, &gamma, &phi).unwrap();
        assert_eq!(sol.omega.len(), 2);
        assert_abs_diff_eq!(sol.occupancy.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let text = serde_json::to_string(&sol).unwrap();
        let back: ExactSolution = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sol);
    }
}
