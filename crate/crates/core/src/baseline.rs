//! Neighbor-based networked actor-critic: every agent keeps its own critic,
//! takes a TD step on its own reward and then averages critic parameters
//! with its neighbors through a doubly stochastic consensus matrix.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::acq::{actor_step, advantage_estimate, oracle_j, TrainConfig};
use crate::env::{sample_actions, AgentPolicy, FeatureMap, MultiAgentMdp, TrajectoryRng};
use crate::rng::{stream, CounterRng};
use crate::trace::{block_columns, should_log, TrailingMean, TrainingTrace, J_WINDOW};
use crate::{Error, Result};

/// Undirected communication graph over agents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusGraph {
    pub neighbors: Vec<Vec<usize>>,
}

impl ConsensusGraph {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!("edge ({i},{j}) outside {n} agents")));
            }
            if i != j {
                sets[i].insert(j);
                sets[j].insert(i);
            }
        }
        Ok(Self { neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect() })
    }

    pub fn complete(n: usize) -> Self {
        Self { neighbors: (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect() }
    }

    /// Ring `i ~ i+1 (mod N)` plus `⌊N/4⌋` seeded chords between
    /// non-adjacent pairs.
    pub fn ring_with_chords(n: usize, seed: u64) -> Self {
        let mut edges: Vec<(usize, usize)> = if n >= 2 { (0..n).map(|i| (i, (i + 1) % n)).collect() } else { Vec::new() };
        let mut graph = Self::from_edges(n, &edges).expect("ring edges are in range");
        let max_edges = n * n.saturating_sub(1) / 2;
        let wanted = (n / 4).min(max_edges.saturating_sub(graph.edge_count()));
        let gen = CounterRng::new(seed, stream::COMMUNICATION_GRAPH);
        let mut added = 0;
        let mut draw = 0u64;
        while added < wanted {
            let i = (gen.u64_at(&[draw, 0]) % n as u64) as usize;
            let j = (gen.u64_at(&[draw, 1]) % n as u64) as usize;
            draw += 1;
            if i != j && !graph.neighbors[i].contains(&j) {
                edges.push((i.min(j), i.max(j)));
                graph = Self::from_edges(n, &edges).expect("chord edges are in range");
                added += 1;
            }
        }
        graph
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|x| x)
    }
}

/// Metropolis weights `C(i,j) = 1/(1 + max(deg i, deg j))` on edges and
/// `C(i,i) = 1 − Σ_j C(i,j)`.
pub fn consensus_weights(graph: &ConsensusGraph) -> Result<DMatrix<f64>> {
    if !graph.is_connected() {
        return Err(Error::InvalidArgument("communication graph is disconnected".into()));
    }
    let n = graph.n();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for &j in &graph.neighbors[i] {
            c[(i, j)] = 1.0 / (1.0 + graph.degree(i).max(graph.degree(j)) as f64);
        }
        let off: f64 = graph.neighbors[i].iter().map(|&j| c[(i, j)]).sum();
        c[(i, i)] = 1.0 - off;
    }
    Ok(c)
}

/// `x_i ← Σ_j C(i,j) x_j` for vectors.
pub fn mix_vectors(c: &DMatrix<f64>, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let m = x.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mut out = vec![0.0; m];
            for j in 0..n {
                let w = c[(i, j)];
                if w != 0.0 {
                    for (o, v) in out.iter_mut().zip(&x[j]) {
                        *o += w * v;
                    }
                }
            }
            out
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub trace: TrainingTrace,
    /// Agent critics `ω^i`.
    pub omega: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub policies: Vec<AgentPolicy>,
}

/// Per-agent TD on the agent's own reward, then consensus mixing of the
/// post-update `ω^i` and `μ^i`. The actor step matches the community method.
/// Trace columns are `mu_i` and `omega_{i}_{d}` indexed by agent.
pub fn train_baseline(
    mdp: &MultiAgentMdp,
    graph: &ConsensusGraph,
    phi: &FeatureMap,
    mut policies: Vec<AgentPolicy>,
    cfg: &TrainConfig,
) -> Result<BaselineRun> {
    cfg.validate(mdp)?;
    let n = mdp.num_agents();
    if graph.n() != n || policies.len() != n {
        return Err(Error::Shape(format!("{n} agents, graph has {} nodes, {} policies", graph.n(), policies.len())));
    }
    let c = consensus_weights(graph)?;
    let m = phi.dim();
    let space = mdp.space().clone();

    let mut columns = vec!["t".to_string(), "J_hat".to_string()];
    columns.extend((1..=n).map(|i| format!("mu_{i}")));
    columns.extend(block_columns("omega", n, m));
    for (i, p) in policies.iter().enumerate() {
        columns.extend((1..=p.dim()).map(|d| format!("theta_{}_{d}", i + 1)));
    }
    columns.push("td_abs_mean".into());
    if cfg.oracle_j {
        columns.push("J_oracle".into());
    }
    let mut trace = TrainingTrace::new(columns);
    let log = |trace: &mut TrainingTrace, t: u64, j: f64, omega: &[Vec<f64>], mu: &[f64], policies: &[AgentPolicy], td_abs: f64| {
        let mut row = Vec::with_capacity(trace.columns.len());
        row.push(t as f64);
        row.push(j);
        row.extend(mu);
        omega.iter().for_each(|w| row.extend(w));
        policies.iter().for_each(|p| row.extend(&p.theta));
        row.push(td_abs);
        if cfg.oracle_j {
            row.push(oracle_j(mdp, policies));
        }
        trace.push(row);
    };

    let mut omega = vec![vec![0.0; m]; n];
    let mut mu = vec![0.0; n];
    let mut rng = TrajectoryRng::new(cfg.seed);
    let mut window = TrailingMean::new(J_WINDOW);
    log(&mut trace, 0, window.mean(), &omega, &mu, &policies, f64::NAN);

    let mut s = cfg.initial_state;
    let mut a = space.encode(&sample_actions(&policies, s, &mut rng.sampling));
    let mut cur = vec![0.0; m];
    let mut next = vec![0.0; m];
    for iter in 0..cfg.steps {
        let (s_next, rewards) = mdp.transition(s, a, &mut rng);
        let a_next = space.encode(&sample_actions(&policies, s_next, &mut rng.sampling));
        let eta_w = cfg.schedule.critic(iter);
        let eta_t = cfg.schedule.actor(iter);
        phi.fill(s, a, &mut cur);
        phi.fill(s_next, a_next, &mut next);
        let dot = |x: &[f64], w: &[f64]| x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let td: Vec<f64> = (0..n).map(|i| rewards[i] - mu[i] + dot(&next, &omega[i]) - dot(&cur, &omega[i])).collect();
        if let Some(i) = td.iter().position(|e| !e.is_finite()) {
            return Err(Error::NumericAbort { step: iter, what: format!("TD error of agent {} is {}", i + 1, td[i]) });
        }

        if !cfg.freeze_actor {
            for (i, policy) in policies.iter_mut().enumerate() {
                let adv = advantage_estimate(mdp, phi, policy, &omega[i], i, s, a);
                let psi = policy.score(s, space.local(a, i));
                actor_step(policy, adv, &psi, eta_t);
                if policy.theta.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericAbort { step: iter, what: format!("θ of agent {} is not finite", i + 1) });
                }
            }
        }

        for i in 0..n {
            mu[i] = (1.0 - eta_w) * mu[i] + eta_w * rewards[i];
            for (w, x) in omega[i].iter_mut().zip(&cur) {
                *w += eta_w * td[i] * x;
            }
        }
        omega = mix_vectors(&c, &omega);
        mu = (0..n).map(|i| (0..n).map(|j| c[(i, j)] * mu[j]).sum()).collect();

        window.push(rewards.iter().sum::<f64>() / n as f64);
        if should_log(iter, cfg.log_stride, cfg.steps) {
            let td_abs = td.iter().map(|e| e.abs()).sum::<f64>() / n as f64;
            log(&mut trace, iter + 1, window.mean(), &omega, &mu, &policies, td_abs);
        }
        s = s_next;
        a = a_next;
    }
    Ok(BaselineRun { trace, omega, mu, policies })
}
