//! Transfer of trained community critics to new agents and tasks, and the
//! active scheme that updates only the most uncertain communities.

use serde::{Deserialize, Serialize};

use crate::acq::{train_with_selection, CriticStateQ, QRun, Selection, TrainConfig};
use crate::env::{AgentPolicy, FeatureMap, MultiAgentMdp};
use crate::membership::MembershipMatrix;
use crate::oracle::{self, Chain};
use crate::{Error, Result};

/// Trained community critics plus where they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityLibrary {
    pub k: usize,
    pub feature_dim: usize,
    pub omega: Vec<Vec<f64>>,
    pub task_id: String,
    /// Hash of the training configuration (empty when unknown).
    pub config_hash: String,
}

impl CommunityLibrary {
    pub fn new(omega: Vec<Vec<f64>>, task_id: impl Into<String>, config_hash: impl Into<String>) -> Result<Self> {
        let lib = Self {
            k: omega.len(),
            feature_dim: omega.first().map_or(0, Vec::len),
            omega,
            task_id: task_id.into(),
            config_hash: config_hash.into(),
        };
        lib.validate()?;
        Ok(lib)
    }

    pub fn from_critic(critic: &CriticStateQ, task_id: impl Into<String>, config_hash: impl Into<String>) -> Result<Self> {
        Self::new(critic.omega.clone(), task_id, config_hash)
    }

    /// Library holding the exact critic fixed points of a task.
    pub fn from_oracle(
        mdp: &MultiAgentMdp,
        policies: &[AgentPolicy],
        gamma: &MembershipMatrix,
        phi: &FeatureMap,
        task_id: impl Into<String>,
    ) -> Result<Self> {
        Self::new(fixed_points(mdp, policies, gamma, phi)?, task_id, "")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.omega.len() != self.k {
            return Err(Error::Shape("library must hold K ≥ 1 critics".into()));
        }
        if self.omega.iter().any(|w| w.len() != self.feature_dim) {
            return Err(Error::Shape("library critics have inconsistent dimensions".into()));
        }
        if self.omega.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("library critics must be finite".into()));
        }
        Ok(())
    }
}

fn fixed_points(mdp: &MultiAgentMdp, policies: &[AgentPolicy], gamma: &MembershipMatrix, phi: &FeatureMap) -> Result<Vec<Vec<f64>>> {
    let chain = Chain::new(mdp, policies)?;
    let phi_m = phi.matrix(mdp);
    oracle::community_rewards(mdp, gamma)?
        .iter()
        .map(|r| oracle::critic_fixed_point(&chain, &phi_m, r).map(|w| w.iter().cloned().collect()))
        .collect()
}

fn check_row(lib: &CommunityLibrary, phi: &FeatureMap, gamma_new: &[f64]) -> Result<()> {
    if gamma_new.len() != lib.k {
        return Err(Error::Shape(format!("membership row has {} entries, library has K = {}", gamma_new.len(), lib.k)));
    }
    if phi.dim() != lib.feature_dim {
        return Err(Error::Shape(format!("feature dimension {} does not match library {}", phi.dim(), lib.feature_dim)));
    }
    Ok(())
}

/// `Q^new(s,a) = Σ_k γ^new(k) φ(s,a)'ω^(k)`.
pub fn transfer_q(lib: &CommunityLibrary, phi: &FeatureMap, gamma_new: &[f64], s: usize, a: u64) -> Result<f64> {
    check_row(lib, phi, gamma_new)?;
    let mut buf = vec![0.0; lib.feature_dim];
    Ok(lib.omega.iter().zip(gamma_new).map(|(w, g)| g * phi.dot(s, a, w, &mut buf)).sum())
}

/// `Q^new` for every pair `s·|A| + a`.
pub fn transfer_q_table(lib: &CommunityLibrary, phi: &FeatureMap, gamma_new: &[f64], mdp: &MultiAgentMdp) -> Result<Vec<f64>> {
    oracle::check_enumerable(mdp, oracle::DEFAULT_ENUMERATION_CAP)?;
    (0..mdp.num_pairs())
        .map(|p| {
            let (s, a) = mdp.split_pair(p);
            transfer_q(lib, phi, gamma_new, s, a)
        })
        .collect()
}

/// `U^(k) = (Σ_i γ_i(k)) · ‖g^(k)‖₂`.
pub fn uncertainty_scores(gamma: &MembershipMatrix, gradients: &[Vec<f64>]) -> Result<Vec<f64>> {
    if gradients.len() != gamma.k() {
        return Err(Error::Shape(format!("{} gradients for K = {}", gradients.len(), gamma.k())));
    }
    Ok(gradients
        .iter()
        .enumerate()
        .map(|(k, g)| membership_mass(gamma, k) * g.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect())
}

fn membership_mass(gamma: &MembershipMatrix, k: usize) -> f64 {
    (0..gamma.n()).map(|i| gamma.weight(i, k)).sum()
}

/// Scores for TD gradients `g^(k) = e^(k) φ(s_t,a_t)`, using `‖g^(k)‖ = |e^(k)| ‖φ‖`.
pub fn uncertainty_scores_from_td(gamma: &MembershipMatrix, td: &[f64], feature_norm: f64) -> Vec<f64> {
    td.iter().enumerate().map(|(k, e)| membership_mass(gamma, k) * e.abs() * feature_norm).collect()
}

/// Indices of the `budget` largest scores, ties to the lower index, sorted.
pub fn select_communities(scores: &[f64], budget: usize) -> Result<Vec<usize>> {
    let k = scores.len();
    if budget == 0 || budget >= k {
        return Err(Error::InvalidArgument(format!("query budget {budget} must satisfy 1 ≤ M < K = {k}")));
    }
    if scores.iter().any(|u| u.is_nan()) {
        return Err(Error::InvalidArgument("uncertainty scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..budget].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Actor-critic where only the selected communities update `ω` each step.
pub fn train_active(
    mdp: &MultiAgentMdp,
    gamma: &MembershipMatrix,
    phi: &FeatureMap,
    policies: Vec<AgentPolicy>,
    cfg: &TrainConfig,
    budget: usize,
    force_all: bool,
) -> Result<QRun> {
    train_with_selection(mdp, gamma, phi, policies, cfg, Selection::Active { budget, force_all })
}

/// Error of transferred critics on a second task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// `max_{s,a} |Q̂^i − Q^i|` per agent.
    pub per_agent_max: Vec<f64>,
    pub per_agent_mean: Vec<f64>,
    pub max_error: f64,
    pub mean_error: f64,
    /// `max_{s,a} |Σ_k γ_i(k) φ'(ω_1^(k) − ω_2^(k))|` over agents.
    pub task_shift_max: f64,
    /// `max_{s,a} |Σ_k (γ̂_i − γ_i)(k) φ'ω_1^(k)|` over agents.
    pub membership_max: f64,
    /// Realized community reward shift `max_{s,a} |R_2^(k) − R_1^(k)|`.
    pub reward_shift: Vec<f64>,
    /// Realized critic shift `ε_k = max_{s,a} |φ'(ω_1^(k) − ω_2^(k))|`.
    pub critic_shift: Vec<f64>,
    /// `‖γ̂_i − γ_i‖₁` per agent.
    pub membership_l1: Vec<f64>,
}

/// Compares `Q̂^i = Σ_k γ̂_i(k) φ'ω_1^(k)` built from the first task's
/// library against `Q^i = Σ_k γ_i(k) φ'ω_2^(k)` built from the exact critic
/// fixed points of the second task.
pub fn transfer_task_eval(
    library: &CommunityLibrary,
    task1: &MultiAgentMdp,
    task2: &MultiAgentMdp,
    policies: &[AgentPolicy],
    gamma: &MembershipMatrix,
    gamma_hat: &MembershipMatrix,
    phi: &FeatureMap,
) -> Result<TransferReport> {
    library.validate()?;
    if gamma.k() != library.k || gamma_hat.k() != library.k || gamma.n() != gamma_hat.n() {
        return Err(Error::Shape("memberships do not match the library".into()));
    }
    if phi.dim() != library.feature_dim {
        return Err(Error::Shape("feature dimension does not match the library".into()));
    }
    if task1.shape() != task2.shape() {
        return Err(Error::Shape("tasks have different shapes".into()));
    }
    let omega2 = fixed_points(task2, policies, gamma, phi)?;
    let r1 = oracle::community_rewards(task1, gamma)?;
    let r2 = oracle::community_rewards(task2, gamma)?;
    let reward_shift = r1
        .iter()
        .zip(&r2)
        .map(|(a, b)| a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs())))
        .collect();

    let pairs = task2.num_pairs();
    let k = library.k;
    let mut buf = vec![0.0; phi.dim()];
    // Per-pair community values for both tasks.
    let mut q1 = vec![vec![0.0; pairs]; k];
    let mut q2 = vec![vec![0.0; pairs]; k];
    for p in 0..pairs {
        let (s, a) = task2.split_pair(p);
        for c in 0..k {
            q1[c][p] = phi.dot(s, a, &library.omega[c], &mut buf);
            q2[c][p] = phi.dot(s, a, &omega2[c], &mut buf);
        }
    }
    let critic_shift = (0..k)
        .map(|c| q1[c].iter().zip(&q2[c]).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs())))
        .collect();

    let n = gamma.n();
    let mut per_agent_max = vec![0.0; n];
    let mut per_agent_mean = vec![0.0; n];
    let mut task_shift_max: f64 = 0.0;
    let mut membership_max: f64 = 0.0;
    for i in 0..n {
        for p in 0..pairs {
            let mut est = 0.0;
            let mut truth = 0.0;
            let mut task = 0.0;
            let mut memb = 0.0;
            for c in 0..k {
                let (g, gh) = (gamma.weight(i, c), gamma_hat.weight(i, c));
                est += gh * q1[c][p];
                truth += g * q2[c][p];
                task += g * (q1[c][p] - q2[c][p]);
                memb += (gh - g) * q1[c][p];
            }
            let err = (est - truth).abs();
            per_agent_max[i] = f64::max(per_agent_max[i], err);
            per_agent_mean[i] += err / pairs as f64;
            task_shift_max = task_shift_max.max(task.abs());
            membership_max = membership_max.max(memb.abs());
        }
    }
    let membership_l1 = (0..n)
        .map(|i| (0..k).map(|c| (gamma_hat.weight(i, c) - gamma.weight(i, c)).abs()).sum())
        .collect();
    Ok(TransferReport {
        max_error: per_agent_max.iter().cloned().fold(0.0, f64::max),
        mean_error: per_agent_mean.iter().sum::<f64>() / n as f64,
        per_agent_max,
        per_agent_mean,
        task_shift_max,
        membership_max,
        reward_shift,
        critic_shift,
        membership_l1,
    })
}
