//! Experiment configuration and per-seed instance construction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acq::TrainConfig;
use crate::acv::{DEFAULT_REWARD_FEATURE_DIM, DEFAULT_STATE_FEATURE_DIM};
use crate::baseline::ConsensusGraph;
use crate::env::{
    community_aligned_tables, random_policies, AgentPolicy, FeatureMap, MdpShape, MultiAgentMdp, RewardModel, StateFeatureMap,
    StepSchedule, Storage, DEFAULT_FEATURE_DIM, DEFAULT_POLICY_DIM, DEFAULT_REWARD_NOISE, DEFAULT_TABLE_CAP,
};
use crate::membership::{MembershipJson, MembershipMatrix};
use crate::mscore::VertexHunter;
use crate::rng::stream;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "figure1-2")]
    Figure12,
    #[serde(rename = "figure3")]
    Figure3,
    #[serde(rename = "desk-oracle")]
    DeskOracle,
    #[serde(rename = "mscore-sweep")]
    MscoreSweep,
    #[serde(rename = "transfer")]
    Transfer,
    #[serde(rename = "active")]
    Active,
}

impl ExperimentKind {
    pub const ALL: [Self; 6] = [Self::Figure12, Self::Figure3, Self::DeskOracle, Self::MscoreSweep, Self::Transfer, Self::Active];

    pub fn name(self) -> &'static str {
        match self {
            Self::Figure12 => "figure1-2",
            Self::Figure3 => "figure3",
            Self::DeskOracle => "desk-oracle",
            Self::MscoreSweep => "mscore-sweep",
            Self::Transfer => "transfer",
            Self::Active => "active",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Uniform `[0,1]` features.
    #[default]
    Random,
    /// Indicators of balanced random groups of pairs.
    Aggregation,
    /// One indicator per agent and non-default action.
    ActionIndicators,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// `R^i(s,a) ~ Uniform[0,4]`.
    #[default]
    Uniform,
    /// Community tables with action and state preferences, mixed by `Γ`.
    CommunityAligned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MscoreSettings {
    pub nodes: Vec<usize>,
    pub pure_per_community: usize,
    /// Degree parameters are uniform on `[lo, hi]`.
    pub theta: [f64; 2],
    /// Off-diagonal connectivity; the diagonal is 1.
    pub off_diagonal: f64,
    /// Ratio threshold `H`; `log N` when absent.
    pub threshold: Option<f64>,
    pub hunter: VertexHunter,
}

impl Default for MscoreSettings {
    fn default() -> Self {
        Self { nodes: vec![300, 1200], pure_per_community: 10, theta: [0.5, 0.95], off_diagonal: 0.2, threshold: None, hunter: VertexHunter::Spa }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSettings {
    /// Half-width of the uniform reward perturbation of the second task.
    pub reward_shift: f64,
    /// Kernel mixing weight of the second task.
    pub kernel_mix: f64,
    /// Half-width of the noise added to `Γ` before renormalizing (the
    /// estimated membership of the second task).
    pub membership_noise: f64,
}

impl Default for TransferSettings {
    fn default() -> Self {
        Self { reward_shift: 0.2, kernel_mix: 0.0, membership_noise: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub agents: usize,
    pub states: usize,
    pub actions: usize,
    pub communities: usize,
    /// Concentrations of the Dirichlet draw of `Γ`.
    pub dirichlet: Vec<f64>,
    /// Explicit `Γ`; overrides the Dirichlet draw.
    pub membership: Option<MembershipJson>,
    pub rewards: RewardKind,
    pub noise: f64,
    pub storage: Storage,
    pub features: FeatureKind,
    pub feature_dim: usize,
    pub policy_dim: usize,
    pub state_feature_dim: usize,
    pub reward_feature_dim: usize,
    pub schedule: StepSchedule,
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub log_stride: u64,
    pub ridge: f64,
    pub freeze_actor: bool,
    pub oracle_j: bool,
    pub membership_drift: Option<f64>,
    /// Active-selection budget `M`.
    pub budget: usize,
    pub force_all: bool,
    pub mscore: MscoreSettings,
    pub transfer: TransferSettings,
    pub plots: bool,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(ExperimentKind::Figure12)
    }
}

impl ExperimentConfig {
    /// Default settings of each experiment.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = Self {
            schema_version: SCHEMA_VERSION,
            kind,
            agents: 20,
            states: 20,
            actions: 2,
            communities: 4,
            dirichlet: vec![1.0; 4],
            membership: None,
            rewards: RewardKind::Uniform,
            noise: DEFAULT_REWARD_NOISE,
            storage: Storage::Auto,
            features: FeatureKind::Random,
            feature_dim: DEFAULT_FEATURE_DIM,
            policy_dim: DEFAULT_POLICY_DIM,
            state_feature_dim: DEFAULT_STATE_FEATURE_DIM,
            reward_feature_dim: DEFAULT_REWARD_FEATURE_DIM,
            schedule: StepSchedule::default(),
            steps: 500,
            seeds: vec![0],
            log_stride: 1,
            ridge: 0.0,
            freeze_actor: false,
            oracle_j: false,
            membership_drift: None,
            budget: 2,
            force_all: false,
            mscore: MscoreSettings::default(),
            transfer: TransferSettings::default(),
            plots: true,
            out_dir: "runs".into(),
        };
        let desk = Self {
            agents: 2,
            states: 3,
            communities: 2,
            dirichlet: vec![1.0; 2],
            feature_dim: 4,
            state_feature_dim: 2,
            reward_feature_dim: 3,
            oracle_j: true,
            budget: 1,
            ..base.clone()
        };
        match kind {
            ExperimentKind::Figure12 => base,
            ExperimentKind::Figure3 => Self {
                agents: 10,
                states: 10,
                rewards: RewardKind::CommunityAligned,
                features: FeatureKind::ActionIndicators,
                steps: 100_000,
                seeds: (0..10).collect(),
                log_stride: 100,
                ..base
            },
            ExperimentKind::DeskOracle => Self { steps: 200_000, freeze_actor: true, log_stride: 1000, ..desk },
            ExperimentKind::MscoreSweep => Self { communities: 3, dirichlet: vec![1.0; 3], seeds: (0..20).collect(), ..base },
            ExperimentKind::Transfer => desk,
            ExperimentKind::Active => Self { agents: 4, states: 3, communities: 4, dirichlet: vec![1.0; 4], budget: 2, steps: 20_000, log_stride: 100, ..desk },
        }
    }

    /// Parses a config; fields that are absent take the preset of its `kind`.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Config(e.to_string());
        let user: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let kind = match user.get("kind") {
            Some(k) => serde_json::from_value(k.clone()).map_err(bad)?,
            None => ExperimentKind::Figure12,
        };
        let mut merged = serde_json::to_value(Self::preset(kind)).map_err(bad)?;
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(bad)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.agents == 0 || self.states == 0 || self.actions == 0 || self.communities == 0 {
            return fail("agents, states, actions and communities must be positive".into());
        }
        if self.communities > self.agents && self.membership.is_none() && self.kind != ExperimentKind::MscoreSweep {
            return fail(format!("K = {} exceeds N = {}; Γ cannot have full column rank", self.communities, self.agents));
        }
        if self.membership.is_none() && self.dirichlet.len() != self.communities {
            return fail(format!("dirichlet has {} entries for K = {}", self.dirichlet.len(), self.communities));
        }
        if self.dirichlet.iter().any(|a| !(*a > 0.0)) {
            return fail("dirichlet concentrations must be positive".into());
        }
        if let Some(m) = &self.membership {
            if m.n != self.agents || m.k != self.communities {
                return fail(format!("membership is {}×{}, expected {}×{}", m.n, m.k, self.agents, self.communities));
            }
            MembershipMatrix::from_json(m).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if !(self.noise >= 0.0) || !(self.ridge >= 0.0) {
            return fail("noise and ridge must be nonnegative".into());
        }
        if self.feature_dim == 0 || self.policy_dim == 0 || self.state_feature_dim == 0 || self.reward_feature_dim == 0 {
            return fail("feature dimensions must be positive".into());
        }
        self.schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.kind == ExperimentKind::Active && (self.budget == 0 || self.budget >= self.communities) {
            return fail(format!("budget {} must satisfy 1 ≤ M < K = {}", self.budget, self.communities));
        }
        if self.mscore.nodes.is_empty() || self.mscore.nodes.iter().any(|&n| n < self.mscore.pure_per_community * self.communities) {
            return fail("mscore node counts must be nonempty and fit the pure nodes".into());
        }
        let [lo, hi] = self.mscore.theta;
        if !(lo > 0.0 && hi >= lo) || !(0.0..=1.0).contains(&self.mscore.off_diagonal) {
            return fail("mscore degree range or connectivity out of range".into());
        }
        let t = &self.transfer;
        if !(t.reward_shift >= 0.0) || !(0.0..=1.0).contains(&t.kernel_mix) || !(t.membership_noise >= 0.0) {
            return fail("transfer perturbation sizes out of range".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> MdpShape {
        MdpShape { num_agents: self.agents, num_states: self.states, actions_per_agent: self.actions }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            schedule: self.schedule,
            seed,
            log_stride: self.log_stride,
            ridge: self.ridge,
            freeze_actor: self.freeze_actor,
            initial_state: 0,
            membership_drift: self.membership_drift,
            oracle_j: self.oracle_j,
        }
    }

    /// Copy restricted to one seed, as stored next to each run.
    pub fn for_seed(&self, seed: u64) -> Self {
        Self { seeds: vec![seed], ..self.clone() }
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (key, value) in o {
                match b.get_mut(&key) {
                    Some(slot) if slot.is_object() && value.is_object() => merge(slot, value),
                    _ => {
                        b.insert(key, value);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Everything a training run needs for one seed.
#[derive(Clone, Debug)]
pub struct Instance {
    pub mdp: MultiAgentMdp,
    pub gamma: MembershipMatrix,
    pub phi: FeatureMap,
    pub policies: Vec<AgentPolicy>,
}

impl Instance {
    /// All randomness of the instance is keyed by `seed` on separate streams.
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let gamma = match &cfg.membership {
            Some(m) => MembershipMatrix::from_json(m)?,
            None => MembershipMatrix::dirichlet(cfg.agents, &cfg.dirichlet, seed)?,
        };
        let mut mdp = MultiAgentMdp::random(cfg.shape(), seed, cfg.storage, DEFAULT_TABLE_CAP)?.with_noise_halfwidth(cfg.noise);
        if cfg.rewards == RewardKind::CommunityAligned {
            let tables = community_aligned_tables(cfg.communities, cfg.states, cfg.actions, seed);
            mdp = mdp.with_rewards(RewardModel::CommunityAligned { membership: gamma.clone(), tables });
        }
        let phi = match cfg.features {
            FeatureKind::Random => FeatureMap::random(&mdp, cfg.feature_dim, seed, stream::FEATURES, mdp.is_explicit())?,
            FeatureKind::Aggregation => FeatureMap::aggregation(&mdp, cfg.feature_dim, seed, stream::FEATURES)?,
            FeatureKind::ActionIndicators => FeatureMap::action_indicators(mdp.space())?,
        };
        let policies = random_policies(cfg.agents, cfg.states, cfg.actions, cfg.policy_dim, seed);
        Ok(Self { mdp, gamma, phi, policies })
    }

    pub fn state_features(&self, cfg: &ExperimentConfig, seed: u64) -> Result<StateFeatureMap> {
        StateFeatureMap::random(cfg.states, cfg.state_feature_dim, seed)
    }

    pub fn reward_features(&self, cfg: &ExperimentConfig, seed: u64) -> Result<FeatureMap> {
        FeatureMap::random(&self.mdp, cfg.reward_feature_dim, seed, stream::REWARD_FEATURES, self.mdp.is_explicit())
    }

    pub fn graph(&self, seed: u64) -> ConsensusGraph {
        ConsensusGraph::ring_with_chords(self.mdp.num_agents(), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for kind in ExperimentKind::ALL {
            let cfg = ExperimentConfig::preset(kind);
            cfg.validate().unwrap();
            let text = cfg.to_json();
            let back = ExperimentConfig::from_json(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_json(), text);
            assert!(text.contains(&format!("\"{}\"", kind.name())));
        }
    }

    #[test]
    fn partial_configs_take_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"schema_version": 1, "kind": "figure1-2", "steps": 7}"#).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.agents, 20);
        let cfg = ExperimentConfig::from_json(r#"{"kind": "figure3", "mscore": {"nodes": [90]}}"#).unwrap();
        assert_eq!(cfg.agents, 10);
        assert_eq!(cfg.mscore.nodes, vec![90]);
        assert_eq!(cfg.mscore.pure_per_community, 10);
    }

    #[test]
    fn schema_violations_are_config_errors() {
        for text in [
            r#"{"schema_version": 2}"#,
            r#"{"schema_version": 1, "bogus": 1}"#,
            r#"{"schema_version": 1, "kind": "figure9"}"#,
            r#"{"schema_version": 1, "seeds": []}"#,
            r#"{"schema_version": 1, "dirichlet": [1.0]}"#,
            r#"{"schema_version": 1, "kind": "active", "agents": 4, "communities": 4, "dirichlet": [1,1,1,1], "budget": 4}"#,
            "not json",
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn figure3_rewards_follow_the_preferences() {
        let cfg = ExperimentConfig::preset(ExperimentKind::Figure3);
        let inst = Instance::build(&cfg, 3).unwrap();
        let RewardModel::CommunityAligned { tables, .. } = inst.mdp.reward_model() else { panic!("expected community rewards") };
        let (s_count, a_count) = (cfg.states, cfg.actions);
        for s in 0..s_count {
            let at = |k: usize, b: usize| tables[(k * s_count + s) * a_count + b];
            assert!((3.0..=4.0).contains(&at(0, 0)) && (1.0..=2.0).contains(&at(0, 1)));
            assert!((3.0..=4.0).contains(&at(1, 1)) && (1.0..=2.0).contains(&at(1, 0)));
            let even = s % 2 == 0;
            assert_eq!((3.0..=4.0).contains(&at(2, 0)), even);
            assert_eq!((3.0..=4.0).contains(&at(3, 0)), !even);
        }
    }
}
