//! Run orchestration: one directory per (task, seed), traces as CSV, a JSON
//! artifact describing each run, and cross-seed reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, ExperimentKind, Instance};
use super::plot::{default_specs, emit_plots, render_svg, Series};
use crate::acq::train;
use crate::acv::train_v;
use crate::baseline::train_baseline;
use crate::membership::MembershipMatrix;
use crate::mscore::{align, aligned_row_errors, estimate, generate_dcmm, DcmmModel};
use crate::oracle::exact_solution;
use crate::rng::{stream, CounterRng};
use crate::trace::TrainingTrace;
use crate::transfer::{train_active, transfer_task_eval, CommunityLibrary};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    TrainQ,
    TrainV,
    TrainActive,
    CompareBaseline,
    Oracle,
    Transfer,
    EstimateMembership,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::TrainQ => "train-q",
            Self::TrainV => "train-v",
            Self::TrainActive => "train-active",
            Self::CompareBaseline => "compare-baseline",
            Self::Oracle => "oracle",
            Self::Transfer => "transfer",
            Self::EstimateMembership => "estimate-membership",
        }
    }

    /// What an experiment kind runs when no task is named.
    pub fn default_for(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::Figure12 => Self::TrainQ,
            ExperimentKind::Figure3 => Self::CompareBaseline,
            ExperimentKind::DeskOracle => Self::Oracle,
            ExperimentKind::MscoreSweep => Self::EstimateMembership,
            ExperimentKind::Transfer => Self::Transfer,
            ExperimentKind::Active => Self::TrainActive,
        }
    }
}

/// Statistics of a trace, all recomputable from its CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub rows: usize,
    pub final_t: u64,
    pub final_j_hat: Option<f64>,
    /// Mean of the finite `J_hat` values over the last tenth of the rows.
    pub tail_j_hat: Option<f64>,
    pub final_td_abs_mean: Option<f64>,
    pub final_j_oracle: Option<f64>,
    pub final_mu: Vec<Option<f64>>,
}

fn finite(x: Option<f64>) -> Option<f64> {
    x.filter(|v| v.is_finite())
}

pub fn summarize(trace: &TrainingTrace) -> TraceSummary {
    let rows = trace.len();
    let tail = trace.column("J_hat").and_then(|j| {
        let start = rows - rows.div_ceil(10);
        let vals: Vec<f64> = j[start..].iter().copied().filter(|v| v.is_finite()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    });
    let final_mu = trace.columns.iter().filter(|c| c.starts_with("mu_")).map(|c| finite(trace.last(c))).collect();
    TraceSummary {
        rows,
        final_t: trace.last("t").map_or(0, |t| t as u64),
        final_j_hat: finite(trace.last("J_hat")),
        tail_j_hat: tail,
        final_td_abs_mean: finite(trace.last("td_abs_mean")),
        final_j_oracle: finite(trace.last("J_oracle")),
        final_mu,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub package: String,
    pub version: String,
    pub config_sha256: String,
}

impl Fingerprint {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Self { package: env!("CARGO_PKG_NAME").into(), version: env!("CARGO_PKG_VERSION").into(), config_sha256: sha256_hex(cfg.to_json().as_bytes()) }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub label: String,
    pub path: String,
    pub sha256: String,
    pub summary: TraceSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub task: Task,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub traces: Vec<TraceRecord>,
    pub plots: Vec<String>,
    /// Other files of the run by role.
    pub outputs: BTreeMap<String, String>,
    pub fingerprint: Fingerprint,
}

/// Result of a whole experiment: per-seed artifacts and an optional
/// cross-seed report.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub artifacts: Vec<RunArtifact>,
    pub report: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub seed: u64,
    pub final_a: f64,
    pub final_b: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub column: String,
    pub label_a: String,
    pub label_b: String,
    pub pairs: Vec<PairComparison>,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    /// `(wins + ties/2) / pairs`.
    pub win_rate: f64,
    pub mean_gap: f64,
}

/// Final values of `column` in two traces of equal length.
pub fn compare(a: &TrainingTrace, b: &TrainingTrace, column: &str) -> Result<(f64, f64)> {
    let ca = a.column(column).ok_or_else(|| Error::InvalidArgument(format!("first trace has no {column} column")))?;
    let cb = b.column(column).ok_or_else(|| Error::InvalidArgument(format!("second trace has no {column} column")))?;
    if ca.len() != cb.len() {
        return Err(Error::Shape(format!("{column} columns have lengths {} and {}", ca.len(), cb.len())));
    }
    match (ca.last(), cb.last()) {
        (Some(x), Some(y)) => Ok((*x, *y)),
        _ => Err(Error::InvalidArgument("empty traces".into())),
    }
}

pub fn compare_report(column: &str, label_a: &str, label_b: &str, pairs: Vec<PairComparison>) -> CompareReport {
    let wins = pairs.iter().filter(|p| p.gap > 0.0).count();
    let ties = pairs.iter().filter(|p| p.gap == 0.0).count();
    let losses = pairs.len() - wins - ties;
    let n = pairs.len().max(1) as f64;
    CompareReport {
        column: column.into(),
        label_a: label_a.into(),
        label_b: label_b.into(),
        win_rate: (wins as f64 + 0.5 * ties as f64) / n,
        mean_gap: pairs.iter().map(|p| p.gap).sum::<f64>() / n,
        wins,
        ties,
        losses,
        pairs,
    }
}

/// Result of MSCORE on one sampled network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MscoreRecord {
    pub nodes: usize,
    pub mean_l1: f64,
    pub max_row_l1: f64,
    pub perm: Vec<usize>,
    pub warnings: Vec<String>,
}

fn contextualize(e: Error, task: Task, seed: u64) -> Error {
    let ctx = format!("{} seed {seed}", task.name());
    match e {
        Error::NumericAbort { step, what } => Error::NumericAbort { step, what: format!("{ctx}: {what}") },
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{ctx}: {m}")),
        Error::Assumption(m) => Error::Assumption(format!("{ctx}: {m}")),
        Error::Singular(m) => Error::Singular(format!("{ctx}: {m}")),
        Error::Degenerate(m) => Error::Degenerate(format!("{ctx}: {m}")),
        other => other,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn save_trace(trace: &TrainingTrace, dir: &Path, file: &str, label: &str) -> Result<TraceRecord> {
    let path = dir.join(file);
    let text = trace.to_csv();
    std::fs::write(&path, &text)?;
    Ok(TraceRecord { label: label.into(), path: path.display().to_string(), sha256: sha256_hex(text.as_bytes()), summary: summarize(trace) })
}

/// Runs `task` for every seed of `cfg`, in parallel across seeds. Outputs go
/// to `<out_dir>/<task>/seed-<seed>/`.
pub fn run_experiment(cfg: &ExperimentConfig, task: Task) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let dir = Path::new(&cfg.out_dir).join(task.name());
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let runs = seed_dirs(&cfg.seeds);
    let artifacts = runs
        .par_iter()
        .map(|(seed, name)| run_seed(cfg, task, *seed, &dir.join(name)).map_err(|e| contextualize(e, task, *seed)))
        .collect::<Result<Vec<_>>>()?;
    let report = match task {
        Task::CompareBaseline => {
            let pairs = artifacts
                .iter()
                .map(|a| {
                    let (x, y) = (a.traces[0].summary.final_j_hat.unwrap_or(f64::NAN), a.traces[1].summary.final_j_hat.unwrap_or(f64::NAN));
                    PairComparison { seed: a.seed, final_a: x, final_b: y, gap: x - y }
                })
                .collect();
            let report = compare_report("J_hat", "community-based", "neighbor-based", pairs);
            write_json(&dir.join("compare.json"), &report)?;
            Some(serde_json::to_value(report)?)
        }
        Task::EstimateMembership => {
            let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for a in &artifacts {
                let records: Vec<MscoreRecord> = serde_json::from_str(&std::fs::read_to_string(&a.outputs["mscore"])?)?;
                for r in records {
                    by_n.entry(r.nodes).or_default().push(r.mean_l1);
                }
            }
            let medians: BTreeMap<String, f64> = by_n.into_iter().map(|(n, v)| (n.to_string(), median(v))).collect();
            let value = serde_json::json!({ "median_mean_l1": medians });
            write_json(&dir.join("summary.json"), &value)?;
            Some(value)
        }
        _ => None,
    };
    Ok(ExperimentOutput { dir, artifacts, report })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `Γ̂`: `Γ` plus uniform noise of half-width `w`, clipped at 0 and renormalized.
pub fn noisy_membership(gamma: &MembershipMatrix, w: f64, seed: u64) -> Result<MembershipMatrix> {
    let gen = CounterRng::new(seed, stream::PERTURBATION);
    let rows: Vec<Vec<f64>> = (0..gamma.n())
        .map(|i| {
            let raw: Vec<f64> = (0..gamma.k())
                .map(|k| (gamma.weight(i, k) + w * (2.0 * gen.uniform_at(&[u64::MAX, i as u64, k as u64]) - 1.0)).max(0.0))
                .collect();
            let total: f64 = raw.iter().sum();
            if total > 0.0 {
                raw.iter().map(|x| x / total).collect()
            } else {
                gamma.row(i)
            }
        })
        .collect();
    MembershipMatrix::from_rows(&rows)
}

/// `seed-<s>` per run; repeated seeds get `seed-<s>.<n>` so no two runs
/// share a directory.
fn seed_dirs(seeds: &[u64]) -> Vec<(u64, String)> {
    let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
    seeds
        .iter()
        .map(|&s| {
            let n = seen.entry(s).or_insert(0);
            *n += 1;
            (s, if *n == 1 { format!("seed-{s}") } else { format!("seed-{s}.{}", *n - 1) })
        })
        .collect()
}

fn run_seed(cfg: &ExperimentConfig, task: Task, seed: u64, dir: &Path) -> Result<RunArtifact> {
    std::fs::create_dir_all(dir)?;
    let snapshot = cfg.for_seed(seed);
    let fingerprint = Fingerprint::of(&snapshot);
    let mut traces = Vec::new();
    let mut plots = Vec::new();
    let mut outputs = BTreeMap::new();
    let plot_dir = dir.join("plots");
    let plot = |trace: &TrainingTrace, prefix: &str, plots: &mut Vec<String>| -> Result<()> {
        if cfg.plots {
            let paths = emit_plots(trace, &default_specs(trace, prefix), &plot_dir)?;
            plots.extend(paths.iter().map(|p| p.display().to_string()));
        }
        Ok(())
    };
    let tcfg = cfg.train_config(seed);

    match task {
        Task::TrainQ | Task::TrainActive => {
            let inst = Instance::build(cfg, seed)?;
            let run = if task == Task::TrainQ {
                train(&inst.mdp, &inst.gamma, &inst.phi, inst.policies.clone(), &tcfg)?
            } else {
                train_active(&inst.mdp, &inst.gamma, &inst.phi, inst.policies.clone(), &tcfg, cfg.budget, cfg.force_all)?
            };
            traces.push(save_trace(&run.trace, dir, "trace.csv", task.name())?);
            let lib = CommunityLibrary::from_critic(&run.critic, format!("{}-seed-{seed}", cfg.kind.name()), fingerprint.config_sha256.clone())?;
            let path = dir.join("library.json");
            write_json(&path, &lib)?;
            outputs.insert("library".into(), path.display().to_string());
            plot(&run.trace, "omega", &mut plots)?;
        }
        Task::TrainV => {
            let inst = Instance::build(cfg, seed)?;
            let phi_v = inst.state_features(cfg, seed)?;
            let f = inst.reward_features(cfg, seed)?;
            let run = train_v(&inst.mdp, &inst.gamma, &phi_v, &f, inst.policies.clone(), &tcfg)?;
            traces.push(save_trace(&run.trace, dir, "trace.csv", task.name())?);
            plot(&run.trace, "v", &mut plots)?;
        }
        Task::CompareBaseline => {
            let inst = Instance::build(cfg, seed)?;
            let ours = train(&inst.mdp, &inst.gamma, &inst.phi, inst.policies.clone(), &tcfg)?;
            let base = train_baseline(&inst.mdp, &inst.graph(seed), &inst.phi, inst.policies.clone(), &tcfg)?;
            traces.push(save_trace(&ours.trace, dir, "community.csv", "community-based")?);
            traces.push(save_trace(&base.trace, dir, "baseline.csv", "neighbor-based")?);
            if cfg.plots {
                let series = vec![
                    Series::from_trace(&ours.trace, "J_hat", "community-based")?,
                    Series::from_trace(&base.trace, "J_hat", "neighbor-based")?,
                ];
                std::fs::create_dir_all(&plot_dir)?;
                let path = plot_dir.join("J_hat_compare.svg");
                std::fs::write(&path, render_svg("J_hat", &series, true))?;
                plots.push(path.display().to_string());
            }
        }
        Task::Oracle => {
            let inst = Instance::build(cfg, seed)?;
            let sol = exact_solution(&inst.mdp, &inst.policies, &inst.gamma, &inst.phi)?;
            let path = dir.join("oracle.json");
            write_json(&path, &sol)?;
            outputs.insert("oracle".into(), path.display().to_string());
        }
        Task::Transfer => {
            let inst = Instance::build(cfg, seed)?;
            let t = &cfg.transfer;
            let task2 = inst.mdp.perturbed(t.reward_shift, t.kernel_mix, seed)?;
            let lib = CommunityLibrary::from_oracle(&inst.mdp, &inst.policies, &inst.gamma, &inst.phi, format!("{}-seed-{seed}", cfg.kind.name()))?;
            let gamma_hat = noisy_membership(&inst.gamma, t.membership_noise, seed)?;
            let report = transfer_task_eval(&lib, &inst.mdp, &task2, &inst.policies, &inst.gamma, &gamma_hat, &inst.phi)?;
            for (role, value) in [("library", serde_json::to_value(&lib)?), ("transfer", serde_json::to_value(&report)?)] {
                let path = dir.join(format!("{role}.json"));
                write_json(&path, &value)?;
                outputs.insert(role.into(), path.display().to_string());
            }
        }
        Task::EstimateMembership => {
            let m = &cfg.mscore;
            let k = cfg.communities;
            let mut records = Vec::new();
            for &n in &m.nodes {
                let model = DcmmModel::with_pure_nodes(n, k, m.pure_per_community, (m.theta[0], m.theta[1]), DcmmModel::connectivity(k, m.off_diagonal), seed)?;
                let (adj, mut warnings) = generate_dcmm(&model, seed);
                let est = estimate(&adj.matrix, k, m.threshold, seed, m.hunter)?;
                warnings.extend(est.warnings);
                let al = align(&est.gamma, &model.gamma)?;
                let max_row_l1 = aligned_row_errors(&est.gamma, &model.gamma, &al.perm).into_iter().fold(0.0, f64::max);
                records.push(MscoreRecord { nodes: n, mean_l1: al.mean_l1, max_row_l1, perm: al.perm, warnings });
            }
            let path = dir.join("mscore.json");
            write_json(&path, &records)?;
            outputs.insert("mscore".into(), path.display().to_string());
        }
    }

    let artifact = RunArtifact { task, seed, config: snapshot, traces, plots, outputs, fingerprint };
    write_json(&dir.join("artifact.json"), &artifact)?;
    Ok(artifact)
}
