use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmarl::harness::config::{ExperimentConfig, ExperimentKind, Instance};
use cmarl::harness::plot::{default_specs, emit_plots, PlotSpec};
use cmarl::harness::{run_experiment, ExperimentOutput, Task};
use cmarl::mscore::{estimate, Adjacency, VertexHunter};
use cmarl::trace::TrainingTrace;
use cmarl::transfer::{transfer_q_table, CommunityLibrary};
use cmarl::{Error, MembershipMatrix, Result};

#[derive(Parser, Debug)]
#[command(name = "cmarl", version, about = "Community-based multi-agent actor-critic experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment config (JSON); defaults to the preset of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Runs a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    log_stride: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Community Q-critic actor-critic.
    TrainQ {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Community state-value actor-critic.
    TrainV {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Q-critic training that updates only the most uncertain communities.
    TrainActive {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        budget: Option<usize>,
        /// Select every community (reproduces train-q).
        #[arg(long)]
        force_all: bool,
    },
    /// Paired runs of the community method and the neighbor-consensus baseline.
    CompareBaseline {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// MSCORE on an adjacency file, or the configured DCMM sweep.
    EstimateMembership {
        /// Edge list or dense 0/1 matrix.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(short = 'k', long)]
        communities: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_parser = parse_hunter)]
        hunter: Option<VertexHunter>,
        /// Membership JSON destination (stdout if absent).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Transferred Q table from a library, or the configured transfer study.
    Transfer {
        #[arg(long)]
        library: Option<PathBuf>,
        /// Membership JSON of the new agents.
        #[arg(long, conflicts_with = "adjacency")]
        membership: Option<PathBuf>,
        /// Adjacency file; memberships are estimated with MSCORE.
        #[arg(long)]
        adjacency: Option<PathBuf>,
        /// Restricts the table to one agent (0-based).
        #[arg(long)]
        agent: Option<usize>,
        /// CSV destination (stdout if absent).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Exact enumeration quantities of a small instance.
    Oracle,
    /// SVG plots of a trace.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        /// Comma-separated columns for a single plot; defaults to the usual set.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        #[arg(long, default_value = "plot")]
        name: String,
    },
}

fn parse_hunter(s: &str) -> std::result::Result<VertexHunter, String> {
    match s {
        "spa" => Ok(VertexHunter::Spa),
        "k-means" | "kmeans" => Ok(VertexHunter::KMeans),
        _ => Err(format!("unknown vertex hunter {s:?} (spa, k-means)")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Json(_)
        | Error::InvalidArgument(_)
        | Error::Shape(_)
        | Error::TableTooLarge { .. }
        | Error::EnumerationCap { .. }
        | Error::Assumption(_)
        | Error::RankDeficient { .. } => 2,
        Error::NumericAbort { .. } | Error::Singular(_) | Error::Degenerate(_) => 3,
        Error::Io(_) => 1,
    }
}

fn load_config(global: &GlobalArgs, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(kind),
    };
    if let Some(seed) = global.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &global.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(stride) = global.log_stride {
        cfg.log_stride = stride;
    }
    Ok(cfg)
}

fn finish(cfg: ExperimentConfig, task: Task) -> Result<()> {
    cfg.validate()?;
    let out = run_experiment(&cfg, task)?;
    report(&out);
    Ok(())
}

fn report(out: &ExperimentOutput) {
    let mut stdout = std::io::stdout().lock();
    for a in &out.artifacts {
        for t in &a.traces {
            let j = t.summary.final_j_hat.map_or("NaN".to_string(), |j| format!("{j:.6}"));
            let _ = writeln!(stdout, "seed {}: {} ({} rows, final J_hat {j})", a.seed, t.path, t.summary.rows);
        }
        for (role, path) in &a.outputs {
            let _ = writeln!(stdout, "seed {}: {role} {path}", a.seed);
        }
    }
    if let Some(r) = &out.report {
        let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(r).unwrap_or_default());
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, text)?;
        }
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::TrainQ { steps } => {
            let mut cfg = load_config(g, ExperimentKind::Figure12)?;
            cfg.steps = steps.unwrap_or(cfg.steps);
            finish(cfg, Task::TrainQ)
        }
        Command::TrainV { steps } => {
            let mut cfg = load_config(g, ExperimentKind::Figure12)?;
            cfg.steps = steps.unwrap_or(cfg.steps);
            finish(cfg, Task::TrainV)
        }
        Command::TrainActive { steps, budget, force_all } => {
            let mut cfg = load_config(g, ExperimentKind::Active)?;
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.budget = budget.unwrap_or(cfg.budget);
            cfg.force_all |= force_all;
            if cfg.budget == 0 || cfg.budget >= cfg.communities {
                return Err(Error::Config(format!("budget {} must satisfy 1 ≤ M < K = {}", cfg.budget, cfg.communities)));
            }
            finish(cfg, Task::TrainActive)
        }
        Command::CompareBaseline { steps } => {
            let mut cfg = load_config(g, ExperimentKind::Figure3)?;
            cfg.steps = steps.unwrap_or(cfg.steps);
            finish(cfg, Task::CompareBaseline)
        }
        Command::EstimateMembership { input, communities, threshold, hunter, output } => {
            let mut cfg = load_config(g, ExperimentKind::MscoreSweep)?;
            if let Some(k) = communities {
                cfg.communities = k;
                cfg.dirichlet = vec![1.0; k];
            }
            cfg.mscore.threshold = threshold.or(cfg.mscore.threshold);
            cfg.mscore.hunter = hunter.unwrap_or(cfg.mscore.hunter);
            match input {
                Some(path) => {
                    let adj = Adjacency::load(&path)?;
                    let est = estimate(&adj.matrix, cfg.communities, cfg.mscore.threshold, cfg.seeds[0], cfg.mscore.hunter)?;
                    for w in &est.warnings {
                        eprintln!("warning: {w}");
                    }
                    let json = serde_json::to_string_pretty(&est.gamma.to_json())? + "\n";
                    write_output(output.as_deref(), &json)
                }
                None => finish(cfg, Task::EstimateMembership),
            }
        }
        Command::Transfer { library, membership, adjacency, agent, output } => {
            let cfg = load_config(g, ExperimentKind::Transfer)?;
            let Some(lib_path) = library else {
                return finish(cfg, Task::Transfer);
            };
            cfg.validate()?;
            let lib: CommunityLibrary = serde_json::from_str(&std::fs::read_to_string(&lib_path)?).map_err(|e| Error::Config(e.to_string()))?;
            lib.validate()?;
            let gamma = match (membership, adjacency) {
                (Some(p), _) => MembershipMatrix::from_json(&serde_json::from_str(&std::fs::read_to_string(&p)?).map_err(|e| Error::Config(e.to_string()))?)?,
                (None, Some(p)) => {
                    let adj = Adjacency::load(&p)?;
                    estimate(&adj.matrix, lib.k, cfg.mscore.threshold, cfg.seeds[0], cfg.mscore.hunter)?.gamma
                }
                (None, None) => return Err(Error::Config("transfer with --library needs --membership or --adjacency".into())),
            };
            let inst = Instance::build(&cfg, cfg.seeds[0])?;
            let agents: Vec<usize> = match agent {
                Some(i) if i < gamma.n() => vec![i],
                Some(i) => return Err(Error::Config(format!("agent {i} out of range"))),
                None => (0..gamma.n()).collect(),
            };
            let tables = agents.iter().map(|&i| transfer_q_table(&lib, &inst.phi, &gamma.row(i), &inst.mdp)).collect::<Result<Vec<_>>>()?;
            let mut csv = String::from("state,action");
            for i in &agents {
                csv.push_str(&format!(",q_{}", i + 1));
            }
            csv.push('\n');
            for p in 0..inst.mdp.num_pairs() {
                let (s, a) = inst.mdp.split_pair(p);
                csv.push_str(&format!("{s},{a}"));
                for t in &tables {
                    csv.push(',');
                    csv.push_str(&cmarl::trace::format_value(t[p]));
                }
                csv.push('\n');
            }
            write_output(output.as_deref(), &csv)
        }
        Command::Oracle => finish(load_config(g, ExperimentKind::DeskOracle)?, Task::Oracle),
        Command::Plot { trace, columns, name } => {
            let tr = TrainingTrace::load(&trace)?;
            let dir = g.out.clone().unwrap_or_else(|| trace.parent().map(|p| p.join("plots")).unwrap_or_else(|| PathBuf::from("plots")));
            let specs = if columns.is_empty() {
                let prefix = if tr.column_index("v_1_1").is_some() { "v" } else { "omega" };
                default_specs(&tr, prefix)
            } else {
                vec![PlotSpec { name, columns }]
            };
            for p in emit_plots(&tr, &specs, &dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::RankDeficient { min_eig: 0.0 }), 2);
        assert_eq!(exit_code(&Error::NumericAbort { step: 3, what: "r".into() }), 3);
        assert_eq!(exit_code(&Error::Singular("x".into())), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
