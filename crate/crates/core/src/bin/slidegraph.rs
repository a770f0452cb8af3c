use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use slidegraph::aggregation::{mil_select, MilSelector, StrategyKind};
use slidegraph::experiment::{
    evaluate_strategy, format_table, run_protocol, summarize, train_gnn, train_selector,
    CohortGraphs, ExperimentConfig,
};
use slidegraph::graph::DEFAULT_RADIUS_FACTOR;
use slidegraph::io::{load_cohort, CohortFilter, Split};
use slidegraph::model::{read_checkpoint, write_checkpoint, Architecture};
use slidegraph::synth::{generate_synthetic_cohort, InformativePolicy, SynthConfig};
use slidegraph::{Error, Result};

#[derive(Parser)]
#[command(name = "slidegraph", version, about = "Patch-graph survival classifiers for whole-slide images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (manifest, feature files, truth sidecar).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_policy)]
        policy: Option<InformativePolicy>,
        #[arg(long)]
        signal: Option<f64>,
    },
    /// Build every slide graph and report node/edge counts.
    BuildGraph {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RADIUS_FACTOR)]
        radius_factor: f64,
        /// Print per-slide statistics as well as the summary.
        #[arg(long)]
        stats: bool,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Train a graph model on the training split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_arch)]
        arch: Architecture,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Training history path; defaults to `<out>.history.json`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score a trained model on the test split with one aggregation strategy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: StrategyKind,
        #[arg(long)]
        mil_ckpt: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit the attention slide selector on the training split.
    MilTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write the selected slide per test patient.
    MilSelect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Repeat training over seeds 0..repeat and tabulate mean ± std per model and strategy.
    Runs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeat: u64,
        #[arg(long, value_delimiter = ',', value_parser = parse_arch, default_value = "gcn,gat1,gat2,sage-mean,sage-max")]
        arch: Vec<Architecture>,
        #[arg(long, value_delimiter = ',', value_parser = parse_strategy, default_value = "wsi,mv,1d,mil")]
        strategy: Vec<StrategyKind>,
        /// Per-run records as a JSON array.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(clap::Args)]
struct FilterArgs {
    /// Keep only slides with these categories.
    #[arg(long, value_delimiter = ',')]
    category: Option<Vec<String>>,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration (JSON); missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    filter: FilterArgs,
}

fn parse_arch(s: &str) -> std::result::Result<Architecture, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<StrategyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<InformativePolicy, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown policy {s:?}, expected all|one-per-patient"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(what, e))
}

/// Writes pretty JSON and reads it back to confirm the file is intact.
fn write_json<T: Serialize>(value: &T, path: &Path, what: &str) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(what, e))?;
    text.push('\n');
    std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    let back = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if back != text {
        return Err(Error::Validation(format!("{} did not read back intact", path.display())));
    }
    Ok(())
}

impl CommonArgs {
    fn experiment(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => read_json(p, "experiment config"),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

impl FilterArgs {
    fn filter(&self) -> CohortFilter {
        CohortFilter {
            categories: self.category.clone(),
        }
    }
}

fn load(manifest: &Path, common: &CommonArgs, cfg: &ExperimentConfig) -> Result<CohortGraphs> {
    let cohort = load_cohort(manifest, &common.filter.filter())?;
    CohortGraphs::load(cohort, cfg.radius_factor)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            out,
            seed,
            policy,
            signal,
        } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => read_json(&p, "synth config")?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = policy {
                cfg.policy = p;
            }
            if let Some(s) = signal {
                cfg.signal_strength = s;
            }
            let manifest = generate_synthetic_cohort(&cfg, &out)?;
            let cohort = load_cohort(&manifest, &CohortFilter::default())?;
            println!(
                "wrote {} ({} patients, {} slides)",
                manifest.display(),
                cohort.patients.len(),
                cohort.slides.len()
            );
        }
        Command::BuildGraph {
            manifest,
            radius_factor,
            stats,
            filter,
        } => {
            let cohort = load_cohort(&manifest, &filter.filter())?;
            let data = CohortGraphs::load(cohort, radius_factor)?;
            let graphs = data.graphs();
            if stats {
                println!("{:<16} {:>6} {:>6}", "slide", "nodes", "edges");
                for g in graphs {
                    println!("{:<16} {:>6} {:>6}", g.slide_id, g.num_nodes(), g.num_edges());
                }
            }
            let nodes: Vec<usize> = graphs.iter().map(|g| g.num_nodes()).collect();
            let edges: Vec<usize> = graphs.iter().map(|g| g.num_edges()).collect();
            let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len().max(1) as f64;
            println!(
                "slides {}  nodes mean {:.1} min {} max {}  edges mean {:.1} min {} max {}",
                graphs.len(),
                mean(&nodes),
                nodes.iter().min().copied().unwrap_or(0),
                nodes.iter().max().copied().unwrap_or(0),
                mean(&edges),
                edges.iter().min().copied().unwrap_or(0),
                edges.iter().max().copied().unwrap_or(0),
            );
        }
        Command::Train {
            manifest,
            arch,
            seed,
            out,
            history,
            common,
        } => {
            let cfg = common.experiment()?;
            let data = load(&manifest, &common, &cfg)?;
            let (model, hist) = train_gnn(&data, arch, &cfg, seed)?;
            write_checkpoint(&model, &out)?;
            if read_checkpoint(&out)?.flatten_parameters() != model.flatten_parameters() {
                return Err(Error::Validation(format!("{} did not read back intact", out.display())));
            }
            let history = history.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".history.json");
                p.into()
            });
            write_json(&hist, &history, "history")?;
            println!(
                "{arch}: {} epochs, best epoch {}, best val loss {:.6}",
                hist.epochs_run,
                hist.best_epoch,
                hist.val_loss[hist.best_epoch - 1]
            );
        }
        Command::Eval {
            ckpt,
            manifest,
            strategy,
            mil_ckpt,
            json,
            common,
        } => {
            let cfg = common.experiment()?;
            let data = load(&manifest, &common, &cfg)?;
            let model = read_checkpoint(&ckpt)?;
            let selector = mil_ckpt.as_deref().map(MilSelector::read).transpose()?;
            let report = evaluate_strategy(&model, &data, strategy, selector.as_ref(), &cfg)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json("metrics", e))?;
            println!("{text}");
            if let Some(p) = json {
                write_json(&report, &p, "metrics")?;
            }
        }
        Command::MilTrain {
            manifest,
            seed,
            out,
            common,
        } => {
            let cfg = common.experiment()?;
            let data = load(&manifest, &common, &cfg)?;
            let (selector, hist) = train_selector(&data, &cfg, seed)?;
            selector.write(&out)?;
            if MilSelector::read(&out)? != selector {
                return Err(Error::Validation(format!("{} did not read back intact", out.display())));
            }
            println!("selector: {} epochs, best epoch {}", hist.epochs_run, hist.best_epoch);
        }
        Command::MilSelect {
            ckpt,
            manifest,
            out,
            common,
        } => {
            let cfg = common.experiment()?;
            let data = load(&manifest, &common, &cfg)?;
            let selector = MilSelector::read(&ckpt)?;
            let bags = data.mil_bags(&data.split(Split::Test))?;
            let picks = mil_select(&selector, &bags)?;
            write_json(&picks, &out, "selection")?;
            println!("selected slides for {} patients", picks.len());
        }
        Command::Runs {
            manifest,
            repeat,
            arch,
            strategy,
            json,
            common,
        } => {
            if repeat == 0 {
                return Err(Error::Domain("--repeat must be at least 1".into()));
            }
            let cfg = common.experiment()?;
            let data = load(&manifest, &common, &cfg)?;
            let seeds: Vec<u64> = (0..repeat).collect();
            let records = run_protocol(&data, &arch, &strategy, &seeds, &cfg, |a, s, h| {
                eprintln!("seed {s} {a}: best epoch {} of {}", h.best_epoch, h.epochs_run);
            })?;
            if let Some(p) = json {
                write_json(&records, &p, "run records")?;
            }
            print!("{}", format_table(&summarize(&records)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_status() as u8)
        }
    }
}
