use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfgad::config::ExperimentConfig;
use cfgad::experiment;
use cfgad::graph::Split;
use cfgad::pipeline::{self, Ablation, Model, SplitMetrics};
use cfgad::{Error, Result};

/// Graph anomaly detection with counterfactual neighbor translation.
///
/// Log level comes from RUST_LOG (default: info).
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Use this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its result and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Checkpoint path (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's dataset and split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every seed and sweep cell for the configured ablations.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Ablations to run instead of the config's list (repeatable).
        #[arg(long)]
        ablation: Vec<Ablation>,
    },
    /// Run every seed and sweep cell for all five ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic dataset of the config as loader-format files.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn split_metrics(model: &Model, g: &cfgad::graph::Graph) -> SplitMetrics {
    let eval = |s: Split| model.evaluate(g, &g.splits().mask(s)).ok();
    SplitMetrics {
        train: eval(Split::Train),
        val: eval(Split::Val),
        test: eval(Split::Test),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common, ablation, checkpoint } => {
            let cfg = load(&common)?;
            let seed = cfg.seeds[0];
            let cell = cfg.cells()[0];
            let ablation = ablation.unwrap_or(cfg.pipeline.ablation);
            let g = cfg.graph(seed)?;
            let (result, model) = pipeline::train(&g, &cfg.run_config(seed, ablation, cell))?;
            std::fs::create_dir_all(&cfg.out)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.out.join("model.ckpt"));
            model.save(&ck)?;
            let json = result.to_json()?;
            std::fs::write(cfg.out.join("run.json"), &json)?;
            println!("{json}");
            log::info!("checkpoint written to {}", ck.display());
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load(&common)?;
            let g = cfg.graph(cfg.seeds[0])?;
            let model = Model::load(&checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&split_metrics(&model, &g))?);
        }
        Command::Sweep { common, ablation } => {
            let cfg = load(&common)?;
            let ablations = if ablation.is_empty() { cfg.ablations.clone() } else { ablation };
            return sweep(&cfg, &ablations);
        }
        Command::Ablate { common } => {
            let cfg = load(&common)?;
            return sweep(&cfg, &Ablation::ALL);
        }
        Command::Synth { common } => {
            let cfg = load(&common)?;
            if cfg.dataset.synthetic.is_none() {
                return Err(Error::Config("synth needs a [dataset.synthetic] section".into()));
            }
            for &seed in &cfg.seeds {
                let dir = if cfg.seeds.len() == 1 { cfg.out.clone() } else { cfg.out.join(format!("seed{seed}")) };
                let g = cfg.dataset.load(seed)?;
                g.write_files(&dir)?;
                println!("{}: {} nodes, {} edges, {} anomalies", dir.display(), g.n(), g.edges().len(), g.anomaly_count());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(cfg: &ExperimentConfig, ablations: &[Ablation]) -> Result<ExitCode> {
    let outcome = experiment::run(cfg, ablations)?;
    println!(
        "{} runs completed, {} failed; results in {}",
        outcome.rows.len(),
        outcome.failures.len(),
        outcome.out.join(experiment::METRICS_FILE).display()
    );
    for f in &outcome.failures {
        eprintln!("failed: seed {} {} p={} alpha={} gamma={}: {}", f.seed, f.ablation, f.cell.p, f.cell.alpha, f.cell.gamma, f.error);
    }
    Ok(ExitCode::from(outcome.exit_code() as u8))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
