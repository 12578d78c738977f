use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use focdec::pipeline::{self, Ablation, RunConfig, RunDir};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Phantom,
    Preprocess,
    Atlas,
    Train,
    Eval,
    Explain,
    All,
}

/// Focused Decoder pipeline: synthetic data, atlas, training, evaluation
/// and attention export.
#[derive(Debug, Parser)]
#[command(name = "focdec", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration; defaults to the run directory's snapshot, if any.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for model initialization and data order.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "runs/focdec")]
    out: PathBuf,
    /// no-anchors, one-query, no-restriction, level-P3, level-P4 or level-P5.
    #[arg(long, value_parser = parse_ablation)]
    ablation: Vec<Ablation>,
    /// Score this detections file instead of running the checkpoint (eval only).
    #[arg(long)]
    detections: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

enum Failure {
    Schema(String),
    Module(&'static str, String),
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let snapshot = RunDir::new(&cli.out).config();
    let source = cli.config.clone().or_else(|| snapshot.exists().then_some(snapshot));
    let mut config = match &source {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(|e| Failure::Module("config", format!("{e:#}")))?;
            RunConfig::from_json(&text).map_err(|e| Failure::Schema(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    for &a in &cli.ablation {
        config.apply(a);
    }
    config.validate().map_err(|e| Failure::Schema(e.to_string()))?;
    Ok(config)
}

fn module_err(e: focdec::Error) -> Failure {
    Failure::Module(e.module(), e.to_string())
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let config = load_config(cli)?;
    let run = RunDir::new(&cli.out);
    pipeline::write_snapshot(&run, &config).map_err(module_err)?;
    match cli.command {
        Command::Phantom => {
            let m = pipeline::run_phantom(&run, &config).map_err(module_err)?;
            println!("generated {} samples", m.entries.len());
            report(&run.raw());
        }
        Command::Preprocess => {
            let m = pipeline::run_preprocess(&run, &config).map_err(module_err)?;
            println!("kept {} samples", m.entries.len());
            report(&run.preprocessed());
        }
        Command::Atlas => {
            let a = pipeline::run_atlas(&run, &config).map_err(module_err)?;
            println!("atlas with {} classes", a.num_classes());
            report(&run.atlas());
        }
        Command::Train => {
            let s = pipeline::run_train(&run, &config).map_err(module_err)?;
            println!("best validation mAP_coco {:.4} at epoch {}", s.best_val_map, s.best_epoch);
            report(&s.checkpoint);
        }
        Command::Eval => {
            let o = pipeline::run_eval(&run, &config, cli.detections.as_deref()).map_err(module_err)?;
            println!(
                "test mAP_coco {:.4}; selected box beats best anchor on {}/{} pairs",
                o.metrics.map_coco, o.baseline.wins, o.baseline.pairs
            );
            report(&run.metrics());
        }
        Command::Explain => {
            let dir = pipeline::run_explain(&run, &config).map_err(module_err)?;
            report(&dir);
        }
        Command::All => {
            let o = pipeline::run_all(&run, &config).map_err(module_err)?;
            println!("test mAP_coco {:.4}", o.metrics.map_coco);
            report(&run.root);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("FOCDEC_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error[config]: FOCDEC_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(2);
            }
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Schema(msg)) => {
            eprintln!("error[config]: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Module(module, e)) => {
            eprintln!("error[{module}]: {e}");
            ExitCode::from(1)
        }
    }
}
