use clap::{Parser, Subcommand};
use lego_statetrack::cli::{
    cmd_attn, cmd_check_corpus, cmd_eval, cmd_gen, cmd_show_manifest, cmd_train, cmd_validate,
    resolve_out, CliError,
};
use lego_statetrack::config::{preset, ExperimentConfig, PRESET_NAMES};
use std::path::PathBuf;

/// LEGO state-tracking tasks on a one-layer transformer: corpus generation,
/// curriculum and self-training runs, and length-generalization diagnostics.
#[derive(Parser)]
#[command(name = "lego", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigSource {
    /// Path to an experiment config JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset name.
    #[arg(long, value_parser = PRESET_NAMES)]
    preset: Option<String>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, Some(name)) => preset(name)?,
            (Some(path), Some(_)) => {
                eprintln!("note: --config {} overrides --preset", path.display());
                ExperimentConfig::load(path)?
            }
            (None, None) => {
                return Err(CliError::Invalid(
                    "pass --config <file> or --preset <name>".into(),
                ))
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an oracle-labeled JSONL corpus.
    Gen {
        #[command(flatten)]
        source: ConfigSource,
        /// Chain length L.
        #[arg(long)]
        length: usize,
        /// Number of sentences.
        #[arg(long)]
        count: usize,
        /// Output file (falls back to $OUT_DIR/corpus.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-derive every sentence of a corpus against the group oracle.
    CheckCorpus {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        path: PathBuf,
    },
    /// Run the configured training pipeline into a run directory.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Run directory (falls back to $OUT_DIR/run).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint across lengths into an accuracy CSV.
    Eval {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation lengths (defaults to the config's list).
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long)]
        n_eval: Option<usize>,
        /// Output CSV (falls back to $OUT_DIR/eval.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export attention heatmaps, concentration diagnostics, and the
    /// predicate-permutation ablation for a checkpoint.
    Attn {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        length: usize,
        /// Output directory (falls back to $OUT_DIR/attn).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Validate a config and print its run id.
    ValidateConfig {
        #[command(flatten)]
        source: ConfigSource,
    },
    /// Print a run directory's manifest.
    ShowManifest {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            source,
            length,
            count,
            out,
        } => {
            let cfg = source.load()?;
            let out = resolve_out(out, "corpus.jsonl")?;
            cmd_gen(&cfg, length, count, &out)?;
            println!(
                "wrote {count} sentences of length {length} to {}",
                out.display()
            );
        }
        Command::CheckCorpus { source, path } => {
            let cfg = source.load()?;
            let n = cmd_check_corpus(&cfg, &path)?;
            println!("ok: {n} sentences pass oracle re-derivation");
        }
        Command::Train { source, out_dir } => {
            let cfg = source.load()?;
            let out_dir = resolve_out(out_dir, "run")?;
            let report = cmd_train(&cfg, &out_dir)?;
            println!(
                "run {} finished: {} stage(s), {} checkpoint(s) in {}",
                report.run_id,
                report.stages.len(),
                report.checkpoints.len(),
                report.out_dir.display()
            );
            for stage in &report.stages {
                println!(
                    "  {}: {} steps{}",
                    stage.name,
                    stage.steps_run,
                    if stage.converged { "" } else { " (not converged)" }
                );
            }
        }
        Command::Eval {
            source,
            checkpoint,
            lengths,
            n_eval,
            out,
        } => {
            let cfg = source.load()?;
            let lengths = if lengths.is_empty() {
                cfg.eval.lengths.clone()
            } else {
                lengths
            };
            let out = resolve_out(out, "eval.csv")?;
            let rows = cmd_eval(&cfg, &checkpoint, &lengths, n_eval, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Attn {
            source,
            checkpoint,
            length,
            out_dir,
        } => {
            let cfg = source.load()?;
            let out_dir = resolve_out(out_dir, "attn")?;
            cmd_attn(&cfg, &checkpoint, length, &out_dir)?;
            println!("wrote attention reports to {}", out_dir.display());
        }
        Command::ValidateConfig { source } => {
            let cfg = source.load()?;
            println!("{}", cmd_validate(&cfg)?);
        }
        Command::ShowManifest { run_dir } => {
            let manifest = cmd_show_manifest(&run_dir)?;
            println!("{}", serde_json::to_string_pretty(&manifest).unwrap());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
