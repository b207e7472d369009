use clap::{Parser, Subcommand};
use milsi::cli::{self, ExperimentSpec};
use milsi::synthdata::GenConfig;
use milsi::Result;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "milsi", version, about = "MIL with shuffled patch instances on a small ViT")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dotted-path override, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(Common),
    /// Train one experiment spec and evaluate it on the test split.
    Train(Common),
    /// Tabulate test metrics of finished runs.
    Compare {
        /// Run directories containing metrics.json.
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write attention-rollout heatmaps for dataset images.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated image ids.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
        /// Experiment spec whose eval pipeline is applied before rollout.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(c) => {
            let mut cfg: GenConfig = cli::load_config(c.config.as_deref(), &c.set)?;
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            let m = cli::cmd_generate(&cfg, &c.out)?;
            println!("wrote {} files to {} (seed {})", m.files.len(), c.out.display(), cfg.seed);
        }
        Command::Train(c) => {
            let mut spec: ExperimentSpec = cli::load_config(c.config.as_deref(), &c.set)?;
            if let Some(s) = c.seed {
                spec.train.seed = s;
            }
            let r = cli::cmd_train(&spec, &c.out)?;
            println!(
                "{} seed {}: best epoch {} val acc {:.4}; test acc {:.4} f1 {:.4}",
                r.variant.name(),
                r.seed,
                r.best_epoch,
                r.best_val_accuracy,
                r.test.accuracy,
                r.test.f1
            );
        }
        Command::Compare { runs, out } => print!("{}", cli::cmd_compare(&runs, &out)?),
        Command::ExportAttention {
            checkpoint,
            data,
            ids,
            config,
            out,
        } => {
            let aug = match config {
                Some(p) => Some(cli::load_config::<ExperimentSpec>(Some(&p), &[])?.aug),
                None => None,
            };
            let r = cli::cmd_export_attention(&checkpoint, &data, &ids, aug.as_ref(), &out)?;
            println!(
                "exported {} heatmaps ({} skipped); mean on/off-mask heat ratio {:.3}",
                r.images.len(),
                r.skipped.len(),
                r.mean_ratio
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
