use std::path::PathBuf;
use std::process::ExitCode;

use chestssl::synthetic::SyntheticConfig;
use chestssl_cli::{
    cmd_evaluate, cmd_explain, cmd_extract, cmd_pretrain, cmd_report, cmd_synth, load_config, CliResult,
};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "chestssl",
    version,
    about = "Contrastive pretraining and linear-probe evaluation for chest X-rays"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining on the pretext manifest.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write feature matrices of every downstream dataset.
    Extract {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Cross-validated linear-probe evaluation.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pretrain on each configured pretext fraction and evaluate every resulting model.
        #[arg(long)]
        fractions: bool,
    },
    /// Grad-CAM heatmaps and t-SNE plots.
    Explain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images to explain (defaults to `explain.images` in the config).
        images: Vec<PathBuf>,
        /// Also plot a t-SNE embedding of the first downstream dataset.
        #[arg(long)]
        tsne: bool,
    },
    /// Merge report JSON files into one CSV and comparison table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Generate a synthetic labeled dataset for trying the pipeline.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain { config, resume } => {
            let cfg = load_config(&config)?;
            let out = cmd_pretrain(&cfg, resume.as_deref())?;
            println!(
                "wrote {} checkpoints and {}",
                out.checkpoints.len(),
                out.loss_csv.display()
            );
        }
        Command::Extract { config, checkpoint } => {
            let cfg = load_config(&config)?;
            for p in cmd_extract(&cfg, &checkpoint)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            fractions,
        } => {
            let cfg = load_config(&config)?;
            let reports = cmd_evaluate(&cfg, checkpoint.as_deref(), fractions)?;
            print!("{}", chestssl::evaluate::comparison_table(&reports));
        }
        Command::Explain {
            config,
            checkpoint,
            images,
            tsne,
        } => {
            let cfg = load_config(&config)?;
            let out = cmd_explain(&cfg, &checkpoint, &images, tsne)?;
            for p in &out.overlays {
                println!("{}", p.display());
            }
            if let Some((png, csv)) = &out.embedding {
                println!("{}\n{}", png.display(), csv.display());
            }
        }
        Command::Report { inputs, out } => {
            print!("{}", cmd_report(&inputs, &out)?);
        }
        Command::Synth {
            out,
            name,
            count,
            size,
            seed,
        } => {
            let cfg = SyntheticConfig {
                count,
                size,
                seed,
                ..Default::default()
            };
            let m = cmd_synth(&out, &name, &cfg)?;
            println!(
                "wrote {} images and {}",
                m.len(),
                out.join(format!("{name}.csv")).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
