use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use wglin::config::RunConfig;
use wglin::model::Variant;
use wglin::run::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_train, Control, EvalData, RunError, ABLATION_FILE, RESOLVED_CONFIG_FILE,
};

/// Multi-view image grading with wavelet-coupled CNN and transformer branches.
#[derive(Parser, Debug)]
#[command(name = "wglin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train and test splits as an image directory.
    Generate {
        /// Run config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes the checkpoint, train log and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print the metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the resolved config saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `synthetic:test`, `synthetic:train` or a dataset directory.
        #[arg(long, default_value = "synthetic:test")]
        data: String,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate several variants on the same data and seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant names; all seven by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, RunError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(|source| RunError::Io { context: format!("writing {}", path.display()), source })
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (train, test) = cmd_generate(&cfg, &out)?;
            info!("wrote {train} train and {test} test samples to {}", out.display());
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let summary = cmd_train(&cfg, &out, |_, _| Ok(Control::Continue))?;
            if let Some(last) = summary.records.last() {
                info!("epoch {}: loss {:.6}, train_acc {:.4}", last.epoch, last.loss, last.train_acc);
            }
            info!("checkpoint written to {}", summary.checkpoint.display());
        }
        Command::Eval { checkpoint, config, data, out } => {
            let config = config
                .unwrap_or_else(|| checkpoint.parent().unwrap_or_else(|| Path::new(".")).join(RESOLVED_CONFIG_FILE));
            let cfg = RunConfig::load(&config)?;
            let data: EvalData = data.parse()?;
            let (report, _) = cmd_eval(&cfg, &checkpoint, &data)?;
            let csv = report.to_csv();
            match out {
                Some(path) => write_file(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Ablate { config, variants, out } => {
            let cfg = RunConfig::load(&config)?;
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.trim().parse()).collect::<Result<_, _>>()?
            };
            cmd_ablate(&cfg, &variants, &out)?;
            info!("ablation table written to {}", out.join(ABLATION_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
