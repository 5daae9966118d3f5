use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dwinkit_cli::config::{ConfigError, RunConfig};
use dwinkit_cli::eval::{evaluate, load_checkpoint, METRICS_FILE};
use dwinkit_cli::train::write_text;
use dwinkit_cli::{dataset, gradcheck, init_threads, inspect, train};
use dwinkit_core::autodiff::OpKind;

#[derive(Parser)]
#[command(name = "dwinkit", version, about = "Directional-window volumetric segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set training.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory; overrides `data.dir` for `gen` and `training.out_dir` otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val dataset and its manifest.
    Gen(Common),
    /// Train a model and write checkpoints and the training log.
    Train(Common),
    /// Evaluate a checkpoint on a dataset split and write metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the newest one in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the backward rule of one primitive (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print the stage table, token counts, parameter count and attention FLOPs.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        json: bool,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, ConfigError> {
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&c.sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn newest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_")?.strip_suffix(".dwck")?.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| anyhow::anyhow!("no checkpoint in {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Gen(c) => {
            let cfg = load_config(&c)?;
            let dir = c.out.unwrap_or_else(|| cfg.data.dir.clone());
            let m = dataset::generate(&cfg, &dir)?;
            println!(
                "wrote {} train and {} val volumes ({:?}, K={}) to {}",
                m.train.len(),
                m.val.len(),
                m.shape,
                m.num_classes,
                dir.display()
            );
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let out = c.out.unwrap_or_else(|| cfg.training.out_dir.clone());
            let data = dataset::load(&cfg)?;
            let total = cfg.training.steps;
            let outcome = train::train_on(&cfg, &data.train, &data.val, &out, |row| {
                if let Some(v) = row.val_dsc {
                    eprintln!(
                        "step {}/{total} loss {:.4} (dice {:.4}, ce {:.4}) lr {:.5} val_dsc {v:.4}",
                        row.step, row.loss, row.dice_loss, row.ce_loss, row.lr
                    );
                }
            })?;
            println!(
                "trained {} steps in {:.1}s; checkpoint {}",
                total,
                outcome.seconds,
                outcome.last_checkpoint().display()
            );
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = load_config(&common)?;
            let out = common.out.unwrap_or_else(|| cfg.training.out_dir.clone());
            let path = match checkpoint {
                Some(p) => p,
                None => newest_checkpoint(&out)?,
            };
            let (ckpt, net) = load_checkpoint(&path)?;
            let stored = RunConfig {
                model: ckpt.meta.config.clone(),
                ..cfg.clone()
            };
            let data = dataset::load_dir(&stored, &cfg.data.dir)?;
            let samples = match split {
                Split::Train => &data.train,
                Split::Val => &data.val,
            };
            let report = evaluate(&net, &ckpt.params, samples, ckpt.meta.config.num_classes)?;
            let json = report.to_json()?;
            std::fs::create_dir_all(&out)?;
            write_text(&out.join(METRICS_FILE), &json)?;
            println!("{json}");
        }
        Command::Gradcheck { common, inject_fault } => {
            let cfg = load_config(&common)?;
            let fault = inject_fault
                .map(|s| {
                    serde_json::from_value::<OpKind>(serde_json::Value::String(s.clone()))
                        .map_err(|_| ConfigError(format!("unknown primitive {s:?} for --inject-fault")))
                })
                .transpose()?;
            let report = gradcheck::run(&cfg.model, fault)?;
            print!("{}", gradcheck::render(&report));
            if let Some(out) = common.out {
                std::fs::create_dir_all(&out)?;
                write_text(&out.join("gradcheck.json"), &serde_json::to_string_pretty(&report)?)?;
            }
            if !report.passed() {
                anyhow::bail!("gradient check failed");
            }
        }
        Command::Inspect { common, json } => {
            let cfg = load_config(&common)?;
            let report = inspect::inspect(&cfg.model)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigError>() {
                eprintln!("config-error: {}", c.0.replace('\n', " "));
                return ExitCode::from(2);
            }
            if let Some(core) = e.downcast_ref::<dwinkit_core::Error>() {
                if matches!(core, dwinkit_core::Error::Config(_) | dwinkit_core::Error::UnimplementedBaseline(_)) {
                    eprintln!("config-error: {}", core.to_string().replace('\n', " "));
                    return ExitCode::from(2);
                }
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
