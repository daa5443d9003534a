use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shiplab::experiment::{
    cmd_ablate, cmd_analyze, cmd_gradcheck, cmd_pretrain, cmd_tune, ExperimentConfig, CHECKPOINT_FILE,
};
use shiplab::Error;

#[derive(Parser)]
#[command(name = "shiplab", version, about = "Prompt-tuning lab for a toy vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone on the upstream task and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Inter-layer affinity, threshold sweeps and the inferred partition.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Backbone checkpoint; defaults to backbone.bin in the output dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Analyze an imported activation dump instead of the backbone.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Tune prompts and head on the transfer task with a frozen backbone.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Partition JSON written by `analyze`; inferred when omitted.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Component and hyperparameter ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale softmax backward by this factor (negative control).
        #[arg(long, hide = true)]
        corrupt_softmax_backward: Option<f64>,
    },
}

struct Resolved {
    cfg: ExperimentConfig,
    out: PathBuf,
    seed: u64,
}

fn resolve(common: &Common) -> Result<Resolved, Error> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok(Resolved { cfg, out, seed })
}

fn checkpoint_path(given: &Option<PathBuf>, out: &Path) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Pretrain { common } => {
            let r = resolve(&common)?;
            let p = cmd_pretrain(&r.cfg, &r.out, r.seed)?;
            if let Some(e) = p.log.last() {
                println!("pretrain: test_acc {:.4} test_loss {:.4}", e.test_acc, e.test_loss);
            }
        }
        Command::Analyze {
            common,
            checkpoint,
            dump,
        } => {
            let r = resolve(&common)?;
            let ckpt = checkpoint_path(&checkpoint, &r.out);
            let a = cmd_analyze(&r.cfg, Some(&ckpt), dump.as_deref(), &r.out, r.seed)?;
            println!("partition sizes {:?}", a.partition.sizes());
        }
        Command::Tune {
            common,
            checkpoint,
            partition,
        } => {
            let r = resolve(&common)?;
            let ckpt = checkpoint_path(&checkpoint, &r.out);
            let t = cmd_tune(&r.cfg, &ckpt, partition.as_deref(), &r.out, r.seed)?;
            println!(
                "{}: test_acc {:.4} test_loss {:.4} trainable {}",
                t.plan.mode.name(),
                t.final_acc(),
                t.final_test_loss(),
                t.log.trainable_params
            );
        }
        Command::Ablate { common, checkpoint } => {
            let r = resolve(&common)?;
            let ckpt = checkpoint_path(&checkpoint, &r.out);
            let cells = cmd_ablate(&r.cfg, &ckpt, &r.out, r.seed)?;
            for c in &cells {
                match c.test_acc {
                    Some(acc) => println!("{:<11} {:<16} {:.4}", c.section, c.setting, acc),
                    None => println!("{:<11} {:<16} {}", c.section, c.setting, c.status),
                }
            }
        }
        Command::Gradcheck {
            common,
            corrupt_softmax_backward,
        } => {
            let r = resolve(&common)?;
            let report = cmd_gradcheck(&r.out, r.seed, corrupt_softmax_backward)?;
            print!("{}", report.to_table());
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
