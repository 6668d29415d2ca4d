use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use handprob::hand_prior::synthetic::paddle_hand;
use handprob::harness::{
    evaluate, generate_synthetic, gradient_audit, log_text, train, Checkpoint, Dataset, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "handprob",
    version,
    about = "Probabilistic hand mesh regression toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write a checkpoint plus `<out>.log.jsonl`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write predicted renders and masks here.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Finite-difference audit of every operation and objective.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the bundled synthetic hand template as JSON.
    MakeTemplate {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Generate {
            config,
            n,
            seed,
            out,
        } => {
            let cfg = RunConfig::load(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let template = cfg.load_template()?;
            let samples = generate_synthetic(&cfg, &template, n, seed)?;
            Dataset { template, samples }.save(&out)?;
            log::info!("wrote {n} samples to {}", out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let ds = Dataset::load(&data)
                .with_context(|| format!("reading dataset {}", data.display()))?;
            let result = train(&cfg, &ds)?;
            let ck = Checkpoint {
                config: cfg,
                template: ds.template,
                params: result.params,
            };
            ck.save(&out)?;
            let mut log_path = out.clone().into_os_string();
            log_path.push(".log.jsonl");
            std::fs::write(&log_path, log_text(&result.log))?;
            if let Some(last) = result.log.last() {
                println!(
                    "final loss {:.6e} after {} steps",
                    last.total,
                    result.log.len()
                );
            }
        }
        Command::Eval {
            ckpt,
            data,
            report,
            render,
        } => {
            let ck =
                Checkpoint::load(&ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let ds = Dataset::load(&data)
                .with_context(|| format!("reading dataset {}", data.display()))?;
            let r = evaluate(&ck, &ds, render.as_deref())?;
            std::fs::write(&report, r.to_json())?;
            println!("{}", r.to_json());
        }
        Command::Gradcheck { config } => {
            let cfg = RunConfig::load(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let r = gradient_audit(&cfg)?;
            for e in &r.entries {
                println!(
                    "{:<22} seed {}  max rel err {:.3e}  ({} entries)",
                    e.name, e.seed, e.max_rel_error, e.entries_checked
                );
            }
            println!(
                "worst {:.3e}: {}",
                r.worst(),
                if r.passed() { "PASS" } else { "FAIL" }
            );
            return Ok(r.passed());
        }
        Command::MakeTemplate { out } => {
            paddle_hand().save(&out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
