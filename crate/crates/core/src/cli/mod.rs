//! Command line front end, configuration and experiment orchestration.

pub mod ablate;
pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use ablate::{cmd_ablate, run_ablation, AblationRow, AblationTable, RowSpec, TrendChecks, ROWS};
pub use config::RunConfig;
pub use pipeline::{
    cmd_eval, cmd_gen_data, cmd_generate, cmd_pretrain_bev, cmd_train, BevReport, EvalReport, GenerationFile, TrainLog,
};

use crate::error::{Error, Result};
use crate::simworld::Split;

#[derive(Parser, Debug)]
#[command(name = "bevi", about = "BEV-prompted navigation instruction generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// `key = value` config file; desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

impl Common {
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train / seen / unseen episodes into a directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Detection pretraining of the BEV encoder.
    PretrainBev {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Warm-up, then prompt tuning of the instruction generator.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bev: PathBuf,
    },
    /// Generate instructions with refinement traces.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "unseen")]
        split: String,
        /// Refinement steps; the config value when omitted.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Text metrics and follower success of a generation file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generations: PathBuf,
        #[arg(long, default_value = "unseen")]
        split: String,
    },
    /// Component ablation and refinement-steps study.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained BEV checkpoint; pretrains one when omitted.
        #[arg(long)]
        bev: Option<PathBuf>,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn split(s: &str) -> Result<Split> {
    s.parse()
}

/// Runs one command and returns the text printed on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.config()?;
            let m = cmd_gen_data(&cfg, &common.out)?;
            Ok(serde_json::to_string_pretty(&m)?)
        }
        Command::PretrainBev { common, data } => {
            let cfg = common.config()?;
            let r = cmd_pretrain_bev(&cfg, &data, &common.out)?;
            Ok(format!("held-in mAP@0.5 {:.4}\nunseen mAP@0.5 {:.4}", r.held_in_map, r.unseen_map))
        }
        Command::Train { common, data, bev } => {
            let cfg = common.config()?;
            let log = cmd_train(&cfg, &data, &bev, &common.out)?;
            let last = log.entries.last().map(|e| e.loss).unwrap_or(f64::NAN);
            Ok(format!(
                "tuned fraction {:.4} ({} of {} scalars)\nfinal window loss {last:.4}",
                log.tuned_fraction, log.tuned_scalars, log.total_scalars
            ))
        }
        Command::Generate {
            common,
            data,
            checkpoint,
            split: s,
            steps,
        } => {
            let cfg = common.config()?;
            let steps = steps.unwrap_or(cfg.refine_steps);
            let f = cmd_generate(&cfg, &checkpoint, &data, split(&s)?, steps, &common.out)?;
            Ok(format!("{} episodes written", f.episodes.len()))
        }
        Command::Eval {
            common,
            data,
            generations,
            split: s,
        } => {
            let r = cmd_eval(&generations, &data, split(&s)?, Some(&common.out))?;
            Ok(r.to_record())
        }
        Command::Ablate { common, data, bev } => {
            let cfg = common.config()?;
            let (table, _) = cmd_ablate(&cfg, &data, bev.as_deref())?;
            std::fs::write(&common.out, serde_json::to_string_pretty(&table)?)?;
            Ok(table.render())
        }
        Command::Gradcheck { common, seeds } => {
            let results = crate::gradsuite::run(seeds)?;
            let mut text = String::new();
            for r in &results {
                text += &format!(
                    "{:<30} max rel err {:.3e} over {} entries: {}\n",
                    r.name,
                    r.max_rel_err,
                    r.checked,
                    if r.passed() { "pass" } else { "FAIL" }
                );
            }
            std::fs::write(&common.out, &text)?;
            if results.iter().any(|r| !r.passed()) {
                return Err(Error::Numeric(format!("gradient check failed\n{text}")));
            }
            Ok(text)
        }
    }
}
