//! `ntl` command-line entry point.
//!
//! Exit codes: 0 on success, 2 on a validation or usage error, 1 when a
//! pipeline stage fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ntl::attacks::{run_attack, trigger_accuracy, AttackConfig, AttackMethod};
use ntl::augmentation::{augment_with_gan, train_gan, AugConfig};
use ntl::domains::{apply_patch, save_dataset, DatasetManifest};
use ntl::models::ModelBundle;
use ntl::probe::{probe_mi, shuffled_control};
use ntl::protection::verify_ownership;
use ntl::runner::{report, run_experiment, ExperimentConfig};
use ntl::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ntl", version, about = "Non-transferable learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override one config key, e.g. `--set ntl.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Same as `--set output_dir=<DIR>`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Same as `--set seeds=[<SEED>]`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?.with_env_overrides();
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(vec![format!("`--set {pair}` is not KEY=VALUE")]))?;
            config = config.set_key(key.trim(), value.trim())?;
        }
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        config.validate()?;
        Ok(config)
    }

    fn first_seed(config: &ExperimentConfig) -> u64 {
        config.seeds[0]
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment over every seed and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the GAN on the source split and write the generated auxiliary domain.
    Augment {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint with and without the configured patch.
    Verify {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Defaults to `verify_threshold` from the config.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run one watermark-removal attack on a checkpoint.
    Attack {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// ftal, rtal, ewc, au, overwrite or prune.
        #[arg(long)]
        method: AttackMethod,
        /// Where to write the attacked checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe-based mutual information between source and target representations.
    ProbeMi {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Compare against the patched source instead of the target domain.
        #[arg(long)]
        patched: bool,
    },
    /// Render tables for finished run directories.
    Report {
        run_dirs: Vec<PathBuf>,
        /// Print comma-separated values instead of aligned text.
        #[arg(long)]
        csv: bool,
    },
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => {
            let config = config.load()?;
            let run = run_experiment(&config)?;
            print!("{}", std::fs::read_to_string(run.dir.join("report.txt"))?);
            println!("wrote {}", run.dir.display());
        }
        Command::Augment { config, out } => {
            let config = config.load()?;
            let seed = ConfigArgs::first_seed(&config);
            let mut aug = config.aug.clone().unwrap_or_else(AugConfig::default);
            aug.seed = seed;
            aug.validate()?;
            let domains = config.dataset.load()?;
            let gan = train_gan(&domains.source_train, &aug)?;
            let (generated, cells) = augment_with_gan(&gan, &domains.source_train, &aug)?;
            save_dataset(&generated, &out, Some(DatasetManifest::describe(&generated)))?;
            print_json(&json!({ "out": out, "samples": generated.len(), "cells": cells }))?;
        }
        Command::Verify {
            config,
            model,
            threshold,
        } => {
            let config = config.load()?;
            let patch = config
                .patch
                .ok_or_else(|| Error::InvalidConfig(vec!["verify requires [patch]".into()]))?;
            let model = ModelBundle::load(&model)?;
            let domains = config.dataset.load()?;
            let report = verify_ownership(
                &model,
                &domains.source_test,
                &patch,
                threshold.unwrap_or(config.verify_threshold),
            )?;
            print_json(&serde_json::to_value(report)?)?;
        }
        Command::Attack {
            config,
            model,
            method,
            out,
        } => {
            let config = config.load()?;
            let seed = ConfigArgs::first_seed(&config);
            let mut acfg = config
                .attacks
                .iter()
                .find(|a| a.method == method)
                .cloned()
                .unwrap_or_else(|| AttackConfig::with_method(method));
            acfg.seed = seed;
            let model = ModelBundle::load(&model)?;
            let domains = config.dataset.load()?;
            let attacked = run_attack(&model, &domains.source_train, domains.target_train.as_ref(), &acfg)?;
            attacked.save(&out)?;
            let score = |m: &ModelBundle| -> Result<serde_json::Value> {
                Ok(match &config.patch {
                    Some(p) => serde_json::to_value(verify_ownership(m, &domains.source_test, p, config.verify_threshold)?)?,
                    None => json!({ "acc_without_patch": m.accuracy(&domains.source_test)? }),
                })
            };
            let trigger = (method == AttackMethod::Overwrite)
                .then(|| trigger_accuracy(&attacked, &domains.source_test, &acfg))
                .transpose()?;
            print_json(&json!({
                "method": method,
                "out": out,
                "before": score(&model)?,
                "after": score(&attacked)?,
                "trigger_accuracy": trigger,
            }))?;
        }
        Command::ProbeMi {
            config,
            model,
            patched,
        } => {
            let config = config.load()?;
            let seed = ConfigArgs::first_seed(&config);
            let probe = config.probe.unwrap_or_default().config;
            let model = ModelBundle::load(&model)?;
            let domains = config.dataset.load()?;
            let other = if patched {
                let patch = config
                    .patch
                    .ok_or_else(|| Error::InvalidConfig(vec!["--patched requires [patch]".into()]))?;
                apply_patch(&domains.source_test, &patch)
            } else {
                domains
                    .target_test
                    .clone()
                    .ok_or_else(|| Error::InvalidConfig(vec!["probe-mi needs a target domain or --patched".into()]))?
            };
            let z0 = model.embed_and_predict(&domains.source_test)?.0;
            let z1 = model.embed_and_predict(&other)?.0;
            let estimate = probe_mi(&z0, &z1, seed, &probe)?;
            let control = shuffled_control(&z0, &z1, seed, &probe)?;
            print_json(&json!({ "mi": estimate, "shuffled_control": control }))?;
        }
        Command::Report { run_dirs, csv } => {
            let rendered = report(&run_dirs)?;
            print!("{}", if csv { rendered.csv } else { rendered.text });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
