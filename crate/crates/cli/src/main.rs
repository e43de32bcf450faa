//! `ngrc` command-line driver.
//!
//! Every subcommand loads an experiment config (`--config`, defaults when
//! omitted), applies `--set key=value` overrides and `--seed`, validates, and
//! only then touches the output directory. Failures print one JSON line on
//! stderr and exit with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ngrc::dynamics::{error_rate, AttractorLabel};
use ngrc::harness::{
    generate_training_set, ground_truth, run_diagnostic_suite, run_instability_sweep_with,
    table1_dumps, train_suite_models, ExperimentConfig, Table1Dump,
};
use ngrc::model::{predict_basin_grid, TrainedModel};
use ngrc::par;

#[derive(Parser)]
#[command(name = "ngrc", version, about = "NGRC magnetic-pendulum experiments")]
struct Cli {
    /// Worker threads (defaults to NGRC_WORKERS, then all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set sweep.lambda=[0.01]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Ground-truth basins (CSV + PPM) and optionally training trajectories.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write this many training trajectories of trial 0.
        #[arg(long, default_value_t = 0)]
        trajectories: usize,
    },
    /// Train one model on the first `--n-traj` trajectories and save it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_traj: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Predicted basins of a saved model, scored against the ground truth.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Full (lambda, N_traj, sigma, trial) sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Diagnostic suite on one trial.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Also score basins (runs the ground truth).
        #[arg(long)]
        basins: bool,
    },
    /// Weight table of the reference and of models at each `sweep.n_traj`.
    Table1 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
}

fn parse_overrides(raw: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                Ok((k.trim().to_string(), v.trim().to_string()))
            }
            _ => bail!("override `{s}` is not KEY=VALUE"),
        })
        .collect()
}

fn load(
    common: &Common,
    extra: Vec<(String, String)>,
) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut ov = parse_overrides(&common.overrides)?;
    ov.extend(extra);
    if let Some(seed) = common.seed {
        ov.push(("seed".into(), seed.to_string()));
    }
    let cfg = ExperimentConfig::load(common.config.as_deref(), &ov)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

fn create(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    par::init_workers(cli.workers);
    match cli.command {
        Command::Simulate {
            common,
            trajectories,
        } => {
            let (cfg, out) = load(&common, vec![])?;
            create(&out)?;
            let truth = ground_truth(&cfg);
            truth.write_csv(&out.join("truth.csv"))?;
            truth.write_ppm(&out.join("truth.ppm"))?;
            if trajectories > 0 {
                let set = generate_training_set(&cfg, trajectories, 0)?;
                let mut text = String::from("trajectory,step,t,x,y,vx,vy\n");
                for (i, tr) in set.iter().enumerate() {
                    for (k, s) in tr.states.iter().enumerate() {
                        text.push_str(&format!(
                            "{i},{k},{},{},{},{},{}\n",
                            k as f64 * tr.dt,
                            s.x,
                            s.y,
                            s.vx,
                            s.vy
                        ));
                    }
                }
                std::fs::write(out.join("trajectories.csv"), text)
                    .context("writing trajectories")?;
            }
            let counts: Vec<usize> = (1..=3)
                .map(|i| truth.count(AttractorLabel::magnet(i - 1)))
                .collect();
            Ok(
                json!({"command": "simulate", "out": out, "points": truth.labels.len(), "magnet_counts": counts}),
            )
        }
        Command::Train {
            common,
            n_traj,
            lambda,
            sigma,
            trial,
        } => {
            let mut extra = vec![];
            if let Some(n) = n_traj {
                extra.push(("sweep.n_traj".into(), format!("[{n}]")));
            }
            if let Some(l) = lambda {
                extra.push(("sweep.lambda".into(), format!("[{l:e}]")));
            }
            if let Some(s) = sigma {
                extra.push(("sweep.sigma".into(), format!("[{s:e}]")));
            }
            let (cfg, out) = load(&common, extra)?;
            if trial >= cfg.trials {
                bail!("trial {trial} outside 0..{}", cfg.trials);
            }
            let model = train_suite_models(&cfg, trial)?
                .into_iter()
                .next()
                .context("no model trained")?;
            create(&out)?;
            let path = out.join("model.json");
            model.save(&path)?;
            Ok(
                json!({"command": "train", "model": path, "lambda": model.lambda, "n_traj": model.provenance.n_traj_used}),
            )
        }
        Command::Predict { common, model } => {
            let (cfg, out) = load(&common, vec![])?;
            let m = TrainedModel::load(&model)?;
            create(&out)?;
            let truth = ground_truth(&cfg);
            let pred = predict_basin_grid(
                &m,
                &cfg.pendulum,
                &cfg.grid,
                &cfg.rk(),
                &cfg.classify,
                cfg.execution,
            )?;
            pred.write_csv(&out.join("predicted.csv"))?;
            pred.write_ppm(&out.join("predicted.ppm"))?;
            let p = error_rate(&truth, &pred)?;
            Ok(
                json!({"command": "predict", "p": p, "diverged": pred.fraction(AttractorLabel::Diverged)}),
            )
        }
        Command::Sweep { common } => {
            let (cfg, out) = load(&common, vec![])?;
            let truth = ground_truth(&cfg);
            let result = run_instability_sweep_with(&cfg, &truth)?;
            result.write(&cfg, &out)?;
            let failed = result.records.iter().filter(|r| r.error.is_some()).count();
            Ok(
                json!({"command": "sweep", "out": out, "cells": result.records.len(), "failed_cells": failed}),
            )
        }
        Command::Diagnose {
            common,
            trial,
            basins,
        } => {
            let (cfg, out) = load(&common, vec![])?;
            let truth = basins.then(|| ground_truth(&cfg));
            let suite = run_diagnostic_suite(&cfg, trial, truth.as_ref())?;
            suite.write(&out)?;
            Ok(json!({"command": "diagnose", "out": out, "reports": suite.reports.len()}))
        }
        Command::Table1 { common, trial } => {
            let (cfg, out) = load(&common, vec![])?;
            let dumps = table1_dumps(&cfg, trial)?;
            let csv = Table1Dump::csv(&dumps);
            create(&out)?;
            std::fs::write(out.join("table1.csv"), &csv).context("writing table1.csv")?;
            Ok(json!({"command": "table1", "out": out, "tables": dumps.len()}))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let kind = err
                .downcast_ref::<ngrc::Error>()
                .map_or("cli", |e| e.kind());
            eprintln!("{}", json!({"error": kind, "message": format!("{err:#}")}));
            ExitCode::FAILURE
        }
    }
}
