//! Command-line interface: training runs, threshold sweeps, ablations,
//! checkpoint evaluation, and plot emission.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xmarl_core::harness::{
    emit_plots, evaluate_checkpoint, run_ablations, run_experiment, run_tau_sweep,
    ExperimentConfig,
};
use xmarl_core::Error;

#[derive(Parser)]
#[command(
    name = "xmarl",
    about = "Explainable multi-agent RL: PPO with saliency mask networks and inter-agent collaboration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents under a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force fully serial execution (execution is always serial in this
        /// implementation; recorded in the config snapshot).
        #[arg(long)]
        deterministic: bool,
        /// Ablation: skip the collaboration phase.
        #[arg(long)]
        disable_comm: bool,
        /// Ablation: no epsilon-greedy exploration.
        #[arg(long)]
        disable_adaptive_eps: bool,
    },
    /// Run one experiment per tau value with matched seeds.
    SweepTau {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated tau values, e.g. 0.3,0.5,0.7.
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Run full / no-comm / no-adaptive-eps variants with matched seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Re-evaluate a finished run from its checkpoints.
    Eval {
        /// Run directory containing config.toml and checkpoints/.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Emit metric plots for a finished run.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> ExitCode {
    if err.is_numeric() {
        ExitCode::from(3)
    } else {
        // Configuration problems (including unreadable/invalid config
        // files) exit with 2; anything else is also a setup failure here.
        ExitCode::from(2)
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            seed,
            deterministic,
            disable_comm,
            disable_adaptive_eps,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.deterministic |= deterministic;
            cfg.disable_comm |= disable_comm;
            cfg.disable_adaptive_epsilon |= disable_adaptive_eps;
            let artifacts = run_experiment(&cfg)?;
            println!("run id:      {}", artifacts.run_id);
            println!("run dir:     {}", artifacts.run_dir.display());
            println!("iterations:  {}", artifacts.completed_iterations);
            println!("converged:   {}", artifacts.converged_early);
            if let Some(last) = artifacts.metrics.last() {
                println!("final avg reward: {:.4}", last.final_avg_reward);
                println!("kl divergence:    {:.4}", last.kl_divergence);
                println!("fidelity:         {:.4}", last.fidelity);
                println!("reward drop:      {:.4}", last.reward_drop_fraction);
            }
            Ok(())
        }
        Command::SweepTau { config, taus, seeds } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run_tau_sweep(&cfg, &taus, seeds)?;
            print!("{}", summary.render_table());
            println!("written: {}", summary.out_dir.display());
            Ok(())
        }
        Command::Ablate { config, seeds } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run_ablations(&cfg, seeds)?;
            print!("{}", summary.render_table());
            println!("written: {}", summary.out_dir.display());
            Ok(())
        }
        Command::Eval { checkpoint } => {
            let record = evaluate_checkpoint(&checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&record)?);
            Ok(())
        }
        Command::Plot { run } => {
            let files = emit_plots(&run)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
