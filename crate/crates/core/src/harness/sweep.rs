//! Threshold sweeps and component ablations with matched seeds.

use std::fs;
use std::path::PathBuf;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

use super::plot::bar_chart;
use super::{run_experiment, ExperimentConfig};

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregated final metrics over the seeds of one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct MetricAggregate {
    pub reward_mean: f64,
    pub reward_std: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub fidelity_mean: f64,
    pub fidelity_std: f64,
    pub drop_mean: f64,
    pub drop_std: f64,
    pub n_seeds: usize,
}

impl MetricAggregate {
    fn from_records(finals: &[MetricsRecord]) -> Self {
        let pick = |f: fn(&MetricsRecord) -> f64| -> Vec<f64> { finals.iter().map(f).collect() };
        let (reward_mean, reward_std) = mean_std(&pick(|r| r.final_avg_reward));
        let (kl_mean, kl_std) = mean_std(&pick(|r| r.kl_divergence));
        let (fidelity_mean, fidelity_std) = mean_std(&pick(|r| r.fidelity));
        let (drop_mean, drop_std) = mean_std(&pick(|r| r.reward_drop_fraction));
        MetricAggregate {
            reward_mean,
            reward_std,
            kl_mean,
            kl_std,
            fidelity_mean,
            fidelity_std,
            drop_mean,
            drop_std,
            n_seeds: finals.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TauRow {
    pub tau: f64,
    #[serde(flatten)]
    pub agg: MetricAggregate,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub rows: Vec<TauRow>,
    pub out_dir: PathBuf,
    pub csv_path: PathBuf,
    pub table_path: PathBuf,
    pub svg_path: PathBuf,
}

impl SweepSummary {
    pub fn render_table(&self) -> String {
        let mut out = String::from(
            "tau     reward              kl                fidelity          reward_drop\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<7.2} {:>7.3} +/- {:<7.3} {:>6.4} +/- {:<6.4} {:>6.3} +/- {:<6.3} {:>7.4} +/- {:<7.4}\n",
                r.tau,
                r.agg.reward_mean,
                r.agg.reward_std,
                r.agg.kl_mean,
                r.agg.kl_std,
                r.agg.fidelity_mean,
                r.agg.fidelity_std,
                r.agg.drop_mean,
                r.agg.drop_std,
            ));
        }
        out
    }
}

/// Runs one experiment per (tau, seed) pair and aggregates the final
/// evaluation records into a per-tau summary table plus a drop-magnitude
/// bar chart. Seeds are `base.seed + 0..n_seeds`, matched across taus.
pub fn run_tau_sweep(
    base: &ExperimentConfig,
    taus: &[f64],
    n_seeds: usize,
) -> Result<SweepSummary> {
    if taus.is_empty() {
        return Err(Error::Config("tau list must not be empty".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    for (i, a) in taus.iter().enumerate() {
        if !(*a > 0.0 && *a < 1.0) {
            return Err(Error::Config(format!("tau {a} out of (0, 1)")));
        }
        if taus[..i].contains(a) {
            return Err(Error::Config(format!("duplicate tau value {a}")));
        }
    }
    base.validate()?;

    let out_dir = base.output_root().join(format!("sweep-tau-{}", base.run_id()));
    fs::create_dir_all(&out_dir)?;

    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut finals = Vec::with_capacity(n_seeds);
        for s in 0..n_seeds {
            let mut cfg = base.clone();
            cfg.mask.tau = tau;
            cfg.seed = base.seed + s as u64;
            cfg.output_dir = out_dir.join("runs").to_string_lossy().into_owned();
            let artifacts = run_experiment(&cfg)?;
            let last = artifacts
                .metrics
                .last()
                .ok_or(Error::EmptyInput("run produced no metrics"))?;
            finals.push(last.clone());
        }
        rows.push(TauRow { tau, agg: MetricAggregate::from_records(&finals) });
    }

    let csv_path = out_dir.join("sweep.csv");
    let mut csv = String::from(
        "tau,reward_mean,reward_std,kl_mean,kl_std,fidelity_mean,fidelity_std,drop_mean,drop_std,n_seeds\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.tau,
            r.agg.reward_mean,
            r.agg.reward_std,
            r.agg.kl_mean,
            r.agg.kl_std,
            r.agg.fidelity_mean,
            r.agg.fidelity_std,
            r.agg.drop_mean,
            r.agg.drop_std,
            r.agg.n_seeds
        ));
    }
    fs::write(&csv_path, csv)?;

    let summary = SweepSummary {
        rows,
        out_dir: out_dir.clone(),
        csv_path,
        table_path: out_dir.join("table.txt"),
        svg_path: out_dir.join("sweep_drop.svg"),
    };
    fs::write(&summary.table_path, summary.render_table())?;
    let labels: Vec<String> = summary.rows.iter().map(|r| format!("tau={}", r.tau)).collect();
    let values: Vec<f64> = summary.rows.iter().map(|r| r.agg.drop_mean.abs()).collect();
    fs::write(
        &summary.svg_path,
        bar_chart("reward-drop magnitude by tau", &labels, &values),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub is_full: bool,
    #[serde(flatten)]
    pub agg: MetricAggregate,
    /// Mean over seeds of the first evaluation iteration whose average
    /// reward reached the config's `reward_target`; `t_max + 1` per seed
    /// when never reached.
    pub iterations_to_target: f64,
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub out_dir: PathBuf,
    pub csv_path: PathBuf,
    pub table_path: PathBuf,
}

impl AblationSummary {
    pub fn render_table(&self) -> String {
        let mut out = String::from(
            "variant           reward              kl                fidelity          reward_drop        iters_to_target\n",
        );
        for r in &self.rows {
            let name = if r.is_full {
                format!("{} (full)", r.variant)
            } else {
                r.variant.clone()
            };
            out.push_str(&format!(
                "{:<17} {:>7.3} +/- {:<7.3} {:>6.4} +/- {:<6.4} {:>6.3} +/- {:<6.3} {:>7.4} +/- {:<7.4} {:>7.1}\n",
                name,
                r.agg.reward_mean,
                r.agg.reward_std,
                r.agg.kl_mean,
                r.agg.kl_std,
                r.agg.fidelity_mean,
                r.agg.fidelity_std,
                r.agg.drop_mean,
                r.agg.drop_std,
                r.iterations_to_target,
            ));
        }
        out
    }
}

fn iterations_to_target(records: &[MetricsRecord], target: f64, t_max: usize) -> f64 {
    records
        .iter()
        .find(|r| r.final_avg_reward >= target)
        .map(|r| r.iteration as f64)
        .unwrap_or((t_max + 1) as f64)
}

/// Runs the full configuration plus the no-comm and no-adaptive-epsilon
/// ablations with matched seeds and tabulates all four metrics.
pub fn run_ablations(base: &ExperimentConfig, n_seeds: usize) -> Result<AblationSummary> {
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    base.validate()?;
    let out_dir = base.output_root().join(format!("ablate-{}", base.run_id()));
    fs::create_dir_all(&out_dir)?;

    let variants: [(&str, fn(&mut ExperimentConfig)); 3] = [
        ("full", |_| {}),
        ("no_comm", |c| c.disable_comm = true),
        ("no_adaptive_eps", |c| c.disable_adaptive_epsilon = true),
    ];

    let mut rows = Vec::with_capacity(variants.len());
    for (name, apply) in variants {
        let mut finals = Vec::with_capacity(n_seeds);
        let mut to_target = Vec::with_capacity(n_seeds);
        for s in 0..n_seeds {
            let mut cfg = base.clone();
            apply(&mut cfg);
            cfg.seed = base.seed + s as u64;
            cfg.output_dir = out_dir.join("runs").to_string_lossy().into_owned();
            let artifacts = run_experiment(&cfg)?;
            let last = artifacts
                .metrics
                .last()
                .ok_or(Error::EmptyInput("run produced no metrics"))?;
            finals.push(last.clone());
            to_target.push(iterations_to_target(&artifacts.metrics, cfg.reward_target, cfg.t_max));
        }
        rows.push(AblationRow {
            variant: name.to_string(),
            is_full: name == "full",
            agg: MetricAggregate::from_records(&finals),
            iterations_to_target: to_target.iter().sum::<f64>() / to_target.len() as f64,
        });
    }

    let csv_path = out_dir.join("ablations.csv");
    let mut csv = String::from(
        "variant,is_full,reward_mean,reward_std,kl_mean,kl_std,fidelity_mean,fidelity_std,drop_mean,drop_std,iterations_to_target,n_seeds\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.is_full,
            r.agg.reward_mean,
            r.agg.reward_std,
            r.agg.kl_mean,
            r.agg.kl_std,
            r.agg.fidelity_mean,
            r.agg.fidelity_std,
            r.agg.drop_mean,
            r.agg.drop_std,
            r.iterations_to_target,
            r.agg.n_seeds
        ));
    }
    fs::write(&csv_path, csv)?;

    let summary = AblationSummary {
        rows,
        out_dir: out_dir.clone(),
        csv_path,
        table_path: out_dir.join("table.txt"),
    };
    fs::write(&summary.table_path, summary.render_table())?;
    Ok(summary)
}
