//! Experiment orchestration: configuration, the training loop, sweeps,
//! ablations, persistence, and plot emission.

mod plot;
mod run;
mod sweep;

pub use plot::emit_plots;
pub use run::{evaluate_checkpoint, run_experiment, RunArtifacts};
pub use sweep::{run_ablations, run_tau_sweep, AblationSummary, SweepSummary};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::collab::EpsilonSchedule;
use crate::env::make_env;
use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::ppo::PpoConfig;

/// Environment variable overriding the output root directory.
pub const OUT_DIR_ENV: &str = "XMARL_OUT_DIR";

/// Shared-buffer parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BufferConfig {
    pub capacity: usize,
    /// Broadcasts fire at per-agent step counts that are multiples of this.
    pub broadcast_interval: u64,
    /// Entries per broadcast (top-K).
    pub broadcast_size: usize,
    /// Euclidean similarity radius for exploration deprioritization.
    /// When unset, defaults to 0.1 * sqrt(obs_dim) as a norm-scale proxy.
    pub similarity_delta: Option<f64>,
    /// Deprioritized selection weight; kept above zero so peer-reported
    /// states retain some probability of re-evaluation.
    pub w_min: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig {
            capacity: 512,
            broadcast_interval: 50,
            broadcast_size: 16,
            similarity_delta: None,
            w_min: 0.2,
        }
    }
}

/// Saliency-identification budget used during the collaboration phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencySettings {
    /// Paired episodes per candidate state (>= 2).
    pub n_eval: usize,
    /// Candidate states evaluated per agent per identification pass.
    pub max_candidates: usize,
    /// Size of the critical set used by the reward-drop evaluation:
    /// the top-K highest-scoring mask-selected states.
    pub top_k: usize,
    /// Run identification every this many iterations.
    pub interval: usize,
}

impl Default for SaliencySettings {
    fn default() -> Self {
        SaliencySettings {
            n_eval: 6,
            max_candidates: 16,
            top_k: 5,
            interval: 1,
        }
    }
}

/// Full experiment configuration. Loadable from TOML; every field has a
/// default so partial files are valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// One of `chain`, `connect4`, `highway`.
    pub env: String,
    pub n_agents: usize,
    /// Maximum training iterations.
    pub t_max: usize,
    /// Focal-agent decision steps collected per agent per iteration.
    pub rollout_len: usize,
    /// Evaluate every this many iterations.
    pub eval_interval: usize,
    /// Held-out validation episodes per evaluation.
    pub n_eval_episodes: usize,
    /// Paired mask-training episodes per agent per iteration.
    pub mask_pairs: usize,
    pub max_episode_steps: usize,
    pub seed: u64,
    pub output_dir: String,
    /// Forces fully serial execution. This implementation is always serial,
    /// so the flag is recorded for provenance and changes nothing.
    pub deterministic: bool,
    /// Ablation: skip the collaboration phase entirely (no buffer, no
    /// broadcasts, no exploration reweighting).
    pub disable_comm: bool,
    /// Ablation: no epsilon-greedy exploration at all (epsilon = 0).
    pub disable_adaptive_epsilon: bool,
    /// Reward level used by the ablation summary's iterations-to-target
    /// comparison.
    pub reward_target: f64,
    pub ppo: PpoConfig,
    pub mask: MaskConfig,
    pub exploration: EpsilonSchedule,
    pub buffer: BufferConfig,
    pub saliency: SaliencySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "highway".into(),
            n_agents: 4,
            t_max: 60,
            rollout_len: 256,
            eval_interval: 10,
            n_eval_episodes: 20,
            mask_pairs: 4,
            max_episode_steps: 50,
            seed: 1,
            output_dir: "runs".into(),
            deterministic: false,
            disable_comm: false,
            disable_adaptive_epsilon: false,
            reward_target: 2.0,
            ppo: PpoConfig::default(),
            mask: MaskConfig::default(),
            exploration: EpsilonSchedule::default(),
            buffer: BufferConfig::default(),
            saliency: SaliencySettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be at least 1".into()));
        }
        if self.rollout_len == 0 {
            return Err(Error::Config("rollout_len must be positive".into()));
        }
        if self.n_eval_episodes == 0 {
            return Err(Error::Config("n_eval_episodes must be at least 1".into()));
        }
        if self.mask_pairs == 0 {
            return Err(Error::Config("mask_pairs must be at least 1".into()));
        }
        if self.saliency.n_eval < 2 {
            return Err(Error::Config("saliency.n_eval must be at least 2".into()));
        }
        if self.saliency.interval == 0 {
            return Err(Error::Config("saliency.interval must be at least 1".into()));
        }
        if !self.reward_target.is_finite() {
            return Err(Error::Config("reward_target must be finite".into()));
        }
        if self.buffer.broadcast_interval == 0 {
            return Err(Error::Config("buffer.broadcast_interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.buffer.w_min) {
            return Err(Error::Config("buffer.w_min must be in [0, 1]".into()));
        }
        self.ppo.validate()?;
        self.mask.validate()?;
        self.exploration.validate()?;
        // Environment name and agent count are validated by construction.
        make_env(&self.env, self.n_agents, self.max_episode_steps)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config file: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// Deterministic run identifier from the seed and a config-content hash.
    pub fn run_id(&self) -> String {
        let blob = self.to_toml_string().unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in blob.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("run-{}-{:08x}", self.seed, (h >> 32) as u32)
    }

    /// Output root honoring the `XMARL_OUT_DIR` environment variable.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var(OUT_DIR_ENV) {
            Ok(root) if !root.is_empty() => PathBuf::from(root),
            _ => PathBuf::from(&self.output_dir),
        }
    }

    /// Per-environment default similarity radius.
    pub fn similarity_delta(&self, obs_dim: usize) -> f64 {
        self.buffer
            .similarity_delta
            .unwrap_or(0.1 * (obs_dim as f64).sqrt())
    }
}
