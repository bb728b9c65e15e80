//! Flat `key = value` run configuration.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::BeamCatchConfig;
use crate::error::{Error, Result};
use crate::perception::{LeaderWeighting, PerceptionConfig};
use crate::policy::{LossCoefficients, PolicyConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Leader stage on perception, then follower stage on policy.
    #[default]
    Stackelberg,
    /// One joint PPO update over both modules.
    PpoBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Stackelberg => "stackelberg",
            Mode::PpoBaseline => "ppo_baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stackelberg" => Ok(Mode::Stackelberg),
            "ppo_baseline" => Ok(Mode::PpoBaseline),
            _ => Err(Error::config("mode", "one of stackelberg, ppo_baseline")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    #[default]
    BeamCatch,
    Chain,
}

/// Perception torso used by the baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineTorso {
    /// Same attention stack as the leader.
    #[default]
    Attention,
    /// The convolutions alone.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub rollout_length: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub ppo_epochs: usize,
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub lambda_cost: f64,
    pub alpha_coop: f64,
    /// Environment steps; training runs `total_timesteps / rollout_length`
    /// iterations.
    pub total_timesteps: usize,
    pub max_episode_length: usize,
    pub seed: u64,
    pub mode: Mode,
    pub env: EnvId,
    pub leader_weighting: LeaderWeighting,
    pub baseline_torso: BaselineTorso,
    /// Root directory for run artifacts.
    pub output_dir: String,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Checksum both modules around every stage and check clip ceilings.
    pub debug_checks: bool,
    /// Greedy episodes scored after training.
    pub eval_episodes: usize,

    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub attention_layers: usize,
    pub feature_dim: usize,
    pub policy_hidden: Vec<usize>,

    pub grid_height: usize,
    pub grid_width: usize,
    /// Steps between object spawns (beam_catch).
    pub spawn_every: usize,
    pub max_objects: usize,
    /// Corridor cells before the goal (chain).
    pub chain_length: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            rollout_length: 2048,
            batch_size: 64,
            gamma: 0.99,
            gae_lambda: 0.95,
            learning_rate: 1e-4,
            ppo_epochs: 4,
            clip_epsilon: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            lambda_cost: 1e-4,
            alpha_coop: 0.7,
            total_timesteps: 200_000,
            max_episode_length: 10_000,
            seed: 0,
            mode: Mode::Stackelberg,
            env: EnvId::BeamCatch,
            leader_weighting: LeaderWeighting::AlphaOnCost,
            baseline_torso: BaselineTorso::Attention,
            output_dir: "runs".into(),
            checkpoint_every: 0,
            debug_checks: false,
            eval_episodes: 10,
            conv_channels: vec![16, 32, 32],
            conv_kernels: vec![5, 3, 3],
            conv_strides: vec![2, 2, 2],
            attention_layers: 3,
            feature_dim: 128,
            policy_hidden: vec![256, 256],
            grid_height: 12,
            grid_width: 12,
            spawn_every: 3,
            max_objects: 4,
            chain_length: 5,
        }
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(key, "must be positive"));
    }
    Ok(())
}

fn in_range(key: &str, v: f64, ok: bool, constraint: &str) -> Result<()> {
    if !v.is_finite() || !ok {
        return Err(Error::config(key, constraint.to_string()));
    }
    Ok(())
}

impl TrainerConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .and_then(|span| text[..span.start].lines().last().map(|l| l.to_string()))
                .map(|line| line.split('=').next().unwrap_or("").trim().to_string())
                .filter(|k| !k.is_empty())
                .unwrap_or_else(|| "config".to_string());
            Error::config(key, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        positive("rollout_length", self.rollout_length)?;
        positive("batch_size", self.batch_size)?;
        positive("ppo_epochs", self.ppo_epochs)?;
        positive("max_episode_length", self.max_episode_length)?;
        if self.rollout_length < 2 {
            return Err(Error::config("rollout_length", "must be at least 2"));
        }
        if self.batch_size < 2 || self.batch_size > self.rollout_length {
            return Err(Error::config("batch_size", "must lie in [2, rollout_length]"));
        }
        if self.total_timesteps < self.rollout_length {
            return Err(Error::config("total_timesteps", "must be at least rollout_length"));
        }
        in_range("gamma", self.gamma, (0.0..1.0).contains(&self.gamma), "must lie in [0, 1)")?;
        in_range("gae_lambda", self.gae_lambda, (0.0..=1.0).contains(&self.gae_lambda), "must lie in [0, 1]")?;
        in_range("learning_rate", self.learning_rate, self.learning_rate >= 0.0, "must be nonnegative")?;
        in_range("clip_epsilon", self.clip_epsilon, self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0, "must lie in (0, 1)")?;
        in_range("value_coef", self.value_coef, self.value_coef >= 0.0, "must be nonnegative")?;
        in_range("entropy_coef", self.entropy_coef, self.entropy_coef >= 0.0, "must be nonnegative")?;
        in_range("max_grad_norm", self.max_grad_norm, self.max_grad_norm > 0.0, "must be positive")?;
        in_range("lambda_cost", self.lambda_cost, self.lambda_cost >= 0.0, "must be nonnegative")?;
        in_range("alpha_coop", self.alpha_coop, (0.0..=1.0).contains(&self.alpha_coop), "must lie in [0, 1]")?;
        if self.mode == Mode::Stackelberg && self.attention_layers == 0 {
            return Err(Error::config("attention_layers", "the leader needs at least one attention block"));
        }
        if self.output_dir.is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        positive("feature_dim", self.feature_dim)?;
        match self.env {
            EnvId::BeamCatch => self.beam_catch_config().validate()?,
            EnvId::Chain => {
                if self.chain_length < 2 {
                    return Err(Error::config("chain_length", "must be at least 2"));
                }
            }
        }
        self.perception_config()?.validate()
    }

    pub fn iterations(&self) -> usize {
        self.total_timesteps / self.rollout_length
    }

    pub fn beam_catch_config(&self) -> BeamCatchConfig {
        BeamCatchConfig {
            height: self.grid_height,
            width: self.grid_width,
            spawn_every: self.spawn_every,
            max_objects: self.max_objects,
            initial_object: true,
            max_episode_length: self.max_episode_length,
        }
    }

    /// `(stack, height, width)` of the configured environment's observations.
    pub fn observation_shape(&self) -> [usize; 3] {
        match self.env {
            EnvId::BeamCatch => [crate::env::FRAME_STACK, self.grid_height, self.grid_width],
            EnvId::Chain => [crate::env::FRAME_STACK, 1, self.chain_length + 1],
        }
    }

    pub fn n_actions(&self) -> usize {
        match self.env {
            EnvId::BeamCatch => 3,
            EnvId::Chain => 2,
        }
    }

    /// Perception layout; the conv-only baseline torso drops attention.
    pub fn perception_config(&self) -> Result<PerceptionConfig> {
        let [d, h, w] = self.observation_shape();
        let attention_layers = match (self.mode, self.baseline_torso) {
            (Mode::PpoBaseline, BaselineTorso::Conv) => 0,
            _ => self.attention_layers,
        };
        let cfg = PerceptionConfig {
            stack_depth: d,
            height: h,
            width: w,
            channels: self.conv_channels.clone(),
            kernels: self.conv_kernels.clone(),
            strides: self.conv_strides.clone(),
            attention_layers,
            feature_dim: self.feature_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            feature_dim: self.feature_dim,
            hidden: self.policy_hidden.clone(),
            n_actions: self.n_actions(),
        }
    }

    pub fn loss_coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            clip_epsilon: self.clip_epsilon,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
        }
    }

    /// FNV-1a hash of every setting except `seed`, `mode` and `output_dir`,
    /// so runs that differ only in those share a lineage.
    pub fn lineage_hash(&self) -> u64 {
        let mut c = self.clone();
        c.seed = 0;
        c.mode = Mode::Stackelberg;
        c.output_dir = String::new();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in c.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

pub fn parse_config(path: &Path) -> Result<TrainerConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainerConfig::parse(&text)
}
