//! Clipped-surrogate policy optimization of a small actor-critic on top of a
//! frozen state encoder.

mod gae;
mod policy;
mod ppo;
mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::layers::ConvSpec;
use crate::autodiff::AutodiffError;
use crate::metrics::{EvalResult, MetricsError};
use crate::srl::SrlError;

pub use gae::{compute_gae, normalize_advantages};
pub use policy::{ActorCritic, PolicyAgent, PolicyInput};
pub use ppo::{collect_rollout, ppo_update, surrogate_loss, RolloutBuffer, Surrogate, UpdateStats};
pub use train::{read_curves_csv, train_rl, write_curves_csv, CurvePoint, RlRun, TrainingCurve};

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error("non-finite PPO loss ({stats})")]
    NonFinite { stats: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Srl(#[from] SrlError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error("curve csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_range: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub horizon: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub total_timesteps: u64,
    pub eval_checkpoints: Vec<u64>,
    pub eval_episodes: usize,
    /// Sample evaluation actions instead of taking the argmax.
    pub stochastic_eval: bool,
    pub hidden: Vec<usize>,
    /// Convolution applied to pixel inputs before the MLPs.
    pub pixel_trunk: ConvSpec,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_range: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch_size: 64,
            horizon: 2048,
            entropy_coef: 0.0,
            value_coef: 0.5,
            learning_rate: 3e-4,
            total_timesteps: 200_000,
            eval_checkpoints: vec![25_000, 50_000, 100_000, 200_000],
            eval_episodes: 100,
            stochastic_eval: false,
            hidden: vec![64, 64],
            pixel_trunk: ConvSpec {
                out_channels: 8,
                kernel: 4,
                stride: 4,
            },
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: String| Err(RlError::Config(m));
        if !(self.clip_range > 0.0 && self.clip_range.is_finite()) {
            return bad(format!(
                "clip_range must be positive, got {}",
                self.clip_range
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!(
                "gae_lambda must be in [0, 1], got {}",
                self.gae_lambda
            ));
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.horizon == 0 {
            return bad("epochs, minibatch_size and horizon must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be non-empty and positive".into());
        }
        if self.eval_checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("eval_checkpoints must be strictly increasing".into());
        }
        Ok(())
    }

    /// Checkpoints inside the budget.
    pub fn active_checkpoints(&self) -> Vec<u64> {
        self.eval_checkpoints
            .iter()
            .copied()
            .filter(|&c| c > 0 && c <= self.total_timesteps)
            .collect()
    }
}

/// Final evaluation of a curve, or `None` if empty.
pub fn final_eval(curve: &TrainingCurve) -> Option<&EvalResult> {
    curve.points.last().map(|p| &p.eval)
}
