use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::autodiff::OptimizerConfig;
use crate::envs::NavConfig;
use crate::rl::PpoConfig;
use crate::srl::{EncoderSpec, LossWeights, Method, SplitLayout, SrlModel, TrainOptions};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Collection threads; output is identical for any count.
    pub workers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            seed: 1,
            val_fraction: 0.1,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrlConfig {
    pub method: Method,
    pub encoder: EncoderSpec,
    /// Layout grammar such as `"AE+Rew/Inv"`; the method default when absent.
    pub layout: Option<String>,
    /// Explicit slice widths in grammar order.
    pub widths: Option<Vec<usize>>,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub reward_class_weighting: bool,
    pub seed: u64,
}

impl Default for SrlConfig {
    fn default() -> Self {
        let train = TrainOptions::default();
        Self {
            method: Method::SrlSplits,
            encoder: EncoderSpec::default(),
            layout: None,
            widths: None,
            weights: LossWeights::default(),
            epochs: train.epochs,
            batch_size: train.batch_size,
            optimizer: train.optimizer,
            reward_class_weighting: train.reward_class_weighting,
            seed: 3,
        }
    }
}

impl SrlConfig {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            reward_class_weighting: self.reward_class_weighting,
        }
    }

    pub fn build(&self, env: &NavConfig) -> Result<SrlModel, HarnessError> {
        SrlModel::build_with_grammar(
            self.method,
            &self.encoder,
            self.layout.as_deref(),
            self.widths.as_deref(),
            self.weights,
            env,
            self.seed,
        )
        .map_err(|e| HarnessError::Config(format!("srl: {e}")))
    }

    /// The layout the method would use, if any.
    pub fn resolved_layout(&self) -> Result<Option<SplitLayout>, HarnessError> {
        let grammar = match (&self.layout, self.method.default_layout()) {
            (Some(g), _) => g.as_str(),
            (None, Some(g)) => g,
            (None, None) => return Ok(None),
        };
        let layout = match &self.widths {
            Some(w) => SplitLayout::parse_with_widths(grammar, w, self.encoder.state_dim),
            None => SplitLayout::parse(grammar, self.encoder.state_dim),
        };
        layout.map(Some).map_err(|e| HarnessError::ConfigKey {
            path: "srl.layout".into(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub ppo: PpoConfig,
    /// One policy is trained per seed.
    pub seeds: Vec<u64>,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub env: NavConfig,
    pub data: DataConfig,
    pub srl: SrlConfig,
    pub rl: RlConfig,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            env: NavConfig::default(),
            data: DataConfig::default(),
            srl: SrlConfig::default(),
            rl: RlConfig::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            HarnessError::ConfigKey {
                path,
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, HarnessError> {
        Self::from_json(&value.to_string())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.format_version != CONFIG_VERSION {
            return Err(HarnessError::ConfigKey {
                path: "format_version".into(),
                message: format!(
                    "unsupported version {} (expected {CONFIG_VERSION})",
                    self.format_version
                ),
            });
        }
        self.env.validate().map_err(|e| HarnessError::ConfigKey {
            path: "env".into(),
            message: e.to_string(),
        })?;
        let key = |path: &str, message: String| HarnessError::ConfigKey {
            path: path.into(),
            message,
        };
        if self.data.samples < 2 {
            return Err(key("data.samples", "need at least 2 samples".into()));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(key(
                "data.val_fraction",
                format!("must be in (0, 1), got {}", self.data.val_fraction),
            ));
        }
        if self.data.workers == 0 {
            return Err(key("data.workers", "must be positive".into()));
        }
        if self.srl.epochs == 0 || self.srl.batch_size == 0 {
            return Err(key(
                "srl.epochs",
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.srl.encoder.state_dim == 0 {
            return Err(key("srl.encoder.state_dim", "must be positive".into()));
        }
        self.srl.resolved_layout()?;
        self.rl
            .ppo
            .validate()
            .map_err(|e| key("rl.ppo", e.to_string()))?;
        if self.rl.seeds.is_empty() {
            return Err(key("rl.seeds", "need at least one seed".into()));
        }
        Ok(())
    }

    /// Replaces every seed with `seed`: data collection, SRL init and a
    /// single RL seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.srl.seed = seed;
        self.rl.seeds = vec![seed];
    }

    /// sha256 of the canonical JSON with the output directory cleared, so
    /// the same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        hex::encode(Sha256::digest(
            serde_json::to_vec(&c).expect("config serializes"),
        ))
    }

    /// Hash of the parts that determine the dataset.
    pub fn data_hash(&self) -> String {
        let key = serde_json::json!({ "env": self.env, "data": { "samples": self.data.samples, "seed": self.data.seed, "val_fraction": self.data.val_fraction } });
        hex::encode(Sha256::digest(key.to_string()))
    }
}
