//! State representation models: a shared encoder trained with auxiliary
//! losses on (optionally disjoint) slices of the state vector, plus the
//! non-learned baselines.

mod layout;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::layers::ConvSpec;
use crate::autodiff::AutodiffError;
use crate::dataset::DatasetError;

pub use layout::{
    default_widths, parse_groups, LossKind, SplitEntry, SplitLayout, INVERSE_SLICE_WIDTH,
};
pub use model::{
    reward_class, Batch, LossValues, SrlModel, DECODER_HIDDEN, NUM_REWARD_CLASSES, REWARD_HIDDEN,
};
pub use train::{
    evaluate, load_model, save_model, train, EpochLosses, SrlSidecar, SrlTrainReport, TrainOptions,
    SIDECAR_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum SrlError {
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("observation has {found} values, encoder expects {expected}")]
    ObservationShape { expected: usize, found: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("{method} has no trainable losses")]
    NotLearned { method: &'static str },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SrlSplits,
    SrlCombination,
    Autoencoder,
    Supervised,
    RandomFeatures,
    GroundTruth,
    RawPixels,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::SrlSplits,
        Method::SrlCombination,
        Method::Autoencoder,
        Method::Supervised,
        Method::RandomFeatures,
        Method::GroundTruth,
        Method::RawPixels,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::SrlSplits => "srl_splits",
            Method::SrlCombination => "srl_combination",
            Method::Autoencoder => "autoencoder",
            Method::Supervised => "supervised",
            Method::RandomFeatures => "random_features",
            Method::GroundTruth => "ground_truth",
            Method::RawPixels => "raw_pixels",
        }
    }

    pub fn is_passthrough(self) -> bool {
        matches!(self, Method::GroundTruth | Method::RawPixels)
    }

    /// Methods whose encoder is fitted by gradient descent.
    pub fn is_trained(self) -> bool {
        !self.is_passthrough() && self != Method::RandomFeatures
    }

    /// Layout used when the config does not give one.
    pub fn default_layout(self) -> Option<&'static str> {
        match self {
            Method::SrlSplits => Some("AE+Rew/Inv"),
            Method::SrlCombination => Some("AE+Rew+Inv"),
            Method::Autoencoder => Some("AE"),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub reward: f64,
    pub inverse: f64,
    pub forward: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            reward: 1.0,
            inverse: 2.0,
            forward: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(reconstruction: f64, reward: f64, inverse: f64) -> Self {
        Self {
            reconstruction,
            reward,
            inverse,
            ..Self::default()
        }
    }

    pub fn get(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Reconstruction => self.reconstruction,
            LossKind::Reward => self.reward,
            LossKind::Inverse => self.inverse,
            LossKind::Forward => self.forward,
            LossKind::Supervised => 1.0,
        }
    }

    /// Weights must be finite and non-negative, with at least one active
    /// loss weighted above zero.
    pub fn validate(&self, active: &[LossKind]) -> Result<(), SrlError> {
        for (name, w) in [
            ("reconstruction", self.reconstruction),
            ("reward", self.reward),
            ("inverse", self.inverse),
            ("forward", self.forward),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(SrlError::Config(format!(
                    "weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        if !active.is_empty() && active.iter().all(|&k| self.get(k) == 0.0) {
            return Err(SrlError::Config("every active loss has weight 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Dense relu layers over the flattened image.
    Mlp { hidden: Vec<usize> },
    /// Relu conv layers, then dense relu layers. The last feature map is
    /// flattened, or with `keypoints` reduced to the expected (x, y)
    /// position of each channel.
    SmallCnn {
        convs: Vec<ConvSpec>,
        hidden: Vec<usize>,
        #[serde(default)]
        keypoints: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub architecture: Architecture,
    pub state_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::SmallCnn {
                convs: vec![ConvSpec {
                    out_channels: 32,
                    kernel: 4,
                    stride: 2,
                }],
                hidden: vec![],
                keypoints: true,
            },
            state_dim: 32,
        }
    }
}
