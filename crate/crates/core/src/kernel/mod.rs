//! Trainable encoder-decoder segmentation models on the CPU.

pub mod adam;
pub mod arch;
pub mod automl;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod tensor;
pub mod train;

use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use arch::{Architecture, ArchitectureRegistry, Model, ModelSpec, ParamInfo, ParamSet, Trace};
pub use automl::{automl_search, SearchOptions, SearchOutcome, SearchSpace, TrialRecord};
pub use checkpoint::Checkpoint;
pub use metrics::{evaluate, MetricsRecord, Split, TaskMetrics};
pub use tensor::{Real, Tensor3};
pub use train::{train, TrainOptions, TrainOutcome};

use crate::error::{Error, Result};

/// One training or evaluation example: an image and one label plane per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub key: String,
    pub image: Tensor3<f32>,
    pub labels: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub init_seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            init_seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_epsilon <= 0.0 {
            return Err(Error::validation("Adam constants out of range"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, epsilon: self.adam_epsilon }
    }
}
