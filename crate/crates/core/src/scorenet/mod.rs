//! Noise-conditioned score model, its training and annealed Langevin sampling.

pub mod autodiff;
pub mod checkpoint;
pub mod model;
pub mod sample;
pub mod train;

use thiserror::Error;

use crate::sensor::{normalize_depth, RangeImage, DEPTH_CHANNEL, SEMANTIC_CHANNEL};

pub use autodiff::{Scalar, Tape, Tensor};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointError,
};
pub use model::{ModelConfig, ParamGroup, ParamStore, ScoreModel};
pub use sample::{
    sample_annealed_langevin, sample_range_image, GaussianScore, ModelScore, SamplerConfig,
    ScoreFn, MIN_RETURN_DEPTH,
};
pub use train::{
    batch_loss, draw_noise, finite_diff_check, gradient_check_case, loss_cond, loss_uncond,
    score_matching_term, train, AdamState, GradCheck, LossOutput, NoisyExample, Phase, TrainConfig,
    TrainExample, TrainRun, TrainState,
};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("tensor shape {found:?} does not match expected {expected:?}")]
    Shape {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("a condition was given but the model has no adapter")]
    NoAdapter,
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("training data is empty")]
    EmptyDataset,
    #[error("conditional training requires a condition for every example")]
    MissingCondition,
    #[error("loss became non-finite at step {step}")]
    Diverged {
        step: u64,
        last_good: Box<TrainState>,
    },
    #[error("sampler state became non-finite at level {level}")]
    NonFiniteSample { level: usize },
}

/// Geometric ladder of noise levels, largest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::geometric(1.0, 0.01, 10).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn geometric(sigma_max: f64, sigma_min: f64, levels: usize) -> Result<Self, ScoreError> {
        if levels == 0 {
            return Err(ScoreError::InvalidSchedule(
                "at least one level is required".into(),
            ));
        }
        if !(sigma_min > 0.0 && sigma_max.is_finite() && sigma_max >= sigma_min) {
            return Err(ScoreError::InvalidSchedule(format!(
                "need 0 < sigma_min <= sigma_max, got {sigma_min} and {sigma_max}"
            )));
        }
        if levels > 1 && sigma_max == sigma_min {
            return Err(ScoreError::InvalidSchedule(
                "sigmas must strictly decrease".into(),
            ));
        }
        if levels == 1 {
            return Ok(Self {
                sigmas: vec![sigma_max],
            });
        }
        let ratio = (sigma_min / sigma_max).ln() / (levels - 1) as f64;
        let mut sigmas: Vec<f64> = (0..levels)
            .map(|i| sigma_max * (ratio * i as f64).exp())
            .collect();
        sigmas[levels - 1] = sigma_min;
        Ok(Self { sigmas })
    }

    /// Explicit ladder; must be strictly decreasing and positive.
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self, ScoreError> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(ScoreError::InvalidSchedule(
                "sigmas must be positive and finite".into(),
            ));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(ScoreError::InvalidSchedule(
                "sigmas must strictly decrease".into(),
            ));
        }
        Ok(Self { sigmas })
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_min(&self) -> f64 {
        *self.sigmas.last().unwrap()
    }
}

/// Normalized log-depth of channel 0 as a `1 x H x W` tensor.
pub fn encode_depth(img: &RangeImage) -> Tensor<f32> {
    let max = img.spec.max_range;
    let data = img
        .channel(DEPTH_CHANNEL)
        .iter()
        .map(|&d| {
            if d > 0.0 {
                normalize_depth((d as f64).min(max), max).unwrap_or(0.0) as f32
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(1, img.spec.rows, img.spec.cols, data)
}

/// Two-channel condition: normalized depth and `label / (num_labels - 1)`.
pub fn encode_condition(img: &RangeImage, num_labels: usize) -> Tensor<f32> {
    let depth = encode_depth(img);
    let denom = num_labels.saturating_sub(1).max(1) as f32;
    let sem: Vec<f32> = if img.has_semantics() {
        img.channel(SEMANTIC_CHANNEL)
            .iter()
            .map(|&l| l / denom)
            .collect()
    } else {
        vec![0.0; depth.len()]
    };
    let mut data = depth.data;
    data.extend(sem);
    Tensor::from_vec(2, img.spec.rows, img.spec.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::SensorSpec;

    #[test]
    fn geometric_schedule() {
        let s = NoiseSchedule::default();
        assert_eq!(s.levels(), 10);
        assert_eq!(s.sigma_max(), 1.0);
        assert_eq!(s.sigma_min(), 0.01);
        let r = s.sigma(1) / s.sigma(0);
        for w in s.sigmas().windows(2) {
            assert!(w[1] < w[0]);
            assert!((w[1] / w[0] - r).abs() < 1e-12);
        }
        assert!(NoiseSchedule::geometric(0.1, 1.0, 3).is_err());
        assert!(NoiseSchedule::geometric(1.0, 1.0, 3).is_err());
        assert_eq!(
            NoiseSchedule::geometric(0.5, 0.5, 1).unwrap().sigmas(),
            &[0.5]
        );
        assert!(NoiseSchedule::from_sigmas(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn condition_encoding() {
        let spec = SensorSpec::hdl64e().with_resolution(2, 4).unwrap();
        let mut img = RangeImage::zeros(spec, 2);
        img.set(DEPTH_CHANNEL, 1, 0, 80.0);
        img.set(SEMANTIC_CHANNEL, 1, 0, 4.0);
        let c = encode_condition(&img, 5);
        assert_eq!(c.shape(), (2, 2, 4));
        assert_eq!(c.data[1], 1.0);
        assert_eq!(c.data[8 + 1], 1.0);
        assert_eq!(c.data.iter().filter(|&&v| v != 0.0).count(), 2);
    }
}
