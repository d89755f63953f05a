//! Annealed Langevin dynamics over a noise schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::autodiff::Tensor;
use super::model::ScoreModel;
use super::{NoiseSchedule, ScoreError};
use crate::sensor::{denormalize_depth, RangeImage, SensorSpec, DEPTH_CHANNEL};

/// Depths below this many meters are treated as no return.
pub const MIN_RETURN_DEPTH: f64 = 1.0;

/// A score estimate at noise level `sigma`.
pub trait ScoreFn: Sync {
    fn dim(&self) -> usize;
    fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>, ScoreError>;
}

/// Score of `N(mean, std^2 I)` perturbed by `N(0, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScore {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl ScoreFn for GaussianScore {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>, ScoreError> {
        let var = self.std * self.std + sigma * sigma;
        Ok(x.iter()
            .zip(&self.mean)
            .map(|(x, m)| -(x - m) / var)
            .collect())
    }
}

/// A trained network, optionally with a fixed condition image.
#[derive(Debug, Clone, Copy)]
pub struct ModelScore<'a> {
    pub model: &'a ScoreModel<f32>,
    pub cond: Option<&'a Tensor<f32>>,
}

impl ScoreFn for ModelScore<'_> {
    fn dim(&self) -> usize {
        let c = &self.model.config;
        c.in_channels * c.rows * c.cols
    }

    fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>, ScoreError> {
        let c = &self.model.config;
        let t = Tensor::from_vec(
            c.in_channels,
            c.rows,
            c.cols,
            x.iter().map(|&v| v as f32).collect(),
        );
        let s = self.model.forward(&t, sigma, self.cond)?;
        Ok(s.data.into_iter().map(f64::from).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Base step size; level `i` uses `step_size * sigma_i^2 / sigma_min^2`.
    pub step_size: f64,
    pub steps_per_level: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            step_size: 2e-5,
            steps_per_level: 5,
        }
    }
}

/// Runs annealed Langevin dynamics from `U[0,1]` and finishes with one
/// denoising step at the smallest level.
pub fn sample_annealed_langevin(
    score: &dyn ScoreFn,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>, ScoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..score.dim()).map(|_| rng.random::<f64>()).collect();
    let s_min2 = schedule.sigma_min().powi(2);
    for (level, &sigma) in schedule.sigmas().iter().enumerate() {
        let alpha = config.step_size * sigma * sigma / s_min2;
        let noise = alpha.sqrt();
        for _ in 0..config.steps_per_level {
            let s = score.score(&x, sigma)?;
            for (xi, si) in x.iter_mut().zip(&s) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *xi += 0.5 * alpha * si + noise * z;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ScoreError::NonFiniteSample { level });
            }
        }
    }
    let s = score.score(&x, schedule.sigma_min())?;
    x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += s_min2 * si);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ScoreError::NonFiniteSample {
            level: schedule.levels() - 1,
        });
    }
    Ok(x)
}

/// Samples a depth range image from `score`, which must cover `spec.rows x spec.cols`.
pub fn sample_range_image(
    score: &dyn ScoreFn,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    spec: &SensorSpec,
    seed: u64,
) -> Result<RangeImage, ScoreError> {
    let n = spec.pixel_count();
    if score.dim() != n {
        return Err(ScoreError::Shape {
            expected: (1, spec.rows, spec.cols),
            found: (1, 1, score.dim()),
        });
    }
    let x = sample_annealed_langevin(score, schedule, config, seed)?;
    let mut img = RangeImage::zeros(*spec, 1);
    for (d, v) in img.channel_mut(DEPTH_CHANNEL).iter_mut().zip(&x) {
        let meters = denormalize_depth(v.clamp(0.0, 1.0), spec.max_range).unwrap_or(0.0);
        *d = if meters < MIN_RETURN_DEPTH {
            0.0
        } else {
            meters as f32
        };
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moments_match() {
        let score = GaussianScore {
            mean: vec![0.5; 4],
            std: 0.1,
        };
        let schedule = NoiseSchedule::default();
        let cfg = SamplerConfig {
            step_size: 1e-4,
            steps_per_level: 100,
        };
        let n = 2000;
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|s| sample_annealed_langevin(&score, &schedule, &cfg, s).unwrap())
            .collect();
        for k in 0..4 {
            let m = samples.iter().map(|x| x[k]).sum::<f64>() / n as f64;
            let v = samples.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((m - 0.5).abs() < 0.1 * 0.1, "mean {m}");
            assert!((v / 0.01 - 1.0).abs() < 0.2, "variance {v}");
        }
    }

    struct Zero(usize);

    impl ScoreFn for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn score(&self, _: &[f64], _: f64) -> Result<Vec<f64>, ScoreError> {
            Ok(vec![0.0; self.0])
        }
    }

    #[test]
    fn zero_steps_returns_denoised_initialization() {
        let cfg = SamplerConfig {
            step_size: 1.0,
            steps_per_level: 0,
        };
        let schedule = NoiseSchedule::default();
        let x = sample_annealed_langevin(&Zero(6), &schedule, &cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        assert_eq!(x, init);

        let g = GaussianScore {
            mean: vec![0.0; 6],
            std: 1.0,
        };
        let y = sample_annealed_langevin(&g, &schedule, &cfg, 9).unwrap();
        let k = 1.0 - 1e-4 / (1.0 + 1e-4);
        for (a, b) in y.iter().zip(&init) {
            assert!((a - b * k).abs() < 1e-15);
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let g = GaussianScore {
            mean: vec![0.3; 5],
            std: 0.2,
        };
        let s = NoiseSchedule::default();
        let c = SamplerConfig::default();
        assert_eq!(
            sample_annealed_langevin(&g, &s, &c, 4).unwrap(),
            sample_annealed_langevin(&g, &s, &c, 4).unwrap()
        );
        assert_ne!(
            sample_annealed_langevin(&g, &s, &c, 4).unwrap(),
            sample_annealed_langevin(&g, &s, &c, 5).unwrap()
        );
    }

    #[test]
    fn divergence_is_reported() {
        struct Blow;
        impl ScoreFn for Blow {
            fn dim(&self) -> usize {
                2
            }
            fn score(&self, _: &[f64], _: f64) -> Result<Vec<f64>, ScoreError> {
                Ok(vec![f64::INFINITY; 2])
            }
        }
        let r = sample_annealed_langevin(
            &Blow,
            &NoiseSchedule::default(),
            &SamplerConfig::default(),
            0,
        );
        assert!(matches!(r, Err(ScoreError::NonFiniteSample { level: 0 })));
    }

    #[test]
    fn range_image_is_clamped_and_thresholded() {
        let spec = SensorSpec::hdl64e().with_resolution(2, 4).unwrap();
        let g = GaussianScore {
            mean: vec![0.9, 0.9, 0.9, 0.9, -5.0, -5.0, 5.0, 5.0],
            std: 1e-3,
        };
        let cfg = SamplerConfig {
            step_size: 1e-6,
            steps_per_level: 20,
        };
        let img = sample_range_image(&g, &NoiseSchedule::default(), &cfg, &spec, 1).unwrap();
        let d = img.channel(DEPTH_CHANNEL);
        assert!(d[..4].iter().all(|&v| v > 40.0 && v < 80.0));
        assert_eq!(&d[4..6], &[0.0, 0.0]);
        assert_eq!(&d[6..], &[80.0, 80.0]);
        assert!(sample_range_image(&Zero(3), &NoiseSchedule::default(), &cfg, &spec, 1).is_err());
    }
}
