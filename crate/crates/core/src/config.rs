//! `key = value` configuration shared by the command-line tools.
//!
//! Lines are `key = value`; `#` starts a comment. Every key must appear in
//! the schema below, and absent keys keep their defaults.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::extraction::{ClusterParams, ExtractionConfig, SizePrior};
use crate::geom::Point3;
use crate::layout::{SceneParams, ShapeKind};
use crate::raycast::RaydropParams;
use crate::scorenet::{ModelConfig, NoiseSchedule, SamplerConfig, ScoreError};
use crate::sensor::SensorSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSettings {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub levels: usize,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        Self {
            sigma_max: 1.0,
            sigma_min: 0.01,
            levels: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fusion-only steps before joint adapter training in two-phase mode.
    pub phase_a_steps: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            phase_a_steps: 500,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub sensor: SensorSpec,
    pub schedule: ScheduleSettings,
    pub sampler: SamplerConfig,
    pub train: TrainSettings,
    /// Architecture; rows and columns come from the training images.
    pub model: ModelConfig,
    pub extraction: ExtractionConfig,
    pub raydrop: RaydropParams,
    pub raydrop_seed: u64,
    /// Procedural scene generator knobs.
    pub scene: SceneParams,
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_list(v: &str, n: usize) -> Result<Vec<f64>, String> {
    let out: Vec<f64> = v
        .split(',')
        .map(|s| parse_num(s.trim()))
        .collect::<Result<_, _>>()?;
    if out.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got {v:?}"));
    }
    Ok(out)
}

impl Config {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError::Parse {
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "sensor.rows" => self.sensor.rows = parse_num(v)?,
            "sensor.cols" => self.sensor.cols = parse_num(v)?,
            "sensor.pitch_max_deg" => self.sensor.pitch_max = parse_num::<f64>(v)?.to_radians(),
            "sensor.pitch_min_deg" => self.sensor.pitch_min = parse_num::<f64>(v)?.to_radians(),
            "sensor.max_range" => self.sensor.max_range = parse_num(v)?,
            "sensor.origin_height" => self.sensor.origin_height = parse_num(v)?,
            "schedule.sigma_max" => self.schedule.sigma_max = parse_num(v)?,
            "schedule.sigma_min" => self.schedule.sigma_min = parse_num(v)?,
            "schedule.levels" => self.schedule.levels = parse_num(v)?,
            "sampler.step_size" => self.sampler.step_size = parse_num(v)?,
            "sampler.steps_per_level" => self.sampler.steps_per_level = parse_num(v)?,
            "train.steps" => self.train.steps = parse_num(v)?,
            "train.lr" => self.train.lr = parse_num(v)?,
            "train.batch_size" => self.train.batch_size = parse_num(v)?,
            "train.seed" => self.train.seed = parse_num(v)?,
            "train.phase_a_steps" => self.train.phase_a_steps = parse_num(v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(v)?,
            "train.log_every" => self.train.log_every = parse_num(v)?,
            "model.widths" => {
                self.model.widths = v
                    .split(',')
                    .map(|s| parse_num(s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "model.blocks_per_level" => self.model.blocks_per_level = parse_num(v)?,
            "model.emb_dim" => self.model.emb_dim = parse_num(v)?,
            "model.freq_count" => self.model.freq_count = parse_num(v)?,
            "raydrop.p0" => self.raydrop.p0 = parse_num(v)?,
            "raydrop.p1" => self.raydrop.p1 = parse_num(v)?,
            "raydrop.p2" => self.raydrop.p2 = parse_num(v)?,
            "raydrop.seed" => self.raydrop_seed = parse_num(v)?,
            "scene.car_x_min" => self.scene.car_x.0 = parse_num(v)?,
            "scene.car_x_max" => self.scene.car_x.1 = parse_num(v)?,
            "extraction.viewpoint" => {
                let c = parse_list(v, 3)?;
                self.extraction.viewpoint = Point3::new(c[0], c[1], c[2]);
            }
            _ => return self.set_cluster(key, v),
        }
        Ok(())
    }

    fn set_cluster(&mut self, key: &str, v: &str) -> Result<(), String> {
        let unknown = || format!("unknown key {key:?}");
        let rest = key.strip_prefix("cluster.").ok_or_else(unknown)?;
        let (name, field) = rest.rsplit_once('.').ok_or_else(unknown)?;
        let id = self
            .extraction
            .palette
            .iter()
            .find(|l| l.name == name)
            .map(|l| l.id)
            .ok_or_else(|| format!("unknown label {name:?} in {key:?}"))?;
        let current = self.extraction.cluster_params(id).unwrap_or(ClusterParams {
            eps: 1.0,
            min_pts: 10,
        });
        match field {
            "eps" => {
                let p = ClusterParams {
                    eps: parse_num(v)?,
                    ..current
                };
                self.extraction.cluster.insert(id, p);
            }
            "min_pts" => {
                let p = ClusterParams {
                    min_pts: parse_num(v)?,
                    ..current
                };
                self.extraction.cluster.insert(id, p);
            }
            "prior" => {
                let prior = if v == "none" {
                    None
                } else {
                    let c = parse_list(v, 3)?;
                    Some(SizePrior {
                        length: c[0],
                        width: c[1],
                        slack: c[2],
                    })
                };
                self.extraction.priors.insert(id, prior);
            }
            "shape" => {
                let s = ShapeKind::parse(v).ok_or_else(|| format!("unknown shape {v:?}"))?;
                self.extraction.shapes.insert(id, s);
            }
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.sensor.validate().map_err(|e| invalid(e.to_string()))?;
        self.noise_schedule().map_err(|e| invalid(e.to_string()))?;
        if !(self.sampler.step_size > 0.0 && self.sampler.step_size.is_finite()) {
            return Err(invalid("sampler.step_size must be positive".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) || self.train.batch_size == 0 {
            return Err(invalid(
                "train.lr and train.batch_size must be positive".into(),
            ));
        }
        for p in self.extraction.cluster.values() {
            p.validate().map_err(|e| invalid(e.to_string()))?;
        }
        for p in self.extraction.priors.values().flatten() {
            p.validate().map_err(|e| invalid(e.to_string()))?;
        }
        if !self.extraction.viewpoint.is_finite() {
            return Err(invalid("extraction.viewpoint must be finite".into()));
        }
        let r = &self.raydrop;
        if [r.p0, r.p1, r.p2].iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("raydrop probabilities must lie in [0, 1]".into()));
        }
        self.scene.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, ScoreError> {
        let s = &self.schedule;
        NoiseSchedule::geometric(s.sigma_max, s.sigma_min, s.levels)
    }

    /// Architecture for images of `rows x cols`.
    pub fn model_config(&self, rows: usize, cols: usize) -> ModelConfig {
        ModelConfig {
            rows,
            cols,
            ..self.model.clone()
        }
    }

    /// Every key with its current value; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.sensor;
        let w = &mut out;
        let _ = writeln!(w, "sensor.rows = {}", s.rows);
        let _ = writeln!(w, "sensor.cols = {}", s.cols);
        let _ = writeln!(w, "sensor.pitch_max_deg = {}", s.pitch_max.to_degrees());
        let _ = writeln!(w, "sensor.pitch_min_deg = {}", s.pitch_min.to_degrees());
        let _ = writeln!(w, "sensor.max_range = {}", s.max_range);
        let _ = writeln!(w, "sensor.origin_height = {}", s.origin_height);
        let _ = writeln!(w, "schedule.sigma_max = {}", self.schedule.sigma_max);
        let _ = writeln!(w, "schedule.sigma_min = {}", self.schedule.sigma_min);
        let _ = writeln!(w, "schedule.levels = {}", self.schedule.levels);
        let _ = writeln!(w, "sampler.step_size = {}", self.sampler.step_size);
        let _ = writeln!(
            w,
            "sampler.steps_per_level = {}",
            self.sampler.steps_per_level
        );
        let t = &self.train;
        let _ = writeln!(w, "train.steps = {}", t.steps);
        let _ = writeln!(w, "train.lr = {}", t.lr);
        let _ = writeln!(w, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(w, "train.seed = {}", t.seed);
        let _ = writeln!(w, "train.phase_a_steps = {}", t.phase_a_steps);
        let _ = writeln!(w, "train.checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(w, "train.log_every = {}", t.log_every);
        let m = &self.model;
        let widths: Vec<String> = m.widths.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(w, "model.widths = {}", widths.join(","));
        let _ = writeln!(w, "model.blocks_per_level = {}", m.blocks_per_level);
        let _ = writeln!(w, "model.emb_dim = {}", m.emb_dim);
        let _ = writeln!(w, "model.freq_count = {}", m.freq_count);
        for label in &self.extraction.palette {
            if let Some(p) = self.extraction.cluster_params(label.id) {
                let _ = writeln!(w, "cluster.{}.eps = {}", label.name, p.eps);
                let _ = writeln!(w, "cluster.{}.min_pts = {}", label.name, p.min_pts);
            }
            match self.extraction.size_prior(label.id) {
                Some(p) => {
                    let _ = writeln!(
                        w,
                        "cluster.{}.prior = {},{},{}",
                        label.name, p.length, p.width, p.slack
                    );
                }
                None => {
                    let _ = writeln!(w, "cluster.{}.prior = none", label.name);
                }
            }
            let _ = writeln!(
                w,
                "cluster.{}.shape = {}",
                label.name,
                self.extraction.shape(label.id).as_str()
            );
        }
        let _ = writeln!(w, "raydrop.p0 = {}", self.raydrop.p0);
        let _ = writeln!(w, "raydrop.p1 = {}", self.raydrop.p1);
        let _ = writeln!(w, "raydrop.p2 = {}", self.raydrop.p2);
        let _ = writeln!(w, "raydrop.seed = {}", self.raydrop_seed);
        let _ = writeln!(w, "scene.car_x_min = {}", self.scene.car_x.0);
        let _ = writeln!(w, "scene.car_x_max = {}", self.scene.car_x.1);
        let v = self.extraction.viewpoint;
        let _ = writeln!(w, "extraction.viewpoint = {},{},{}", v.x, v.y, v.z);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{CAR, VEGETATION};

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back.sensor.rows, c.sensor.rows);
        assert!((back.sensor.pitch_min - c.sensor.pitch_min).abs() < 1e-12);
        assert_eq!(back.train, c.train);
        assert_eq!(back.model, c.model);
        assert_eq!(back.raydrop, c.raydrop);
        assert_eq!(back.scene, c.scene);
        for id in 0..5 {
            assert_eq!(
                back.extraction.cluster_params(id),
                c.extraction.cluster_params(id)
            );
            assert_eq!(back.extraction.shape(id), c.extraction.shape(id));
            assert_eq!(back.extraction.size_prior(id), c.extraction.size_prior(id));
        }
        assert_eq!(back.extraction.viewpoint, c.extraction.viewpoint);
    }

    #[test]
    fn overrides_and_comments() {
        let c = Config::parse(
            "# desk\nsensor.rows = 16 # beams\nsensor.cols=128\n\ncluster.car.eps = 0.6\nmodel.widths = 8, 8\n",
        )
        .unwrap();
        assert_eq!((c.sensor.rows, c.sensor.cols), (16, 128));
        assert_eq!(c.model.widths, vec![8, 8]);
        let car = c.extraction.cluster_params(CAR).unwrap();
        assert_eq!((car.eps, car.min_pts), (0.6, 10));
        assert_eq!(c.model_config(16, 128).rows, 16);
        let near = Config::parse("scene.car_x_min = -12\nscene.car_x_max = 12").unwrap();
        assert_eq!(near.scene.car_x, (-12.0, 12.0));
        assert!(Config::parse("scene.car_x_min = 50").is_err());
        let e = Config::parse(
            "cluster.car.prior = none\ncluster.vegetation.prior = 3,3,0.5\nextraction.viewpoint = 1,2,0",
        )
        .unwrap();
        assert_eq!(e.extraction.size_prior(CAR), None);
        assert_eq!(
            e.extraction.size_prior(VEGETATION).map(|p| p.width),
            Some(3.0)
        );
        assert_eq!(e.extraction.viewpoint, Point3::new(1.0, 2.0, 0.0));
        let back = Config::parse(&e.to_text()).unwrap();
        assert_eq!(back.extraction.size_prior(CAR), None);
        assert_eq!(back.extraction.viewpoint, e.extraction.viewpoint);
    }

    #[test]
    fn rejects_bad_input() {
        for (text, line) in [
            ("sensor.rows = 4\nbogus.key = 1", 2),
            ("train.lr = fast", 1),
            ("no equals sign", 1),
            ("cluster.spaceship.eps = 1", 1),
            ("cluster.car.radius = 1", 1),
            ("cluster.car.prior = 4,2", 1),
            ("extraction.viewpoint = 0,0", 1),
        ] {
            match Config::parse(text) {
                Err(ConfigError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(
            Config::parse("schedule.levels = 0"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::parse("cluster.car.eps = -1"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::parse("cluster.car.prior = 1,2,0"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::parse("raydrop.p0 = 2"),
            Err(ConfigError::Invalid(_))
        ));
    }
}
