//! `LDCK` checkpoint files: named f32 tensors followed by a key=value block.
//!
//! Layout: magic `LDCK`, u32 version, u32 tensor count; per tensor a u16 name
//! length, the UTF-8 name, u8 ndim, ndim u32 dims and little-endian f32 data;
//! then a u32 byte length and the UTF-8 metadata text. Adam moments are stored
//! as tensors named `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::autodiff::Tensor;
use super::model::{ModelConfig, ScoreModel};
use super::train::{AdamState, TrainState};
use super::NoiseSchedule;
use crate::sensor::SensorSpec;

pub const MAGIC: &[u8; 4] = b"LDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has {found} values, expected {expected}")]
    Shape {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A training state plus the sensor it was trained for, if recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub sensor: Option<SensorSpec>,
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn metadata(ck: &Checkpoint) -> String {
    let s = &ck.state;
    let c = &s.model.config;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
    kv("model.in_channels", c.in_channels.to_string());
    kv("model.cond_channels", c.cond_channels.to_string());
    kv("model.widths", join(&c.widths));
    kv("model.blocks_per_level", c.blocks_per_level.to_string());
    kv("model.emb_dim", c.emb_dim.to_string());
    kv("model.freq_count", c.freq_count.to_string());
    kv("model.rows", c.rows.to_string());
    kv("model.cols", c.cols.to_string());
    kv("model.adapter", s.model.has_adapter().to_string());
    kv("schedule.sigmas", join(s.schedule.sigmas()));
    kv("train.step", s.step.to_string());
    kv("train.seed", s.seed.to_string());
    kv("adam.t", join(&s.adam.t));
    if let Some(sp) = &ck.sensor {
        kv("sensor.rows", sp.rows.to_string());
        kv("sensor.cols", sp.cols.to_string());
        kv("sensor.pitch_max", sp.pitch_max.to_string());
        kv("sensor.pitch_min", sp.pitch_min.to_string());
        kv("sensor.max_range", sp.max_range.to_string());
        kv("sensor.origin_height", sp.origin_height.to_string());
    }
    out
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<(), CheckpointError> {
    let len = u16::try_from(name.len())
        .map_err(|_| CheckpointError::Metadata(format!("name too long: {name}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[3u8])?;
    for d in [t.c, t.h, t.w] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.len());
    t.data
        .iter()
        .for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let s = &ck.state;
    let p = &s.model.params;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&((3 * p.len()) as u32).to_le_bytes())?;
    for (name, t) in p.names.iter().zip(&p.tensors) {
        write_tensor(&mut w, name, t)?;
    }
    let empty = |i: usize| vec![0.0f32; p.tensors[i].len()];
    for (prefix, moments) in [("adam.m/", &s.adam.m), ("adam.v/", &s.adam.v)] {
        for (i, name) in p.names.iter().enumerate() {
            let t = &p.tensors[i];
            let data = moments.get(i).cloned().unwrap_or_else(|| empty(i));
            write_tensor(
                &mut w,
                &format!("{prefix}{name}"),
                &Tensor::from_vec(t.c, t.h, t.w, data),
            )?;
        }
    }
    let meta = metadata(ck);
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CheckpointError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CheckpointError::Metadata(format!("bad value for {key}: {v}")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(
    meta: &BTreeMap<String, String>,
    key: &str,
) -> Result<T, CheckpointError> {
    let v = meta
        .get(key)
        .ok_or_else(|| CheckpointError::Metadata(format!("missing key {key}")))?;
    v.parse()
        .map_err(|_| CheckpointError::Metadata(format!("bad value for {key}: {v}")))
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>, CheckpointError> {
    const KNOWN: &[&str] = &[
        "model.in_channels",
        "model.cond_channels",
        "model.widths",
        "model.blocks_per_level",
        "model.emb_dim",
        "model.freq_count",
        "model.rows",
        "model.cols",
        "model.adapter",
        "schedule.sigmas",
        "train.step",
        "train.seed",
        "adam.t",
        "sensor.rows",
        "sensor.cols",
        "sensor.pitch_max",
        "sensor.pitch_min",
        "sensor.max_range",
        "sensor.origin_height",
    ];
    let mut out = BTreeMap::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CheckpointError::Metadata(format!("expected key=value, got {line:?}"))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KNOWN.contains(&k) {
            return Err(CheckpointError::Metadata(format!("unknown key {k}")));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = cur.u32()? as usize;
    let mut tensors: Vec<(String, Vec<f32>)> = Vec::new();
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| CheckpointError::Metadata("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let mut n = 1usize;
        for _ in 0..ndim {
            n = n
                .checked_mul(cur.u32()? as usize)
                .ok_or(CheckpointError::Truncated)?;
        }
        let bytes = cur.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, data));
    }
    let meta_len = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(meta_len)?)
        .map_err(|_| CheckpointError::Metadata("metadata is not UTF-8".into()))?;
    let meta = parse_meta(text)?;

    let config = ModelConfig {
        in_channels: parse_one(&meta, "model.in_channels")?,
        cond_channels: parse_one(&meta, "model.cond_channels")?,
        widths: parse_list("model.widths", meta.get("model.widths").map_or("", |s| s))?,
        blocks_per_level: parse_one(&meta, "model.blocks_per_level")?,
        emb_dim: parse_one(&meta, "model.emb_dim")?,
        freq_count: parse_one(&meta, "model.freq_count")?,
        rows: parse_one(&meta, "model.rows")?,
        cols: parse_one(&meta, "model.cols")?,
    };
    let adapter: bool = parse_one(&meta, "model.adapter")?;
    let mut model = ScoreModel::<f32>::skeleton(config, adapter)
        .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let schedule = NoiseSchedule::from_sigmas(parse_list(
        "schedule.sigmas",
        meta.get("schedule.sigmas").map_or("", |s| s),
    )?)
    .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let mut adam = AdamState::for_params(&model.params);
    adam.t = parse_list("adam.t", meta.get("adam.t").map_or("", |s| s))?;
    if adam.t.len() != model.params.len() {
        return Err(CheckpointError::Metadata(format!(
            "adam.t has {} entries for {} parameters",
            adam.t.len(),
            model.params.len()
        )));
    }

    let mut seen = vec![[false; 3]; model.params.len()];
    for (name, data) in tensors {
        let (slot, base) = match name.split_once('/') {
            Some(("adam.m", rest)) => (1, rest),
            Some(("adam.v", rest)) => (2, rest),
            _ => (0, name.as_str()),
        };
        let id = model
            .params
            .id(base)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
        let expected = model.params.tensors[id].len();
        if data.len() != expected {
            return Err(CheckpointError::Shape {
                name,
                expected,
                found: data.len(),
            });
        }
        match slot {
            0 => model.params.tensors[id].data = data,
            1 => adam.m[id] = data,
            _ => adam.v[id] = data,
        }
        seen[id][slot] = true;
    }
    for (id, s) in seen.iter().enumerate() {
        for (slot, prefix) in ["", "adam.m/", "adam.v/"].iter().enumerate() {
            if !s[slot] {
                return Err(CheckpointError::MissingTensor(format!(
                    "{prefix}{}",
                    model.params.names[id]
                )));
            }
        }
    }

    let sensor = if meta.contains_key("sensor.rows") {
        let sp = SensorSpec {
            rows: parse_one(&meta, "sensor.rows")?,
            cols: parse_one(&meta, "sensor.cols")?,
            pitch_max: parse_one(&meta, "sensor.pitch_max")?,
            pitch_min: parse_one(&meta, "sensor.pitch_min")?,
            max_range: parse_one(&meta, "sensor.max_range")?,
            origin_height: parse_one(&meta, "sensor.origin_height")?,
        };
        sp.validate()
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        Some(sp)
    } else {
        None
    };
    Ok(Checkpoint {
        state: TrainState {
            model,
            schedule,
            adam,
            step: parse_one(&meta, "train.step")?,
            seed: parse_one(&meta, "train.seed")?,
        },
        sensor,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ck)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(fs::File::open(path)?)
}
