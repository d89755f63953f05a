//! U-Net score network with an optional ControlNet-style adapter.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::autodiff::{NodeId, Scalar, Tape, Tensor};
use super::ScoreError;

/// Architecture hyper-parameters; fixed once a model is built.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub cond_channels: usize,
    /// Channel width per resolution level; each level after the first halves the image.
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub emb_dim: usize,
    /// Number of sinusoid frequencies applied to `ln(sigma)`.
    pub freq_count: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            cond_channels: 2,
            widths: vec![16, 16, 32, 32],
            blocks_per_level: 2,
            emb_dim: 64,
            freq_count: 16,
            rows: 16,
            cols: 128,
        }
    }
}

/// Up to four norm groups, each spanning at least two channels when possible.
pub(crate) fn groups_for(channels: usize) -> usize {
    (channels / 2).clamp(1, 4)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let bad = |m: String| Err(ScoreError::InvalidConfig(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be a non-empty list of positive values".into());
        }
        if let Some(&w) = self.widths.iter().find(|&&w| w % groups_for(w) != 0) {
            return bad(format!(
                "width {w} is not divisible into {} norm groups",
                groups_for(w)
            ));
        }
        if self.in_channels == 0 || self.cond_channels == 0 || self.blocks_per_level == 0 {
            return bad("channel and block counts must be positive".into());
        }
        if self.emb_dim == 0 || self.freq_count == 0 {
            return bad("embedding sizes must be positive".into());
        }
        let factor = 1usize << (self.widths.len() - 1);
        if self.rows == 0
            || self.cols == 0
            || !self.rows.is_multiple_of(factor)
            || !self.cols.is_multiple_of(factor)
        {
            return bad(format!(
                "image {}x{} must be a positive multiple of {factor} for {} levels",
                self.rows,
                self.cols,
                self.widths.len()
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn skip_count(&self) -> usize {
        self.widths.len() * self.blocks_per_level
    }
}

/// Role of a parameter, used to pick what a training phase may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    /// Adapter encoder copy and condition-hint projection.
    Adapter,
    /// Zero-initialized fusion convolutions.
    Fusion,
}

impl ParamGroup {
    pub fn of_name(name: &str) -> ParamGroup {
        if name.starts_with("ctrl.fuse.") {
            ParamGroup::Fusion
        } else if name.starts_with("ctrl.") {
            ParamGroup::Adapter
        } else {
            ParamGroup::Base
        }
    }
}

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    fn add(&mut self, name: String, t: Tensor<T>) -> usize {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn group(&self, id: usize) -> ParamGroup {
        ParamGroup::of_name(&self.names[id])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// FNV-1a over names and value bits of the parameters in `group`.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (i, name) in self.names.iter().enumerate() {
            if self.group(i) != group {
                continue;
            }
            eat(name.as_bytes());
            for v in &self.tensors[i].data {
                eat(&v.to_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zero,
    One,
    /// Uniform with variance `gain^2 / fan_in`.
    Fan(f64),
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<T: Scalar> Builder<'_, T> {
    fn tensor(
        &mut self,
        name: &str,
        shape: (usize, usize, usize),
        fan_in: usize,
        init: Init,
    ) -> usize {
        let n = shape.0 * shape.1 * shape.2;
        let data = match init {
            Init::Zero => vec![T::ZERO; n],
            Init::One => vec![T::ONE; n],
            Init::Fan(gain) => {
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64(self.rng.random_range(-bound..=bound)))
                    .collect()
            }
        };
        let full = format!("{}{}", self.prefix, name);
        self.store
            .add(full, Tensor::from_vec(shape.0, shape.1, shape.2, data))
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Conv {
        let w = self.tensor(&format!("{name}.w"), (cout, cin, k * k), cin * k * k, init);
        let b = self.tensor(&format!("{name}.b"), (cout, 1, 1), 1, Init::Zero);
        Conv { w, b, k, stride }
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize, init: Init) -> Linear {
        let w = self.tensor(&format!("{name}.w"), (n_out, n_in, 1), n_in, init);
        let b = self.tensor(&format!("{name}.b"), (n_out, 1, 1), 1, Init::Zero);
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let g = self.tensor(&format!("{name}.g"), (c, 1, 1), 1, Init::One);
        let b = self.tensor(&format!("{name}.b"), (c, 1, 1), 1, Init::Zero);
        Norm {
            g,
            b,
            groups: groups_for(c),
        }
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, Init::Fan(1.0)),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            film: self.linear(&format!("{name}.film"), emb, 2 * cout, Init::Fan(0.1)),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, Init::Zero),
            skip: (cin != cout)
                .then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, Init::Fan(1.0))),
        }
    }

    fn encoder(&mut self, cfg: &ModelConfig) -> Encoder {
        let conv_in = self.conv(
            "conv_in",
            cfg.in_channels,
            cfg.widths[0],
            3,
            1,
            Init::Fan(1.0),
        );
        let embed = Embed {
            l1: self.linear("emb.l1", 2 * cfg.freq_count, cfg.emb_dim, Init::Fan(1.0)),
            l2: self.linear("emb.l2", cfg.emb_dim, cfg.emb_dim, Init::Fan(1.0)),
        };
        let mut levels = Vec::new();
        let mut cur = cfg.widths[0];
        for (l, &w) in cfg.widths.iter().enumerate() {
            let blocks = (0..cfg.blocks_per_level)
                .map(|j| {
                    let b = self.resblock(&format!("enc.{l}.{j}"), cur, w, cfg.emb_dim);
                    cur = w;
                    b
                })
                .collect();
            let down = (l + 1 < cfg.levels())
                .then(|| self.conv(&format!("enc.{l}.down"), w, w, 3, 2, Init::Fan(1.0)));
            levels.push(EncoderLevel { blocks, down });
        }
        Encoder {
            conv_in,
            embed,
            levels,
        }
    }

    fn decoder(&mut self, cfg: &ModelConfig) -> Decoder {
        let mut levels = Vec::new();
        let mut cur = *cfg.widths.last().unwrap();
        for l in (0..cfg.levels()).rev() {
            let w = cfg.widths[l];
            let blocks = (0..cfg.blocks_per_level)
                .map(|j| {
                    let b = self.resblock(&format!("dec.{l}.{j}"), cur + w, w, cfg.emb_dim);
                    cur = w;
                    b
                })
                .collect();
            let up = (l > 0).then(|| self.conv(&format!("dec.{l}.up"), w, w, 3, 1, Init::Fan(1.0)));
            levels.push(DecoderLevel { blocks, up });
        }
        Decoder {
            levels,
            out_norm: self.norm("out.norm", cfg.widths[0]),
            conv_out: self.conv("out.conv", cfg.widths[0], cfg.in_channels, 3, 1, Init::Zero),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: usize,
    b: usize,
    k: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    g: usize,
    b: usize,
    groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    norm2: Norm,
    film: Linear,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone, PartialEq)]
struct Embed {
    l1: Linear,
    l2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLevel {
    blocks: Vec<ResBlock>,
    down: Option<Conv>,
}

#[derive(Debug, Clone, PartialEq)]
struct Encoder {
    conv_in: Conv,
    embed: Embed,
    levels: Vec<EncoderLevel>,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLevel {
    blocks: Vec<ResBlock>,
    up: Option<Conv>,
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    levels: Vec<DecoderLevel>,
    out_norm: Norm,
    conv_out: Conv,
}

#[derive(Debug, Clone, PartialEq)]
struct Adapter {
    encoder: Encoder,
    hint: [Conv; 2],
    fuse: Vec<Conv>,
}

/// Score network `S(x, sigma[, cond])`. The network body predicts `F` and the
/// score is `F / sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
    adapter: Option<Adapter>,
}

/// Sinusoidal features of `ln(sigma)`.
pub fn sigma_features(sigma: f64, freq_count: usize) -> Vec<f64> {
    let t = sigma.ln();
    let mut out = Vec::with_capacity(2 * freq_count);
    for k in 0..freq_count {
        let f = if freq_count == 1 {
            1.0
        } else {
            (k as f64 / (freq_count - 1) as f64 * 64f64.ln()).exp()
        };
        out.push((f * t).sin());
    }
    for k in 0..freq_count {
        let f = if freq_count == 1 {
            1.0
        } else {
            (k as f64 / (freq_count - 1) as f64 * 64f64.ln()).exp()
        };
        out.push((f * t).cos());
    }
    out
}

struct Ctx<'t, 'm, T> {
    tape: &'t mut Tape<'m, T>,
    params: &'m ParamStore<T>,
    nodes: HashMap<usize, NodeId>,
}

impl<T: Scalar> Ctx<'_, '_, T> {
    fn p(&mut self, id: usize) -> NodeId {
        if let Some(&n) = self.nodes.get(&id) {
            return n;
        }
        let n = self.tape.param(id, &self.params.tensors[id]);
        self.nodes.insert(id, n);
        n
    }

    fn conv(&mut self, c: &Conv, x: NodeId) -> NodeId {
        let (w, b) = (self.p(c.w), self.p(c.b));
        self.tape.conv(x, w, b, c.k, c.stride)
    }

    fn linear(&mut self, l: &Linear, x: NodeId) -> NodeId {
        let (w, b) = (self.p(l.w), self.p(l.b));
        self.tape.linear(x, w, b)
    }

    fn norm(&mut self, n: &Norm, x: NodeId) -> NodeId {
        let (g, b) = (self.p(n.g), self.p(n.b));
        self.tape.group_norm(x, g, b, n.groups)
    }

    fn resblock(&mut self, r: &ResBlock, x: NodeId, emb: NodeId) -> NodeId {
        let h = self.norm(&r.norm1, x);
        let h = self.tape.silu(h);
        let h = self.conv(&r.conv1, h);
        let h = self.norm(&r.norm2, h);
        let ss = self.linear(&r.film, emb);
        let h = self.tape.film(h, ss);
        let h = self.tape.silu(h);
        let h = self.conv(&r.conv2, h);
        let shortcut = match &r.skip {
            Some(c) => self.conv(c, x),
            None => x,
        };
        self.tape.add(shortcut, h)
    }

    /// Returns the per-block skip activations in creation order.
    fn encode(
        &mut self,
        e: &Encoder,
        x: NodeId,
        features: NodeId,
        extra: Option<NodeId>,
    ) -> Vec<NodeId> {
        let mut h = self.conv(&e.conv_in, x);
        if let Some(extra) = extra {
            h = self.tape.add(h, extra);
        }
        let emb = self.linear(&e.embed.l1, features);
        let emb = self.tape.silu(emb);
        let emb = self.linear(&e.embed.l2, emb);
        let emb = self.tape.silu(emb);
        let mut skips = Vec::new();
        for level in &e.levels {
            for b in &level.blocks {
                h = self.resblock(b, h, emb);
                skips.push(h);
            }
            if let Some(d) = &level.down {
                h = self.conv(d, h);
            }
        }
        skips.push(emb);
        skips
    }
}

impl<T: Scalar> ScoreModel<T> {
    /// Freshly initialized base network without an adapter.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ScoreError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let (encoder, decoder) = {
            let mut b = Builder {
                store: &mut params,
                rng: &mut rng,
                prefix: String::new(),
            };
            (b.encoder(&config), b.decoder(&config))
        };
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            adapter: None,
        })
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    /// Adds a trainable copy of the base encoder plus a hint projection and
    /// zero-initialized fusion layers. Replaces any existing adapter.
    pub fn attach_adapter(&mut self, seed: u64) {
        self.detach_adapter();
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapter = {
            let mut b = Builder {
                store: &mut self.params,
                rng: &mut rng,
                prefix: "ctrl.".into(),
            };
            let encoder = b.encoder(&cfg);
            let w0 = cfg.widths[0];
            let hint = [
                b.conv("hint.0", cfg.cond_channels, w0, 3, 1, Init::Fan(1.0)),
                b.conv("hint.1", w0, w0, 3, 1, Init::Fan(1.0)),
            ];
            let mut fuse = Vec::new();
            for (l, &w) in cfg.widths.iter().enumerate() {
                for j in 0..cfg.blocks_per_level {
                    fuse.push(b.conv(&format!("fuse.{l}.{j}"), w, w, 1, 1, Init::Zero));
                }
            }
            Adapter {
                encoder,
                hint,
                fuse,
            }
        };
        for i in 0..self.params.len() {
            if let Some(base) = self.params.names[i]
                .strip_prefix("ctrl.")
                .and_then(|n| self.params.id(n))
            {
                self.params.tensors[i] = self.params.tensors[base].clone();
            }
        }
        self.adapter = Some(adapter);
    }

    pub fn detach_adapter(&mut self) {
        if self.adapter.take().is_none() {
            return;
        }
        let mut kept = ParamStore::default();
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            if ParamGroup::of_name(name) == ParamGroup::Base {
                kept.add(name.clone(), t.clone());
            }
        }
        self.params = kept;
    }

    pub fn cast<U: Scalar>(&self) -> ScoreModel<U> {
        ScoreModel {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            adapter: self.adapter.clone(),
        }
    }

    /// Trainability mask selecting the given groups.
    pub fn mask(&self, groups: &[ParamGroup]) -> Vec<bool> {
        (0..self.params.len())
            .map(|i| groups.contains(&self.params.group(i)))
            .collect()
    }

    fn check_shape(&self, t: &Tensor<T>, c: usize) -> Result<(), ScoreError> {
        let expected = (c, self.config.rows, self.config.cols);
        if t.shape() != expected {
            return Err(ScoreError::Shape {
                expected,
                found: t.shape(),
            });
        }
        Ok(())
    }

    /// Records the network body on `tape` and returns the node holding `F`
    /// (so that the score is `F / sigma`).
    pub fn forward_on<'m>(
        &'m self,
        tape: &mut Tape<'m, T>,
        x: &Tensor<T>,
        sigma: f64,
        cond: Option<&Tensor<T>>,
    ) -> Result<NodeId, ScoreError> {
        self.check_shape(x, self.config.in_channels)?;
        let adapter = match cond {
            Some(c) => {
                self.check_shape(c, self.config.cond_channels)?;
                Some(self.adapter.as_ref().ok_or(ScoreError::NoAdapter)?)
            }
            None => None,
        };
        let feats: Vec<T> = sigma_features(sigma, self.config.freq_count)
            .into_iter()
            .map(T::from_f64)
            .collect();
        let mut ctx = Ctx {
            tape,
            params: &self.params,
            nodes: HashMap::new(),
        };
        let xi = ctx.tape.input(x.clone());
        let fi = ctx.tape.input(Tensor::vector(feats));
        let mut skips = ctx.encode(&self.encoder, xi, fi, None);
        let emb = skips.pop().unwrap();
        if let (Some(a), Some(c)) = (adapter, cond) {
            let ci = ctx.tape.input(c.clone());
            let h = ctx.conv(&a.hint[0], ci);
            let h = ctx.tape.silu(h);
            let hint = ctx.conv(&a.hint[1], h);
            let mut ctrl = ctx.encode(&a.encoder, xi, fi, Some(hint));
            ctrl.pop();
            for (k, (s, f)) in ctrl.into_iter().zip(&a.fuse).enumerate() {
                let fused = ctx.conv(f, s);
                skips[k] = ctx.tape.add(skips[k], fused);
            }
        }
        let mut h = *skips.last().unwrap();
        for level in &self.decoder.levels {
            for b in &level.blocks {
                let s = skips.pop().unwrap();
                let cat = ctx.tape.concat(h, s);
                h = ctx.resblock(b, cat, emb);
            }
            if let Some(up) = &level.up {
                let u = ctx.tape.upsample(h);
                h = ctx.conv(up, u);
            }
        }
        let h = ctx.norm(&self.decoder.out_norm, h);
        let h = ctx.tape.silu(h);
        Ok(ctx.conv(&self.decoder.conv_out, h))
    }

    /// Network body output `F` without recording gradients.
    pub fn predict(
        &self,
        x: &Tensor<T>,
        sigma: f64,
        cond: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>, ScoreError> {
        let mask: [bool; 0] = [];
        let mut tape = Tape::new(&mask);
        let out = self.forward_on(&mut tape, x, sigma, cond)?;
        Ok(tape.into_value(out))
    }

    /// Score estimate `S(x, sigma[, cond]) = F / sigma`.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        sigma: f64,
        cond: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>, ScoreError> {
        let mut f = self.predict(x, sigma, cond)?;
        let inv = T::from_f64(1.0 / sigma);
        f.data.iter_mut().for_each(|v| *v *= inv);
        Ok(f)
    }

    /// Ids of the fusion layer weights, in skip order.
    pub fn fusion_param_ids(&self) -> Vec<usize> {
        self.adapter
            .as_ref()
            .map(|a| a.fuse.iter().flat_map(|c| [c.w, c.b]).collect())
            .unwrap_or_default()
    }

    /// Builds a skeleton for `config` (with adapter if requested) whose values are
    /// then overwritten by name; used by checkpoint loading.
    pub(crate) fn skeleton(config: ModelConfig, with_adapter: bool) -> Result<Self, ScoreError> {
        let mut m = Self::new(config, 0)?;
        if with_adapter {
            m.attach_adapter(0);
        }
        Ok(m)
    }
}
