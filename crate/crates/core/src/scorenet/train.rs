//! Denoising score-matching losses, Adam training and gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::autodiff::{Scalar, Tape, Tensor};
use super::model::{ModelConfig, ParamGroup, ParamStore, ScoreModel};
use super::{NoiseSchedule, ScoreError};

/// One clean training image with its optional condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub x: Tensor<f32>,
    pub cond: Option<Tensor<f32>>,
}

/// A clean image with a fixed noise draw: the network sees `x + sigma * z`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyExample<T> {
    pub x: Tensor<T>,
    pub cond: Option<Tensor<T>>,
    pub sigma: f64,
    pub z: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    /// Mean per-example loss.
    pub loss: f64,
    /// Gradient per parameter id; empty for parameters outside the mask.
    pub grads: Vec<Vec<T>>,
}

/// `0.5 * sigma^2 * |score + (x_noisy - x) / sigma^2|^2` for one example.
pub fn score_matching_term(score: &[f64], x_noisy: &[f64], x: &[f64], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    0.5 * s2
        * score
            .iter()
            .zip(x_noisy.iter().zip(x))
            .map(|(s, (xn, x0))| (s + (xn - x0) / s2).powi(2))
            .sum::<f64>()
}

/// Loss of one example. With `S = F / sigma` and `x_noisy - x = sigma z`, the
/// score-matching term reduces to `0.5 |F + z|^2`.
fn example_loss<T: Scalar>(
    model: &ScoreModel<T>,
    ex: &NoisyExample<T>,
    mask: &[bool],
    weight: f64,
    grads: Option<&mut [Vec<T>]>,
) -> Result<f64, ScoreError> {
    let sigma = T::from_f64(ex.sigma);
    let noisy = Tensor::from_vec(
        ex.x.c,
        ex.x.h,
        ex.x.w,
        ex.x.data
            .iter()
            .zip(&ex.z.data)
            .map(|(x, z)| *x + sigma * *z)
            .collect(),
    );
    let mut tape = Tape::new(mask);
    let out = model.forward_on(&mut tape, &noisy, ex.sigma, ex.cond.as_ref())?;
    let f = tape.value(out);
    let resid: Vec<T> = f
        .data
        .iter()
        .zip(&ex.z.data)
        .map(|(a, b)| *a + *b)
        .collect();
    let loss = 0.5 * resid.iter().map(|r| r.to_f64().powi(2)).sum::<f64>();
    if let Some(grads) = grads {
        let w = T::from_f64(weight);
        tape.backward(out, resid.into_iter().map(|r| r * w).collect(), grads);
    }
    Ok(loss)
}

fn empty_grads<T: Scalar>(params: &ParamStore<T>, mask: &[bool]) -> Vec<Vec<T>> {
    params
        .tensors
        .iter()
        .zip(mask)
        .map(|(t, &m)| {
            if m {
                vec![T::ZERO; t.len()]
            } else {
                Vec::new()
            }
        })
        .collect()
}

/// Mean loss and gradients over `examples`; per-example gradients are summed
/// in index order so the result does not depend on scheduling.
pub fn batch_loss<T: Scalar>(
    model: &ScoreModel<T>,
    examples: &[NoisyExample<T>],
    mask: &[bool],
) -> Result<LossOutput<T>, ScoreError> {
    if examples.is_empty() {
        return Err(ScoreError::EmptyDataset);
    }
    let weight = 1.0 / examples.len() as f64;
    type Part<T> = Result<(f64, Vec<Vec<T>>), ScoreError>;
    let parts: Vec<Part<T>> = examples
        .par_iter()
        .map(|ex| {
            let mut g = empty_grads(&model.params, mask);
            let l = example_loss(model, ex, mask, weight, Some(&mut g))?;
            Ok((l, g))
        })
        .collect();
    let mut acc: Vec<Vec<f64>> = model
        .params
        .tensors
        .iter()
        .zip(mask)
        .map(|(t, &m)| if m { vec![0.0; t.len()] } else { Vec::new() })
        .collect();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, gi) in acc.iter_mut().zip(&g) {
            a.iter_mut().zip(gi).for_each(|(a, v)| *a += v.to_f64());
        }
    }
    Ok(LossOutput {
        loss: loss * weight,
        grads: acc
            .into_iter()
            .map(|a| a.into_iter().map(T::from_f64).collect())
            .collect(),
    })
}

fn gaussian(rng: &mut ChaCha8Rng, like: &Tensor<f32>) -> Tensor<f32> {
    Tensor::from_vec(
        like.c,
        like.h,
        like.w,
        (0..like.len())
            .map(|_| StandardNormal.sample(rng))
            .collect(),
    )
}

/// Draws a uniform level and Gaussian noise per image, in batch order.
pub fn draw_noise(
    batch: &[(&Tensor<f32>, Option<&Tensor<f32>>)],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Vec<NoisyExample<f32>> {
    batch
        .iter()
        .map(|(x, c)| {
            let level = rng.random_range(0..schedule.levels());
            NoisyExample {
                x: (*x).clone(),
                cond: c.cloned(),
                sigma: schedule.sigma(level),
                z: gaussian(rng, x),
            }
        })
        .collect()
}

/// Unconditional multi-scale loss; gradients for base parameters.
pub fn loss_uncond(
    model: &ScoreModel<f32>,
    batch: &[Tensor<f32>],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutput<f32>, ScoreError> {
    let pairs: Vec<_> = batch.iter().map(|x| (x, None)).collect();
    let ex = draw_noise(&pairs, schedule, rng);
    batch_loss(model, &ex, &model.mask(&[ParamGroup::Base]))
}

/// Conditional loss; gradients for adapter and fusion parameters only.
pub fn loss_cond(
    model: &ScoreModel<f32>,
    batch: &[(Tensor<f32>, Tensor<f32>)],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutput<f32>, ScoreError> {
    if !model.has_adapter() {
        return Err(ScoreError::NoAdapter);
    }
    let pairs: Vec<_> = batch.iter().map(|(x, c)| (x, Some(c))).collect();
    let ex = draw_noise(&pairs, schedule, rng);
    batch_loss(
        model,
        &ex,
        &model.mask(&[ParamGroup::Adapter, ParamGroup::Fusion]),
    )
}

/// Which parameters a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Stage one: base network, no condition.
    Unconditional,
    /// Stage two, first part: fusion layers only.
    FusionOnly,
    /// Stage two, second part: adapter and fusion layers.
    AdapterAndFusion,
}

impl Phase {
    pub fn groups(self) -> &'static [ParamGroup] {
        match self {
            Phase::Unconditional => &[ParamGroup::Base],
            Phase::FusionOnly => &[ParamGroup::Fusion],
            Phase::AdapterAndFusion => &[ParamGroup::Adapter, ParamGroup::Fusion],
        }
    }

    pub fn is_conditional(self) -> bool {
        self != Phase::Unconditional
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub phase: Phase,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            phase: Phase::Unconditional,
        }
    }
}

/// Adam moments per parameter, with per-parameter step counts so parameters
/// that join training late get proper bias correction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn for_params(params: &ParamStore<f32>) -> Self {
        let mut s = Self::default();
        s.sync(params);
        s
    }

    /// Matches moment buffers to the current parameter list (new parameters start at zero).
    pub fn sync(&mut self, params: &ParamStore<f32>) {
        let n = params.len();
        self.m.truncate(n);
        self.v.truncate(n);
        self.t.truncate(n);
        for i in self.m.len()..n {
            let len = params.tensors[i].len();
            self.m.push(vec![0.0; len]);
            self.v.push(vec![0.0; len]);
            self.t.push(0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ScoreModel<f32>,
    pub schedule: NoiseSchedule,
    pub adam: AdamState,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: ScoreModel<f32>, schedule: NoiseSchedule, seed: u64) -> Self {
        let adam = AdamState::for_params(&model.params);
        Self {
            model,
            schedule,
            adam,
            step: 0,
            seed,
        }
    }

    pub fn attach_adapter(&mut self, seed: u64) {
        self.model.attach_adapter(seed);
        self.adam.sync(&self.model.params);
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub losses: Vec<f64>,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Runs `config.steps` Adam steps. The batch and noise of step `k` depend only
/// on `(state.seed, k)`. `observer` sees the global step and loss after each update.
pub fn train(
    mut state: TrainState,
    data: &[TrainExample],
    config: &TrainConfig,
    mut observer: impl FnMut(u64, f64, &TrainState),
) -> Result<TrainRun, ScoreError> {
    if config.steps == 0 {
        return Ok(TrainRun {
            state,
            losses: Vec::new(),
        });
    }
    if data.is_empty() || config.batch_size == 0 {
        return Err(ScoreError::EmptyDataset);
    }
    if config.phase.is_conditional() {
        if !state.model.has_adapter() {
            return Err(ScoreError::NoAdapter);
        }
        if data.iter().any(|d| d.cond.is_none()) {
            return Err(ScoreError::MissingCondition);
        }
    }
    state.adam.sync(&state.model.params);
    let mask = state.model.mask(config.phase.groups());
    let mut losses = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(state.seed, state.step));
        let picks: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let batch: Vec<_> = picks
            .iter()
            .map(|&i| {
                let d = &data[i];
                (
                    &d.x,
                    if config.phase.is_conditional() {
                        d.cond.as_ref()
                    } else {
                        None
                    },
                )
            })
            .collect();
        let examples = draw_noise(&batch, &state.schedule, &mut rng);
        let out = batch_loss(&state.model, &examples, &mask)?;
        let finite =
            out.loss.is_finite() && out.grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(ScoreError::Diverged {
                step: state.step,
                last_good: Box::new(state),
            });
        }
        adam_update(&mut state, &out.grads, &mask, config);
        state.step += 1;
        losses.push(out.loss);
        observer(state.step, out.loss, &state);
    }
    Ok(TrainRun { state, losses })
}

fn adam_update(state: &mut TrainState, grads: &[Vec<f32>], mask: &[bool], cfg: &TrainConfig) {
    for (i, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        state.adam.t[i] += 1;
        let t = state.adam.t[i] as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let p = &mut state.model.params.tensors[i].data;
        let (m, v) = (&mut state.adam.m[i], &mut state.adam.v[i]);
        for j in 0..p.len() {
            let g = grads[i][j] as f64;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = cfg.lr * (mj / c1) / ((vj / c2).sqrt() + cfg.adam_eps);
            p[j] = (p[j] as f64 - update) as f32;
        }
    }
}

/// Reverse-mode vs. central-difference agreement.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest per-tensor error `|a - n| / max(|a|, |n|, 1e-8)` in the L2 norm.
    pub max_rel: f64,
    /// Name of the tensor attaining `max_rel`.
    pub worst: String,
    /// Largest elementwise error with the same formula.
    pub max_scalar_rel: f64,
}

fn rel_err(a: f64, n: f64, diff: f64) -> f64 {
    diff / a.max(n).max(1e-8)
}

/// Compares gradients of the mean loss over `examples` against central
/// differences with step `eps`, for every scalar of every named parameter.
pub fn finite_diff_check(
    model: &ScoreModel<f64>,
    examples: &[NoisyExample<f64>],
    eps: f64,
) -> Result<GradCheck, ScoreError> {
    let mask = vec![true; model.params.len()];
    let analytic = batch_loss(model, examples, &mask)?;
    let frozen = vec![false; model.params.len()];
    let eval = |m: &ScoreModel<f64>| -> Result<f64, ScoreError> {
        let mut total = 0.0;
        for ex in examples {
            total += example_loss(m, ex, &frozen, 0.0, None)?;
        }
        Ok(total / examples.len() as f64)
    };
    let mut probe = model.clone();
    let mut report = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        max_scalar_rel: 0.0,
    };
    for i in 0..model.params.len() {
        let (mut aa, mut nn, mut dd) = (0.0, 0.0, 0.0);
        for j in 0..model.params.tensors[i].len() {
            let orig = probe.params.tensors[i].data[j];
            probe.params.tensors[i].data[j] = orig + eps;
            let up = eval(&probe)?;
            probe.params.tensors[i].data[j] = orig - eps;
            let down = eval(&probe)?;
            probe.params.tensors[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.grads[i][j];
            report.max_scalar_rel =
                report
                    .max_scalar_rel
                    .max(rel_err(a.abs(), numeric.abs(), (a - numeric).abs()));
            aa += a * a;
            nn += numeric * numeric;
            dd += (a - numeric).powi(2);
        }
        let rel = rel_err(aa.sqrt(), nn.sqrt(), dd.sqrt());
        if rel > report.max_rel || report.worst.is_empty() {
            report.max_rel = rel;
            report.worst = model.params.names[i].clone();
        }
    }
    Ok(report)
}

/// A randomized model and two fixed noisy inputs for [`finite_diff_check`].
/// Every parameter, including zero-initialized ones, gets a uniform offset so
/// all paths carry gradient. Hidden offsets are large so normalized layers stay
/// well conditioned; the output layer and noise are small so the loss, and its
/// rounding error, stay small.
pub fn gradient_check_case(
    config: ModelConfig,
    with_adapter: bool,
    seed: u64,
) -> Result<(ScoreModel<f64>, Vec<NoisyExample<f64>>), ScoreError> {
    let mut model = ScoreModel::<f64>::new(config, seed)?;
    if with_adapter {
        model.attach_adapter(seed.wrapping_add(1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params.names.iter().zip(&mut model.params.tensors) {
        let r = if name.starts_with("out.conv") {
            0.1
        } else {
            1.0
        };
        t.data
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-r..r));
    }
    let c = &model.config;
    let (rows, cols) = (c.rows, c.cols);
    let n = c.in_channels * rows * cols;
    let examples = [0.5, 0.08]
        .iter()
        .enumerate()
        .map(|(k, &sigma)| {
            let x = (0..n)
                .map(|i| {
                    0.5 + 0.3
                        * (0.7 * (i % cols) as f64 + k as f64).sin()
                        * (0.3 * (i / cols) as f64).cos()
                })
                .collect();
            let z = (0..n)
                .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let cond = with_adapter.then(|| {
                let d = (0..c.cond_channels * rows * cols)
                    .map(|_| rng.random_range(0.0..1.0))
                    .collect();
                Tensor::from_vec(c.cond_channels, rows, cols, d)
            });
            NoisyExample {
                x: Tensor::from_vec(c.in_channels, rows, cols, x),
                cond,
                sigma,
                z: Tensor::from_vec(c.in_channels, rows, cols, z),
            }
        })
        .collect();
    Ok((model, examples))
}
