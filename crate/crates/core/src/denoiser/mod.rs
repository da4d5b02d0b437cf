//! The toy text-conditioned diffusion model: schedule, network, exact
//! gradients, base training, sampling and attention maps.

pub mod arch;
pub mod net;
pub mod ops;
pub mod params;
pub mod real;
pub mod schedule;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use arch::{Arch, ArchConfig, KvEntry, TensorInfo};
pub use params::DenoiserParams;
pub use real::Real;
pub use schedule::{make_schedule, noisify, NoiseSchedule};

use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{Example, Image, PromptTokens, IMAGE_SIZE};

pub const PIXELS: usize = 3 * IMAGE_SIZE * IMAGE_SIZE;

/// Anything that maps `(x_t, t/T, prompt)` to a clean-image prediction.
pub trait Predictor: Sync {
    fn predict(&self, x_t: &[f32], s: f64, tokens: &PromptTokens) -> Vec<f32>;
}

impl Predictor for DenoiserParams {
    fn predict(&self, x_t: &[f32], s: f64, tokens: &PromptTokens) -> Vec<f32> {
        net::forward::<f32>(&self.arch, &self.values, x_t, s, tokens).0
    }
}

/// One training pair with its sampled timestep and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub x: Vec<f32>,
    pub tokens: PromptTokens,
    pub t: usize,
    pub eps: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

pub(crate) fn normal_vec(rng: &mut rng::Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

impl Batch {
    /// Draws `size` examples with replacement, each with `t ~ U{1..T}` and
    /// standard-normal noise; a pure function of `seed`.
    pub fn sample(examples: &[Example], size: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Batch> {
        if examples.is_empty() {
            return Err(Error::invalid("cannot draw a batch from an empty dataset"));
        }
        let mut rng = rng::stream(seed, 0xba7c);
        let items = (0..size)
            .map(|_| {
                let ex = &examples[rng.gen_range(0..examples.len())];
                let t = rng.gen_range(1..=schedule.steps);
                let eps = normal_vec(&mut rng, PIXELS);
                BatchItem {
                    x: ex.image.data.clone(),
                    tokens: ex.prompt,
                    t,
                    eps,
                }
            })
            .collect();
        Ok(Batch { items })
    }

    fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for it in &self.items {
            if it.x.len() != PIXELS || it.eps.len() != PIXELS {
                return Err(Error::invalid("batch item has the wrong image size"));
            }
            if it.t == 0 || it.t > schedule.steps {
                return Err(Error::invalid(format!("timestep {} outside 1..={}", it.t, schedule.steps)));
            }
        }
        Ok(())
    }
}

/// A loss of the form `Σ_j w_j · diffusion_loss(batch_j)`.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub terms: Vec<(f64, Batch)>,
}

impl LossTerms {
    pub fn single(batch: Batch) -> Self {
        LossTerms {
            terms: vec![(1.0, batch)],
        }
    }
}

fn item_loss(x: &[f32], pred: &[f32], omega: f64) -> f64 {
    omega * x.iter().zip(pred).map(|(&a, &b)| (b as f64 - a as f64).powi(2)).sum::<f64>()
}

/// Mean over the batch of `ω_t ‖x̂ − x‖²`.
pub fn diffusion_loss<P: Predictor + ?Sized>(model: &P, batch: &Batch, schedule: &NoiseSchedule) -> Result<f64> {
    batch.validate(schedule)?;
    let losses: Vec<f64> = batch
        .items
        .par_iter()
        .map(|it| {
            let x_t = schedule::noisify_with(&it.x, &it.eps, schedule.alpha[it.t], schedule.sigma[it.t]);
            let pred = model.predict(&x_t, schedule.fraction(it.t), &it.tokens);
            item_loss(&it.x, &pred, schedule.omega[it.t])
        })
        .collect();
    Ok(losses.iter().sum::<f64>() / batch.items.len() as f64)
}

pub fn weighted_loss<P: Predictor + ?Sized>(model: &P, loss: &LossTerms, schedule: &NoiseSchedule) -> Result<f64> {
    let mut total = 0.0;
    for (w, b) in &loss.terms {
        total += w * diffusion_loss(model, b, schedule)?;
    }
    Ok(total)
}

/// Loss and full-length gradient, with weight gradients only for tensors
/// flagged in `need`. Items run in parallel; the reduction is sequential in
/// item order, so results do not depend on the thread count.
pub fn loss_and_grad<T: Real>(
    arch: &Arch,
    p: &[T],
    loss: &LossTerms,
    schedule: &NoiseSchedule,
    need: &[bool],
) -> Result<(f64, Vec<T>)> {
    let mut jobs = Vec::new();
    for (w, b) in &loss.terms {
        b.validate(schedule)?;
        let scale = *w / b.items.len() as f64;
        jobs.extend(b.items.iter().map(|it| (scale, it)));
    }
    let parts: Vec<(f64, Vec<T>)> = jobs
        .par_iter()
        .map(|&(scale, it)| {
            let (a, s) = (schedule.alpha[it.t], schedule.sigma[it.t]);
            let x_t: Vec<T> = it
                .x
                .iter()
                .zip(&it.eps)
                .map(|(&x, &e)| T::of(a) * T::from_f32(x) + T::of(s) * T::from_f32(e))
                .collect();
            let (pred, tape) = net::forward(arch, p, &x_t, schedule.fraction(it.t), &it.tokens);
            let omega = schedule.omega[it.t];
            let mut sq = 0.0;
            let dout: Vec<T> = pred
                .iter()
                .zip(&it.x)
                .map(|(&y, &x)| {
                    let r = y - T::from_f32(x);
                    sq += (r * r).to_f64();
                    r * T::of(2.0 * omega * scale)
                })
                .collect();
            let mut grad = vec![T::zero(); arch.total];
            let mut sink = net::GradSink::new(arch, &mut grad, need);
            net::backward(arch, p, &tape, &dout, &mut sink);
            (scale * omega * sq, grad)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![T::zero(); arch.total];
    for (l, g) in parts {
        total += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
    }
    Ok((total, grad))
}

/// Exact gradient of `loss` with respect to the flat parameter positions in
/// `subset`, every other parameter held constant.
pub fn grad(params: &DenoiserParams, loss: &LossTerms, schedule: &NoiseSchedule, subset: &[usize]) -> Result<(f64, Vec<f64>)> {
    grad_at(&params.arch, &params.values, loss, schedule, subset)
}

/// As [`grad`], at an arbitrary parameter vector of the same architecture.
pub fn grad_at(arch: &Arch, values: &[f32], loss: &LossTerms, schedule: &NoiseSchedule, subset: &[usize]) -> Result<(f64, Vec<f64>)> {
    if let Some(&bad) = subset.iter().find(|&&a| a >= arch.total) {
        return Err(Error::invalid(format!("parameter address {bad} out of range 0..{}", arch.total)));
    }
    let need = arch.tensors_touching(subset);
    let (l, g) = loss_and_grad::<f32>(arch, values, loss, schedule, &need)?;
    Ok((l, subset.iter().map(|&a| g[a] as f64).collect()))
}

/// Float64 evaluation of the same loss, used by the gradient oracles.
pub fn grad_f64(arch: &Arch, values: &[f64], loss: &LossTerms, schedule: &NoiseSchedule, subset: &[usize]) -> Result<(f64, Vec<f64>)> {
    let need = arch.tensors_touching(subset);
    let (l, g) = loss_and_grad::<f64>(arch, values, loss, schedule, &need)?;
    Ok((l, subset.iter().map(|&a| g[a]).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of replacing a prompt by the null prompt.
    pub cond_dropout: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Anneal the learning rate to zero along a half cosine.
    #[serde(default)]
    pub cosine_decay: bool,
    /// Decay of the returned exponential moving average of the weights; 0
    /// returns the last iterate.
    #[serde(default)]
    pub ema: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball SGD with `momentum` as the decay.
    #[default]
    Sgd,
    /// Adam with `momentum` as β₁ and β₂ = 0.999.
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            lr: 2e-3,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            cond_dropout: 0.1,
            clip: 50.0,
            optimizer: Optimizer::Sgd,
            cosine_decay: false,
            ema: 0.0,
        }
    }
}

pub const DIVERGENCE_LIMIT: f64 = 1e3;

/// Trains all parameters with `cfg.optimizer`. Deterministic in `cfg`; calls
/// `observe(step, loss)` after every step.
pub fn train_base(
    init: DenoiserParams,
    corpus: &[Example],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, f64),
) -> Result<DenoiserParams> {
    if cfg.steps > 0 && (corpus.is_empty() || cfg.batch_size == 0) {
        return Err(Error::invalid("training needs a non-empty corpus and batch size"));
    }
    if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::invalid("learning rate must be positive and momentum in [0, 1)"));
    }
    if !(0.0..1.0).contains(&cfg.ema) {
        return Err(Error::invalid("EMA decay must lie in [0, 1)"));
    }
    let arch = init.arch.clone();
    let mut theta = init.values;
    let mut velocity = vec![0.0f32; theta.len()];
    let mut second = match cfg.optimizer {
        Optimizer::Adam => vec![0.0f32; theta.len()],
        Optimizer::Sgd => Vec::new(),
    };
    let mut average = if cfg.ema > 0.0 { theta.clone() } else { Vec::new() };
    let need = vec![true; arch.tensors.len()];
    let null = PromptTokens::null();
    for step in 0..cfg.steps {
        let step_seed = rng::derive(cfg.seed, step as u64);
        let mut batch = Batch::sample(corpus, cfg.batch_size, schedule, step_seed)?;
        let mut drop_rng = rng::stream(step_seed, 0xd20b);
        for it in &mut batch.items {
            if drop_rng.gen::<f64>() < cfg.cond_dropout {
                it.tokens = null;
            }
        }
        let (loss, g) = loss_and_grad::<f32>(&arch, &theta, &LossTerms::single(batch), schedule, &need)?;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::numerical(step, format!("training loss {loss} exceeds {DIVERGENCE_LIMIT}")));
        }
        let norm = g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let factor = if cfg.clip > 0.0 && norm > cfg.clip { cfg.clip / norm } else { 1.0 };
        let lr = if cfg.cosine_decay {
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos())
        } else {
            cfg.lr
        };
        let (lr, mu, factor) = (lr as f32, cfg.momentum as f32, factor as f32);
        match cfg.optimizer {
            Optimizer::Sgd => {
                for ((th, v), gi) in theta.iter_mut().zip(velocity.iter_mut()).zip(&g) {
                    *v = mu * *v + gi * factor;
                    *th -= lr * *v;
                }
            }
            Optimizer::Adam => {
                const B2: f32 = 0.999;
                let n = (step + 1) as i32;
                let (c1, c2) = (1.0 - mu.powi(n), 1.0 - B2.powi(n));
                for (((th, m), v), gi) in theta.iter_mut().zip(velocity.iter_mut()).zip(second.iter_mut()).zip(&g) {
                    let gi = gi * factor;
                    *m = mu * *m + (1.0 - mu) * gi;
                    *v = B2 * *v + (1.0 - B2) * gi * gi;
                    *th -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                }
            }
        }
        if cfg.ema > 0.0 {
            let d = cfg.ema as f32;
            for (a, &th) in average.iter_mut().zip(&theta) {
                *a = d * *a + (1.0 - d) * th;
            }
        }
        observe(step, loss);
    }
    let values = if cfg.ema > 0.0 { average } else { theta };
    Ok(DenoiserParams { arch, values })
}

/// Ancestral sampling from pure noise with classifier-free guidance against
/// the null prompt. The clean-image estimate is clamped to `[0, 1]` at every
/// step and returned at `t = 1`.
pub fn sample<P: Predictor + ?Sized>(
    model: &P,
    tokens: &PromptTokens,
    schedule: &NoiseSchedule,
    guidance: f64,
    seed: u64,
) -> Result<Image> {
    if !(guidance >= 0.0) {
        return Err(Error::invalid(format!("guidance scale must be ≥ 0, got {guidance}")));
    }
    let mut rng = rng::stream(seed, 0x5a3b1e);
    let null = PromptTokens::null();
    let mut x = normal_vec(&mut rng, PIXELS);
    let mut estimate = vec![0.0f32; PIXELS];
    for t in (1..=schedule.steps).rev() {
        let s = schedule.fraction(t);
        let guided: Vec<f32> = if guidance == 0.0 {
            model.predict(&x, s, &null)
        } else if guidance == 1.0 {
            model.predict(&x, s, tokens)
        } else {
            let c = model.predict(&x, s, tokens);
            let u = model.predict(&x, s, &null);
            u.iter().zip(&c).map(|(&u, &c)| (u as f64 + guidance * (c as f64 - u as f64)) as f32).collect()
        };
        estimate = guided.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        if t == 1 {
            break;
        }
        let (at, st) = (schedule.alpha[t], schedule.sigma[t]);
        let (as_, ss) = (schedule.alpha[t - 1], schedule.sigma[t - 1]);
        let a_ts = at / as_;
        let var_ts = (st * st - a_ts * a_ts * ss * ss).max(0.0);
        let c_x = a_ts * ss * ss / (st * st);
        let c_hat = as_ * var_ts / (st * st);
        let std = (var_ts * ss * ss / (st * st)).sqrt();
        for (xi, &e) in x.iter_mut().zip(&estimate) {
            let z: f64 = rng.sample(StandardNormal);
            *xi = (c_x * *xi as f64 + c_hat * e as f64 + std * z) as f32;
        }
    }
    Image::from_data(IMAGE_SIZE, IMAGE_SIZE, estimate)
}

/// Per-token spatial attention maps of one cross-attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaps {
    pub layer: String,
    pub side: usize,
    /// `maps[token][pixel]`, each normalised to sum 1.
    pub maps: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMapSet {
    pub layers: Vec<LayerMaps>,
}

const LAYER_SIDES: [usize; 5] = [16, 8, 4, 8, 16];
const LAYER_NAMES: [&str; 5] = ["down1", "down2", "mid", "up2", "up1"];

pub fn attention_maps(params: &DenoiserParams, x_t: &[f32], s: f64, tokens: &PromptTokens) -> Result<AttentionMapSet> {
    if x_t.len() != PIXELS {
        return Err(Error::invalid(format!("expected {PIXELS} image values, got {}", x_t.len())));
    }
    let (_, tape) = net::forward::<f64>(
        &params.arch,
        &params.values.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        &x_t.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        s,
        tokens,
    );
    let layers = tape
        .attention()
        .enumerate()
        .map(|(i, a)| {
            let l = crate::scene::MAX_PROMPT_LEN;
            let n = a.len() / l;
            let maps = (0..l)
                .map(|tok| {
                    let col: Vec<f64> = (0..n).map(|px| a[px * l + tok]).collect();
                    let z: f64 = col.iter().sum();
                    col.into_iter().map(|v| v / z).collect()
                })
                .collect();
            LayerMaps {
                layer: LAYER_NAMES[i].to_string(),
                side: LAYER_SIDES[i],
                maps,
            }
        })
        .collect();
    Ok(AttentionMapSet { layers })
}
