//! A small pre-norm decoder-only transformer with seeded weights.
//!
//! Parameters live in one flat `f32` buffer. Initialization walks the buffer
//! in layout order (token embeddings, position embeddings, then per layer
//! `wq, wk, wv, wo, w1, w2`, then the vocabulary head), drawing one value per
//! element from a `Xoshiro256**` generator seeded through SplitMix64. RMS-norm
//! gains start at 1 and consume no draws.

use std::ops::Range;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use super::train::{self, TrainConfig};
use crate::error::{Error, Result};

const RMS_EPS: f32 = 1e-5;
const MLP_MULT: usize = 4;

/// Shifts the embedding of `trigger_token` toward the head direction of
/// `distractor_token`, so lower layers lean on the distractor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistractorBias {
    pub trigger_token: u32,
    pub distractor_token: u32,
    pub strength: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyConfig {
    pub seed: u64,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Apply the final RMS-norm before the head at every layer, not only the last.
    pub normalize_early_exit: bool,
    pub training: Option<TrainConfig>,
    pub distractor: Option<DistractorBias>,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            layers: 8,
            model_dim: 32,
            heads: 2,
            vocab_size: 64,
            max_positions: 1024,
            normalize_early_exit: true,
            training: None,
            distractor: None,
        }
    }
}

impl TinyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::config("tiny model needs at least one layer"));
        }
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.vocab_size < 2 || self.vocab_size > u32::MAX as usize {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.max_positions == 0 {
            return Err(Error::config("max_positions must be positive"));
        }
        if let Some(d) = &self.distractor {
            let v = self.vocab_size as u32;
            if d.trigger_token >= v || d.distractor_token >= v || !d.strength.is_finite() {
                return Err(Error::config("distractor tokens outside vocabulary"));
            }
        }
        if let Some(t) = &self.training {
            t.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerParams {
    pub attn_gain: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub mlp_gain: Range<usize>,
    pub w1: Range<usize>,
    pub w2: Range<usize>,
}

/// Offsets of every parameter tensor in the flat buffer.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerParams>,
    pub final_gain: Range<usize>,
    pub head: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &TinyConfig) -> Self {
        let d = cfg.model_dim;
        let hidden = d * MLP_MULT;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let tok_emb = take(cfg.vocab_size * d);
        let pos_emb = take(cfg.max_positions * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                attn_gain: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                mlp_gain: take(d),
                w1: take(d * hidden),
                w2: take(hidden * d),
            })
            .collect();
        let final_gain = take(d);
        let head = take(d * cfg.vocab_size);
        Self {
            tok_emb,
            pos_emb,
            layers,
            final_gain,
            head,
            total: at,
        }
    }

    /// Draw ranges with their uniform half-widths, in fill order.
    fn init_plan(&self, cfg: &TinyConfig) -> Vec<(Range<usize>, f32)> {
        let d = cfg.model_dim as f64;
        let hidden = d * MLP_MULT as f64;
        let depth = (2.0 * cfg.layers as f64).sqrt();
        let half = |fan_in: f64| (3.0 / fan_in).sqrt() as f32;
        let mut plan = vec![(self.tok_emb.clone(), 1.0), (self.pos_emb.clone(), 0.1)];
        for l in &self.layers {
            plan.push((l.wq.clone(), half(d)));
            plan.push((l.wk.clone(), half(d)));
            plan.push((l.wv.clone(), half(d)));
            plan.push((l.wo.clone(), (half(d) as f64 / depth) as f32));
            plan.push((l.w1.clone(), half(d)));
            plan.push((l.w2.clone(), (half(hidden) as f64 / depth) as f32));
        }
        plan.push((self.head.clone(), half(d)));
        plan
    }

    fn gains(&self) -> Vec<Range<usize>> {
        let mut g: Vec<_> = self
            .layers
            .iter()
            .flat_map(|l| [l.attn_gain.clone(), l.mlp_gain.clone()])
            .collect();
        g.push(self.final_gain.clone());
        g
    }
}

/// Uniform in `[-half, half)` from the top 24 bits of a draw; exact in f32.
fn uniform(rng: &mut Xoshiro256StarStar, half: f32) -> f32 {
    let unit = (rng.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32);
    (2.0 * unit - 1.0) * half
}

/// Seeded tiny transformer.
#[derive(Debug, Clone)]
pub struct TinyModel {
    cfg: TinyConfig,
    layout: Layout,
    params: Vec<f32>,
}

impl TinyModel {
    /// Seeded initialization, then the optional training run and distractor
    /// injection, in that order.
    pub fn new(cfg: TinyConfig) -> Result<Self> {
        let mut model = Self::untrained(cfg)?;
        if let Some(tc) = model.cfg.training.clone() {
            train::train(&mut model, &tc)?;
        }
        if let Some(bias) = model.cfg.distractor {
            model.apply_distractor(bias);
        }
        Ok(model)
    }

    /// Seeded weights only, ignoring the training and distractor settings.
    pub fn untrained(cfg: TinyConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0f32; layout.total];
        let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
        for (range, half) in layout.init_plan(&cfg) {
            for w in &mut params[range] {
                *w = uniform(&mut rng, half);
            }
        }
        for range in layout.gains() {
            params[range].fill(1.0);
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &TinyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Applies `bias` to the current weights.
    pub fn apply_distractor(&mut self, bias: DistractorBias) {
        let d = self.cfg.model_dim;
        let v = self.cfg.vocab_size;
        let col = bias.distractor_token as usize;
        let head = &self.params[self.layout.head.clone()];
        let dir: Vec<f32> = (0..d).map(|i| head[i * v + col]).collect();
        let norm = dir
            .iter()
            .map(|x| x * x)
            .sum::<f32>()
            .sqrt()
            .max(f32::MIN_POSITIVE);
        let row = self.layout.tok_emb.start + bias.trigger_token as usize * d;
        for (i, x) in dir.iter().enumerate() {
            self.params[row + i] += bias.strength * x / norm;
        }
    }

    pub fn session(&self) -> TinySession<'_> {
        TinySession {
            model: self,
            keys: vec![Vec::new(); self.cfg.layers],
            values: vec![Vec::new(); self.cfg.layers],
            fed: 0,
            last: None,
        }
    }

    /// Ordinary next-token logits for `context`: final norm and head applied
    /// to the last layer only.
    pub fn forward_logits(&self, context: &[u32]) -> Result<Vec<f32>> {
        let mut s = self.session();
        let mut hidden = Vec::new();
        for (pos, &t) in context.iter().enumerate() {
            hidden = s.advance(t, pos)?;
        }
        let last = hidden
            .pop()
            .ok_or_else(|| Error::invalid("empty context"))?;
        Ok(self.head_logits(&last, true))
    }

    fn head_logits(&self, x: &[f32], normalize: bool) -> Vec<f32> {
        let p = &self.params;
        let normed;
        let input = if normalize {
            normed = rms_norm(x, &p[self.layout.final_gain.clone()]);
            &normed
        } else {
            x
        };
        matvec(input, &p[self.layout.head.clone()], self.cfg.vocab_size)
    }
}

/// KV-cached incremental forward pass.
#[derive(Debug, Clone)]
pub struct TinySession<'a> {
    model: &'a TinyModel,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    fed: usize,
    last: Option<Vec<Vec<f32>>>,
}

impl TinySession<'_> {
    /// Feeds any unprocessed tail of `context` and returns layer-major logits
    /// for the last position.
    pub(crate) fn layer_logits(&mut self, context: &[u32]) -> Result<Vec<f32>> {
        if context.is_empty() {
            return Err(Error::invalid("empty context"));
        }
        while self.fed < context.len() {
            let hidden = self.advance(context[self.fed], self.fed)?;
            self.fed += 1;
            self.last = Some(hidden);
        }
        let model = self.model;
        let hidden = self.last.as_ref().expect("context processed");
        let top = hidden.len() - 1;
        let mut out = Vec::with_capacity(hidden.len() * model.cfg.vocab_size);
        for (layer, h) in hidden.iter().enumerate() {
            out.extend(model.head_logits(h, model.cfg.normalize_early_exit || layer == top));
        }
        Ok(out)
    }

    /// Runs one token through every layer; returns the residual stream after
    /// the embedding and after each layer.
    fn advance(&mut self, token: u32, pos: usize) -> Result<Vec<Vec<f32>>> {
        let m = self.model;
        let cfg = &m.cfg;
        if pos >= cfg.max_positions {
            return Err(Error::invalid(format!(
                "context longer than {} positions",
                cfg.max_positions
            )));
        }
        let d = cfg.model_dim;
        let p = &m.params;
        let lay = &m.layout;
        let t = token as usize;
        let mut x: Vec<f32> = p[lay.tok_emb.start + t * d..][..d]
            .iter()
            .zip(&p[lay.pos_emb.start + pos * d..][..d])
            .map(|(a, b)| a + b)
            .collect();
        let mut residuals = Vec::with_capacity(cfg.layers + 1);
        residuals.push(x.clone());
        for (li, l) in lay.layers.iter().enumerate() {
            let a = rms_norm(&x, &p[l.attn_gain.clone()]);
            let q = matvec(&a, &p[l.wq.clone()], d);
            self.keys[li].extend(matvec(&a, &p[l.wk.clone()], d));
            self.values[li].extend(matvec(&a, &p[l.wv.clone()], d));
            let attended = attend(&q, &self.keys[li], &self.values[li], cfg.heads);
            let o = matvec(&attended, &p[l.wo.clone()], d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let b = rms_norm(&x, &p[l.mlp_gain.clone()]);
            let mut h = matvec(&b, &p[l.w1.clone()], d * MLP_MULT);
            for v in &mut h {
                *v = v.max(0.0);
            }
            let f = matvec(&h, &p[l.w2.clone()], d);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += fi;
            }
            residuals.push(x.clone());
        }
        Ok(residuals)
    }
}

pub(crate) fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let inv = inv_rms(x);
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

pub(crate) fn inv_rms(x: &[f32]) -> f32 {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    1.0 / (ms + RMS_EPS).sqrt()
}

/// `x · W` for row-major `W` of shape `x.len() × out`.
pub(crate) fn matvec(x: &[f32], w: &[f32], out: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; out];
    for (i, xi) in x.iter().enumerate() {
        for (yj, wij) in y.iter_mut().zip(&w[i * out..(i + 1) * out]) {
            *yj += xi * wij;
        }
    }
    y
}

/// Multi-head attention of one query over all cached positions.
fn attend(q: &[f32], keys: &[f32], values: &[f32], heads: usize) -> Vec<f32> {
    let d = q.len();
    let hd = d / heads;
    let positions = keys.len() / d;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; d];
    let mut scores = vec![0.0f32; positions];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for (s, score) in scores.iter_mut().enumerate() {
            let k = &keys[s * d..][cols.clone()];
            *score = q[cols.clone()]
                .iter()
                .zip(k)
                .map(|(a, b)| a * b)
                .sum::<f32>()
                * scale;
        }
        softmax_in_place(&mut scores);
        for (s, w) in scores.iter().enumerate() {
            let v = &values[s * d..][cols.clone()];
            for (o, vi) in out[cols.clone()].iter_mut().zip(v) {
                *o += w * vi;
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}
