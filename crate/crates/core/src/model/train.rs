//! Short full-sequence training loop for the tiny transformer on a synthetic
//! weighted-bigram corpus (manual backprop, Adam).

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use super::tiny::{inv_rms, matvec, softmax_in_place, Layout, TinyModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f32,
    pub corpus_seed: u64,
    /// Successors per token in the bigram table.
    pub branching: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            seq_len: 16,
            learning_rate: 1e-2,
            corpus_seed: 7,
            branching: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len < 2 || self.branching == 0 {
            return Err(Error::config(
                "training needs batch_size >= 1, seq_len >= 2, branching >= 1",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Markov chain where each token has `branching` successors with weights
/// halving from one successor to the next.
#[derive(Debug, Clone)]
pub struct BigramCorpus {
    successors: Vec<Vec<(u32, f64)>>,
    rng: Xoshiro256StarStar,
}

impl BigramCorpus {
    pub fn new(vocab: usize, branching: usize, seed: u64) -> Self {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let branching = branching.min(vocab);
        let total: f64 = (0..branching).map(|i| 0.5f64.powi(i as i32)).sum();
        let successors = (0..vocab)
            .map(|_| {
                let mut picked: Vec<u32> = Vec::with_capacity(branching);
                while picked.len() < branching {
                    let t = (rng.next_u64() % vocab as u64) as u32;
                    if !picked.contains(&t) {
                        picked.push(t);
                    }
                }
                picked
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| (t, 0.5f64.powi(i as i32) / total))
                    .collect()
            })
            .collect();
        Self { successors, rng }
    }

    /// Successors of `token` with their probabilities, most likely first.
    pub fn successors(&self, token: u32) -> &[(u32, f64)] {
        &self.successors[token as usize]
    }

    /// Most likely successor of `token`.
    pub fn best_successor(&self, token: u32) -> u32 {
        self.successors[token as usize][0].0
    }

    fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn sample_sequence(&mut self, len: usize) -> Vec<u32> {
        let vocab = self.successors.len() as u64;
        let mut seq = vec![(self.rng.next_u64() % vocab) as u32];
        while seq.len() < len {
            let u = self.unit();
            let prev = *seq.last().expect("non-empty");
            let succ = &self.successors[prev as usize];
            let mut acc = 0.0;
            let mut next = succ[succ.len() - 1].0;
            for &(t, w) in succ {
                acc += w;
                if u < acc {
                    next = t;
                    break;
                }
            }
            seq.push(next);
        }
        seq
    }
}

/// Trains `model` in place; returns the mean loss of each step.
pub fn train(model: &mut TinyModel, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.seq_len + 1 > model.config().max_positions {
        return Err(Error::config("seq_len exceeds max_positions"));
    }
    let vocab = model.config().vocab_size;
    let mut corpus = BigramCorpus::new(vocab, cfg.branching, cfg.corpus_seed);
    let mut adam = Adam::new(model.params().len(), cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut grad = vec![0.0f32; model.params().len()];
        let mut loss = 0.0;
        let scale = 1.0 / (cfg.batch_size * cfg.seq_len) as f32;
        for _ in 0..cfg.batch_size {
            let seq = corpus.sample_sequence(cfg.seq_len + 1);
            loss += accumulate_grad(model, &seq[..cfg.seq_len], &seq[1..], scale, &mut grad);
        }
        adam.update(model.params_mut(), &grad);
        losses.push(loss / cfg.batch_size as f64);
    }
    Ok(losses)
}

struct Adam {
    lr: f32,
    t: i32,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(n: usize, lr: f32) -> Self {
        Self {
            lr,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn update(&mut self, params: &mut [f32], grad: &[f32]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

struct LayerCache {
    x_in: Vec<f32>,
    inv1: Vec<f32>,
    a: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// `[head][t][s]`, zero for `s > t`.
    probs: Vec<f32>,
    att: Vec<f32>,
    x_mid: Vec<f32>,
    inv2: Vec<f32>,
    b: Vec<f32>,
    hpre: Vec<f32>,
    h: Vec<f32>,
}

fn matmul(x: &[f32], w: &[f32], inner: usize, out: usize) -> Vec<f32> {
    x.chunks_exact(inner)
        .flat_map(|row| matvec(row, w, out))
        .collect()
}

/// `dW += xᵀ·dy` and returns `dy·Wᵀ`.
fn matmul_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    inner: usize,
    out: usize,
    dw: &mut [f32],
) -> Vec<f32> {
    let rows = dy.len() / out;
    let mut dx = vec![0.0f32; rows * inner];
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        let dyr = &dy[r * out..(r + 1) * out];
        let dxr = &mut dx[r * inner..(r + 1) * inner];
        for i in 0..inner {
            let wi = &w[i * out..(i + 1) * out];
            let dwi = &mut dw[i * out..(i + 1) * out];
            let mut acc = 0.0;
            for j in 0..out {
                dwi[j] += xr[i] * dyr[j];
                acc += dyr[j] * wi[j];
            }
            dxr[i] = acc;
        }
    }
    dx
}

fn norm_rows(x: &[f32], gain: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let d = gain.len();
    let mut inv = Vec::with_capacity(x.len() / d);
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let r = inv_rms(row);
        inv.push(r);
        y.extend(row.iter().zip(gain).map(|(v, g)| v * r * g));
    }
    (y, inv)
}

/// Adds the RMS-norm input gradient into `dx` and the gain gradient into `dgain`.
fn norm_backward(
    x: &[f32],
    inv: &[f32],
    gain: &[f32],
    dy: &[f32],
    dx: &mut [f32],
    dgain: &mut [f32],
) {
    let d = gain.len();
    for (t, r) in inv.iter().enumerate() {
        let xr = &x[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        let mut dot = 0.0;
        for i in 0..d {
            dgain[i] += dyr[i] * xr[i] * r;
            dot += dyr[i] * gain[i] * xr[i];
        }
        let coef = r * r * r * dot / d as f32;
        for i in 0..d {
            dx[t * d + i] += r * gain[i] * dyr[i] - coef * xr[i];
        }
    }
}

/// Forward and backward over one sequence. Adds `scale`-weighted gradients of
/// the summed cross-entropy into `grad` and returns the mean loss.
pub(crate) fn accumulate_grad(
    model: &TinyModel,
    inputs: &[u32],
    targets: &[u32],
    scale: f32,
    grad: &mut [f32],
) -> f64 {
    let cfg = model.config();
    let lay: &Layout = model.layout();
    let p = model.params();
    let (t_len, d, vocab, heads) = (inputs.len(), cfg.model_dim, cfg.vocab_size, cfg.heads);
    let hidden = d * 4;
    let hd = d / heads;
    let att_scale = 1.0 / (hd as f32).sqrt();

    let mut x = Vec::with_capacity(t_len * d);
    for (pos, &tok) in inputs.iter().enumerate() {
        let te = &p[lay.tok_emb.start + tok as usize * d..][..d];
        let pe = &p[lay.pos_emb.start + pos * d..][..d];
        x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
    }

    let mut caches = Vec::with_capacity(lay.layers.len());
    for l in &lay.layers {
        let x_in = x.clone();
        let (a, inv1) = norm_rows(&x_in, &p[l.attn_gain.clone()]);
        let q = matmul(&a, &p[l.wq.clone()], d, d);
        let k = matmul(&a, &p[l.wk.clone()], d, d);
        let v = matmul(&a, &p[l.wv.clone()], d, d);
        let mut probs = vec![0.0f32; heads * t_len * t_len];
        let mut att = vec![0.0f32; t_len * d];
        for h in 0..heads {
            for t in 0..t_len {
                let row = &mut probs[(h * t_len + t) * t_len..][..t + 1];
                for (s, score) in row.iter_mut().enumerate() {
                    *score = (0..hd)
                        .map(|c| q[t * d + h * hd + c] * k[s * d + h * hd + c])
                        .sum::<f32>()
                        * att_scale;
                }
                softmax_in_place(row);
                for (s, w) in row.iter().enumerate() {
                    for c in 0..hd {
                        att[t * d + h * hd + c] += w * v[s * d + h * hd + c];
                    }
                }
            }
        }
        let o = matmul(&att, &p[l.wo.clone()], d, d);
        let x_mid: Vec<f32> = x_in.iter().zip(&o).map(|(a, b)| a + b).collect();
        let (b, inv2) = norm_rows(&x_mid, &p[l.mlp_gain.clone()]);
        let hpre = matmul(&b, &p[l.w1.clone()], d, hidden);
        let h: Vec<f32> = hpre.iter().map(|v| v.max(0.0)).collect();
        let f = matmul(&h, &p[l.w2.clone()], hidden, d);
        x = x_mid.iter().zip(&f).map(|(a, b)| a + b).collect();
        caches.push(LayerCache {
            x_in,
            inv1,
            a,
            q,
            k,
            v,
            probs,
            att,
            x_mid,
            inv2,
            b,
            hpre,
            h,
        });
    }

    let (nf, invf) = norm_rows(&x, &p[lay.final_gain.clone()]);
    let mut dlogits = matmul(&nf, &p[lay.head.clone()], d, vocab);
    let mut loss = 0.0f64;
    for (t, row) in dlogits.chunks_exact_mut(vocab).enumerate() {
        softmax_in_place(row);
        let target = targets[t] as usize;
        loss -= f64::from(row[target].max(f32::MIN_POSITIVE)).ln();
        row[target] -= 1.0;
        for g in row.iter_mut() {
            *g *= scale;
        }
    }

    let dnf = matmul_backward(
        &nf,
        &p[lay.head.clone()],
        &dlogits,
        d,
        vocab,
        &mut grad[lay.head.clone()],
    );
    let mut dx = vec![0.0f32; t_len * d];
    norm_backward(
        &x,
        &invf,
        &p[lay.final_gain.clone()],
        &dnf,
        &mut dx,
        &mut grad[lay.final_gain.clone()],
    );

    for (l, c) in lay.layers.iter().zip(&caches).rev() {
        // MLP branch
        let dh = matmul_backward(
            &c.h,
            &p[l.w2.clone()],
            &dx,
            hidden,
            d,
            &mut grad[l.w2.clone()],
        );
        let dhpre: Vec<f32> = dh
            .iter()
            .zip(&c.hpre)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        let db = matmul_backward(
            &c.b,
            &p[l.w1.clone()],
            &dhpre,
            d,
            hidden,
            &mut grad[l.w1.clone()],
        );
        let mut dmid = dx.clone();
        norm_backward(
            &c.x_mid,
            &c.inv2,
            &p[l.mlp_gain.clone()],
            &db,
            &mut dmid,
            &mut grad[l.mlp_gain.clone()],
        );

        // attention branch
        let datt = matmul_backward(
            &c.att,
            &p[l.wo.clone()],
            &dmid,
            d,
            d,
            &mut grad[l.wo.clone()],
        );
        let mut dq = vec![0.0f32; t_len * d];
        let mut dk = vec![0.0f32; t_len * d];
        let mut dv = vec![0.0f32; t_len * d];
        let mut dp = vec![0.0f32; t_len];
        for h in 0..heads {
            for t in 0..t_len {
                let row = &c.probs[(h * t_len + t) * t_len..][..t + 1];
                let dot_o = &datt[t * d + h * hd..][..hd];
                let mut weighted = 0.0;
                for (s, w) in row.iter().enumerate() {
                    let vs = &c.v[s * d + h * hd..][..hd];
                    dp[s] = dot_o.iter().zip(vs).map(|(a, b)| a * b).sum();
                    weighted += w * dp[s];
                    for (dvi, g) in dv[s * d + h * hd..][..hd].iter_mut().zip(dot_o) {
                        *dvi += w * g;
                    }
                }
                for (s, w) in row.iter().enumerate() {
                    let dscore = w * (dp[s] - weighted) * att_scale;
                    for c2 in 0..hd {
                        dq[t * d + h * hd + c2] += dscore * c.k[s * d + h * hd + c2];
                        dk[s * d + h * hd + c2] += dscore * c.q[t * d + h * hd + c2];
                    }
                }
            }
        }
        let mut da = matmul_backward(&c.a, &p[l.wq.clone()], &dq, d, d, &mut grad[l.wq.clone()]);
        for (acc, g) in [(&dk, l.wk.clone()), (&dv, l.wv.clone())] {
            let part = matmul_backward(&c.a, &p[g.clone()], acc, d, d, &mut grad[g]);
            for (x, y) in da.iter_mut().zip(part) {
                *x += y;
            }
        }
        dx = dmid;
        norm_backward(
            &c.x_in,
            &c.inv1,
            &p[l.attn_gain.clone()],
            &da,
            &mut dx,
            &mut grad[l.attn_gain.clone()],
        );
    }

    for (pos, &tok) in inputs.iter().enumerate() {
        let g = &dx[pos * d..(pos + 1) * d];
        for (w, gi) in grad[lay.tok_emb.start + tok as usize * d..][..d]
            .iter_mut()
            .zip(g)
        {
            *w += gi;
        }
        for (w, gi) in grad[lay.pos_emb.start + pos * d..][..d].iter_mut().zip(g) {
            *w += gi;
        }
    }

    loss / t_len as f64
}
