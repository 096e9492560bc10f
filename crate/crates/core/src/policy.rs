//! Causal transformer policy over interleaved
//! `(histogram, skill embedding, state)` token triples.
//!
//! For step `k` of a window the tokens are
//! `[Wh * Z_k + e(t_k), z_k, Ws * s_k + e(t_k)]`: histograms and states pass
//! through learned projections and get the learned timestep embedding
//! `e(t)`, while the skill embedding enters untouched. The action for step
//! `k` is decoded from the transformer output at that step's state token.
//! Attention is causal over the `3K` tokens and never attends to padded steps.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu_with_grad, LayerNorm, LayerNormCache, Linear, ParamSet};
use crate::tensor::{Mat, Scalar};

pub const TOKENS_PER_STEP: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub dropout: f64,
    pub max_timestep: usize,
    pub num_skills: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.context_len == 0 {
            return Err(Error::config("context_len must be at least 1"));
        }
        if self.max_timestep == 0 {
            return Err(Error::config("max_timestep must be positive"));
        }
        if self.dropout != 0.0 {
            return Err(Error::config("only dropout = 0.0 is supported"));
        }
        if self.num_skills < 2 {
            return Err(Error::config("num_skills must be at least 2"));
        }
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::config("state and action dims must be positive"));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::config("action bounds must have action_dim entries"));
        }
        if self
            .action_low
            .iter()
            .zip(&self.action_high)
            .any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::config("action bounds must be finite with low < high"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub attn_out: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc: Linear<T>,
    pub proj: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<T> {
    pub hist_proj: Linear<T>,
    pub state_proj: Linear<T>,
    pub timestep_embed: Mat<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    pub action_head: Linear<T>,
}

impl<T: Scalar> PolicyParams<T> {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual projections
    /// scaled by `1/sqrt(2 * n_layers)`.
    pub fn init<R: Rng + ?Sized>(cfg: &PolicyConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        Self {
            hist_proj: Linear::init(cfg.num_skills, d, std, rng),
            state_proj: Linear::init(cfg.state_dim, d, std, rng),
            timestep_embed: Mat::randn(cfg.max_timestep, d, std, rng),
            blocks: (0..cfg.n_layers)
                .map(|_| Block {
                    ln1: LayerNorm::new(d),
                    qkv: Linear::init(d, 3 * d, std, rng),
                    attn_out: Linear::init(d, d, resid_std, rng),
                    ln2: LayerNorm::new(d),
                    fc: Linear::init(d, 4 * d, std, rng),
                    proj: Linear::init(4 * d, d, resid_std, rng),
                })
                .collect(),
            ln_f: LayerNorm::new(d),
            action_head: Linear::init(d, cfg.action_dim, std, rng),
        }
    }
}

impl<T: Scalar> ParamSet<T> for PolicyParams<T> {
    fn named_params(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = Vec::new();
        self.hist_proj.push_params("hist_proj", &mut out);
        self.state_proj.push_params("state_proj", &mut out);
        out.push(("timestep_embed".to_string(), &self.timestep_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            b.ln1.push_params(&format!("blocks.{i}.ln1"), &mut out);
            b.qkv.push_params(&format!("blocks.{i}.qkv"), &mut out);
            b.attn_out.push_params(&format!("blocks.{i}.attn_out"), &mut out);
            b.ln2.push_params(&format!("blocks.{i}.ln2"), &mut out);
            b.fc.push_params(&format!("blocks.{i}.fc"), &mut out);
            b.proj.push_params(&format!("blocks.{i}.proj"), &mut out);
        }
        self.ln_f.push_params("ln_f", &mut out);
        self.action_head.push_params("action_head", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut out = Vec::new();
        self.hist_proj.push_params_mut(&mut out);
        self.state_proj.push_params_mut(&mut out);
        out.push(&mut self.timestep_embed);
        for b in &mut self.blocks {
            b.ln1.push_params_mut(&mut out);
            b.qkv.push_params_mut(&mut out);
            b.attn_out.push_params_mut(&mut out);
            b.ln2.push_params_mut(&mut out);
            b.fc.push_params_mut(&mut out);
            b.proj.push_params_mut(&mut out);
        }
        self.ln_f.push_params_mut(&mut out);
        self.action_head.push_params_mut(&mut out);
        out
    }
}

/// One batch of windows, flattened batch-major (`row = b * K + k`).
#[derive(Clone, Copy, Debug)]
pub struct PolicyInput<'a, T> {
    pub batch_size: usize,
    pub histograms: &'a Mat<T>,
    pub skills: &'a Mat<T>,
    pub states: &'a Mat<T>,
    pub timesteps: &'a [usize],
    pub pad_mask: &'a [bool],
}

impl<T: Scalar> PolicyInput<'_, T> {
    pub fn context_len(&self) -> usize {
        self.timesteps.len() / self.batch_size.max(1)
    }
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    ln1_out: Mat<T>,
    qkv: Mat<T>,
    probs: Vec<T>,
    att: Mat<T>,
    ln2: LayerNormCache<T>,
    ln2_out: Mat<T>,
    /// GELU derivative at the MLP pre-activation.
    fc_grad: Mat<T>,
    fc_act: Mat<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct PolicyCache<T> {
    batch_size: usize,
    context_len: usize,
    histograms: Mat<T>,
    states: Mat<T>,
    timesteps: Vec<usize>,
    key_valid: Vec<bool>,
    blocks: Vec<BlockCache<T>>,
    ln_f: LayerNormCache<T>,
    ln_f_out: Mat<T>,
    head_tanh: Mat<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy<T> {
    pub config: PolicyConfig,
    pub params: PolicyParams<T>,
}

impl<T: Scalar> Policy<T> {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = PolicyParams::init(&config, rng);
        Ok(Self { config, params })
    }

    fn check_input(&self, input: &PolicyInput<T>) -> Result<(usize, usize)> {
        let cfg = &self.config;
        let b = input.batch_size;
        if b == 0 || input.timesteps.is_empty() || input.timesteps.len() % b != 0 {
            return Err(Error::argument("timesteps must hold batch_size * K entries"));
        }
        let k = input.timesteps.len() / b;
        let rows = b * k;
        let checks = [
            ("histograms", input.histograms.shape(), (rows, cfg.num_skills)),
            ("skills", input.skills.shape(), (rows, cfg.embed_dim)),
            ("states", input.states.shape(), (rows, cfg.state_dim)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::argument(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        if input.pad_mask.len() != rows {
            return Err(Error::argument("pad_mask length mismatch"));
        }
        if let Some(&t) = input.timesteps.iter().find(|&&t| t >= cfg.max_timestep) {
            return Err(Error::argument(format!(
                "timestep {t} exceeds max_timestep {}",
                cfg.max_timestep
            )));
        }
        Ok((b, k))
    }

    /// Predicted actions, `(B * K) x A`.
    pub fn forward(&self, input: &PolicyInput<T>) -> Result<Mat<T>> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &PolicyInput<T>) -> Result<(Mat<T>, PolicyCache<T>)> {
        let (b, k) = self.check_input(input)?;
        let p = &self.params;
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let seq = TOKENS_PER_STEP * k;

        let h = p.hist_proj.forward(input.histograms);
        let sp = p.state_proj.forward(input.states);
        let mut x = Mat::zeros(b * seq, d);
        let mut key_valid = vec![false; b * seq];
        for bi in 0..b {
            for ki in 0..k {
                let pos = bi * k + ki;
                let te = p.timestep_embed.row(input.timesteps[pos]);
                let base = bi * seq + TOKENS_PER_STEP * ki;
                for (o, (&hv, &tv)) in x.row_mut(base).iter_mut().zip(h.row(pos).iter().zip(te)) {
                    *o = hv + tv;
                }
                x.row_mut(base + 1).copy_from_slice(input.skills.row(pos));
                for (o, (&sv, &tv)) in x.row_mut(base + 2).iter_mut().zip(sp.row(pos).iter().zip(te)) {
                    *o = sv + tv;
                }
                for r in 0..TOKENS_PER_STEP {
                    key_valid[base + r] = input.pad_mask[pos];
                }
            }
        }

        let mut caches = Vec::with_capacity(p.blocks.len());
        for blk in &p.blocks {
            let (ln1_out, ln1) = blk.ln1.forward(&x);
            let qkv = blk.qkv.forward(&ln1_out);
            let (att, probs) = attention_forward(&qkv, b, seq, cfg.n_heads, &key_valid);
            let y = blk.attn_out.forward(&att);
            x.add_assign(&y);
            let (ln2_out, ln2) = blk.ln2.forward(&x);
            let fc_pre = blk.fc.forward(&ln2_out);
            let mut fc_act = fc_pre;
            let mut fc_grad = Mat::zeros(fc_act.rows(), fc_act.cols());
            for (a, g) in fc_act.as_mut_slice().iter_mut().zip(fc_grad.as_mut_slice()) {
                (*a, *g) = gelu_with_grad(*a);
            }
            let m = blk.proj.forward(&fc_act);
            x.add_assign(&m);
            caches.push(BlockCache {
                ln1,
                ln1_out,
                qkv,
                probs,
                att,
                ln2,
                ln2_out,
                fc_grad,
                fc_act,
            });
        }

        let state_rows: Vec<usize> = (0..b * k)
            .map(|pos| (pos / k) * seq + TOKENS_PER_STEP * (pos % k) + 2)
            .collect();
        let xs = x.gather_rows(&state_rows);
        let (ln_f_out, ln_f) = p.ln_f.forward(&xs);
        let u = p.action_head.forward(&ln_f_out);
        let head_tanh = u.map(|v| v.tanh());
        let actions = self.scale_actions(&head_tanh);
        if let Some(row) = actions.first_non_finite_row() {
            return Err(Error::numeric(format!("non-finite action at row {row}")));
        }
        let cache = PolicyCache {
            batch_size: b,
            context_len: k,
            histograms: input.histograms.clone(),
            states: input.states.clone(),
            timesteps: input.timesteps.to_vec(),
            key_valid,
            blocks: caches,
            ln_f,
            ln_f_out,
            head_tanh,
        };
        Ok((actions, cache))
    }

    fn scale_actions(&self, squashed: &Mat<T>) -> Mat<T> {
        let mut out = squashed.clone();
        let cfg = &self.config;
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let lo = cfg.action_low[j];
                let hi = cfg.action_high[j];
                *v = T::of(0.5 * (lo + hi)) + T::of(0.5 * (hi - lo)) * *v;
            }
        }
        out
    }

    /// Gradients of a loss with respect to every parameter and to the skill
    /// embedding inputs, given `d_actions = dL/d(actions)`.
    pub fn backward(&self, cache: &PolicyCache<T>, d_actions: &Mat<T>) -> (PolicyParams<T>, Mat<T>) {
        let p = &self.params;
        let cfg = &self.config;
        let (b, k) = (cache.batch_size, cache.context_len);
        let d = cfg.embed_dim;
        let seq = TOKENS_PER_STEP * k;
        let mut g = crate::nn::zeros_like(p);

        let mut du = d_actions.clone();
        for i in 0..du.rows() {
            for (j, v) in du.row_mut(i).iter_mut().enumerate() {
                let th = cache.head_tanh.get(i, j);
                let half = T::of(0.5 * (cfg.action_high[j] - cfg.action_low[j]));
                *v = *v * half * (T::one() - th * th);
            }
        }
        let d_lnf = p.action_head.backward(&cache.ln_f_out, &du, &mut g.action_head);
        let d_state_rows = p.ln_f.backward(&cache.ln_f, &d_lnf, &mut g.ln_f);
        let mut dx = Mat::zeros(b * seq, d);
        for pos in 0..b * k {
            let row = (pos / k) * seq + TOKENS_PER_STEP * (pos % k) + 2;
            dx.row_mut(row).copy_from_slice(d_state_rows.row(pos));
        }

        for (li, blk) in p.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[li];
            let gb = &mut g.blocks[li];
            let d_act = blk.proj.backward(&c.fc_act, &dx, &mut gb.proj);
            let mut d_pre = d_act;
            for (dv, &gr) in d_pre.as_mut_slice().iter_mut().zip(c.fc_grad.as_slice()) {
                *dv *= gr;
            }
            let d_ln2 = blk.fc.backward(&c.ln2_out, &d_pre, &mut gb.fc);
            dx.add_assign(&blk.ln2.backward(&c.ln2, &d_ln2, &mut gb.ln2));
            let d_att = blk.attn_out.backward(&c.att, &dx, &mut gb.attn_out);
            let d_qkv = attention_backward(&c.qkv, &c.probs, &d_att, b, seq, cfg.n_heads, &cache.key_valid);
            let d_ln1 = blk.qkv.backward(&c.ln1_out, &d_qkv, &mut gb.qkv);
            dx.add_assign(&blk.ln1.backward(&c.ln1, &d_ln1, &mut gb.ln1));
        }

        let mut dh = Mat::zeros(b * k, d);
        let mut dsp = Mat::zeros(b * k, d);
        let mut dskill = Mat::zeros(b * k, d);
        for pos in 0..b * k {
            let base = (pos / k) * seq + TOKENS_PER_STEP * (pos % k);
            dh.row_mut(pos).copy_from_slice(dx.row(base));
            dskill.row_mut(pos).copy_from_slice(dx.row(base + 1));
            dsp.row_mut(pos).copy_from_slice(dx.row(base + 2));
            let te = g.timestep_embed.row_mut(cache.timesteps[pos]);
            for ((t, &a), &s) in te.iter_mut().zip(dx.row(base)).zip(dx.row(base + 2)) {
                *t += a + s;
            }
        }
        p.hist_proj.backward_params(&cache.histograms, &dh, &mut g.hist_proj);
        p.state_proj.backward_params(&cache.states, &dsp, &mut g.state_proj);
        (g, dskill)
    }
}

/// Multi-head causal self-attention core over `qkv` rows laid out
/// `[q | k | v]`. Returns the concatenated head outputs and the attention
/// probabilities, stored `[batch][head][query][key]`.
fn attention_forward<T: Scalar>(
    qkv: &Mat<T>,
    batch: usize,
    seq: usize,
    heads: usize,
    key_valid: &[bool],
) -> (Mat<T>, Vec<T>) {
    let d = qkv.cols() / 3;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = Mat::zeros(batch * seq, d);
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    out.as_mut_slice()
        .par_chunks_mut(seq * d)
        .zip(probs.par_chunks_mut(heads * seq * seq))
        .enumerate()
        .for_each(|(bi, (o, pr))| {
            let valid = &key_valid[bi * seq..(bi + 1) * seq];
            let row = |i: usize| qkv.row(bi * seq + i);
            let mut scores = vec![T::zero(); seq];
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..seq {
                    let q = &row(i)[qo..qo + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        if valid[j] {
                            let kk = &row(j)[ko..ko + dh];
                            let s = q.iter().zip(kk).map(|(&a, &b)| a * b).sum::<T>() * scale;
                            scores[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                    }
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let mut total = T::zero();
                    for j in 0..=i {
                        if valid[j] {
                            let e = (scores[j] - max).exp();
                            scores[j] = e;
                            total += e;
                        }
                    }
                    let prow = &mut pr[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                    let orow = &mut o[i * d + qo..i * d + qo + dh];
                    for j in 0..=i {
                        if valid[j] {
                            let pij = scores[j] / total;
                            prow[j] = pij;
                            let v = &row(j)[vo..vo + dh];
                            for (ov, &vv) in orow.iter_mut().zip(v) {
                                *ov += pij * vv;
                            }
                        }
                    }
                }
            }
        });
    (out, probs)
}

fn attention_backward<T: Scalar>(
    qkv: &Mat<T>,
    probs: &[T],
    d_att: &Mat<T>,
    batch: usize,
    seq: usize,
    heads: usize,
    key_valid: &[bool],
) -> Mat<T> {
    let d = qkv.cols() / 3;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut d_qkv = Mat::zeros(batch * seq, 3 * d);
    d_qkv
        .as_mut_slice()
        .par_chunks_mut(seq * 3 * d)
        .enumerate()
        .for_each(|(bi, dq)| {
            let valid = &key_valid[bi * seq..(bi + 1) * seq];
            let row = |i: usize| qkv.row(bi * seq + i);
            let pr = &probs[bi * heads * seq * seq..(bi + 1) * heads * seq * seq];
            let mut dp = vec![T::zero(); seq];
            let mut dqi = vec![T::zero(); dh];
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..seq {
                    let dout = &d_att.row(bi * seq + i)[qo..qo + dh];
                    let prow = &pr[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                    let mut weighted = T::zero();
                    for j in 0..=i {
                        if valid[j] {
                            let v = &row(j)[vo..vo + dh];
                            let g = dout.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
                            dp[j] = g;
                            weighted += prow[j] * g;
                        }
                    }
                    let q = &row(i)[qo..qo + dh];
                    dqi.fill(T::zero());
                    for j in 0..=i {
                        if !valid[j] {
                            continue;
                        }
                        let pij = prow[j];
                        let ds = pij * (dp[j] - weighted) * scale;
                        for (acc, &kc) in dqi.iter_mut().zip(&row(j)[ko..ko + dh]) {
                            *acc += ds * kc;
                        }
                        let rj = &mut dq[j * 3 * d..(j + 1) * 3 * d];
                        let (dk, dv) = rj[ko..].split_at_mut(d);
                        for (acc, &qc) in dk[..dh].iter_mut().zip(q) {
                            *acc += ds * qc;
                        }
                        for (acc, &oc) in dv[..dh].iter_mut().zip(dout) {
                            *acc += pij * oc;
                        }
                    }
                    for (acc, &g) in dq[i * 3 * d + qo..i * 3 * d + qo + dh].iter_mut().zip(&dqi) {
                        *acc += g;
                    }
                }
            }
        });
    d_qkv
}

/// Mean squared error over unmasked steps and all action dimensions, with its
/// gradient with respect to `predicted`.
pub fn action_loss<T: Scalar>(
    predicted: &Mat<T>,
    target: &Mat<T>,
    pad_mask: &[bool],
) -> Result<(T, Mat<T>)> {
    if predicted.shape() != target.shape() || pad_mask.len() != predicted.rows() {
        return Err(Error::argument("action_loss shape mismatch"));
    }
    let real = pad_mask.iter().filter(|&&m| m).count();
    if real == 0 {
        return Err(Error::argument("every position is masked"));
    }
    let n = T::of((real * predicted.cols()) as f64);
    let mut grad = Mat::zeros(predicted.rows(), predicted.cols());
    let mut total = T::zero();
    for (i, &m) in pad_mask.iter().enumerate() {
        if !m {
            continue;
        }
        for j in 0..predicted.cols() {
            let diff = predicted.get(i, j) - target.get(i, j);
            total += diff * diff;
            grad.set(i, j, T::of(2.0) * diff / n);
        }
    }
    Ok((total / n, grad))
}
