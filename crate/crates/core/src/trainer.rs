//! Offline skill discovery training loop.
//!
//! Each iteration relabels the whole dataset under the current quantizer and
//! then runs `updates_per_iteration` gradient updates on the joint objective
//! `action MSE + beta * commitment`, followed by an EMA codebook update.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::kmeans::kmeans_fit;
use crate::nn::{zeros_like, ParamSet};
use crate::optim::{clip_grad_norm, AdamState, AdamWConfig};
use crate::policy::{action_loss, Policy, PolicyConfig, PolicyInput, PolicyParams};
use crate::quantizer::{init_codebook, vq_loss, vq_loss_grad, Quantizer, SkillEncoder};
use crate::relabel::{relabel_dataset, slice_labels, LabeledTrajectory};
use crate::tensor::{Mat, Scalar};
use crate::trajectory::{sample_batch, ContextBatch, Dataset, StateNormalizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    /// Learned encoder with an EMA codebook.
    Vq,
    /// Frozen K-Means centres over projected states.
    Kmeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub updates_per_iteration: usize,
    pub learning_rate: f64,
    pub grad_norm_clip: f64,
    pub iterations: usize,
    pub num_skills: usize,
    pub seed: u64,
    pub commitment_beta: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub quantizer: QuantizerKind,
    pub kmeans_iterations: usize,
    /// Run the evaluation hook every this many iterations (0 = never).
    pub eval_every: usize,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            embed_dim: 256,
            context_len: 20,
            dropout: 0.0,
            batch_size: 256,
            updates_per_iteration: 50,
            learning_rate: 1e-4,
            grad_norm_clip: 0.25,
            iterations: 200,
            num_skills: 8,
            seed: 0,
            commitment_beta: 0.25,
            warmup_steps: 1000,
            weight_decay: 1e-4,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            encoder_hidden: 256,
            encoder_layers: 2,
            quantizer: QuantizerKind::Vq,
            kmeans_iterations: 50,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// A small model that trains on the toy environments in seconds on one
    /// core.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            embed_dim: 32,
            context_len: 10,
            batch_size: 32,
            updates_per_iteration: 10,
            learning_rate: 1e-3,
            warmup_steps: 100,
            encoder_hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("embed_dim", self.embed_dim),
            ("context_len", self.context_len),
            ("batch_size", self.batch_size),
            ("updates_per_iteration", self.updates_per_iteration),
            ("encoder_hidden", self.encoder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.num_skills < 2 {
            return Err(Error::config("num_skills must be at least 2"));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_norm_clip > 0.0) {
            return Err(Error::config("learning_rate and grad_norm_clip must be positive"));
        }
        if !(self.commitment_beta >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("commitment_beta and weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.ema_epsilon > 0.0) {
            return Err(Error::config("ema_decay must lie in [0, 1) and ema_epsilon be positive"));
        }
        if self.dropout != 0.0 {
            return Err(Error::config("only dropout = 0.0 is supported"));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::config("embed_dim must be divisible by n_heads"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ..AdamWConfig::default()
        }
    }

    /// Sets one key from its textual value, e.g. `("batch_size", "64")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        if !map.contains_key(key) {
            return Err(Error::config(format!("unknown config key `{key}`")));
        }
        map.insert(key.to_string(), parse_scalar(value));
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::config(format!("{key} = {value}: {e}")))?;
        Ok(())
    }

    /// Parses a flat JSON object or `key = value` lines (`#` comments allowed).
    /// Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            return serde_json::from_str(trimmed).map_err(|e| Error::config(e.to_string()));
        }
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_scalar(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

/// How skill embeddings reach the policy during a loss evaluation.
#[derive(Clone, Copy, Debug)]
pub enum SkillPath<'a, T> {
    /// Quantize the latents; the policy sees the selected codes and the
    /// encoder receives the straight-through gradient.
    Quantized,
    /// The straight-through estimator written as a differentiable function:
    /// the policy sees `latents + offset` and the commitment term compares
    /// against the constant `selected`. At `offset = selected - latents` this
    /// has the same value and analytic gradient as [`SkillPath::Quantized`],
    /// which makes it usable for finite-difference checks.
    Linearized { offset: &'a Mat<T>, selected: &'a Mat<T> },
}

/// Model inputs for one batch before encoding; all matrices are
/// `(B * K) x dim`, batch-major.
#[derive(Clone, Debug)]
pub struct BatchTensors<T> {
    pub batch_size: usize,
    pub states: Mat<T>,
    pub actions: Mat<T>,
    pub histograms: Mat<T>,
    pub timesteps: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl<T: Scalar> BatchTensors<T> {
    /// Converts a sampled batch and pulls histograms from the relabeled
    /// trajectories at the same offsets.
    pub fn from_batch(batch: &ContextBatch, labels: &[LabeledTrajectory<T>], num_skills: usize) -> Result<Self> {
        let rows = batch.batch_size * batch.context_len;
        let mut histograms = Mat::zeros(rows, num_skills);
        for (bi, (&traj, &start)) in batch.trajectory_ids.iter().zip(&batch.start_offsets).enumerate() {
            let w = slice_labels(&labels[traj], start, batch.context_len)?;
            let base = bi * batch.context_len;
            for k in 0..batch.context_len {
                histograms.row_mut(base + k).copy_from_slice(w.histograms.row(k));
            }
        }
        let cast = |v: &[f32], c: usize| Mat::from_vec(rows, c, v.iter().map(|&x| T::of(x as f64)).collect());
        Ok(Self {
            batch_size: batch.batch_size,
            states: cast(&batch.states, batch.state_dim),
            actions: cast(&batch.actions, batch.action_dim),
            histograms,
            timesteps: batch.timesteps.clone(),
            pad_mask: batch.pad_mask.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: T,
    pub action_loss: T,
    pub vq_loss: T,
    pub policy_grads: PolicyParams<T>,
    pub encoder_grads: SkillEncoder<T>,
    /// Latents and code indices of the real (unpadded) steps, in batch order.
    pub latents: Mat<T>,
    pub indices: Vec<usize>,
}

/// Joint loss and its gradients with respect to the policy and encoder.
pub fn loss_and_grads<T: Scalar>(
    policy: &Policy<T>,
    quantizer: &Quantizer<T>,
    batch: &BatchTensors<T>,
    beta: f64,
    path: SkillPath<T>,
) -> Result<LossOutput<T>> {
    let real: Vec<usize> = (0..batch.pad_mask.len()).filter(|&i| batch.pad_mask[i]).collect();
    if real.is_empty() {
        return Err(Error::argument("batch has no real steps"));
    }
    let real_states = batch.states.gather_rows(&real);
    let (latents, enc_cache) = quantizer.encoder.encode_cached(&real_states)?;
    let (indices, selected, z_real) = match path {
        SkillPath::Quantized => {
            let idx = quantizer.codebook.assign(&latents);
            let sel = quantizer.codebook.lookup(&idx);
            // Straight-through forward value is exactly the selected code.
            let z = sel.clone();
            (idx, sel, z)
        }
        SkillPath::Linearized { offset, selected } => {
            let mut z = latents.clone();
            z.add_assign(offset);
            (quantizer.codebook.assign(selected), selected.clone(), z)
        }
    };
    let d = latents.cols();
    let mut skills = Mat::zeros(batch.pad_mask.len(), d);
    for (r, &i) in real.iter().enumerate() {
        skills.row_mut(i).copy_from_slice(z_real.row(r));
    }
    let input = PolicyInput {
        batch_size: batch.batch_size,
        histograms: &batch.histograms,
        skills: &skills,
        states: &batch.states,
        timesteps: &batch.timesteps,
        pad_mask: &batch.pad_mask,
    };
    let (pred, cache) = policy.forward_cached(&input)?;
    let (a_loss, d_pred) = action_loss(&pred, &batch.actions, &batch.pad_mask)?;
    let commit = vq_loss(&latents, &selected);
    let loss = a_loss + T::of(beta) * commit;

    let (policy_grads, d_skills) = policy.backward(&cache, &d_pred);
    let mut encoder_grads = zeros_like(&quantizer.encoder);
    if !quantizer.frozen {
        // Straight-through: the skill gradient passes to the latents unchanged.
        let mut d_latents = d_skills.gather_rows(&real);
        let mut commit_grad = vq_loss_grad(&latents, &selected);
        commit_grad.scale(T::of(beta));
        d_latents.add_assign(&commit_grad);
        quantizer.encoder.backward(&enc_cache, &d_latents, &mut encoder_grads);
    }
    Ok(LossOutput {
        loss,
        action_loss: a_loss,
        vq_loss: commit,
        policy_grads,
        encoder_grads,
        latents,
        indices,
    })
}

/// Per-update losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub action: f64,
    pub vq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub mean_loss: f64,
    pub mean_action_loss: f64,
    pub mean_vq_loss: f64,
    pub mean_grad_norm: f64,
    /// Distinct codes assigned across the relabelled dataset.
    pub codes_in_use: usize,
}

/// Lower and upper action bounds used for the policy's output squashing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBounds {
    /// Tightest box around the dataset's actions, widened where degenerate.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let a = dataset.action_dim();
        let mut low = vec![f64::INFINITY; a];
        let mut high = vec![f64::NEG_INFINITY; a];
        for tr in dataset.trajectories() {
            for row in tr.actions().chunks_exact(a) {
                for (j, &v) in row.iter().enumerate() {
                    low[j] = low[j].min(v as f64);
                    high[j] = high[j].max(v as f64);
                }
            }
        }
        for j in 0..a {
            if high[j] - low[j] < 1e-6 {
                low[j] -= 1.0;
                high[j] += 1.0;
            }
        }
        Self { low, high }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub policy: Policy<f32>,
    pub quantizer: Quantizer<f32>,
    pub normalizer: StateNormalizer,
    pub policy_opt: AdamState<PolicyParams<f32>>,
    pub encoder_opt: AdamState<SkillEncoder<f32>>,
    pub iteration: usize,
    pub global_step: u64,
    pub losses: Vec<LossRecord>,
    pub reports: Vec<IterationReport>,
    /// Free-form tag of the environment the data came from, if known.
    pub env: Option<String>,
}

/// Per-update batch seed, a pure function of the run seed and step.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl TrainState {
    pub fn init(config: &TrainConfig, dataset: &Dataset, bounds: &ActionBounds) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = dataset.state_dim();
        let d = config.embed_dim;
        let quantizer = match config.quantizer {
            QuantizerKind::Vq => {
                let hidden = vec![config.encoder_hidden; config.encoder_layers];
                let encoder = SkillEncoder::init(s, &hidden, d, &mut rng);
                let codebook = init_codebook(
                    &encoder,
                    dataset,
                    config.num_skills,
                    config.ema_decay,
                    config.ema_epsilon,
                    &mut rng,
                )?;
                Quantizer { encoder, codebook, frozen: false }
            }
            QuantizerKind::Kmeans => {
                let mut flat = Vec::with_capacity(dataset.total_transitions() * s);
                for i in 0..dataset.len() {
                    flat.extend(dataset.normalized_states(i));
                }
                let states = Mat::from_vec(flat.len() / s, s, flat);
                kmeans_fit(&states, config.num_skills, d, config.kmeans_iterations, config.seed)?
            }
        };
        let policy_config = PolicyConfig {
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            embed_dim: d,
            context_len: config.context_len,
            dropout: config.dropout,
            max_timestep: dataset.max_len(),
            num_skills: config.num_skills,
            state_dim: s,
            action_dim: dataset.action_dim(),
            action_low: bounds.low.clone(),
            action_high: bounds.high.clone(),
        };
        let policy = Policy::new(policy_config, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            policy_opt: AdamState::new(&policy.params),
            encoder_opt: AdamState::new(&quantizer.encoder),
            policy,
            quantizer,
            normalizer: dataset.normalizer().clone(),
            iteration: 0,
            global_step: 0,
            losses: Vec::new(),
            reports: Vec::new(),
            env: None,
        })
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.state_dim() != self.policy.config.state_dim
            || dataset.action_dim() != self.policy.config.action_dim
        {
            return Err(Error::config("dataset dims do not match the model"));
        }
        if dataset.max_len() > self.policy.config.max_timestep {
            return Err(Error::config("dataset has longer episodes than the model's timestep table"));
        }
        Ok(())
    }

    /// One relabel pass followed by `updates_per_iteration` updates.
    pub fn train_iteration(&mut self, dataset: &Dataset) -> Result<IterationReport> {
        self.check_dataset(dataset)?;
        let labels = relabel_dataset(dataset, &self.quantizer)?;
        let mut used = vec![false; self.quantizer.num_skills()];
        for l in &labels {
            for &i in &l.skill_indices {
                used[i] = true;
            }
        }
        let cfg = self.config.clone();
        let opt = cfg.optimizer();
        let mut sums = [0.0f64; 4];
        for _ in 0..cfg.updates_per_iteration {
            let batch = sample_batch(
                dataset,
                cfg.batch_size,
                cfg.context_len,
                step_seed(cfg.seed, self.global_step),
            )?;
            let tensors = BatchTensors::from_batch(&batch, &labels, cfg.num_skills)?;
            let mut out = loss_and_grads(
                &self.policy,
                &self.quantizer,
                &tensors,
                cfg.commitment_beta,
                SkillPath::Quantized,
            )?;
            let record = LossRecord {
                total: out.loss as f64,
                action: out.action_loss as f64,
                vq: out.vq_loss as f64,
            };
            if !record.total.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at iteration {} step {}: action {} vq {} (trajectories {:?}, starts {:?})",
                    self.iteration, self.global_step, record.action, record.vq, batch.trajectory_ids, batch.start_offsets
                )));
            }
            let norm = clip_grad_norm::<f32>(
                &mut [&mut out.policy_grads as &mut dyn ParamSet<f32>, &mut out.encoder_grads],
                cfg.grad_norm_clip,
            );
            if !norm.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient norm at iteration {} step {}",
                    self.iteration, self.global_step
                )));
            }
            self.policy_opt.step(&opt, &mut self.policy.params, &mut out.policy_grads);
            if !self.quantizer.frozen {
                self.encoder_opt.step(&opt, &mut self.quantizer.encoder, &mut out.encoder_grads);
                self.quantizer.codebook.ema_update(&out.latents, &out.indices);
            }
            self.global_step += 1;
            self.losses.push(record);
            sums[0] += record.total;
            sums[1] += record.action;
            sums[2] += record.vq;
            sums[3] += norm as f64;
        }
        self.iteration += 1;
        let n = cfg.updates_per_iteration as f64;
        let report = IterationReport {
            iteration: self.iteration,
            mean_loss: sums[0] / n,
            mean_action_loss: sums[1] / n,
            mean_vq_loss: sums[2] / n,
            mean_grad_norm: sums[3] / n,
            codes_in_use: used.iter().filter(|&&u| u).count(),
        };
        self.reports.push(report.clone());
        Ok(report)
    }
}

/// Optional side effects of [`fit`].
#[derive(Default)]
pub struct FitHooks<'a> {
    /// Checkpoint file rewritten every `checkpoint_every` iterations and at the
    /// end.
    pub checkpoint: Option<PathBuf>,
    /// Called every `eval_every` iterations.
    pub evaluate: Option<Box<dyn FnMut(&TrainState) -> Result<()> + 'a>>,
    pub on_iteration: Option<Box<dyn FnMut(&IterationReport) + 'a>>,
}

/// Trains until `state.config.iterations` iterations have run. A freshly
/// initialized state trains from scratch; a loaded checkpoint resumes.
pub fn run(state: &mut TrainState, dataset: &Dataset, hooks: &mut FitHooks) -> Result<()> {
    let total = state.config.iterations;
    while state.iteration < total {
        let report = state.train_iteration(dataset)?;
        log::debug!(
            "iteration {} loss {:.5} action {:.5} vq {:.5} codes {}",
            report.iteration,
            report.mean_loss,
            report.mean_action_loss,
            report.mean_vq_loss,
            report.codes_in_use
        );
        if let Some(f) = hooks.on_iteration.as_mut() {
            f(&report);
        }
        let it = state.iteration;
        if state.config.eval_every > 0 && it % state.config.eval_every == 0 {
            if let Some(f) = hooks.evaluate.as_mut() {
                f(state)?;
            }
        }
        if let Some(path) = &hooks.checkpoint {
            let every = state.config.checkpoint_every;
            if (every > 0 && it % every == 0) || it == total {
                crate::checkpoint::save(state, path)?;
            }
        }
    }
    if total == 0 {
        if let Some(path) = &hooks.checkpoint {
            crate::checkpoint::save(state, path)?;
        }
    }
    Ok(())
}

pub fn fit(config: &TrainConfig, dataset: &Dataset, bounds: &ActionBounds) -> Result<TrainState> {
    let mut state = TrainState::init(config, dataset, bounds)?;
    run(&mut state, dataset, &mut FitHooks::default())?;
    Ok(state)
}

/// Config keys and their current values, for manifests and logs.
pub fn config_map(config: &TrainConfig) -> BTreeMap<String, Value> {
    match serde_json::to_value(config).expect("config serializes") {
        Value::Object(m) => m.into_iter().collect(),
        _ => unreachable!(),
    }
}
