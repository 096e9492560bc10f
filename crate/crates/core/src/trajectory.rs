//! Offline trajectory datasets: validation, normalization statistics and
//! context-window sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to per-dimension state std.
pub const STD_FLOOR: f64 = 1e-6;

/// One episode. `states[t]` is the observation the agent acted on at step `t`;
/// the terminal observation is not stored, so there are as many states as
/// actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Option<Vec<f32>>,
    /// Behaviour mode of the generator that produced it, when known.
    pub mode: Option<u32>,
}

impl Trajectory {
    pub fn new(
        episode_id: u64,
        state_dim: usize,
        action_dim: usize,
        states: Vec<f32>,
        actions: Vec<f32>,
        rewards: Option<Vec<f32>>,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::validation(format!(
                "episode {episode_id}: dimensions must be positive"
            )));
        }
        if states.len() % state_dim != 0 || actions.len() % action_dim != 0 {
            return Err(Error::validation(format!(
                "episode {episode_id}: array length is not a multiple of its dimension"
            )));
        }
        let len = actions.len() / action_dim;
        if len == 0 {
            return Err(Error::validation(format!("episode {episode_id}: empty trajectory")));
        }
        if states.len() / state_dim != len {
            return Err(Error::validation(format!(
                "episode {episode_id}: {} states for {len} actions",
                states.len() / state_dim
            )));
        }
        if let Some(r) = &rewards {
            if r.len() != len {
                return Err(Error::validation(format!(
                    "episode {episode_id}: {} rewards for {len} actions",
                    r.len()
                )));
            }
        }
        Ok(Self {
            episode_id,
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            mode: None,
        })
    }

    /// Builds a trajectory from a logged episode that still includes the
    /// terminal observation (`T + 1` states for `T` actions); the terminal
    /// state is dropped.
    pub fn from_episode(
        episode_id: u64,
        state_dim: usize,
        action_dim: usize,
        mut states: Vec<f32>,
        actions: Vec<f32>,
        rewards: Option<Vec<f32>>,
    ) -> Result<Self> {
        if state_dim > 0 && action_dim > 0 && states.len() / state_dim == actions.len() / action_dim + 1 {
            states.truncate(states.len() - state_dim);
        }
        Self::new(episode_id, state_dim, action_dim, states, actions, rewards)
    }

    pub fn with_mode(mut self, mode: u32) -> Self {
        self.mode = Some(mode);
        self
    }

    pub fn len(&self) -> usize {
        self.actions.len() / self.action_dim
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state(&self, t: usize) -> &[f32] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn states(&self) -> &[f32] {
        &self.states
    }

    pub fn actions(&self) -> &[f32] {
        &self.actions
    }

    pub fn rewards(&self) -> Option<&[f32]> {
        self.rewards.as_deref()
    }

    pub fn total_reward(&self) -> Option<f64> {
        self.rewards
            .as_ref()
            .map(|r| r.iter().map(|&x| x as f64).sum())
    }
}

/// Per-dimension affine state normalization `(s - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StateNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean/std over every state of every trajectory.
    pub fn fit(trajectories: &[Trajectory], state_dim: usize) -> Self {
        let mut sum = vec![0.0f64; state_dim];
        let mut count = 0usize;
        for tr in trajectories {
            for s in tr.states.chunks_exact(state_dim) {
                for (acc, &v) in sum.iter_mut().zip(s) {
                    *acc += v as f64;
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0f64; state_dim];
        for tr in trajectories {
            for s in tr.states.chunks_exact(state_dim) {
                for ((acc, &v), m) in sq.iter_mut().zip(s).zip(&mean) {
                    let d = v as f64 - m;
                    *acc += d * d;
                }
            }
        }
        Self {
            std: sq.iter().map(|&s| (s / n).sqrt().max(STD_FLOOR)).collect(),
            mean,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes a flat buffer of one or more `dim`-sized states.
    pub fn normalize_into(&self, raw: &[f32], out: &mut [f32]) {
        let dim = self.dim();
        for (o_row, x_row) in out.chunks_exact_mut(dim).zip(raw.chunks_exact(dim)) {
            for (((o, &x), &m), &s) in o_row.iter_mut().zip(x_row).zip(&self.mean).zip(&self.std) {
                *o = ((x as f64 - m) / s) as f32;
            }
        }
    }

    pub fn normalize(&self, raw: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; raw.len()];
        self.normalize_into(raw, &mut out);
        out
    }

    pub fn normalize_f64(&self, raw: &[f64]) -> Vec<f32> {
        raw.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&x, &m), &s)| ((x - m) / s) as f32)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    state_dim: usize,
    action_dim: usize,
    trajectories: Vec<Trajectory>,
    normalizer: StateNormalizer,
}

impl Dataset {
    pub fn new(name: impl Into<String>, trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::validation("dataset has no trajectories"))?;
        let (state_dim, action_dim) = (first.state_dim, first.action_dim);
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.state_dim != state_dim || tr.action_dim != action_dim {
                return Err(Error::validation(format!(
                    "trajectory {i} has dims (S={}, A={}), expected (S={state_dim}, A={action_dim})",
                    tr.state_dim, tr.action_dim
                )));
            }
        }
        let normalizer = StateNormalizer::fit(&trajectories, state_dim);
        Ok(Self {
            name: name.into(),
            state_dim,
            action_dim,
            trajectories,
            normalizer,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn normalizer(&self) -> &StateNormalizer {
        &self.normalizer
    }

    pub fn max_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).max().unwrap_or(0)
    }

    pub fn total_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// All states of trajectory `i`, normalized, as a flat `len x S` buffer.
    pub fn normalized_states(&self, i: usize) -> Vec<f32> {
        self.normalizer.normalize(&self.trajectories[i].states)
    }

    /// Highest per-episode return in the dataset, if rewards are present.
    pub fn best_return(&self) -> Option<f64> {
        dataset_stats(self).max_reward
    }
}

/// Aligned training windows. Arrays are flattened batch-major:
/// `states[(b * K + k) * S + s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    pub batch_size: usize,
    pub context_len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub timesteps: Vec<usize>,
    /// `true` marks a real step.
    pub pad_mask: Vec<bool>,
    pub trajectory_ids: Vec<usize>,
    pub start_offsets: Vec<usize>,
}

impl ContextBatch {
    pub fn real_steps(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }
}

/// Samples `batch_size` windows of length `context_len`: a trajectory is drawn
/// uniformly, then a start step uniformly within it. Windows running past the
/// end are right-padded with zeros.
pub fn sample_batch(
    dataset: &Dataset,
    batch_size: usize,
    context_len: usize,
    rng_seed: u64,
) -> Result<ContextBatch> {
    if batch_size == 0 {
        return Err(Error::argument("batch_size must be positive"));
    }
    if context_len == 0 {
        return Err(Error::argument("context_len must be positive"));
    }
    if dataset.is_empty() {
        return Err(Error::argument("cannot sample from an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picks = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let traj = rng.gen_range(0..dataset.len());
        let start = rng.gen_range(0..dataset.trajectories[traj].len());
        picks.push((traj, start));
    }
    Ok(assemble_batch(dataset, &picks, context_len))
}

/// Builds a batch from explicit `(trajectory, start)` pairs.
pub fn assemble_batch(dataset: &Dataset, picks: &[(usize, usize)], context_len: usize) -> ContextBatch {
    let (s_dim, a_dim, k_len) = (dataset.state_dim, dataset.action_dim, context_len);
    let b = picks.len();
    let mut batch = ContextBatch {
        batch_size: b,
        context_len: k_len,
        state_dim: s_dim,
        action_dim: a_dim,
        states: vec![0.0; b * k_len * s_dim],
        actions: vec![0.0; b * k_len * a_dim],
        timesteps: vec![0; b * k_len],
        pad_mask: vec![false; b * k_len],
        trajectory_ids: Vec::with_capacity(b),
        start_offsets: Vec::with_capacity(b),
    };
    for (bi, &(traj, start)) in picks.iter().enumerate() {
        let tr = &dataset.trajectories[traj];
        batch.trajectory_ids.push(traj);
        batch.start_offsets.push(start);
        let real = (tr.len() - start).min(k_len);
        for k in 0..real {
            let t = start + k;
            let pos = bi * k_len + k;
            dataset
                .normalizer
                .normalize_into(tr.state(t), &mut batch.states[pos * s_dim..(pos + 1) * s_dim]);
            batch.actions[pos * a_dim..(pos + 1) * a_dim].copy_from_slice(tr.action(t));
            batch.timesteps[pos] = t;
            batch.pad_mask[pos] = true;
        }
    }
    batch
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub num_trajectories: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub total_transitions: usize,
    pub max_episode_len: usize,
    pub avg_reward: Option<f64>,
    pub max_reward: Option<f64>,
    pub min_reward: Option<f64>,
}

/// Summary statistics; reward fields are per-episode totals and are `None`
/// unless every trajectory carries rewards.
pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    let totals: Option<Vec<f64>> = dataset
        .trajectories
        .iter()
        .map(Trajectory::total_reward)
        .collect();
    let (avg, max, min) = match totals {
        Some(t) if !t.is_empty() => (
            Some(t.iter().sum::<f64>() / t.len() as f64),
            Some(t.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            Some(t.iter().copied().fold(f64::INFINITY, f64::min)),
        ),
        _ => (None, None, None),
    };
    DatasetStats {
        name: dataset.name.clone(),
        num_trajectories: dataset.len(),
        state_dim: dataset.state_dim,
        action_dim: dataset.action_dim,
        total_transitions: dataset.total_transitions(),
        max_episode_len: dataset.max_len(),
        avg_reward: avg,
        max_reward: max,
        min_reward: min,
    }
}
