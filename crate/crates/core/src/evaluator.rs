//! Skill rollouts in a live environment.
//!
//! A rollout keeps a buffer of commanded skill indices over the whole horizon.
//! At step `t` the current state is encoded and quantized, its observed index
//! overwrites position `t`, and the future-skill histograms are regenerated
//! from the buffer, so positions after `t` still carry the command.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyInput};
use crate::quantizer::Quantizer;
use crate::relabel::generate_histograms;
use crate::tensor::Mat;
use crate::trainer::TrainState;
use crate::trajectory::StateNormalizer;

/// Read-only model snapshot used for rollouts.
#[derive(Clone, Copy, Debug)]
pub struct Agent<'a> {
    pub policy: &'a Policy<f32>,
    pub quantizer: &'a Quantizer<f32>,
    pub normalizer: &'a StateNormalizer,
}

impl TrainState {
    pub fn agent(&self) -> Agent<'_> {
        Agent {
            policy: &self.policy,
            quantizer: &self.quantizer,
            normalizer: &self.normalizer,
        }
    }
}

impl Agent<'_> {
    pub fn num_skills(&self) -> usize {
        self.quantizer.num_skills()
    }

    pub fn check(&self, env: &dyn Env) -> Result<()> {
        let pc = &self.policy.config;
        let spec = env.spec();
        if pc.num_skills != self.quantizer.num_skills() || pc.embed_dim != self.quantizer.latent_dim() {
            return Err(Error::config("policy and quantizer disagree on skill count or dimension"));
        }
        if pc.state_dim != spec.state_dim
            || pc.action_dim != spec.action_dim
            || self.normalizer.dim() != spec.state_dim
            || self.quantizer.encoder.state_dim() != spec.state_dim
        {
            return Err(Error::config(format!(
                "model dims (S={}, A={}) do not match environment {} (S={}, A={})",
                pc.state_dim, pc.action_dim, spec.name, spec.state_dim, spec.action_dim
            )));
        }
        Ok(())
    }

    /// Observed skill index of a raw state.
    pub fn skill_of(&self, state: &[f64]) -> Result<usize> {
        let norm = self.normalizer.normalize_f64(state);
        let (_, idx, _) = self
            .quantizer
            .encode_quantize(&Mat::from_vec(1, norm.len(), norm))?;
        Ok(idx[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    /// Commanded skill, or `None` for a rollout driven by a full sequence.
    pub skill_id: Option<usize>,
    pub env_seed: u64,
    /// Visited states including the final one (`steps + 1` entries).
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub observed_indices: Vec<usize>,
    pub rewards: Vec<f64>,
    pub total_reward: f64,
    pub steps: usize,
    /// Goal region containing the final state, if any.
    pub final_region: Option<usize>,
}

impl RolloutRecord {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("a rollout has at least its initial state")
    }
}

/// Context positions and the position to read for step `t`: the padded prefix
/// window `[0, K)` while `t < K`, then the sliding window ending at `t`.
pub fn window_for(t: usize, context_len: usize) -> (usize, usize) {
    if t < context_len {
        (0, t)
    } else {
        (t + 1 - context_len, context_len - 1)
    }
}

/// Rolls out from `env.reset(env_seed)` with the commanded buffer `commanded`
/// (its length is the step budget). `inspect` sees the step and the buffer
/// right after the observed overwrite.
pub fn rollout_commanded(
    agent: &Agent,
    env: &dyn Env,
    commanded: Vec<usize>,
    env_seed: u64,
    inspect: &mut dyn FnMut(usize, &[usize]),
) -> Result<RolloutRecord> {
    agent.check(env)?;
    let n = agent.num_skills();
    if commanded.is_empty() {
        return Err(Error::argument("empty command sequence"));
    }
    if let Some(&bad) = commanded.iter().find(|&&i| i >= n) {
        return Err(Error::argument(format!("skill {bad} out of range for {n} skills")));
    }
    let cfg = &agent.policy.config;
    let (k_len, s_dim, d) = (cfg.context_len, cfg.state_dim, cfg.embed_dim);
    let max_steps = commanded.len();
    let mut buffer = commanded;
    let mut state = env.reset(env_seed);
    let mut rec = RolloutRecord {
        skill_id: None,
        env_seed,
        states: vec![state.clone()],
        actions: Vec::new(),
        observed_indices: Vec::new(),
        rewards: Vec::new(),
        total_reward: 0.0,
        steps: 0,
        final_region: None,
    };
    let mut norm_states: Vec<Vec<f32>> = Vec::new();
    for t in 0..max_steps {
        let norm = agent.normalizer.normalize_f64(&state);
        let (_, idx, _) = agent
            .quantizer
            .encode_quantize(&Mat::from_vec(1, s_dim, norm.clone()))?;
        norm_states.push(norm);
        buffer[t] = idx[0];
        rec.observed_indices.push(idx[0]);
        inspect(t, &buffer);
        let hist = generate_histograms::<f32>(&buffer, n)?;

        let (start, read) = window_for(t, k_len);
        let mut histograms = Mat::zeros(k_len, n);
        let mut skills = Mat::zeros(k_len, d);
        let mut states = Mat::zeros(k_len, s_dim);
        let mut timesteps = vec![0; k_len];
        let mut pad_mask = vec![false; k_len];
        for k in 0..k_len {
            let p = start + k;
            if p > t {
                break;
            }
            histograms.row_mut(k).copy_from_slice(hist.row(p));
            skills.row_mut(k).copy_from_slice(agent.quantizer.codebook.embedding(buffer[p]));
            states.row_mut(k).copy_from_slice(&norm_states[p]);
            timesteps[k] = p.min(cfg.max_timestep - 1);
            pad_mask[k] = true;
        }
        let out = agent.policy.forward(&PolicyInput {
            batch_size: 1,
            histograms: &histograms,
            skills: &skills,
            states: &states,
            timesteps: &timesteps,
            pad_mask: &pad_mask,
        })?;
        let action: Vec<f64> = out.row(read).iter().map(|&v| v as f64).collect();
        let tr = env.step(&state, &action, t);
        rec.actions.push(env.clip_action(&action));
        rec.rewards.push(tr.reward);
        rec.total_reward += tr.reward;
        rec.steps += 1;
        state = tr.next;
        rec.states.push(state.clone());
        if tr.done {
            break;
        }
    }
    rec.final_region = env.region_of(&state);
    Ok(rec)
}

/// Commands `skill_id` for the whole horizon.
pub fn rollout_skill(
    agent: &Agent,
    env: &dyn Env,
    skill_id: usize,
    max_steps: usize,
    env_seed: u64,
) -> Result<RolloutRecord> {
    if max_steps == 0 {
        return Err(Error::argument("max_steps must be positive"));
    }
    let mut rec = rollout_commanded(agent, env, vec![skill_id; max_steps], env_seed, &mut |_, _| {})?;
    rec.skill_id = Some(skill_id);
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillSummary {
    pub skill_id: usize,
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillEvaluation {
    pub skills: Vec<SkillSummary>,
    pub best_skill: usize,
    pub best_return: f64,
    /// Skill-major: all seeds of skill 0, then skill 1, ...
    pub records: Vec<RolloutRecord>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Index and value of the largest mean; the lowest index wins ties.
pub fn best_of(means: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &m) in means.iter().enumerate() {
        if best.map_or(true, |(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    best
}

/// Rolls out every skill once per env seed. The best-skill return is the
/// largest per-skill mean.
pub fn evaluate_all_skills(
    agent: &Agent,
    env: &dyn Env,
    env_seeds: &[u64],
    max_steps: usize,
) -> Result<SkillEvaluation> {
    if env_seeds.is_empty() {
        return Err(Error::argument("at least one evaluation seed is required"));
    }
    let n = agent.num_skills();
    let jobs: Vec<(usize, u64)> = (0..n)
        .flat_map(|k| env_seeds.iter().map(move |&s| (k, s)))
        .collect();
    let records: Vec<RolloutRecord> = jobs
        .par_iter()
        .map(|&(k, s)| rollout_skill(agent, env, k, max_steps, s))
        .collect::<Result<_>>()?;
    let skills: Vec<SkillSummary> = records
        .chunks(env_seeds.len())
        .enumerate()
        .map(|(k, recs)| {
            let returns: Vec<f64> = recs.iter().map(|r| r.total_reward).collect();
            let (mean_return, std_return) = mean_std(&returns);
            SkillSummary { skill_id: k, returns, mean_return, std_return }
        })
        .collect();
    let means: Vec<f64> = skills.iter().map(|s| s.mean_return).collect();
    let (best_skill, best_return) = best_of(&means).expect("at least one skill");
    Ok(SkillEvaluation { skills, best_skill, best_return, records })
}
