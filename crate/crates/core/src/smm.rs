//! Zero-shot trajectory reconstruction and skill-diversity measurement.

use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::error::{Error, Result};
use crate::evaluator::{rollout_commanded, rollout_skill, Agent, RolloutRecord};
use crate::relabel::aggregate_histogram;
use crate::trajectory::Trajectory;

/// 1-Wasserstein distance between two histograms over skill indices with
/// ground metric `|i - j| / (N - 1)`: the summed absolute CDF difference
/// divided by `N - 1`. Lies in `[0, 1]`.
pub fn wasserstein_1d(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::argument(format!(
            "histogram sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let n = p.len();
    if n < 2 {
        return Ok(0.0);
    }
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for i in 0..n - 1 {
        cp += p[i];
        cq += q[i];
        total += (cp - cq).abs();
    }
    Ok(total / (n - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub target_states: Vec<Vec<f64>>,
    pub target_indices: Vec<usize>,
    pub reconstruction: RolloutRecord,
    pub target_histogram: Vec<f64>,
    pub reconstructed_histogram: Vec<f64>,
    /// Euclidean distance between the final target and rollout states.
    pub endpoint_error: f64,
    pub histogram_distance: f64,
}

pub fn trajectory_states(tr: &Trajectory) -> Vec<Vec<f64>> {
    (0..tr.len())
        .map(|t| tr.state(t).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Encodes the target's states, commands their skill sequence (padded with
/// its last index up to `max_steps`) and rolls out. Only target states are
/// read.
pub fn reconstruct(
    agent: &Agent,
    env: &dyn Env,
    target_states: &[Vec<f64>],
    max_steps: usize,
    env_seed: u64,
) -> Result<ReconstructionReport> {
    if target_states.len() < 2 {
        return Err(Error::argument("a reconstruction target needs at least two states"));
    }
    if max_steps == 0 {
        return Err(Error::argument("max_steps must be positive"));
    }
    let target_indices = target_states
        .iter()
        .map(|s| agent.skill_of(s))
        .collect::<Result<Vec<_>>>()?;
    let mut commanded = target_indices.clone();
    let last = *commanded.last().expect("non-empty");
    commanded.resize(max_steps, last);
    let rec = rollout_commanded(agent, env, commanded, env_seed, &mut |_, _| {})?;
    let n = agent.num_skills();
    let target_histogram = aggregate_histogram(&target_indices, n);
    let reconstructed_histogram = aggregate_histogram(&rec.observed_indices, n);
    let endpoint_error = target_states
        .last()
        .unwrap()
        .iter()
        .zip(rec.final_state())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(ReconstructionReport {
        histogram_distance: wasserstein_1d(&target_histogram, &reconstructed_histogram)?,
        target_states: target_states.to_vec(),
        target_indices,
        reconstruction: rec,
        target_histogram,
        reconstructed_histogram,
        endpoint_error,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityTable {
    pub min: f64,
    pub max: f64,
    pub avg: f64,
    /// Observed-skill histogram of each commanded skill, pooled over seeds.
    pub histograms: Vec<Vec<f64>>,
}

/// Pairwise statistics of a set of histograms (at least two).
pub fn pairwise_stats(histograms: &[Vec<f64>]) -> Result<(f64, f64, f64)> {
    if histograms.len() < 2 {
        return Err(Error::argument("diversity needs at least two skills"));
    }
    let (mut min, mut max, mut sum, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for i in 0..histograms.len() {
        for j in i + 1..histograms.len() {
            let w = wasserstein_1d(&histograms[i], &histograms[j])?;
            min = min.min(w);
            max = max.max(w);
            sum += w;
            count += 1;
        }
    }
    Ok((min, max, sum / count as f64))
}

/// Rolls out every skill on every env seed and compares the skills' observed
/// index histograms pairwise.
pub fn diversity_table(agent: &Agent, env: &dyn Env, env_seeds: &[u64], max_steps: usize) -> Result<DiversityTable> {
    let n = agent.num_skills();
    if n < 2 {
        return Err(Error::argument("diversity needs at least two skills"));
    }
    if env_seeds.is_empty() {
        return Err(Error::argument("at least one evaluation seed is required"));
    }
    let mut histograms = Vec::with_capacity(n);
    for k in 0..n {
        let mut pooled = Vec::new();
        for &s in env_seeds {
            pooled.extend(rollout_skill(agent, env, k, max_steps, s)?.observed_indices);
        }
        histograms.push(aggregate_histogram(&pooled, n));
    }
    let (min, max, avg) = pairwise_stats(&histograms)?;
    Ok(DiversityTable { min, max, avg, histograms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_extremes() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(wasserstein_1d(&p, &p).unwrap(), 0.0);
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        a[0] = 1.0;
        b[7] = 1.0;
        assert!((wasserstein_1d(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(wasserstein_1d(&p, &a), Err(Error::Argument(_))));
    }

    #[test]
    fn neighbouring_point_masses() {
        // One step on a 5-point line costs 1/4.
        let a = [0.0, 1.0, 0.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, 0.0, 0.0];
        assert!((wasserstein_1d(&a, &b).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn pairwise_on_two_is_single_value() {
        let (mn, mx, avg) = pairwise_stats(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!((mn, mx, avg), (1.0, 1.0, 1.0));
        let (mn, _, _) = pairwise_stats(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        assert_eq!(mn, 0.0);
        assert!(pairwise_stats(&[vec![1.0]]).is_err());
    }
}
