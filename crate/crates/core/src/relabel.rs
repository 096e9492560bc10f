//! Hindsight skill labels: per-state skill indices and the normalized
//! histogram of each state's future skills.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quantizer::Quantizer;
use crate::tensor::{Mat, Scalar};
use crate::trajectory::Dataset;

/// Row `t` is the normalized count of `indices[t..]`: a reverse cumulative sum
/// of one-hot rows, each divided by its own total (`T - t`).
pub fn generate_histograms<T: Scalar>(indices: &[usize], num_skills: usize) -> Result<Mat<T>> {
    if indices.is_empty() {
        return Err(Error::argument("cannot build histograms for an empty sequence"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= num_skills) {
        return Err(Error::argument(format!("skill index {bad} out of range for {num_skills} skills")));
    }
    let len = indices.len();
    let mut out = Mat::zeros(len, num_skills);
    let mut counts = vec![0u32; num_skills];
    for t in (0..len).rev() {
        counts[indices[t]] += 1;
        let total = T::of((len - t) as f64);
        for (o, &c) in out.row_mut(t).iter_mut().zip(&counts) {
            *o = T::of(c as f64) / total;
        }
    }
    Ok(out)
}

/// Normalized visitation histogram of a whole index sequence (row 0 of
/// [`generate_histograms`]).
pub fn aggregate_histogram(indices: &[usize], num_skills: usize) -> Vec<f64> {
    let mut h = vec![0.0; num_skills];
    for &i in indices {
        h[i] += 1.0;
    }
    let n = indices.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTrajectory<T> {
    /// Position of the source trajectory in its dataset.
    pub trajectory: usize,
    pub skill_indices: Vec<usize>,
    pub skill_embeddings: Mat<T>,
    pub histograms: Mat<T>,
}

impl<T> LabeledTrajectory<T> {
    pub fn len(&self) -> usize {
        self.skill_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skill_indices.is_empty()
    }
}

/// Encodes and quantizes every state of every trajectory under the given
/// quantizer snapshot and rebuilds the future-skill histograms.
pub fn relabel_dataset<T: Scalar>(
    dataset: &Dataset,
    quantizer: &Quantizer<T>,
) -> Result<Vec<LabeledTrajectory<T>>> {
    let s_dim = dataset.state_dim();
    let n = quantizer.num_skills();
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let norm = dataset.normalized_states(i);
            let rows = norm.len() / s_dim;
            let states = Mat::from_vec(rows, s_dim, norm.iter().map(|&v| T::of(v as f64)).collect());
            let (_, idx, sel) = quantizer.encode_quantize(&states)?;
            let histograms = generate_histograms(&idx, n)?;
            Ok(LabeledTrajectory {
                trajectory: i,
                skill_indices: idx,
                skill_embeddings: sel,
                histograms,
            })
        })
        .collect()
}

/// A right-padded window of labels starting at step `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelWindow<T> {
    pub histograms: Mat<T>,
    pub embeddings: Mat<T>,
    /// Zero at padded steps.
    pub indices: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

pub fn slice_labels<T: Scalar>(
    labeled: &LabeledTrajectory<T>,
    start: usize,
    context_len: usize,
) -> Result<LabelWindow<T>> {
    if start >= labeled.len() {
        return Err(Error::argument(format!(
            "window start {start} outside trajectory of length {}",
            labeled.len()
        )));
    }
    let n = labeled.histograms.cols();
    let d = labeled.skill_embeddings.cols();
    let mut w = LabelWindow {
        histograms: Mat::zeros(context_len, n),
        embeddings: Mat::zeros(context_len, d),
        indices: vec![0; context_len],
        pad_mask: vec![false; context_len],
    };
    let real = (labeled.len() - start).min(context_len);
    for k in 0..real {
        let t = start + k;
        w.histograms.row_mut(k).copy_from_slice(labeled.histograms.row(t));
        w.embeddings.row_mut(k).copy_from_slice(labeled.skill_embeddings.row(t));
        w.indices[k] = labeled.skill_indices[t];
        w.pad_mask[k] = true;
    }
    Ok(w)
}
