//! K-Means quantizer for the K-Means DT baseline: cluster centres of
//! (projected) states serve as frozen skill embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quantizer::{Quantizer, SkillCodebook, SkillEncoder};
use crate::tensor::{matmul, Mat, Scalar};

/// Identity when `state_dim == latent_dim`, otherwise a seeded Gaussian
/// projection scaled by `1/sqrt(state_dim)`.
pub fn state_projection<T: Scalar>(state_dim: usize, latent_dim: usize, seed: u64) -> Mat<T> {
    if state_dim == latent_dim {
        let mut m = Mat::zeros(state_dim, latent_dim);
        for i in 0..state_dim {
            m.set(i, i, T::one());
        }
        return m;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b6d_6561_6e73);
    Mat::randn(state_dim, latent_dim, 1.0 / (state_dim as f64).sqrt(), &mut rng)
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding on the given rows.
pub fn lloyd<T: Scalar>(points: &Mat<T>, k: usize, iterations: usize, seed: u64) -> Result<Mat<T>> {
    // Distinct rows, by bit pattern, in first-seen order.
    let mut distinct: Vec<usize> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for i in 0..points.rows() {
        let key: Vec<u64> = points.row(i).iter().map(|v| v.as_f64().to_bits()).collect();
        if seen.insert(key) {
            distinct.push(i);
        }
    }
    if distinct.len() < k {
        return Err(Error::argument(format!(
            "k-means initialization needs {k} distinct states, found {}",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = points.cols();
    let mut centres = Mat::zeros(k, d);
    let first = distinct[rng.gen_range(0..distinct.len())];
    centres.row_mut(0).copy_from_slice(points.row(first));
    let mut closest: Vec<f64> = distinct
        .iter()
        .map(|&i| sq_dist(points.row(i), centres.row(0)).as_f64())
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = None;
            for (j, &w) in closest.iter().enumerate() {
                if w > 0.0 {
                    if u < w {
                        chosen = Some(j);
                        break;
                    }
                    u -= w;
                }
            }
            // Rounding can leave u just past the last positive weight.
            chosen.unwrap_or_else(|| closest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            unreachable!("fewer distinct rows than clusters")
        };
        let row = distinct[pick];
        centres.row_mut(c).copy_from_slice(points.row(row));
        for (j, &i) in distinct.iter().enumerate() {
            let dd = sq_dist(points.row(i), centres.row(c)).as_f64();
            if dd < closest[j] {
                closest[j] = dd;
            }
        }
    }

    let mut assign = vec![usize::MAX; points.rows()];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_d = T::infinity();
            for c in 0..k {
                let dd = sq_dist(points.row(i), centres.row(c));
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Mat::<T>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous centre.
            if counts[c] > 0 {
                let n = T::of(counts[c] as f64);
                for (dst, &s) in centres.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            }
        }
    }
    Ok(centres)
}

/// Fits a frozen quantizer: a fixed projection of the normalized states into
/// the latent space followed by K-Means centres as the codebook.
pub fn kmeans_fit<T: Scalar>(
    states: &Mat<T>,
    num_skills: usize,
    latent_dim: usize,
    iterations: usize,
    seed: u64,
) -> Result<Quantizer<T>> {
    let projection = state_projection::<T>(states.cols(), latent_dim, seed);
    let projected = matmul(states, &projection);
    let centres = lloyd(&projected, num_skills, iterations, seed)?;
    Ok(Quantizer {
        encoder: SkillEncoder::projection(projection),
        codebook: SkillCodebook::from_embeddings(centres, 0.0, 0.0)?,
        frozen: true,
    })
}
