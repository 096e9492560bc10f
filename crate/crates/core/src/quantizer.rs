//! State encoder, skill codebook with EMA updates, and the straight-through
//! quantization step.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, MlpCache, ParamSet};
use crate::tensor::{Mat, Scalar};
use crate::trajectory::Dataset;

/// Guards the EMA division when a smoothed count underflows.
const TINY: f64 = 1e-12;

/// MLP from (normalized) states to continuous skill latents.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillEncoder<T> {
    pub mlp: Mlp<T>,
}

impl<T: Scalar> SkillEncoder<T> {
    /// `state_dim -> hidden -> ... -> latent_dim` with ReLU between layers.
    pub fn init<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(latent_dim);
        Self {
            mlp: Mlp::init(&sizes, rng),
        }
    }

    /// A fixed linear map without bias (used by the K-Means baseline).
    pub fn projection(weight: Mat<T>) -> Self {
        let out = weight.cols();
        Self {
            mlp: Mlp {
                layers: vec![Linear {
                    weight,
                    bias: Mat::zeros(1, out),
                }],
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn encode(&self, states: &Mat<T>) -> Result<Mat<T>> {
        Ok(self.encode_cached(states)?.0)
    }

    pub fn encode_cached(&self, states: &Mat<T>) -> Result<(Mat<T>, MlpCache<T>)> {
        if states.cols() != self.state_dim() {
            return Err(Error::argument(format!(
                "encoder expects state dim {}, got {}",
                self.state_dim(),
                states.cols()
            )));
        }
        if let Some(row) = states.first_non_finite_row() {
            return Err(Error::numeric(format!("non-finite state at row {row}")));
        }
        let (z, cache) = self.mlp.forward_cached(states);
        if let Some(row) = z.first_non_finite_row() {
            return Err(Error::numeric(format!("encoder produced a non-finite latent at row {row}")));
        }
        Ok((z, cache))
    }

    pub fn backward(&self, cache: &MlpCache<T>, d_latents: &Mat<T>, grad: &mut SkillEncoder<T>) {
        self.mlp.backward(cache, d_latents, &mut grad.mlp);
    }
}

impl<T: Scalar> ParamSet<T> for SkillEncoder<T> {
    fn named_params(&self) -> Vec<(String, &Mat<T>)> {
        self.mlp
            .named_params()
            .into_iter()
            .map(|(n, m)| (format!("encoder.{n}"), m))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        self.mlp.params_mut()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkillAssignment<T> {
    pub index: usize,
    pub embedding: Vec<T>,
    pub latent: Vec<T>,
}

/// `N` skill embeddings plus their EMA cluster statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillCodebook<T> {
    pub embeddings: Mat<T>,
    pub ema_counts: Vec<T>,
    pub ema_sums: Mat<T>,
    pub decay: f64,
    pub epsilon: f64,
}

impl<T: Scalar> SkillCodebook<T> {
    /// Starts every code with a unit pseudo-count centred on its embedding,
    /// so `embeddings == sums / counts` holds from the outset.
    pub fn from_embeddings(embeddings: Mat<T>, decay: f64, epsilon: f64) -> Result<Self> {
        if embeddings.rows() < 2 {
            return Err(Error::argument("a codebook needs at least two codes"));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::argument(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            ema_counts: vec![T::one(); embeddings.rows()],
            ema_sums: embeddings.clone(),
            embeddings,
            decay,
            epsilon,
        })
    }

    pub fn num_codes(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embedding(&self, i: usize) -> &[T] {
        self.embeddings.row(i)
    }

    /// Nearest code by squared Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, z: &[T]) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for i in 0..self.num_codes() {
            let d: T = z
                .iter()
                .zip(self.embeddings.row(i))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn assign(&self, latents: &Mat<T>) -> Vec<usize> {
        (0..latents.rows()).map(|i| self.nearest(latents.row(i))).collect()
    }

    pub fn quantize(&self, latents: &Mat<T>) -> Vec<SkillAssignment<T>> {
        (0..latents.rows())
            .map(|i| {
                let index = self.nearest(latents.row(i));
                SkillAssignment {
                    index,
                    embedding: self.embeddings.row(index).to_vec(),
                    latent: latents.row(i).to_vec(),
                }
            })
            .collect()
    }

    /// Codebook rows for the given indices.
    pub fn lookup(&self, indices: &[usize]) -> Mat<T> {
        self.embeddings.gather_rows(indices)
    }

    /// Laplace-smoothed cluster sizes.
    pub fn smoothed_counts(&self) -> Vec<T> {
        let n = self.num_codes();
        let eps = T::of(self.epsilon);
        let total: T = self.ema_counts.iter().copied().sum();
        let denom = total + T::of(n as f64) * eps;
        self.ema_counts
            .iter()
            .map(|&c| (c + eps) / denom * total)
            .collect()
    }

    /// Exponential-moving-average update of cluster sizes and sums from one
    /// batch of latents and their assignments, then re-derives embeddings.
    pub fn ema_update(&mut self, latents: &Mat<T>, assignments: &[usize]) {
        assert_eq!(latents.rows(), assignments.len());
        assert_eq!(latents.cols(), self.dim());
        let n = self.num_codes();
        let d = self.dim();
        let mut counts = vec![T::zero(); n];
        let mut sums = Mat::zeros(n, d);
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += T::one();
            for (s, &z) in sums.row_mut(a).iter_mut().zip(latents.row(i)) {
                *s += z;
            }
        }
        let g = T::of(self.decay);
        let one_minus = T::one() - g;
        for (c, &b) in self.ema_counts.iter_mut().zip(&counts) {
            *c = g * *c + one_minus * b;
        }
        for (s, &b) in self
            .ema_sums
            .as_mut_slice()
            .iter_mut()
            .zip(sums.as_slice())
        {
            *s = g * *s + one_minus * b;
        }
        let smoothed = self.smoothed_counts();
        let tiny = T::of(TINY);
        for (i, &c) in smoothed.iter().enumerate() {
            let c = c.max(tiny);
            for j in 0..d {
                let v = self.ema_sums.get(i, j) / c;
                self.embeddings.set(i, j, v);
            }
        }
    }
}

/// Mean squared error over every element. The selected codes act as
/// constants: gradients reach only the latents.
pub fn vq_loss<T: Scalar>(latents: &Mat<T>, selected: &Mat<T>) -> T {
    assert_eq!(latents.shape(), selected.shape());
    if latents.is_empty() {
        return T::zero();
    }
    let n = T::of(latents.len() as f64);
    latents
        .as_slice()
        .iter()
        .zip(selected.as_slice())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        / n
}

/// Gradient of [`vq_loss`] with respect to the latents.
pub fn vq_loss_grad<T: Scalar>(latents: &Mat<T>, selected: &Mat<T>) -> Mat<T> {
    let scale = T::of(2.0 / latents.len().max(1) as f64);
    let data = latents
        .as_slice()
        .iter()
        .zip(selected.as_slice())
        .map(|(&a, &b)| scale * (a - b))
        .collect();
    Mat::from_vec(latents.rows(), latents.cols(), data)
}

/// Forward value is exactly `selected`.
pub fn straight_through<T: Scalar>(latents: &Mat<T>, selected: &Mat<T>) -> Mat<T> {
    assert_eq!(latents.shape(), selected.shape());
    selected.clone()
}

/// Backward of [`straight_through`]: the upstream gradient passes to the
/// latents unchanged.
pub fn straight_through_backward<T: Scalar>(grad_out: &Mat<T>) -> Mat<T> {
    grad_out.clone()
}

/// Encoder and codebook together. A frozen quantizer (the K-Means baseline)
/// receives neither gradient nor EMA updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantizer<T> {
    pub encoder: SkillEncoder<T>,
    pub codebook: SkillCodebook<T>,
    pub frozen: bool,
}

impl<T: Scalar> Quantizer<T> {
    pub fn num_skills(&self) -> usize {
        self.codebook.num_codes()
    }

    pub fn latent_dim(&self) -> usize {
        self.codebook.dim()
    }

    /// Latents, indices and selected embeddings for a block of states.
    pub fn encode_quantize(&self, states: &Mat<T>) -> Result<(Mat<T>, Vec<usize>, Mat<T>)> {
        let latents = self.encoder.encode(states)?;
        let idx = self.codebook.assign(&latents);
        let sel = self.codebook.lookup(&idx);
        Ok((latents, idx, sel))
    }

    pub fn cast<U: Scalar>(&self) -> Quantizer<U> {
        Quantizer {
            encoder: SkillEncoder {
                mlp: Mlp {
                    layers: self
                        .encoder
                        .mlp
                        .layers
                        .iter()
                        .map(|l| Linear {
                            weight: l.weight.cast(),
                            bias: l.bias.cast(),
                        })
                        .collect(),
                },
            },
            codebook: SkillCodebook {
                embeddings: self.codebook.embeddings.cast(),
                ema_counts: self.codebook.ema_counts.iter().map(|&c| U::of(c.as_f64())).collect(),
                ema_sums: self.codebook.ema_sums.cast(),
                decay: self.codebook.decay,
                epsilon: self.codebook.epsilon,
            },
            frozen: self.frozen,
        }
    }
}

/// Seeds codebook rows with the latents of `num_codes` dataset states drawn
/// uniformly without replacement.
pub fn init_codebook<T: Scalar, R: Rng + ?Sized>(
    encoder: &SkillEncoder<T>,
    dataset: &Dataset,
    num_codes: usize,
    decay: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<SkillCodebook<T>> {
    let total = dataset.total_transitions();
    if total < num_codes {
        return Err(Error::argument(format!(
            "dataset has {total} states, fewer than {num_codes} codes"
        )));
    }
    let mut picks = sample(rng, total, num_codes).into_vec();
    picks.sort_unstable();
    let s_dim = dataset.state_dim();
    let mut states = Mat::zeros(num_codes, s_dim);
    let mut row = 0;
    let mut offset = 0;
    for tr in dataset.trajectories() {
        while row < picks.len() && picks[row] < offset + tr.len() {
            let t = picks[row] - offset;
            let norm = dataset.normalizer().normalize(tr.state(t));
            for (dst, &v) in states.row_mut(row).iter_mut().zip(&norm) {
                *dst = T::of(v as f64);
            }
            row += 1;
        }
        offset += tr.len();
    }
    let latents = encoder.encode(&states)?;
    SkillCodebook::from_embeddings(latents, decay, epsilon)
}
