//! Layers with explicit forward/backward passes.
//!
//! Each layer's backward takes the cached forward inputs, accumulates parameter
//! gradients into a gradient struct of the same type as the layer, and returns
//! the gradient with respect to its input.

use rand::Rng;

use crate::tensor::{matmul, matmul_at_acc, matmul_bt, Mat, Scalar};

/// Anything that owns a flat list of named parameter matrices.
///
/// Gradients and optimizer moments reuse the same type, so two instances zip
/// together through `params_mut`.
pub trait ParamSet<T: Scalar> {
    fn named_params(&self) -> Vec<(String, &Mat<T>)>;
    fn params_mut(&mut self) -> Vec<&mut Mat<T>>;
}

/// Clone with every parameter zeroed.
pub fn zeros_like<T: Scalar, P: ParamSet<T> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    for m in z.params_mut() {
        m.fill(T::zero());
    }
    z
}

pub fn param_count<T: Scalar, P: ParamSet<T>>(p: &P) -> usize {
    p.named_params().iter().map(|(_, m)| m.len()).sum()
}

/// Affine map `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Mat<T>,
    pub bias: Mat<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros(input, output),
            bias: Mat::zeros(1, output),
        }
    }

    /// Gaussian weights with the given std, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Mat::randn(input, output, std, rng),
            bias: Mat::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = matmul(x, &self.weight);
        let b = self.bias.as_slice();
        for i in 0..y.rows() {
            for (v, &bb) in y.row_mut(i).iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) {
        matmul_at_acc(x, dy, &mut grad.weight);
        let gb = grad.bias.as_mut_slice();
        for i in 0..dy.rows() {
            for (g, &d) in gb.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
    }

    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) -> Mat<T> {
        self.backward_params(x, dy, grad);
        matmul_bt(dy, &self.weight)
    }

    pub(crate) fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Mat<T>,
    pub shift: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    normalized: Mat<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Mat::filled(1, dim, T::one()),
            shift: Mat::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LayerNormCache<T>) {
        let d = x.cols();
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut normalized = Mat::zeros(x.rows(), d);
        let mut y = Mat::zeros(x.rows(), d);
        let mut rstd = Vec::with_capacity(x.rows());
        let g = self.gain.as_slice();
        let b = self.shift.as_slice();
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            let nrow = normalized.row_mut(i);
            for (n, &v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * r;
            }
            let nrow = normalized.row(i);
            for (j, o) in y.row_mut(i).iter_mut().enumerate() {
                *o = nrow[j] * g[j] + b[j];
            }
        }
        (y, LayerNormCache { normalized, rstd })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        dy: &Mat<T>,
        grad: &mut LayerNorm<T>,
    ) -> Mat<T> {
        let d = dy.cols();
        let inv_d = T::one() / T::of(d as f64);
        let g = self.gain.as_slice();
        let mut dx = Mat::zeros(dy.rows(), d);
        for i in 0..dy.rows() {
            let xn = cache.normalized.row(i);
            let dyr = dy.row(i);
            {
                let gg = grad.gain.as_mut_slice();
                for j in 0..d {
                    gg[j] += dyr[j] * xn[j];
                }
            }
            {
                let gs = grad.shift.as_mut_slice();
                for j in 0..d {
                    gs[j] += dyr[j];
                }
            }
            let mut sum_dn = T::zero();
            let mut sum_dn_xn = T::zero();
            for j in 0..d {
                let dn = dyr[j] * g[j];
                sum_dn += dn;
                sum_dn_xn += dn * xn[j];
            }
            let r = cache.rstd[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                let dn = dyr[j] * g[j];
                *o = r * (dn - inv_d * sum_dn - xn[j] * inv_d * sum_dn_xn);
            }
        }
        dx
    }

    pub(crate) fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat<T>)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.shift"), &self.shift));
    }

    pub(crate) fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat<T>>) {
        out.push(&mut self.gain);
        out.push(&mut self.shift);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, cheaper than libm's `tanh` in hot loops.
fn fast_tanh<T: Scalar>(u: T) -> T {
    T::one() - T::of(2.0) / ((u + u).exp() + T::one())
}

/// Tanh approximation of GELU (GPT-2 flavour).
pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_with_grad(x).0
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_with_grad(x).1
}

/// GELU value and derivative sharing one `tanh`.
pub fn gelu_with_grad<T: Scalar>(x: T) -> (T, T) {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let th = fast_tanh(c * (x + a * x * x * x));
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    (
        half * x * (T::one() + th),
        half * (T::one() + th) + half * x * (T::one() - th * th) * dinner,
    )
}

/// Multi-layer perceptron with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Mat<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Layer sizes `[in, h1, ..., out]`; He-style init for ReLU layers.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let layers = sizes
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], (2.0 / w[0] as f64).sqrt(), rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Mat<T>) -> (Mat<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h);
            if i != last {
                y.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = v.max(T::zero()));
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        (h, MlpCache { inputs })
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Mat<T>, grad: &mut Mlp<T>) -> Mat<T> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            let x = &cache.inputs[i];
            let dx = self.layers[i].backward(x, &d, &mut grad.layers[i]);
            d = dx;
            if i > 0 {
                // x is the ReLU output of layer i-1: gate on its sign.
                for (g, &xv) in d.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if xv <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
        }
        d
    }
}

impl<T: Scalar> ParamSet<T> for Mlp<T> {
    fn named_params(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.push_params(&format!("layers.{i}"), &mut out);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.push_params_mut(&mut out);
        }
        out
    }
}
