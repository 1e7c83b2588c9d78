//! Differentiable building blocks with hand-written backward passes.
//!
//! Each layer exposes `forward` (returning whatever the backward pass needs)
//! and `backward`, which accumulates parameter gradients into a value of the
//! same type and returns the gradient with respect to the layer input.
//! Gradient containers are ordinary parameter structs, so optimizers, EMA
//! and checkpoints can walk parameters and gradients in lockstep through
//! [`Params`].

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::rng::RandomSource;

/// Read-only view of one named parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Uniform access to every learnable tensor of a module, in a fixed order.
pub trait Params {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<&'a mut [f64]>);

    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += other`, tensor by tensor. Both must share a layout.
    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s.data).for_each(|(a, b)| *a += b);
        }
    }

    /// A copy with every entry zeroed.
    fn zeros_like(&self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push_matrix<'a>(out: &mut Vec<TensorRef<'a>>, prefix: &str, name: &str, m: &'a Array2<f64>) {
    out.push(TensorRef {
        name: join(prefix, name),
        shape: m.shape().to_vec(),
        data: m.as_slice().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_vector<'a>(out: &mut Vec<TensorRef<'a>>, prefix: &str, name: &str, v: &'a Array1<f64>) {
    out.push(TensorRef {
        name: join(prefix, name),
        shape: vec![v.len()],
        data: v.as_slice().expect("parameters are contiguous"),
    });
}

pub(crate) fn matrix_mut(m: &mut Array2<f64>) -> &mut [f64] {
    m.as_slice_mut().expect("parameters are contiguous")
}

pub(crate) fn vector_mut(v: &mut Array1<f64>) -> &mut [f64] {
    v.as_slice_mut().expect("parameters are contiguous")
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut RandomSource) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.normal())
}

/// Affine map `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init(input: usize, output: usize, std: f64, rng: &mut RandomSource) -> Self {
        Self {
            weight: gaussian_matrix(input, output, std, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and returns `dy·Wᵀ`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Dense) -> Array2<f64> {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    /// Like [`Dense::backward`] without computing the input gradient.
    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Dense) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl Params for Dense {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        push_matrix(out, prefix, "weight", &self.weight);
        push_vector(out, prefix, "bias", &self.bias);
    }

    fn collect_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<&'a mut [f64]>) {
        out.push(matrix_mut(&mut self.weight));
        out.push(vector_mut(&mut self.bias));
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Saved normalized input and inverse standard deviation per row.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *s;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = &dy * &self.gamma;
        for ((mut row, xh), &s) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
            row.iter_mut()
                .zip(xh.iter())
                .for_each(|(g, &x)| *g = s * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

impl Params for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        push_vector(out, prefix, "gamma", &self.gamma);
        push_vector(out, prefix, "beta", &self.beta);
    }

    fn collect_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<&'a mut [f64]>) {
        out.push(vector_mut(&mut self.gamma));
        out.push(vector_mut(&mut self.beta));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

/// `dy ⊙ gelu'(x)`.
pub fn gelu_backward(x: &Array2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(x, |g, &v| *g *= gelu_grad(v));
    dx
}

/// In-place row softmax over the first `valid` columns; the rest are zeroed.
pub fn softmax_rows_masked(s: &mut Array2<f64>, valid: usize) {
    for mut row in s.rows_mut() {
        let max = row
            .iter()
            .take(valid)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < valid {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        row /= total;
    }
}

/// Row-wise L2 normalization; returns the normalized matrix and row norms.
pub fn l2_normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut u = x.to_owned();
    for (mut row, &n) in u.rows_mut().into_iter().zip(norms.iter()) {
        row /= n;
    }
    (u, norms)
}

/// Pulls a gradient w.r.t. normalized rows `u = x/|x|` back to `x`.
pub fn l2_normalize_rows_backward(u: &Array2<f64>, norms: &Array1<f64>, du: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = du.to_owned();
    for ((mut g, ur), &n) in dx.rows_mut().into_iter().zip(u.rows()).zip(norms.iter()) {
        let proj = g.dot(&ur);
        g.zip_mut_with(&ur, |a, &b| *a = (*a - proj * b) / n);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let mut s = array![[1.0, 2.0, 50.0], [0.0, 0.0, -3.0]];
        softmax_rows_masked(&mut s, 2);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let ln = LayerNorm::new(4);
        let (y, _) = ln.forward(array![[1.0, 2.0, 3.0, 4.0]].view());
        assert!(y.sum().abs() < 1e-12);
        let var = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-4);
    }
}
