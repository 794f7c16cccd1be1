//! Dense layers and pointwise functions with hand-written derivatives.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{join, Parameters};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise affine map `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((input, output), || {
                rng.random_range(-limit..=limit)
            }),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        grad: &mut Affine,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        need_input_grad.then(|| dy.dot(&self.weight.t()))
    }
}

impl Parameters for Affine {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64])) {
        f(
            &join(prefix, "weight"),
            self.weight.shape(),
            self.weight.as_slice().expect("standard layout"),
        );
        f(
            &join(prefix, "bias"),
            self.bias.shape(),
            self.bias.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &join(prefix, "weight"),
            self.weight.as_slice_mut().expect("standard layout"),
        );
        f(
            &join(prefix, "bias"),
            self.bias.as_slice_mut().expect("standard layout"),
        );
    }
}

/// Bias-free row-wise linear map `y = x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
}

impl Linear {
    pub fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Affine::glorot(input, output, rng).weight,
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight)
    }

    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        grad: &mut Linear,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.weight);
        need_input_grad.then(|| dy.dot(&self.weight.t()))
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64])) {
        f(
            &join(prefix, "weight"),
            self.weight.shape(),
            self.weight.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &join(prefix, "weight"),
            self.weight.as_slice_mut().expect("standard layout"),
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: Array1<f64>,
    pub offset: Array1<f64>,
}

/// Saved normalized activations for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: Array1::ones(dim),
            offset: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, NormCache) {
        let (rows, dim) = x.dim();
        let mut xhat = Array2::zeros((rows, dim));
        let mut rstd = Array1::zeros(rows);
        for (r, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * rs;
            }
        }
        let y = &xhat * &self.scale + &self.offset;
        (y, NormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        cache: &NormCache,
        dy: ArrayView2<'_, f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        let (rows, dim) = dy.dim();
        grad.scale += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.offset += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros((rows, dim));
        let n = dim as f64;
        for r in 0..rows {
            let xh = cache.xhat.row(r);
            let dyr = dy.row(r);
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for j in 0..dim {
                let d = dyr[j] * self.scale[j];
                sum_d += d;
                sum_dx += d * xh[j];
            }
            let mean_d = sum_d / n;
            let mean_dx = sum_dx / n;
            let rs = cache.rstd[r];
            for j in 0..dim {
                let d = dyr[j] * self.scale[j];
                dx[[r, j]] = rs * (d - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64])) {
        f(
            &join(prefix, "scale"),
            self.scale.shape(),
            self.scale.as_slice().expect("standard layout"),
        );
        f(
            &join(prefix, "offset"),
            self.offset.shape(),
            self.offset.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &join(prefix, "scale"),
            self.scale.as_slice_mut().expect("standard layout"),
        );
        f(
            &join(prefix, "offset"),
            self.offset.as_slice_mut().expect("standard layout"),
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place row softmax.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub fn normal_init(shape: (usize, usize), std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let mut m = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        softmax_rows(&mut m);
        for row in m.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!((m[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::new(5);
        ln.scale = Array1::from_shape_simple_fn(5, || rng.random_range(0.5..1.5));
        ln.offset = Array1::from_shape_simple_fn(5, || rng.random_range(-0.5..0.5));
        let x = normal_init((3, 5), 1.0, &mut rng);
        let w = normal_init((3, 5), 1.0, &mut rng);
        let loss = |x: &Array2<f64>| (&ln.forward(x.view()).0 * &w).sum();
        let (_, cache) = ln.forward(x.view());
        let mut g = LayerNorm::new(5);
        g.fill(0.0);
        let dx = ln.backward(&cache, w.view(), &mut g);
        for r in 0..3 {
            for c in 0..5 {
                let mut xp = x.clone();
                xp[[r, c]] += 1e-6;
                let mut xm = x.clone();
                xm[[r, c]] -= 1e-6;
                let fd = (loss(&xp) - loss(&xm)) / 2e-6;
                assert!((fd - dx[[r, c]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn affine_backward_accumulates() {
        let a = Affine {
            weight: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            bias: array![0.5, -0.5],
        };
        let x = array![[1.0, 0.0, -1.0]];
        assert_eq!(a.forward(x.view()), array![[-3.5, -4.5]]);
        let mut g = Affine::zeros(3, 2);
        let dx = a.backward(x.view(), array![[1.0, 1.0]].view(), &mut g, true).unwrap();
        assert_eq!(dx, array![[3.0, 7.0, 11.0]]);
        assert_eq!(g.weight, array![[1.0, 1.0], [0.0, 0.0], [-1.0, -1.0]]);
        assert_eq!(g.bias, array![1.0, 1.0]);
    }
}
