//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::Parameters;

/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// A differentiable scalar function of a flat coordinate vector.
pub trait GradCheckTarget {
    fn dim(&self) -> usize;
    fn get(&self, index: usize) -> f64;
    fn set(&mut self, index: usize, value: f64);
    fn value(&mut self) -> f64;
    /// Analytic gradient at the current point, in coordinate order.
    fn gradient(&mut self) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient with `(f(x+eps) - f(x-eps)) / (2 eps)` on
/// `num_coords` coordinates drawn without replacement (all of them if the
/// target is smaller). The target is restored to its original point.
pub fn gradient_check<T: GradCheckTarget + ?Sized>(
    target: &mut T,
    eps: f64,
    num_coords: usize,
    seed: u64,
) -> GradCheckReport {
    let dim = target.dim();
    let analytic = target.gradient();
    assert_eq!(analytic.len(), dim, "gradient length != dim");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = sample(&mut rng, dim, num_coords.min(dim)).into_vec();
    coords.sort_unstable();

    let mut report = GradCheckReport {
        checked: coords.len(),
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in coords {
        let x0 = target.get(i);
        target.set(i, x0 + eps);
        let fp = target.value();
        target.set(i, x0 - eps);
        let fm = target.value();
        target.set(i, x0);
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}

/// Target over a plain vector with closures for the value and the gradient.
pub struct FnTarget<F, G> {
    pub x: Vec<f64>,
    f: F,
    g: G,
}

impl<F, G> FnTarget<F, G>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    pub fn new(x: Vec<f64>, f: F, g: G) -> Self {
        Self { x, f, g }
    }
}

impl<F, G> GradCheckTarget for FnTarget<F, G>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.x.len()
    }
    fn get(&self, index: usize) -> f64 {
        self.x[index]
    }
    fn set(&mut self, index: usize, value: f64) {
        self.x[index] = value;
    }
    fn value(&mut self) -> f64 {
        (self.f)(&self.x)
    }
    fn gradient(&mut self) -> Vec<f64> {
        (self.g)(&self.x)
    }
}

/// Target over a parameter tree; `loss` returns the value and a gradient tree
/// of the same shape.
pub struct ParamTarget<P, L> {
    pub params: P,
    loss: L,
}

impl<P, L> ParamTarget<P, L>
where
    P: Parameters,
    L: FnMut(&P) -> (f64, P),
{
    pub fn new(params: P, loss: L) -> Self {
        Self { params, loss }
    }
}

impl<P, L> GradCheckTarget for ParamTarget<P, L>
where
    P: Parameters,
    L: FnMut(&P) -> (f64, P),
{
    fn dim(&self) -> usize {
        self.params.num_params()
    }
    fn get(&self, index: usize) -> f64 {
        self.params.get_coord(index)
    }
    fn set(&mut self, index: usize, value: f64) {
        self.params.set_coord(index, value);
    }
    fn value(&mut self) -> f64 {
        (self.loss)(&self.params).0
    }
    fn gradient(&mut self) -> Vec<f64> {
        (self.loss)(&self.params).1.flatten()
    }
}
