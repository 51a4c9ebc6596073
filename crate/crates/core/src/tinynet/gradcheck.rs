//! Central finite-difference verification of analytic gradients.
//!
//! Derivatives use the five-point central stencil, whose truncation error
//! is fourth order in the step.

use rand::seq::index::sample;
use rand::Rng as _;

use super::params::TinyNetParams;
use super::tensor::Matrix;
use crate::error::Result;
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is zero are judged by absolute error instead.
    pub floor: f64,
    /// Entries per tensor checked individually; smaller tensors are
    /// checked in full.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, floor: 1e-6, max_entries: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Relative error of the derivative along a random direction spanning
    /// the whole tensor.
    pub directional_rel_error: f64,
}

impl TensorCheck {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.max(self.directional_rel_error)
    }
}

/// `(-f(2h) + 8f(h) - 8f(-h) + f(-2h)) / 12h`
fn stencil(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h))
}

pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `loss_and_grad`'s gradients with central differences of its
/// loss, tensor by tensor.
pub fn check_gradients<F>(
    params: &TinyNetParams<f64>,
    opts: &GradcheckOptions,
    loss_and_grad: F,
) -> Result<Vec<TensorCheck>>
where
    F: Fn(&TinyNetParams<f64>) -> Result<(f64, Vec<Matrix<f64>>)>,
{
    let (_, grads) = loss_and_grad(params)?;
    let loss_at = |p: &TinyNetParams<f64>| loss_and_grad(p).map(|(l, _)| l);
    let mut rng = rng_from_seed(opts.seed);
    let h = opts.step;
    let mut out = Vec::with_capacity(params.len());
    for (k, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.len();
        let idx: Vec<usize> =
            if n <= opts.max_entries { (0..n).collect() } else { sample(&mut rng, n, opts.max_entries).into_vec() };
        let mut worst: f64 = 0.0;
        let mut probe = params.clone();
        for &i in &idx {
            let orig = tensor.data()[i];
            let numeric = stencil(h, |d| {
                probe.tensors_mut()[k].data_mut()[i] = orig + d;
                loss_at(&probe)
            })?;
            probe.tensors_mut()[k].data_mut()[i] = orig;
            worst = worst.max(rel_error(grads[k].data()[i], numeric, opts.floor));
        }
        let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let analytic: f64 = grads[k].data().iter().zip(&dir).map(|(g, d)| g * d / norm).sum();
        let shifted = |s: f64| {
            let mut p = params.clone();
            for (w, d) in p.tensors_mut()[k].data_mut().iter_mut().zip(&dir) {
                *w += s * d / norm;
            }
            loss_at(&p)
        };
        let numeric = stencil(h, shifted)?;
        out.push(TensorCheck {
            name: name.to_string(),
            entries: idx.len(),
            max_rel_error: worst,
            directional_rel_error: rel_error(analytic, numeric, opts.floor),
        });
    }
    Ok(out)
}
