//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates the function forward under
//! [`no_grad`](crate::tensor::no_grad), so it never depends on any backward
//! rule it is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{no_grad, Tensor};
use crate::{Error, Result};

/// Settings for [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Central difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`. Keeps
    /// coordinates whose true gradient is ~0 from dividing roundoff by zero.
    pub floor: f64,
    /// Coordinates sampled per input; `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            rel_tol: 1e-4,
            floor: 1e-6,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

/// One checked coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Coordinate>,
    pub failures: usize,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    /// Combines reports of several checks.
    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        self.checked += other.checked;
        self.failures += other.failures;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self
    }
}

/// Compares the backward pass of `f` with central finite differences.
///
/// `f` receives gradient-requiring copies of `inputs` and must return a
/// scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(Tensor::requiring_grad).collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(loss);

    let eval = |which: usize, index: usize, delta: f64| -> Result<f64> {
        let _guard = no_grad();
        let mut args: Vec<Tensor<f64>> = inputs.to_vec();
        let mut data = args[which].to_vec();
        data[index] += delta;
        args[which] = Tensor::from_vec(data, args[which].shape())?;
        let out = f(&args)?;
        out.item()
            .map_err(|_| Error::Autograd("gradcheck function must return a scalar".into()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: 0,
        rel_tol: cfg.rel_tol,
    };
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for index in coords {
            let plus = eval(which, index, cfg.step)?;
            let minus = eval(which, index, -cfg.step)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[which][index];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if !(rel_err < cfg.rel_tol) {
                report.failures += 1;
            }
            if report.worst.is_none() || rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = Some(Coordinate {
                    input: which,
                    index,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}
