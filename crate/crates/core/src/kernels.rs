//! Kernel-convolution bases over wavelength and the piecewise-linear
//! log-variance basis.
//!
//! Smooth curves are built as kernel convolutions of knot values:
//! `f(t) = sum_j k(t - t_j; theta_j) u_j`, with kernels normalized to peak 1
//! at distance zero and never truncated. Two families are supported:
//!
//! * Gaussian: `k(d; theta) = exp(-d^2 / (2 theta^2))`
//! * double exponential: `k(d; theta) = exp(-|d| / theta)`
//!
//! The error-variance curve uses a different construction: `log sigma^2(t)` is
//! piecewise linear between knots (hat-function basis), so that knot
//! coefficients are the log-variances at the knots, and between knots the
//! variance interpolates geometrically.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel family used by all kernel-convolution bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `exp(-d^2 / (2 theta^2))`; value `exp(-1/2)` at `d = theta`.
    Gaussian,
    /// `exp(-|d| / theta)`; value `exp(-1)` at `d = theta`.
    DoubleExponential,
}

/// Evaluate a peak-normalized kernel at distance `d` with bandwidth `theta`.
pub fn kernel_value(family: KernelFamily, d: f64, theta: f64) -> Result<f64> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(Error::Numeric(format!(
            "kernel bandwidth must be positive and finite, got {theta}"
        )));
    }
    if !d.is_finite() {
        return Err(Error::Numeric(format!("kernel distance must be finite, got {d}")));
    }
    Ok(match family {
        KernelFamily::Gaussian => {
            let z = d / theta;
            (-0.5 * z * z).exp()
        }
        KernelFamily::DoubleExponential => (-(d.abs()) / theta).exp(),
    })
}

/// Bandwidth specification for a kernel design matrix.
#[derive(Debug, Clone, Copy)]
pub enum Bandwidths<'a> {
    /// One bandwidth shared by every knot.
    Shared(f64),
    /// One bandwidth per knot (length must match the knot count).
    PerKnot(&'a [f64]),
}

/// Dense kernel design matrix: entry `(m, j)` is `k(t_m - knot_j; theta_j)`.
pub fn design_matrix(
    family: KernelFamily,
    points: &[f64],
    knots: &[f64],
    bandwidths: Bandwidths<'_>,
) -> Result<DMatrix<f64>> {
    if knots.is_empty() {
        return Err(Error::Config("kernel basis needs at least one knot".into()));
    }
    let theta_of = |j: usize| -> Result<f64> {
        match bandwidths {
            Bandwidths::Shared(t) => Ok(t),
            Bandwidths::PerKnot(ts) => {
                if ts.len() != knots.len() {
                    return Err(Error::dim("per-knot bandwidths", knots.len(), ts.len()));
                }
                Ok(ts[j])
            }
        }
    };
    let mut m = DMatrix::zeros(points.len(), knots.len());
    for j in 0..knots.len() {
        let theta = theta_of(j)?;
        for (i, &t) in points.iter().enumerate() {
            m[(i, j)] = kernel_value(family, t - knots[j], theta)?;
        }
    }
    Ok(m)
}

/// Hat-function (piecewise-linear interpolation) basis on a knot grid,
/// pre-evaluated on a fixed set of points.
///
/// Every point must lie inside `[knots[0], knots[last]]`; the hat weights at
/// each covered point are nonnegative and sum to one.
#[derive(Debug, Clone)]
pub struct VarianceBasis {
    knots: Vec<f64>,
    weights: DMatrix<f64>,
}

impl VarianceBasis {
    /// Evaluate the hat basis of `knots` at `points`.
    pub fn new(points: &[f64], knots: &[f64]) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Config(format!(
                "variance basis needs at least two knots, got {}",
                knots.len()
            )));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("variance knots must be strictly increasing".into()));
        }
        let (lo, hi) = (knots[0], knots[knots.len() - 1]);
        let mut weights = DMatrix::zeros(points.len(), knots.len());
        for (i, &t) in points.iter().enumerate() {
            if t < lo || t > hi {
                return Err(Error::Config(format!(
                    "point {t} lies outside the variance knot range [{lo}, {hi}]"
                )));
            }
            // Index of the interval [knots[j], knots[j+1]] containing t.
            let j = match knots.binary_search_by(|k| k.partial_cmp(&t).unwrap()) {
                Ok(exact) => exact.min(knots.len() - 2),
                Err(ins) => ins - 1,
            };
            let width = knots[j + 1] - knots[j];
            let u = (t - knots[j]) / width;
            weights[(i, j)] = 1.0 - u;
            weights[(i, j + 1)] = u;
        }
        Ok(VarianceBasis {
            knots: knots.to_vec(),
            weights,
        })
    }

    /// Number of knots.
    pub fn n_knots(&self) -> usize {
        self.knots.len()
    }

    /// The knot locations.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// The point-by-knot hat weight matrix.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `log sigma^2` at every pre-evaluated point for the given knot
    /// coefficients.
    pub fn log_variance(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        if coeffs.len() != self.knots.len() {
            return Err(Error::dim("variance coefficients", self.knots.len(), coeffs.len()));
        }
        Ok(&self.weights * coeffs)
    }

    /// `sigma^2` at every pre-evaluated point (exponentiated interpolation).
    pub fn variance(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.log_variance(coeffs)?.map(f64::exp))
    }
}
