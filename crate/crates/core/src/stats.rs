//! Small numeric utilities: log-gamma, the regularized incomplete gamma
//! function, gamma quantile helpers, and order-statistic quantiles.

use crate::error::{Error, Result};

/// Natural log of the gamma function (Lanczos approximation, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma function `P(a, x)`.
///
/// Series expansion for `x < a + 1`, continued fraction otherwise.
pub fn reg_inc_gamma_p(a: f64, x: f64) -> Result<f64> {
    let in_domain = a > 0.0 && x >= 0.0; // also rejects NaN
    if !in_domain {
        return Err(Error::Numeric(format!(
            "incomplete gamma needs a > 0 and x >= 0, got a={a}, x={x}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let ln_pre = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Series: P(a,x) = e^{ln_pre} * sum_k x^k / (a (a+1) ... (a+k)).
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        Ok((ln_pre.exp() * sum).clamp(0.0, 1.0))
    } else {
        // Lentz continued fraction for Q(a,x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        Ok((1.0 - ln_pre.exp() * h).clamp(0.0, 1.0))
    }
}

/// Median of a `Gamma(shape, rate)` distribution, found by bisection on the
/// regularized incomplete gamma CDF.
pub fn gamma_median(shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) {
        return Err(Error::Numeric(format!(
            "gamma median needs positive shape and rate, got ({shape}, {rate})"
        )));
    }
    // CDF at x is P(shape, rate * x). Bracket the median around the mean.
    let mean = shape / rate;
    let mut lo = mean * 1e-6;
    let mut hi = mean * 20.0;
    while reg_inc_gamma_p(shape, rate * hi)? < 0.5 {
        hi *= 2.0;
        if hi > mean * 1e12 {
            return Err(Error::Numeric("gamma median bracketing failed".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if reg_inc_gamma_p(shape, rate * mid)? < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Linear-interpolation quantile of an unsorted sample (the common
/// order-statistic rule: with `h = q (n - 1)`, interpolate between the
/// floor(h)-th and ceil(h)-th order statistics).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Numeric("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Numeric(format!("quantile level must be in [0,1], got {q}")));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile"));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let w = h - lo as f64;
    Ok(sorted[lo] * (1.0 - w) + sorted[hi] * w)
}

/// Compensated (Kahan) accumulator for long sums with a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    /// Fresh accumulator at zero.
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one term.
    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    /// Current total.
    pub fn total(&self) -> f64 {
        self.sum
    }
}
