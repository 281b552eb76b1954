//! Metropolis–Hastings machinery: the accept step, transform helpers, and
//! per-block step-size adaptation.
//!
//! Every random-walk block in the sampler shares the same accept primitive
//! and the same Robbins–Monro step adaptation targeting a fixed acceptance
//! rate during burn-in. Blocks that walk a transformed parameter carry their
//! own Jacobian inside the log ratio they pass in.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Acceptance rate targeted by step adaptation.
pub const TARGET_ACCEPTANCE: f64 = 0.3;

/// Accept a proposal with probability `min(1, exp(log_ratio))`.
///
/// Draws exactly one uniform variate regardless of the ratio, so RNG
/// consumption per proposal is constant — a requirement for reproducible
/// checkpoint replay.
pub fn mh_accept<R: Rng>(rng: &mut R, log_ratio: f64) -> bool {
    let u: f64 = rng.gen();
    // NaN log-ratios (e.g. from a degenerate proposal) must never accept.
    u.ln() < log_ratio
}

/// Map `x` in `(lo, hi)` to the real line.
pub fn logit(x: f64, lo: f64, hi: f64) -> f64 {
    ((x - lo) / (hi - x)).ln()
}

/// Inverse of [`logit`].
pub fn inv_logit(z: f64, lo: f64, hi: f64) -> f64 {
    // Algebraically (lo + hi e^z) / (1 + e^z), written to avoid overflow.
    if z >= 0.0 {
        let e = (-z).exp();
        (lo * e + hi) / (1.0 + e)
    } else {
        let e = z.exp();
        (lo + hi * e) / (1.0 + e)
    }
}

/// Log-Jacobian of the logit transform: `ln d x / d z` at `x`.
///
/// A random walk on the logit scale with a uniform target on `(lo, hi)`
/// needs `log_jacobian(x') - log_jacobian(x)` added to the log ratio.
pub fn logit_log_jacobian(x: f64, lo: f64, hi: f64) -> f64 {
    ((x - lo) * (hi - x) / (hi - lo)).ln()
}

/// One adaptive random-walk block: its step size and acceptance counters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MhBlock {
    /// Stable identifier used in summaries and sample manifests.
    pub name: String,
    /// Current random-walk standard deviation (on the walked scale).
    pub step: f64,
    /// Proposals made so far (including burn-in).
    pub proposals: u64,
    /// Proposals accepted so far.
    pub accepts: u64,
    /// Adaptation updates applied; drives the Robbins–Monro gain.
    adapt_count: u64,
}

impl MhBlock {
    pub fn new(name: &str, step: f64) -> Self {
        MhBlock { name: name.to_string(), step, proposals: 0, accepts: 0, adapt_count: 0 }
    }

    /// Record a proposal outcome; when `adapt` is set, nudge the step toward
    /// [`TARGET_ACCEPTANCE`] with a decaying Robbins–Monro gain.
    pub fn record(&mut self, accepted: bool, adapt: bool) {
        self.proposals += 1;
        if accepted {
            self.accepts += 1;
        }
        if adapt {
            self.adapt_count += 1;
            let gain = 1.0 / (self.adapt_count as f64).powf(0.6);
            let direction = if accepted { 1.0 - TARGET_ACCEPTANCE } else { -TARGET_ACCEPTANCE };
            let log_step = (self.step.ln() + gain * direction).clamp(-12.0, 6.0);
            self.step = log_step.exp();
        }
    }

    /// Empirical acceptance rate so far.
    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepts as f64 / self.proposals as f64
        }
    }
}
