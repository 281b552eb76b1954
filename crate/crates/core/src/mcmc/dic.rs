//! Deviance information criterion.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::FitContext;
use crate::state::ChainState;

/// DIC decomposition of a fitted chain: `dic = dbar + p_d` with
/// `p_d = dbar - d_at_mean`, the effective number of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicSummary {
    /// Posterior mean deviance.
    pub dbar: f64,
    /// Deviance at the posterior mean of the parameters.
    pub d_at_mean: f64,
    /// Effective number of parameters.
    pub p_d: f64,
    /// The criterion itself.
    pub dic: f64,
}

/// Summarize a chain's retained draws and their deviances.
pub fn dic_summary(
    ctx: &FitContext,
    kept: &[ChainState],
    deviances: &[f64],
) -> Result<DicSummary> {
    if kept.is_empty() || kept.len() != deviances.len() {
        return Err(crate::error::Error::Numeric(format!(
            "DIC needs matching draws and deviances, got {} and {}",
            kept.len(),
            deviances.len()
        )));
    }
    let dbar = deviances.iter().sum::<f64>() / deviances.len() as f64;
    let mean_state = ChainState::component_mean(kept)?;
    let d_at_mean = ctx.deviance(&mean_state)?;
    let p_d = dbar - d_at_mean;
    Ok(DicSummary { dbar, d_at_mean, p_d, dic: dbar + p_d })
}
