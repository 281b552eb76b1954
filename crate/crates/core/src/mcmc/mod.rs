//! Blocked Gibbs/Metropolis sampler for the space-wavelength model.
//!
//! One sweep updates every block once, in a fixed order chosen so that each
//! conditional sees the residual left by the previous block:
//!
//! 1. grand mean, genus means, site intercepts, intercept decay;
//! 2. coefficient knots and their bandwidth;
//! 3. wavelength-effect knots and their bandwidths;
//! 4. factors, loadings, interaction bandwidth, factor decays (or the
//!    per-site convolution field);
//! 5. scale parameters and the log-variance knots.
//!
//! The residual matrix is rebuilt from the state at the start of every sweep
//! and updated incrementally inside it, so rounding drift never survives a
//! sweep boundary. A sweep is a pure function of `(state, rng)`: correlation
//! caches only skip redundant factorizations and never change what is drawn.

pub mod blocks;
pub mod checkpoint;
pub mod dic;
pub mod mh;
pub mod moves;
pub mod samples;

use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BetaMode, EtaVariant, GammaMode, InterceptMode, McmcConfig, StepSizes};
use crate::error::{Error, Result};
use crate::model::{gaussian_loglik, FitContext};
use crate::state::ChainState;

use blocks::{CorrCache, Workspace};
use dic::DicSummary;
use mh::MhBlock;

/// The Metropolis blocks of one chain, with their adapted proposal scales
/// and acceptance counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhSet {
    pub intercept_decay: MhBlock,
    pub coeff_bandwidth: MhBlock,
    pub wave_bandwidths: MhBlock,
    pub space_wave_bandwidth: MhBlock,
    pub factor_decays: MhBlock,
    pub log_var_knots: MhBlock,
}

impl MhSet {
    pub fn new(steps: &StepSizes) -> Self {
        MhSet {
            intercept_decay: MhBlock::new("intercept_decay", steps.intercept_decay),
            coeff_bandwidth: MhBlock::new("coeff_bandwidth", steps.coeff_bandwidth),
            wave_bandwidths: MhBlock::new("wave_bandwidths", steps.wave_bandwidths),
            space_wave_bandwidth: MhBlock::new(
                "space_wave_bandwidth",
                steps.space_wave_bandwidth,
            ),
            factor_decays: MhBlock::new("factor_decays", steps.factor_decays),
            log_var_knots: MhBlock::new("log_var_knots", steps.log_var_knots),
        }
    }

    /// Acceptance rates of the blocks that made proposals, as
    /// `(name, rate)` pairs.
    pub fn acceptance(&self) -> Vec<(String, f64)> {
        [
            &self.intercept_decay,
            &self.coeff_bandwidth,
            &self.wave_bandwidths,
            &self.space_wave_bandwidth,
            &self.factor_decays,
            &self.log_var_knots,
        ]
        .into_iter()
        .filter(|b| b.proposals > 0)
        .map(|b| (b.name.clone(), b.rate()))
        .collect()
    }
}

/// Everything a chain needs to continue: completed sweeps, current state,
/// generator, proposal tuning, and the retained draws.
#[derive(Debug, Clone)]
pub struct ChainPosition {
    pub sweep: usize,
    pub state: ChainState,
    pub rng: ChaCha20Rng,
    pub blocks: MhSet,
    pub kept: Vec<ChainState>,
    pub deviances: Vec<f64>,
}

/// Output of a completed chain.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Retained posterior draws.
    pub kept: Vec<ChainState>,
    /// Deviance `-2 log p(y | theta)` of each retained draw.
    pub deviances: Vec<f64>,
    /// Final acceptance rates of the Metropolis blocks.
    pub acceptance: Vec<(String, f64)>,
    /// Deviance information criterion of the fit.
    pub dic: DicSummary,
    /// Wall-clock sampling time in seconds.
    pub elapsed_secs: f64,
    /// Hash of the configuration the chain ran under.
    pub config_hash: String,
    /// Proposal scales at the end of the run.
    pub final_steps: MhSet,
}

/// Thinning interval implied by the schedule:
/// `floor((n_iter - n_burn) / n_keep)`.
pub fn thin_interval(mcmc: &McmcConfig) -> Result<usize> {
    if mcmc.n_burn >= mcmc.n_iter {
        return Err(Error::Config(format!(
            "n_burn ({}) must be smaller than n_iter ({})",
            mcmc.n_burn, mcmc.n_iter
        )));
    }
    let post = mcmc.n_iter - mcmc.n_burn;
    if mcmc.n_keep == 0 || mcmc.n_keep > post {
        return Err(Error::Config(format!(
            "n_keep ({}) must be in 1..={} for this schedule",
            mcmc.n_keep, post
        )));
    }
    Ok(post / mcmc.n_keep)
}

/// Run one full sweep over all blocks, returning the end-of-sweep workspace
/// so the caller can evaluate the deviance without recomputing the mean.
pub fn sweep(
    ctx: &FitContext,
    state: &mut ChainState,
    cache: &mut CorrCache,
    mh: &mut MhSet,
    adapt: bool,
    rng: &mut ChaCha20Rng,
) -> Result<Workspace> {
    let mut ws = Workspace::rebuild(ctx, state)?;
    let cfg = ctx.config();

    blocks::sample_grand_mean(ctx, state, rng);
    blocks::sample_genus_means(ctx, state, &mut ws, rng);
    if matches!(cfg.intercept_mode, InterceptMode::GenusSpatial) {
        blocks::sample_site_intercepts(ctx, state, &mut ws, cache, rng)?;
        moves::mh_intercept_decay(ctx, state, cache, &mut mh.intercept_decay, adapt, rng)?;
    }

    blocks::sample_coeffs(ctx, state, &mut ws, rng)?;
    if matches!(cfg.beta_mode, BetaMode::Functional) {
        moves::mh_coeff_bandwidth(ctx, state, &mut ws, &mut mh.coeff_bandwidth, adapt, rng)?;
    }

    if !matches!(cfg.gamma_mode, GammaMode::None) {
        blocks::sample_wave_knots(ctx, state, &mut ws, rng)?;
        moves::mh_wave_bandwidths(ctx, state, &mut ws, &mut mh.wave_bandwidths, adapt, rng)?;
    }

    if ctx.has_factors() {
        blocks::sample_factors(ctx, state, &mut ws, cache, rng)?;
        blocks::sample_loadings(ctx, state, &mut ws, rng)?;
    }
    moves::mh_space_wave_bandwidth(
        ctx,
        state,
        &mut ws,
        &mut mh.space_wave_bandwidth,
        adapt,
        rng,
    )?;
    moves::mh_factor_decays(ctx, state, cache, &mut mh.factor_decays, adapt, rng)?;
    if matches!(cfg.eta_variant, EtaVariant::SpatialConvolution) {
        blocks::sample_conv_field(ctx, state, &mut ws, rng)?;
    }

    blocks::sample_variances(ctx, state, cache, rng)?;
    moves::mh_log_var_knots(ctx, state, &mut ws, &mut mh.log_var_knots, adapt, rng)?;

    Ok(ws)
}

/// Deviance of the state that produced `ws`, using its residual directly.
fn deviance_of(ctx: &FitContext, ws: &Workspace) -> f64 {
    let zero = nalgebra::DMatrix::zeros(ctx.n_wave(), ctx.n_records());
    -2.0 * gaussian_loglik(&ws.resid, &zero, &ws.bases.sigma2)
}

/// Options of a sampling run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write restartable checkpoints to this file every
    /// `mcmc.checkpoint_every` sweeps.
    pub checkpoint: Option<std::path::PathBuf>,
    /// Print a progress line roughly this many times over the run.
    pub progress: Option<usize>,
}

/// Run a chain from scratch under the context's configuration.
pub fn run_chain(ctx: &FitContext, opts: &RunOptions) -> Result<FitResult> {
    let mcmc = &ctx.config().mcmc;
    let mut rng = <ChaCha20Rng as rand::SeedableRng>::seed_from_u64(mcmc.seed);
    let state = ctx.init_state(&mut rng)?;
    let pos = ChainPosition {
        sweep: 0,
        state,
        rng,
        blocks: MhSet::new(&mcmc.steps),
        kept: Vec::new(),
        deviances: Vec::new(),
    };
    drive(ctx, pos, opts)
}

/// Resume a chain from a checkpoint file and run it to completion.
pub fn resume_chain(ctx: &FitContext, checkpoint: &Path, opts: &RunOptions) -> Result<FitResult> {
    let pos = checkpoint::read_checkpoint(ctx, checkpoint)?;
    drive(ctx, pos, opts)
}

/// Advance a chain position to the end of the schedule and summarize.
pub fn drive(ctx: &FitContext, mut pos: ChainPosition, opts: &RunOptions) -> Result<FitResult> {
    let mcmc = ctx.config().mcmc.clone();
    let thin = thin_interval(&mcmc)?;
    let mut cache = CorrCache::new();
    let started = Instant::now();
    let progress_every = opts
        .progress
        .map(|n| (mcmc.n_iter / n.max(1)).max(1))
        .unwrap_or(usize::MAX);

    while pos.sweep < mcmc.n_iter {
        let adapt = mcmc.adapt && pos.sweep < mcmc.n_burn;
        let ws = sweep(ctx, &mut pos.state, &mut cache, &mut pos.blocks, adapt, &mut pos.rng)?;
        pos.sweep += 1;

        if pos.sweep > mcmc.n_burn {
            let offset = pos.sweep - mcmc.n_burn;
            if offset % thin == 0 && pos.kept.len() < mcmc.n_keep {
                pos.kept.push(pos.state.clone());
                pos.deviances.push(deviance_of(ctx, &ws));
            }
        }

        if pos.sweep % progress_every == 0 && pos.sweep < mcmc.n_iter {
            eprintln!(
                "sweep {}/{} ({} draws kept)",
                pos.sweep,
                mcmc.n_iter,
                pos.kept.len()
            );
        }
        if let (Some(path), Some(every)) = (&opts.checkpoint, mcmc.checkpoint_every) {
            if every > 0 && pos.sweep % every == 0 && pos.sweep < mcmc.n_iter {
                checkpoint::write_checkpoint(ctx, path, &pos)?;
            }
        }
    }

    let elapsed_secs = started.elapsed().as_secs_f64();
    let dic = dic::dic_summary(ctx, &pos.kept, &pos.deviances)?;
    Ok(FitResult {
        acceptance: pos.blocks.acceptance(),
        dic,
        elapsed_secs,
        config_hash: crate::config::config_hash(ctx.config()),
        final_steps: pos.blocks,
        kept: pos.kept,
        deviances: pos.deviances,
    })
}
