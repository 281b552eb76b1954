//! Metropolis moves for bandwidths, decays, and the log-variance knots.
//!
//! Each move proposes on an unconstrained scale (log for positive
//! bandwidths, logit for decays with uniform support), carries the
//! transform's Jacobian in the log ratio, and computes the likelihood
//! change through the *change in the residual* rather than a full
//! re-evaluation: for a proposal that shifts record `k`'s mean column by
//! `d`, the log-likelihood changes by `sum (r d - d^2/2) / sigma2`.
//!
//! Every move consumes a fixed number of RNG variates whether or not it
//! accepts, so chains can be checkpointed and replayed bit-for-bit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{BetaMode, DecayMode, EtaVariant, GammaMode, InterceptMode};
use crate::error::Result;
use crate::kernels::{design_matrix, kernel_value, Bandwidths};
use crate::model::FitContext;
use crate::state::ChainState;
use crate::stats::KahanSum;

use super::blocks::{CacheTag, CorrCache, Workspace};
use super::mh::{inv_logit, logit, logit_log_jacobian, mh_accept, MhBlock};

/// Log-likelihood change when record `k`'s mean column shifts by
/// `delta[:, col_of(k)]`: `sum_{t,k} (r*d - d^2/2) / sigma2(t)`.
pub fn loglik_delta(
    resid: &DMatrix<f64>,
    inv_sigma2: &DVector<f64>,
    delta: &DMatrix<f64>,
    col_of: impl Fn(usize) -> usize,
) -> f64 {
    let mut acc = KahanSum::new();
    for k in 0..resid.ncols() {
        let c = col_of(k);
        for t in 0..resid.nrows() {
            let d = delta[(t, c)];
            if d != 0.0 {
                acc.add((resid[(t, k)] * d - 0.5 * d * d) * inv_sigma2[t]);
            }
        }
    }
    acc.total()
}

/// Apply an accepted mean shift: `resid[:, k] -= delta[:, col_of(k)]`.
fn apply_delta(
    resid: &mut DMatrix<f64>,
    delta: &DMatrix<f64>,
    col_of: impl Fn(usize) -> usize,
) {
    for k in 0..resid.ncols() {
        let c = col_of(k);
        for t in 0..resid.nrows() {
            resid[(t, k)] -= delta[(t, c)];
        }
    }
}

/// Zero-mean Gaussian log-density up to constants: `-(logdet + x' Q x)/2`
/// for a precision `Q` with the given log-determinant of its inverse.
fn gp_logdensity(x: &DVector<f64>, prec: &DMatrix<f64>, logdet_cov: f64) -> f64 {
    -0.5 * (logdet_cov + (prec * x).dot(x))
}

/// Log density of `Gamma(shape, rate)` at `x > 0`, up to constants.
fn gamma_logpdf(shape: f64, rate: f64, x: f64) -> f64 {
    (shape - 1.0) * x.ln() - rate * x
}

// --- intercept decay ---------------------------------------------------------

/// Random-walk update of the site-intercept decay on the logit scale over
/// its uniform support.
pub fn mh_intercept_decay<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    cache: &mut CorrCache,
    block: &mut MhBlock,
    adapt: bool,
    rng: &mut R,
) -> Result<()> {
    if !matches!(ctx.config().intercept_mode, InterceptMode::GenusSpatial) {
        return Ok(());
    }
    let (lo, hi) = ctx.config().priors.intercept_decay_range;
    let z = logit(state.intercept_decay, lo, hi)
        + block.step * rng.sample::<f64, _>(StandardNormal);
    let proposal = inv_logit(z, lo, hi);

    let mut log_ratio = logit_log_jacobian(proposal, lo, hi)
        - logit_log_jacobian(state.intercept_decay, lo, hi);
    for g in 0..ctx.n_genera() {
        let a = state.site_intercepts[g].clone();
        if a.is_empty() {
            continue;
        }
        // Scale by the variance outside the cached unit-scale pieces:
        // logdet(v R) differs from logdet(R) by a term constant in the
        // decay, and the quadratic form picks up 1/v.
        let v = state.var_site_intercept;
        let scaled = &a / v.sqrt();
        let (inv_new, logdet_new) = cache
            .get(CacheTag::Genus(g), ctx.genus_dist(g), proposal, "site-intercept correlation")?
            .clone();
        log_ratio += gp_logdensity(&scaled, &inv_new, logdet_new);
        let (inv_old, logdet_old) = cache
            .get(CacheTag::Genus(g), ctx.genus_dist(g), state.intercept_decay, "site-intercept correlation")?
            .clone();
        log_ratio -= gp_logdensity(&scaled, &inv_old, logdet_old);
    }
    let accepted = mh_accept(rng, log_ratio);
    if accepted {
        state.intercept_decay = proposal;
    }
    block.record(accepted, adapt);
    Ok(())
}

// --- coefficient-basis bandwidth ------------------------------------------------

/// Log-scale random-walk update of the shared coefficient-basis bandwidth.
pub fn mh_coeff_bandwidth<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    block: &mut MhBlock,
    adapt: bool,
    rng: &mut R,
) -> Result<()> {
    if !matches!(ctx.config().beta_mode, BetaMode::Functional) {
        return Ok(());
    }
    let old = state.coeff_bandwidth;
    let proposal = old * (block.step * rng.sample::<f64, _>(StandardNormal)).exp();
    let prior = &ctx.config().priors.coeff_bandwidth;

    let k_new = design_matrix(
        ctx.config().kernel,
        ctx.wave_values(),
        ctx.beta_knots(),
        Bandwidths::Shared(proposal),
    )?;
    // Mean shift per record: (K' - K) B' x_k.
    let delta = (&k_new - &ws.bases.k_beta)
        * state.coeffs.transpose()
        * ctx.design().x_rec.transpose();
    let log_ratio = loglik_delta(&ws.resid, &ws.bases.inv_sigma2, &delta, |k| k)
        + gamma_logpdf(prior.shape, prior.rate, proposal)
        - gamma_logpdf(prior.shape, prior.rate, old)
        + proposal.ln()
        - old.ln();

    let accepted = mh_accept(rng, log_ratio);
    if accepted {
        apply_delta(&mut ws.resid, &delta, |k| k);
        ws.bases.k_beta = k_new;
        state.coeff_bandwidth = proposal;
    }
    block.record(accepted, adapt);
    Ok(())
}

// --- wavelength-effect bandwidths --------------------------------------------------

/// Joint random-walk update of all wavelength-effect log-bandwidths. The
/// prior is a Gaussian process over knots on the log scale, so the walk is
/// performed directly in log space with no Jacobian.
pub fn mh_wave_bandwidths<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    block: &mut MhBlock,
    adapt: bool,
    rng: &mut R,
) -> Result<()> {
    if matches!(ctx.config().gamma_mode, GammaMode::None) {
        return Ok(());
    }
    let ell_old = state.wave_bandwidths.map(f64::ln);
    let ell_new = DVector::from_fn(ctx.j_gamma(), |j, _| {
        ell_old[j] + block.step * rng.sample::<f64, _>(StandardNormal)
    });
    let theta_new = ell_new.map(f64::exp);

    let k_new = design_matrix(
        ctx.config().kernel,
        ctx.wave_values(),
        ctx.gamma_knots(),
        Bandwidths::PerKnot(theta_new.as_slice()),
    )?;
    let dk = &k_new - &ws.bases.k_gamma;
    // Curve change per genus column (or the single global column).
    let (delta, col_of): (DMatrix<f64>, Box<dyn Fn(usize) -> usize>) =
        match ctx.config().gamma_mode {
            GammaMode::Global => {
                let d = &dk * &state.wave_knots;
                (DMatrix::from_columns(&[d]), Box::new(|_| 0))
            }
            GammaMode::PerGenus => {
                let knots = state.wave_knots_genus.as_ref().expect("per-genus mode");
                let d = &dk * knots.transpose();
                let records = ctx.dataset().records();
                let genus_of: Vec<usize> = records.iter().map(|r| r.genus).collect();
                (d, Box::new(move |k| genus_of[k]))
            }
            GammaMode::None => unreachable!("handled above"),
        };

    let mu = DVector::from_element(ctx.j_gamma(), state.mean_log_bandwidth);
    let quad = |ell: &DVector<f64>| {
        let c = ell - &mu;
        (ctx.r_gamma_inv() * &c).dot(&c) / state.var_log_bandwidth
    };
    let log_ratio = loglik_delta(&ws.resid, &ws.bases.inv_sigma2, &delta, &col_of)
        - 0.5 * (quad(&ell_new) - quad(&ell_old));

    let accepted = mh_accept(rng, log_ratio);
    if accepted {
        apply_delta(&mut ws.resid, &delta, &col_of);
        ws.bases.k_gamma = k_new;
        state.wave_bandwidths = theta_new;
    }
    block.record(accepted, adapt);
    Ok(())
}

// --- interaction bandwidth -----------------------------------------------------------

/// Log-scale random-walk update of the interaction bandwidth: the
/// wavelength-kernel bandwidth for the factor variants, or the spatial
/// kernel bandwidth for the spatial-convolution variant.
pub fn mh_space_wave_bandwidth<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    block: &mut MhBlock,
    adapt: bool,
    rng: &mut R,
) -> Result<()> {
    let variant = &ctx.config().eta_variant;
    let needs_update = matches!(
        variant,
        EtaVariant::Factor { .. }
            | EtaVariant::Independent
            | EtaVariant::Separable
            | EtaVariant::Lmc
            | EtaVariant::SpatialConvolution
    );
    if !needs_update {
        return Ok(());
    }
    let old = state.space_wave_bandwidth;
    let proposal = old * (block.step * rng.sample::<f64, _>(StandardNormal)).exp();
    let prior = &ctx.config().priors.space_wave_bandwidth;

    // Mean shift per site.
    let (delta, new_k_eta, new_weights) = match variant {
        EtaVariant::SpatialConvolution => {
            let n_s = ctx.n_sites();
            let mut w_new = DMatrix::zeros(n_s, n_s);
            for s in 0..n_s {
                for j in 0..n_s {
                    w_new[(s, j)] =
                        kernel_value(ctx.config().kernel, ctx.site_dist()[(s, j)], proposal)?;
                }
            }
            let w_old = ws.bases.conv_weights.as_ref().expect("conv variant");
            let z = state.conv_field.as_ref().expect("conv variant");
            let delta = z * (&w_new - w_old).transpose();
            (delta, None, Some(w_new))
        }
        _ => {
            let k_new = design_matrix(
                ctx.config().kernel,
                ctx.wave_values(),
                ctx.eta_knots(),
                Bandwidths::Shared(proposal),
            )?;
            let delta = (&k_new - &ws.bases.k_eta)
                * &state.loadings
                * state.factors.transpose();
            (delta, Some(k_new), None)
        }
    };
    let records = ctx.dataset().records();
    let site_of: Vec<usize> = records.iter().map(|r| r.site).collect();
    let col_of = |k: usize| site_of[k];

    let log_ratio = loglik_delta(&ws.resid, &ws.bases.inv_sigma2, &delta, col_of)
        + gamma_logpdf(prior.shape, prior.rate, proposal)
        - gamma_logpdf(prior.shape, prior.rate, old)
        + proposal.ln()
        - old.ln();

    let accepted = mh_accept(rng, log_ratio);
    if accepted {
        apply_delta(&mut ws.resid, &delta, col_of);
        if let Some(k) = new_k_eta {
            ws.bases.k_eta = k;
        }
        if let Some(w) = new_weights {
            ws.bases.conv_weights = Some(w);
        }
        state.space_wave_bandwidth = proposal;
    }
    block.record(accepted, adapt);
    Ok(())
}

// --- factor decays --------------------------------------------------------------------

/// Random-walk update of the factor decays when they are sampled. A single
/// shared decay walks once on the logit scale; a sequence walks each decay
/// in turn, with the ordering constraint enforced through the support.
pub fn mh_factor_decays<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    cache: &mut CorrCache,
    block: &mut MhBlock,
    adapt: bool,
    rng: &mut R,
) -> Result<()> {
    if !ctx.has_factors() || ctx.fixed_factor_decays().is_some() {
        return Ok(());
    }
    let (lo, hi) = ctx.config().priors.factor_decay_range;
    match ctx.config().factor_decays {
        DecayMode::RandomSingle => {
            let old = state.factor_decays[0];
            let z = logit(old, lo, hi) + block.step * rng.sample::<f64, _>(StandardNormal);
            let proposal = inv_logit(z, lo, hi);
            let mut log_ratio =
                logit_log_jacobian(proposal, lo, hi) - logit_log_jacobian(old, lo, hi);
            let (inv_new, logdet_new) = cache
                .get(CacheTag::Sites, ctx.site_dist(), proposal, "factor correlation")?
                .clone();
            let (inv_old, logdet_old) = cache
                .get(CacheTag::Sites, ctx.site_dist(), old, "factor correlation")?
                .clone();
            for f in 0..ctx.rank() {
                let w = state.factors.column(f).clone_owned();
                log_ratio += gp_logdensity(&w, &inv_new, logdet_new)
                    - gp_logdensity(&w, &inv_old, logdet_old);
            }
            let accepted = mh_accept(rng, log_ratio);
            if accepted {
                for f in 0..ctx.rank() {
                    state.factor_decays[f] = proposal;
                }
            }
            block.record(accepted, adapt);
        }
        DecayMode::RandomSequence => {
            for f in 0..ctx.rank() {
                let old = state.factor_decays[f];
                let z = logit(old, lo, hi) + block.step * rng.sample::<f64, _>(StandardNormal);
                let proposal = inv_logit(z, lo, hi);
                // Ordering constraint phi_1 < ... < phi_r: proposals outside
                // the slot's interval have zero target density.
                let lower_ok = f == 0 || proposal > state.factor_decays[f - 1];
                let upper_ok = f + 1 == ctx.rank() || proposal < state.factor_decays[f + 1];
                let log_ratio = if lower_ok && upper_ok {
                    let w = state.factors.column(f).clone_owned();
                    let (inv_new, logdet_new) = cache
                        .get(CacheTag::Sites, ctx.site_dist(), proposal, "factor correlation")?
                        .clone();
                    let (inv_old, logdet_old) = cache
                        .get(CacheTag::Sites, ctx.site_dist(), old, "factor correlation")?
                        .clone();
                    logit_log_jacobian(proposal, lo, hi) - logit_log_jacobian(old, lo, hi)
                        + gp_logdensity(&w, &inv_new, logdet_new)
                        - gp_logdensity(&w, &inv_old, logdet_old)
                } else {
                    f64::NEG_INFINITY
                };
                let accepted = mh_accept(rng, log_ratio);
                if accepted {
                    state.factor_decays[f] = proposal;
                }
                block.record(accepted, adapt);
            }
        }
        _ => {}
    }
    Ok(())
}

// --- log-variance knots ------------------------------------------------------------------

/// Componentwise random-walk update of the log-variance knots. The variance
/// curve enters every cell's density, but a hat-basis knot only moves the
/// curve between its neighboring knots, so each proposal touches a short
/// wavelength range.
pub fn mh_log_var_knots<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    block: &mut MhBlock,
    adapt: bool,
    rng: &mut R,
) -> Result<()> {
    let n_wave = ctx.n_wave();
    let n_rep = ctx.n_records() as f64;
    let weights = ctx.sigma_basis().weights();
    let prior_sd = ctx.config().priors.log_var_sd;

    // Residual sums of squares per wavelength; the residual matrix is not
    // touched by this block, so one pass serves every knot.
    let mut sum_r2 = vec![0.0; n_wave];
    for k in 0..ws.resid.ncols() {
        for (acc, &r) in sum_r2.iter_mut().zip(ws.resid.column(k).iter()) {
            *acc += r * r;
        }
    }

    for j in 0..ctx.sigma_basis().n_knots() {
        let old = state.log_var_knots[j];
        let proposal = old + block.step * rng.sample::<f64, _>(StandardNormal);
        let shift = proposal - old;

        let mut delta_ll = 0.0;
        for t in 0..n_wave {
            let w = weights[(t, j)];
            if w == 0.0 {
                continue;
            }
            let ls_old = ws.bases.sigma2[t].ln();
            let ls_new = ls_old + w * shift;
            delta_ll += -0.5
                * (n_rep * (ls_new - ls_old)
                    + sum_r2[t] * ((-ls_new).exp() - (-ls_old).exp()));
        }
        let log_ratio = delta_ll
            - 0.5 * (proposal * proposal - old * old) / (prior_sd * prior_sd);

        let accepted = mh_accept(rng, log_ratio);
        if accepted {
            state.log_var_knots[j] = proposal;
            for t in 0..n_wave {
                let w = weights[(t, j)];
                if w != 0.0 {
                    let ls = ws.bases.sigma2[t].ln() + w * shift;
                    ws.bases.sigma2[t] = ls.exp();
                    ws.bases.inv_sigma2[t] = (-ls).exp();
                }
            }
        }
        block.record(accepted, adapt);
    }
    Ok(())
}
