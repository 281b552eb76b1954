//! Gibbs full conditionals.
//!
//! Every Gaussian block is exposed two ways: a `*_conditional` /
//! `*_precision` function returning exact conditional moments (precision
//! matrix `Q` and linear term `b`, so the conditional is `N(Q^{-1} b,
//! Q^{-1})`; scalar blocks return `(mean, variance)` directly), and a
//! `sample_*` wrapper that draws from it and keeps the running residual
//! consistent. Inverse-gamma blocks expose their posterior `(shape, scale)`
//! the same way. Tests verify the moment functions against brute-force
//! linear-model algebra, so the wrappers stay thin.
//!
//! All functions take the full current residual `Y - mean(state)` and
//! restore their own term internally; sampling functions then subtract the
//! updated term again. The residual matrix is rebuilt from scratch at the
//! top of every sweep, so within-sweep increments cannot accumulate across
//! iterations.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::config::{EtaVariant, GammaMode, InterceptMode};
use crate::error::{Error, Result};
use crate::model::{BasisSet, FitContext};
use crate::spatial::{exp_corr_matrix, jittered_cholesky, sample_from_precision};
use crate::state::ChainState;

/// Per-sweep workspace: evaluated bases and the running residual.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub bases: BasisSet,
    /// `Y - mean(state)`, kept in sync by every sampling function.
    pub resid: DMatrix<f64>,
}

impl Workspace {
    /// Evaluate the bases and residual for the current state.
    pub fn rebuild(ctx: &FitContext, state: &ChainState) -> Result<Self> {
        let bases = ctx.bases(state)?;
        let mean = ctx.mean_surface_with(&bases, state);
        let resid = ctx.dataset().responses() - mean;
        Ok(Workspace { bases, resid })
    }
}

/// Which fixed distance matrix a cached correlation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CacheTag {
    /// The full site distance matrix.
    Sites,
    /// The distance matrix over one genus's observed sites.
    Genus(usize),
}

/// Cache of inverse correlation matrices (with log-determinants) keyed by
/// the exact bit pattern of the decay, for matrices over a fixed distance
/// matrix. Site-level and per-genus caches are kept separately.
#[derive(Debug, Clone, Default)]
pub struct CorrCache {
    map: HashMap<(CacheTag, u64), (DMatrix<f64>, f64)>,
}

impl CorrCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inverse and log-determinant of `exp(-decay * dist)`, memoized on
    /// `(tag, decay)`.
    pub fn get(
        &mut self,
        tag: CacheTag,
        dist: &DMatrix<f64>,
        decay: f64,
        context: &str,
    ) -> Result<&(DMatrix<f64>, f64)> {
        let key = (tag, decay.to_bits());
        if !self.map.contains_key(&key) {
            if self.map.len() > 64 {
                self.map.clear();
            }
            let corr = exp_corr_matrix(dist, decay)?;
            let chol = jittered_cholesky(&corr, context)?;
            let logdet = 2.0 * chol.l().diagonal().map(f64::ln).sum();
            self.map.insert(key, (chol.inverse(), logdet));
        }
        Ok(self.map.get(&key).expect("just inserted"))
    }
}

/// Draw `N(mean, var)`.
pub fn sample_scalar_normal<R: Rng>(rng: &mut R, mean: f64, var: f64) -> f64 {
    mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal)
}

/// Draw an inverse-gamma variate in the crate's (shape, scale) convention.
pub fn draw_inv_gamma<R: Rng>(rng: &mut R, shape: f64, scale: f64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0)
        .map_err(|e| Error::Numeric(format!("inverse-gamma shape {shape}: {e}")))?;
    Ok(scale / g.sample(rng))
}

/// `K' D^{-1}`: the basis transposed with rows weighted by `1/sigma2(t)`.
pub fn kt_dinv(k: &DMatrix<f64>, inv_sigma2: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = k.clone();
    for t in 0..scaled.nrows() {
        let w = inv_sigma2[t];
        scaled.row_mut(t).scale_mut(w);
    }
    scaled.transpose()
}

/// `K' D^{-1} K` for a basis `K`.
pub fn kt_dinv_k(k: &DMatrix<f64>, inv_sigma2: &DVector<f64>) -> DMatrix<f64> {
    kt_dinv(k, inv_sigma2) * k
}

/// Sum of `1/sigma2(t)` over the grid.
fn total_precision(ws: &Workspace) -> f64 {
    ws.bases.inv_sigma2.sum()
}

/// `sum_t resid[t, k] / sigma2(t)` for one record.
fn weighted_col_sum(ws: &Workspace, k: usize) -> f64 {
    let mut acc = 0.0;
    for t in 0..ws.resid.nrows() {
        acc += ws.resid[(t, k)] * ws.bases.inv_sigma2[t];
    }
    acc
}

// --- grand mean -------------------------------------------------------------

/// Conditional of the grand mean given the genus means: the genus means are
/// exchangeable N(grand, var_genus_mean) draws and the prior is
/// N(0, intercept_sd^2).
pub fn grand_mean_conditional(ctx: &FitContext, state: &ChainState) -> (f64, f64) {
    let prior_sd = ctx.config().priors.intercept_sd;
    let prec = 1.0 / (prior_sd * prior_sd)
        + ctx.n_genera() as f64 / state.var_genus_mean;
    let lin = state.genus_means.sum() / state.var_genus_mean;
    (lin / prec, 1.0 / prec)
}

pub fn sample_grand_mean<R: Rng>(ctx: &FitContext, state: &mut ChainState, rng: &mut R) {
    let (mean, var) = grand_mean_conditional(ctx, state);
    state.grand_mean = sample_scalar_normal(rng, mean, var);
}

// --- genus means ------------------------------------------------------------

/// Conditional of one genus mean given everything else.
pub fn genus_mean_conditional(
    ctx: &FitContext,
    state: &ChainState,
    ws: &Workspace,
    g: usize,
) -> (f64, f64) {
    let s_tot = total_precision(ws);
    let recs = &ctx.design().records_by_genus[g];
    let prec = 1.0 / state.var_genus_mean + recs.len() as f64 * s_tot;
    let mut lin = state.grand_mean / state.var_genus_mean;
    for &k in recs {
        lin += weighted_col_sum(ws, k) + state.genus_means[g] * s_tot;
    }
    (lin / prec, 1.0 / prec)
}

pub fn sample_genus_means<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    rng: &mut R,
) {
    for g in 0..ctx.n_genera() {
        let (mean, var) = genus_mean_conditional(ctx, state, ws, g);
        let old = state.genus_means[g];
        let new = sample_scalar_normal(rng, mean, var);
        state.genus_means[g] = new;
        let shift = new - old;
        for &k in &ctx.design().records_by_genus[g] {
            for t in 0..ws.resid.nrows() {
                ws.resid[(t, k)] -= shift;
            }
        }
    }
}

// --- site intercepts ---------------------------------------------------------

/// Precision form of one genus's site-intercept block: `corr_inv` is the
/// inverse site correlation over that genus's observed sites at the current
/// decay.
pub fn site_intercept_precision(
    ctx: &FitContext,
    state: &ChainState,
    ws: &Workspace,
    corr_inv: &DMatrix<f64>,
    g: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let s_tot = total_precision(ws);
    let n_slots = corr_inv.nrows();
    let mut q = corr_inv / state.var_site_intercept;
    let mut b = DVector::zeros(n_slots);
    let sites = &ctx.design().genus_sites[g];
    for (slot, &site) in sites.iter().enumerate() {
        if let Some(recs) = ctx.design().records_by_cell.get(&(g, site)) {
            q[(slot, slot)] += recs.len() as f64 * s_tot;
            for &k in recs {
                b[slot] += weighted_col_sum(ws, k) + state.site_intercepts[g][slot] * s_tot;
            }
        }
    }
    (q, b)
}

pub fn sample_site_intercepts<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    cache: &mut CorrCache,
    rng: &mut R,
) -> Result<()> {
    for g in 0..ctx.n_genera() {
        if ctx.design().genus_sites[g].is_empty() {
            continue;
        }
        let (corr_inv, _) = cache
            .get(CacheTag::Genus(g), ctx.genus_dist(g), state.intercept_decay, "site-intercept correlation")?
            .clone();
        let (q, b) = site_intercept_precision(ctx, state, ws, &corr_inv, g);
        let new = sample_from_precision(rng, &q, &b, "site intercepts")?;
        let old = std::mem::replace(&mut state.site_intercepts[g], new);
        for &k in &ctx.design().records_by_genus[g] {
            let slot = ctx.rec_slot(k);
            let shift = state.site_intercepts[g][slot] - old[slot];
            for t in 0..ws.resid.nrows() {
                ws.resid[(t, k)] -= shift;
            }
        }
    }
    Ok(())
}

// --- regression coefficients ---------------------------------------------------

/// Precision form of the joint coefficient block. The sampled vector is
/// `vec(B')` laid out covariate-major: entry `j * j_beta + m` is the
/// coefficient of covariate `j` on basis column `m`, so the precision is
/// `I/var + (X'X) (x) (K' D^{-1} K)` blockwise.
pub fn coeff_precision(
    ctx: &FitContext,
    state: &ChainState,
    ws: &Workspace,
) -> (DMatrix<f64>, DVector<f64>) {
    let j_beta = ctx.j_beta();
    let p = ctx.n_covariates();
    let g = kt_dinv_k(&ws.bases.k_beta, &ws.bases.inv_sigma2);
    let m = ctx.xtx();

    let mut q = DMatrix::zeros(p * j_beta, p * j_beta);
    for j in 0..p {
        for j2 in 0..p {
            let scale = m[(j, j2)];
            for a in 0..j_beta {
                for b in 0..j_beta {
                    q[(j * j_beta + a, j2 * j_beta + b)] = scale * g[(a, b)];
                }
            }
        }
    }
    for d in 0..p * j_beta {
        q[(d, d)] += 1.0 / state.var_coeff;
    }

    // K' D^{-1} (resid + K B' X') X  =  K' D^{-1} resid X + G B' (X'X).
    let kt_d = kt_dinv(&ws.bases.k_beta, &ws.bases.inv_sigma2);
    let data_part = (&kt_d * &ws.resid) * &ctx.design().x_rec;
    let own_part = (&g * state.coeffs.transpose()) * m;
    let lin_mat = data_part + own_part; // j_beta x p
    let mut b = DVector::zeros(p * j_beta);
    for j in 0..p {
        for a in 0..j_beta {
            b[j * j_beta + a] = lin_mat[(a, j)];
        }
    }
    (q, b)
}

pub fn sample_coeffs<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    rng: &mut R,
) -> Result<()> {
    let (q, b) = coeff_precision(ctx, state, ws);
    let c = sample_from_precision(rng, &q, &b, "coefficients")?;
    let j_beta = ctx.j_beta();
    let new = DMatrix::from_fn(ctx.n_covariates(), j_beta, |j, m| c[j * j_beta + m]);
    let delta = &new - &state.coeffs;
    state.coeffs = new;
    // resid -= K (dB)' X'
    let shift = (&ws.bases.k_beta * delta.transpose()) * ctx.design().x_rec.transpose();
    ws.resid -= shift;
    Ok(())
}

// --- wavelength effects ----------------------------------------------------------

/// Precision form of the global wavelength-effect knot block.
pub fn wave_knot_precision(
    ctx: &FitContext,
    state: &ChainState,
    ws: &Workspace,
) -> (DMatrix<f64>, DVector<f64>) {
    let g = kt_dinv_k(&ws.bases.k_gamma, &ws.bases.inv_sigma2);
    let n_rep = ctx.n_records() as f64;
    let mut q = g.clone() * n_rep;
    for d in 0..q.nrows() {
        q[(d, d)] += 1.0 / state.var_wave;
    }
    let kt_d = kt_dinv(&ws.bases.k_gamma, &ws.bases.inv_sigma2);
    let row_sum = ws.resid.column_sum();
    let b = &kt_d * row_sum + g * &state.wave_knots * n_rep;
    (q, b)
}

/// Precision form of one genus's wavelength-effect knots (per-genus mode).
pub fn genus_wave_knot_precision(
    ctx: &FitContext,
    state: &ChainState,
    ws: &Workspace,
    g_idx: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let knots = state
        .wave_knots_genus
        .as_ref()
        .expect("per-genus mode carries genus knots");
    let g = kt_dinv_k(&ws.bases.k_gamma, &ws.bases.inv_sigma2);
    let recs = &ctx.design().records_by_genus[g_idx];
    let n_g = recs.len() as f64;
    let mut q = g.clone() * n_g;
    for d in 0..q.nrows() {
        q[(d, d)] += 1.0 / state.var_wave_genus;
    }
    let kt_d = kt_dinv(&ws.bases.k_gamma, &ws.bases.inv_sigma2);
    let mut col_sum = DVector::zeros(ws.resid.nrows());
    for &k in recs {
        col_sum += ws.resid.column(k);
    }
    let own = knots.row(g_idx).transpose();
    let b = &kt_d * col_sum + g * &own * n_g + &state.wave_knots / state.var_wave_genus;
    (q, b)
}

/// Conditional of the hyper-mean knots in per-genus mode: coordinatewise
/// Gaussian with no likelihood term.
pub fn wave_hyper_mean_moments(ctx: &FitContext, state: &ChainState) -> (DVector<f64>, DVector<f64>) {
    let knots = state
        .wave_knots_genus
        .as_ref()
        .expect("per-genus mode carries genus knots");
    let n_g = ctx.n_genera() as f64;
    let prec = n_g / state.var_wave_genus + 1.0 / state.var_wave;
    let mut mean = DVector::zeros(ctx.j_gamma());
    for j in 0..ctx.j_gamma() {
        let sum_j: f64 = (0..ctx.n_genera()).map(|g| knots[(g, j)]).sum();
        mean[j] = (sum_j / state.var_wave_genus) / prec;
    }
    (mean, DVector::from_element(ctx.j_gamma(), 1.0 / prec))
}

pub fn sample_wave_knots<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    rng: &mut R,
) -> Result<()> {
    match ctx.config().gamma_mode {
        GammaMode::None => Ok(()),
        GammaMode::Global => {
            let (q, b) = wave_knot_precision(ctx, state, ws);
            let new = sample_from_precision(rng, &q, &b, "wavelength knots")?;
            let delta_curve = &ws.bases.k_gamma * (&new - &state.wave_knots);
            state.wave_knots = new;
            for k in 0..ws.resid.ncols() {
                let mut col = ws.resid.column_mut(k);
                col -= &delta_curve;
            }
            Ok(())
        }
        GammaMode::PerGenus => {
            for g in 0..ctx.n_genera() {
                let (q, b) = genus_wave_knot_precision(ctx, state, ws, g);
                let new = sample_from_precision(rng, &q, &b, "genus wavelength knots")?;
                let knots = state.wave_knots_genus.as_mut().expect("per-genus mode");
                let old = knots.row(g).transpose();
                knots.set_row(g, &new.transpose());
                let delta_curve = &ws.bases.k_gamma * (new - old);
                for &k in &ctx.design().records_by_genus[g] {
                    let mut col = ws.resid.column_mut(k);
                    col -= &delta_curve;
                }
            }
            // Hyper-mean knots: pure hierarchy, no residual involvement.
            let (mean, var) = wave_hyper_mean_moments(ctx, state);
            for j in 0..ctx.j_gamma() {
                state.wave_knots[j] = sample_scalar_normal(rng, mean[j], var[j]);
            }
            Ok(())
        }
    }
}

// --- latent factors ------------------------------------------------------------

/// Likelihood pieces shared by the per-site factor updates: `U = K_eta A`,
/// `U' D^{-1}` and `U' D^{-1} U`.
pub struct FactorOperator {
    pub u: DMatrix<f64>,
    pub ut_dinv: DMatrix<f64>,
    pub ut_dinv_u: DMatrix<f64>,
}

impl FactorOperator {
    pub fn new(state: &ChainState, ws: &Workspace) -> Self {
        let u = &ws.bases.k_eta * &state.loadings;
        let ut_dinv = kt_dinv(&u, &ws.bases.inv_sigma2);
        let ut_dinv_u = &ut_dinv * &u;
        FactorOperator { u, ut_dinv, ut_dinv_u }
    }
}

/// Precision form of the joint factor vector at one site. `factor_prec[f]`
/// is the inverse site correlation of factor `f`; the Gaussian-process prior
/// enters through its conditional at site `s` given all other sites.
pub fn factor_precision(
    ctx: &FitContext,
    state: &ChainState,
    ws: &Workspace,
    op: &FactorOperator,
    factor_prec: &[DMatrix<f64>],
    s: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let r = ctx.rank();
    let recs = &ctx.design().records_by_site[s];
    let n_s = recs.len() as f64;

    let mut q = op.ut_dinv_u.clone() * n_s;
    let mut b = DVector::zeros(r);
    for f in 0..r {
        let qf = &factor_prec[f];
        q[(f, f)] += qf[(s, s)];
        // Conditional prior linear term: -sum_{u != s} Q[s,u] w_f(u).
        let mut prior_lin = 0.0;
        for u in 0..ctx.n_sites() {
            if u != s {
                prior_lin -= qf[(s, u)] * state.factors[(u, f)];
            }
        }
        b[f] += prior_lin;
    }
    if !recs.is_empty() {
        let mut col_sum = DVector::zeros(ws.resid.nrows());
        for &k in recs {
            col_sum += ws.resid.column(k);
        }
        let w_old = state.factors.row(s).transpose();
        b += &op.ut_dinv * col_sum + &op.ut_dinv_u * w_old * n_s;
    }
    (q, b)
}

pub fn sample_factors<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    cache: &mut CorrCache,
    rng: &mut R,
) -> Result<()> {
    if !ctx.has_factors() {
        return Ok(());
    }
    let factor_prec: Vec<DMatrix<f64>> = (0..ctx.rank())
        .map(|f| {
            cache
                .get(CacheTag::Sites, ctx.site_dist(), state.factor_decays[f], "factor correlation")
                .map(|(inv, _)| inv.clone())
        })
        .collect::<Result<_>>()?;
    let op = FactorOperator::new(state, ws);
    for s in 0..ctx.n_sites() {
        let (q, b) = factor_precision(ctx, state, ws, &op, &factor_prec, s);
        let new = sample_from_precision(rng, &q, &b, "factors")?;
        let old = state.factors.row(s).transpose();
        let delta_curve = &op.u * (&new - old);
        state.factors.set_row(s, &new.transpose());
        for &k in &ctx.design().records_by_site[s] {
            let mut col = ws.resid.column_mut(k);
            col -= &delta_curve;
        }
    }
    Ok(())
}

// --- loadings --------------------------------------------------------------------

/// Free rows of loading column `col` under the variant's structure: all rows
/// for the dense variants, row `col` alone when diagonal, rows `col..` when
/// lower-triangular.
pub fn loading_free_rows(ctx: &FitContext, col: usize) -> std::ops::Range<usize> {
    match ctx.config().eta_variant {
        EtaVariant::Independent => col..col + 1,
        EtaVariant::Lmc => col..ctx.j_eta(),
        _ => 0..ctx.j_eta(),
    }
}

/// Number of free loading entries for the active variant.
pub fn loading_free_count(ctx: &FitContext) -> usize {
    (0..ctx.rank()).map(|c| loading_free_rows(ctx, c).len()).sum()
}

/// Precision form of the free part of loading column `col`.
pub fn loading_precision(
    ctx: &FitContext,
    state: &ChainState,
    ws: &Workspace,
    col: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let rows = loading_free_rows(ctx, col);
    let k_sub = ws.bases.k_eta.columns(rows.start, rows.len()).clone_owned();
    let g = kt_dinv_k(&k_sub, &ws.bases.inv_sigma2);

    // Per-record factor weight for this column.
    let mut c2_sum = 0.0;
    let mut q = DMatrix::zeros(rows.len(), rows.len());
    let mut b = DVector::zeros(rows.len());
    let kt_d = kt_dinv(&k_sub, &ws.bases.inv_sigma2);
    let a_old = state.loadings.column(col).rows(rows.start, rows.len()).clone_owned();
    let mut weighted_resid_sum = DVector::zeros(ws.resid.nrows());
    for k in 0..ctx.n_records() {
        let site = ctx.dataset().records()[k].site;
        let c = state.factors[(site, col)];
        c2_sum += c * c;
        if c != 0.0 {
            weighted_resid_sum.axpy(c, &ws.resid.column(k), 1.0);
        }
    }
    q += &g * c2_sum;
    for d in 0..q.nrows() {
        q[(d, d)] += 1.0 / state.var_loading;
    }
    b += &kt_d * weighted_resid_sum + g * a_old * c2_sum;
    (q, b)
}

pub fn sample_loadings<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    rng: &mut R,
) -> Result<()> {
    if !ctx.has_factors() {
        return Ok(());
    }
    let lmc = matches!(ctx.config().eta_variant, EtaVariant::Lmc);
    for col in 0..ctx.rank() {
        let rows = loading_free_rows(ctx, col);
        let (q, b) = loading_precision(ctx, state, ws, col);
        let mut new_sub = sample_from_precision(rng, &q, &b, "loadings")?;
        let mut flip = false;
        if lmc && new_sub[0] <= 0.0 {
            // Identification: the diagonal is kept positive by reflecting
            // both the column and its factor, which leaves the surface
            // unchanged and has symmetric prior density.
            new_sub.neg_mut();
            flip = true;
        }
        let old_col = state.loadings.column(col).clone_owned();
        for (i, row) in rows.clone().enumerate() {
            state.loadings[(row, col)] = new_sub[i];
        }
        if flip {
            for s in 0..ctx.n_sites() {
                state.factors[(s, col)] = -state.factors[(s, col)];
            }
        }
        // Residual update: eta column contribution changed by
        // K (a_new c_new - a_old c_old) per record; with a flip the product
        // a c is the negated-loading times negated-factor, so compute from
        // the current state directly.
        let new_col = state.loadings.column(col).clone_owned();
        for s in 0..ctx.n_sites() {
            let recs = &ctx.design().records_by_site[s];
            if recs.is_empty() {
                continue;
            }
            let c_new = state.factors[(s, col)];
            let c_old = if flip { -c_new } else { c_new };
            let delta_knots = &new_col * c_new - &old_col * c_old;
            let delta_curve = &ws.bases.k_eta * delta_knots;
            for &k in recs {
                let mut rc = ws.resid.column_mut(k);
                rc -= &delta_curve;
            }
        }
    }
    Ok(())
}

// --- spatial-convolution field ------------------------------------------------------

/// Precision form of the wavelength process at knot site `j` in the
/// spatial-convolution variant.
pub fn conv_site_precision(
    ctx: &FitContext,
    state: &ChainState,
    ws: &Workspace,
    j: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let rt_inv = ctx.conv_corr_inv().expect("conv variant has the wavelength precision");
    let w = ws.bases.conv_weights.as_ref().expect("conv variant has kernel weights");
    let z = state.conv_field.as_ref().expect("conv variant has the field");
    let n_wave = ctx.n_wave();

    let mut q = rt_inv / state.var_conv_field;
    let mut c2_sum = 0.0;
    let mut b = DVector::zeros(n_wave);
    for k in 0..ctx.n_records() {
        let site = ctx.dataset().records()[k].site;
        let wk = w[(site, j)];
        if wk == 0.0 {
            continue;
        }
        c2_sum += wk * wk;
        for t in 0..n_wave {
            b[t] += wk * ws.resid[(t, k)] * ws.bases.inv_sigma2[t];
        }
    }
    for t in 0..n_wave {
        q[(t, t)] += c2_sum * ws.bases.inv_sigma2[t];
        b[t] += c2_sum * ws.bases.inv_sigma2[t] * z[(t, j)];
    }
    (q, b)
}

pub fn sample_conv_field<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    ws: &mut Workspace,
    rng: &mut R,
) -> Result<()> {
    if !matches!(ctx.config().eta_variant, EtaVariant::SpatialConvolution) {
        return Ok(());
    }
    for j in 0..ctx.n_sites() {
        let (q, b) = conv_site_precision(ctx, state, ws, j);
        let new = sample_from_precision(rng, &q, &b, "conv field")?;
        let z = state.conv_field.as_mut().expect("conv variant");
        let delta = &new - z.column(j);
        z.set_column(j, &new);
        let w = ws.bases.conv_weights.as_ref().expect("conv variant");
        for k in 0..ctx.n_records() {
            let site = ctx.dataset().records()[k].site;
            let wk = w[(site, j)];
            if wk != 0.0 {
                let mut col = ws.resid.column_mut(k);
                col.axpy(-wk, &delta, 1.0);
            }
        }
    }
    Ok(())
}

// --- bandwidth hierarchy (Gibbs parts) --------------------------------------------------

/// Conditional of the mean log-bandwidth given the log-bandwidths.
pub fn mean_log_bandwidth_conditional(ctx: &FitContext, state: &ChainState) -> (f64, f64) {
    let prior = &ctx.config().priors.mean_log_bandwidth;
    let r_inv = ctx.r_gamma_inv();
    let ell = state.wave_bandwidths.map(f64::ln);
    let ones = DVector::from_element(ctx.j_gamma(), 1.0);
    let quad_11 = (r_inv * &ones).dot(&ones);
    let quad_1l = (r_inv * &ell).dot(&ones);
    let prec = quad_11 / state.var_log_bandwidth + 1.0 / (prior.sd * prior.sd);
    let lin = quad_1l / state.var_log_bandwidth + prior.mean / (prior.sd * prior.sd);
    (lin / prec, 1.0 / prec)
}

pub fn sample_mean_log_bandwidth<R: Rng>(ctx: &FitContext, state: &mut ChainState, rng: &mut R) {
    let (mean, var) = mean_log_bandwidth_conditional(ctx, state);
    state.mean_log_bandwidth = sample_scalar_normal(rng, mean, var);
}

// --- inverse-gamma posteriors ---------------------------------------------------------

/// Posterior (shape, scale) of the genus-mean variance.
pub fn var_genus_mean_posterior(ctx: &FitContext, state: &ChainState) -> (f64, f64) {
    let prior = &ctx.config().priors.var_genus_mean;
    let mut ss = 0.0;
    for g in 0..ctx.n_genera() {
        let d = state.genus_means[g] - state.grand_mean;
        ss += d * d;
    }
    (prior.shape + ctx.n_genera() as f64 / 2.0, prior.scale + 0.5 * ss)
}

/// Posterior (shape, scale) of the site-intercept variance. Requires each
/// genus's inverse site correlation at the current decay.
pub fn var_site_intercept_posterior(
    ctx: &FitContext,
    state: &ChainState,
    cache: &mut CorrCache,
) -> Result<(f64, f64)> {
    let prior = &ctx.config().priors.var_site_intercept;
    let mut count = 0.0;
    let mut ss = 0.0;
    for g in 0..ctx.n_genera() {
        let a = &state.site_intercepts[g];
        if a.is_empty() {
            continue;
        }
        let (corr_inv, _) = cache.get(
            CacheTag::Genus(g),
            ctx.genus_dist(g),
            state.intercept_decay,
            "site-intercept correlation",
        )?;
        count += a.len() as f64;
        ss += (corr_inv * a).dot(a);
    }
    Ok((prior.shape + count / 2.0, prior.scale + 0.5 * ss))
}

/// Posterior (shape, scale) of the coefficient variance.
pub fn var_coeff_posterior(ctx: &FitContext, state: &ChainState) -> (f64, f64) {
    let prior = &ctx.config().priors.var_coeff;
    let n = (ctx.n_covariates() * ctx.j_beta()) as f64;
    let ss: f64 = state.coeffs.iter().map(|v| v * v).sum();
    (prior.shape + n / 2.0, prior.scale + 0.5 * ss)
}

/// Posterior (shape, scale) of the wavelength-knot variance (the global
/// knots in global mode; the hyper-mean knots in per-genus mode).
pub fn var_wave_posterior(ctx: &FitContext, state: &ChainState) -> (f64, f64) {
    let prior = &ctx.config().priors.var_wave;
    let ss: f64 = state.wave_knots.iter().map(|v| v * v).sum();
    (prior.shape + ctx.j_gamma() as f64 / 2.0, prior.scale + 0.5 * ss)
}

/// Posterior (shape, scale) of the per-genus knot variance around the
/// hyper-mean knots.
pub fn var_wave_genus_posterior(ctx: &FitContext, state: &ChainState) -> (f64, f64) {
    let prior = &ctx.config().priors.var_wave_genus;
    let knots = state
        .wave_knots_genus
        .as_ref()
        .expect("per-genus mode carries genus knots");
    let mut ss = 0.0;
    for g in 0..ctx.n_genera() {
        for j in 0..ctx.j_gamma() {
            let d = knots[(g, j)] - state.wave_knots[j];
            ss += d * d;
        }
    }
    let n = (ctx.n_genera() * ctx.j_gamma()) as f64;
    (prior.shape + n / 2.0, prior.scale + 0.5 * ss)
}

/// Posterior (shape, scale) of the loading variance over free entries.
pub fn var_loading_posterior(ctx: &FitContext, state: &ChainState) -> (f64, f64) {
    let prior = &ctx.config().priors.var_loading;
    let mut ss = 0.0;
    for col in 0..ctx.rank() {
        for row in loading_free_rows(ctx, col) {
            let v = state.loadings[(row, col)];
            ss += v * v;
        }
    }
    (prior.shape + loading_free_count(ctx) as f64 / 2.0, prior.scale + 0.5 * ss)
}

/// Posterior (shape, scale) of the log-bandwidth variance.
pub fn var_log_bandwidth_posterior(ctx: &FitContext, state: &ChainState) -> (f64, f64) {
    let prior = &ctx.config().priors.var_log_bandwidth;
    let ell = state.wave_bandwidths.map(f64::ln);
    let centered = ell.add_scalar(-state.mean_log_bandwidth);
    let ss = (ctx.r_gamma_inv() * &centered).dot(&centered);
    (prior.shape + ctx.j_gamma() as f64 / 2.0, prior.scale + 0.5 * ss)
}

/// Posterior (shape, scale) of the conv-field variance.
pub fn var_conv_field_posterior(ctx: &FitContext, state: &ChainState) -> (f64, f64) {
    let prior = &ctx.config().priors.var_conv_field;
    let rt_inv = ctx.conv_corr_inv().expect("conv variant");
    let z = state.conv_field.as_ref().expect("conv variant");
    let mut ss = 0.0;
    for j in 0..z.ncols() {
        let col = z.column(j);
        ss += (rt_inv * col).dot(&col);
    }
    let n = (z.nrows() * z.ncols()) as f64;
    (prior.shape + n / 2.0, prior.scale + 0.5 * ss)
}

/// Draw every variance in one pass; blocks not active under the current
/// modes are skipped.
pub fn sample_variances<R: Rng>(
    ctx: &FitContext,
    state: &mut ChainState,
    cache: &mut CorrCache,
    rng: &mut R,
) -> Result<()> {
    let (a, b) = var_genus_mean_posterior(ctx, state);
    state.var_genus_mean = draw_inv_gamma(rng, a, b)?;
    if matches!(ctx.config().intercept_mode, InterceptMode::GenusSpatial) {
        let (a, b) = var_site_intercept_posterior(ctx, state, cache)?;
        state.var_site_intercept = draw_inv_gamma(rng, a, b)?;
    }
    let (a, b) = var_coeff_posterior(ctx, state);
    state.var_coeff = draw_inv_gamma(rng, a, b)?;
    match ctx.config().gamma_mode {
        GammaMode::None => {}
        GammaMode::Global => {
            let (a, b) = var_wave_posterior(ctx, state);
            state.var_wave = draw_inv_gamma(rng, a, b)?;
        }
        GammaMode::PerGenus => {
            let (a, b) = var_wave_posterior(ctx, state);
            state.var_wave = draw_inv_gamma(rng, a, b)?;
            let (a, b) = var_wave_genus_posterior(ctx, state);
            state.var_wave_genus = draw_inv_gamma(rng, a, b)?;
        }
    }
    if ctx.has_factors() {
        let (a, b) = var_loading_posterior(ctx, state);
        state.var_loading = draw_inv_gamma(rng, a, b)?;
    }
    if matches!(ctx.config().eta_variant, EtaVariant::SpatialConvolution) {
        let (a, b) = var_conv_field_posterior(ctx, state);
        state.var_conv_field = draw_inv_gamma(rng, a, b)?;
    }
    if !matches!(ctx.config().gamma_mode, GammaMode::None) {
        let (a, b) = var_log_bandwidth_posterior(ctx, state);
        state.var_log_bandwidth = draw_inv_gamma(rng, a, b)?;
        sample_mean_log_bandwidth(ctx, state, rng);
    }
    Ok(())
}
