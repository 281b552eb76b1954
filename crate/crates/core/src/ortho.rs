//! Post-fit confounding correction and variance accounting.
//!
//! The regression surface and the random effects share column space: the
//! genus offsets and the space-wavelength surface vary over sites just as the
//! covariates do, and the wavelength effect lives on the same grid as the
//! coefficient curves. Left alone, that overlap lets the random effects
//! absorb covariate signal. The correction projects each random-effect
//! surface onto the span of the record-expanded covariates crossed with the
//! coefficient kernel, folds the projected part into the coefficients, and
//! keeps the orthogonal remainder as the effect. The fitted surface is
//! untouched — the decomposition only reallocates it.
//!
//! The projector factors over the two sides, so it is applied as two small
//! multiplications (`P_K S P_X`) and the full Kronecker matrix is never
//! formed. On top of the corrected draws sit two summaries: the share of
//! variance each mean-zero term explains (overall and per wavelength), and
//! per-covariate importance as the mean absolute coefficient curve.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::DesignIndex;
use crate::error::{Error, Result};
use crate::model::{BasisSet, FitContext};
use crate::state::ChainState;
use crate::stats::quantile;

// --- projections ----------------------------------------------------------------

/// The two sides of the factored projector.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    /// Projection onto the column space of the record-expanded covariates.
    pub p_x: DMatrix<f64>,
    /// Projection onto the column space of the coefficient kernel design.
    pub p_k: DMatrix<f64>,
}

impl ProjectionPair {
    /// Apply the full projector to a record-expanded surface
    /// (`n_wavelengths x n_records`) through its factors.
    pub fn apply(&self, surface: &DMatrix<f64>) -> DMatrix<f64> {
        &self.p_k * surface * &self.p_x
    }

    /// The orthogonal remainder of a surface.
    pub fn remainder(&self, surface: &DMatrix<f64>) -> DMatrix<f64> {
        surface - self.apply(surface)
    }
}

/// Orthonormalize the columns of `a` (modified Gram-Schmidt with a second
/// pass) and return the projector onto its column space. Columns that are
/// linear combinations of earlier ones are reported by index.
fn projector(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let (n, p) = a.shape();
    if p == 0 || n == 0 {
        return Err(Error::Data(format!("{context}: empty matrix")));
    }
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut dependent = Vec::new();
    for j in 0..p {
        let mut v = a.column(j).into_owned();
        let scale = v.norm();
        for _ in 0..2 {
            for u in &q {
                let c = u.dot(&v);
                v.axpy(-c, u, 1.0);
            }
        }
        if v.norm() <= 1e-10 * scale.max(1e-300) {
            dependent.push(j);
        } else {
            v /= v.norm();
            q.push(v);
        }
    }
    if !dependent.is_empty() {
        return Err(Error::Data(format!(
            "{context}: columns {dependent:?} are linear combinations of earlier columns"
        )));
    }
    let mut proj = DMatrix::zeros(n, n);
    for u in &q {
        proj.ger(1.0, u, u, 1.0);
    }
    Ok(proj)
}

/// Build both projector factors, checking each design for full column rank.
pub fn build_projections(x_rec: &DMatrix<f64>, k_beta: &DMatrix<f64>) -> Result<ProjectionPair> {
    Ok(ProjectionPair {
        p_x: projector(x_rec, "record-expanded covariates")?,
        p_k: projector(k_beta, "coefficient kernel design")?,
    })
}

/// How the projection treats the global wavelength effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaTreatment {
    /// A random effect: its surface joins the projection and is corrected.
    Random,
    /// A fixed effect: the covariate design gains a column of ones and the
    /// wavelength effect stays out of the correction.
    Fixed,
}

/// The covariate design that defines the projection: the record-expanded
/// covariates, with a leading column of ones when the wavelength effect is
/// treated as fixed.
pub fn projection_design(design: &DesignIndex, gamma: GammaTreatment) -> DMatrix<f64> {
    match gamma {
        GammaTreatment::Random => design.x_rec.clone(),
        GammaTreatment::Fixed => {
            let (n, p) = design.x_rec.shape();
            let mut x = DMatrix::from_element(n, p + 1, 1.0);
            x.view_mut((0, 1), (n, p)).copy_from(&design.x_rec);
            x
        }
    }
}

// --- unconfounded coefficients ------------------------------------------------------

/// The coefficient update that absorbs the projected part of `eta_star`
/// (`n_wavelengths x n_records`):
/// `B* = B + (X'X)^-1 X' eta_star' K (K'K)^-1`.
pub fn unconfound_coeffs(
    x: &DMatrix<f64>,
    k_beta: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta_star: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (n_wave, n_rec) = eta_star.shape();
    if x.nrows() != n_rec {
        return Err(Error::dim("covariate rows", n_rec, x.nrows()));
    }
    if k_beta.nrows() != n_wave {
        return Err(Error::dim("kernel rows", n_wave, k_beta.nrows()));
    }
    if b.shape() != (x.ncols(), k_beta.ncols()) {
        return Err(Error::dim(
            "coefficient matrix",
            format!("{}x{}", x.ncols(), k_beta.ncols()),
            format!("{}x{}", b.nrows(), b.ncols()),
        ));
    }
    let chol_x = gram_cholesky(x, "covariate design")?;
    let chol_k = gram_cholesky(k_beta, "coefficient kernel design")?;
    // (X'X)^-1 X' eta_star' K, then a right-solve by K'K.
    let core = x.transpose() * eta_star.transpose() * k_beta;
    let left = chol_x.solve(&core);
    let adjust = chol_k.solve(&left.transpose()).transpose();
    Ok(b + adjust)
}

fn gram_cholesky(a: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.transpose() * a).ok_or_else(|| {
        Error::Numeric(format!("{context}: normal equations are not positive definite"))
    })
}

/// One draw's corrected pieces.
#[derive(Debug, Clone)]
pub struct OrthoDraw {
    /// Unconfounded coefficients; one extra leading row when the wavelength
    /// effect is treated as fixed.
    pub b_star: DMatrix<f64>,
    /// Wavelength-effect surface: corrected when random, untouched when fixed.
    pub gamma_perp: DMatrix<f64>,
    /// Corrected genus-offset surface.
    pub intercept_perp: DMatrix<f64>,
    /// Corrected space-wavelength surface.
    pub eta_perp: DMatrix<f64>,
}

/// Per-record surfaces of the three mean-zero random effects
/// (`n_wavelengths x n_records` each): the wavelength effect, the genus
/// offset relative to the grand mean, and the space-wavelength surface.
fn effect_surfaces(
    ctx: &FitContext,
    bases: &BasisSet,
    state: &ChainState,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n_wave = ctx.n_wave();
    let n_rec = ctx.n_records();
    let gamma = ctx.gamma_curves(bases, state);
    let per_genus = gamma.ncols() > 1;
    let eta = ctx.eta_sites(bases, state);
    let offsets = ctx.intercept_offsets(state);

    let mut gamma_s = DMatrix::zeros(n_wave, n_rec);
    let mut eta_s = DMatrix::zeros(n_wave, n_rec);
    for (k, r) in ctx.dataset().records().iter().enumerate() {
        let g_col = if per_genus { r.genus } else { 0 };
        gamma_s.set_column(k, &gamma.column(g_col));
        eta_s.set_column(k, &eta.column(r.site));
    }
    let icpt_s =
        DMatrix::from_fn(n_wave, n_rec, |_, k| offsets[k] - state.grand_mean);
    (gamma_s, icpt_s, eta_s)
}

/// The fixed machinery of the correction: the projection design and its
/// gram factor are shared across draws, while the kernel side is rebuilt per
/// draw because the coefficient bandwidth is sampled.
struct OrthoBasis<'a> {
    ctx: &'a FitContext,
    gamma: GammaTreatment,
    x: DMatrix<f64>,
    p_x: DMatrix<f64>,
    chol_x: Cholesky<f64, Dyn>,
}

impl<'a> OrthoBasis<'a> {
    fn new(ctx: &'a FitContext, gamma: GammaTreatment) -> Result<Self> {
        let x = projection_design(ctx.design(), gamma);
        let p_x = projector(&x, "record-expanded covariates")?;
        let chol_x = gram_cholesky(&x, "covariate design")?;
        Ok(Self {
            ctx,
            gamma,
            x,
            p_x,
            chol_x,
        })
    }

    /// The draw's coefficients in the projection design's row count.
    fn coeffs_of(&self, state: &ChainState) -> DMatrix<f64> {
        match self.gamma {
            GammaTreatment::Random => state.coeffs.clone(),
            GammaTreatment::Fixed => {
                let (p, j) = state.coeffs.shape();
                let mut b = DMatrix::zeros(p + 1, j);
                b.view_mut((1, 0), (p, j)).copy_from(&state.coeffs);
                b
            }
        }
    }

    fn draw(&self, state: &ChainState) -> Result<OrthoDraw> {
        let ctx = self.ctx;
        ctx.check_state(state)?;
        let bases = ctx.bases(state)?;
        let p_k = projector(&bases.k_beta, "coefficient kernel design")?;
        let chol_k = gram_cholesky(&bases.k_beta, "coefficient kernel design")?;
        let (gamma_s, icpt_s, eta_s) = effect_surfaces(ctx, &bases, state);

        let eta_star = match self.gamma {
            GammaTreatment::Random => &gamma_s + &icpt_s + &eta_s,
            GammaTreatment::Fixed => &icpt_s + &eta_s,
        };
        let core = self.x.transpose() * eta_star.transpose() * &bases.k_beta;
        let left = self.chol_x.solve(&core);
        let adjust = chol_k.solve(&left.transpose()).transpose();
        let b_star = self.coeffs_of(state) + adjust;

        let remainder = |s: &DMatrix<f64>| s - &p_k * s * &self.p_x;
        let gamma_perp = match self.gamma {
            GammaTreatment::Random => remainder(&gamma_s),
            GammaTreatment::Fixed => gamma_s,
        };
        Ok(OrthoDraw {
            b_star,
            gamma_perp,
            intercept_perp: remainder(&icpt_s),
            eta_perp: remainder(&eta_s),
        })
    }
}

/// Correct a single draw.
pub fn unconfound_draw(
    ctx: &FitContext,
    state: &ChainState,
    gamma: GammaTreatment,
) -> Result<OrthoDraw> {
    OrthoBasis::new(ctx, gamma)?.draw(state)
}

/// Unconfounded coefficient draws for a whole chain. Only the coefficients
/// are kept; the corrected surfaces are summarized by
/// [`variance_decomposition`] instead of stored per draw.
pub fn unconfound(
    ctx: &FitContext,
    states: &[ChainState],
    gamma: GammaTreatment,
) -> Result<Vec<DMatrix<f64>>> {
    if states.is_empty() {
        return Err(Error::Data("correction needs at least one draw".into()));
    }
    let basis = OrthoBasis::new(ctx, gamma)?;
    states
        .iter()
        .map(|s| Ok(basis.draw(s)?.b_star))
        .collect()
}

// --- variance decomposition -----------------------------------------------------

/// Display names of the five mean-zero terms, in storage order.
pub const TERM_LABELS: [&str; 5] = [
    "noise",
    "regression",
    "genus_offset",
    "wavelength",
    "space_wavelength",
];

/// Shares of variance explained by each mean-zero term.
#[derive(Debug, Clone)]
pub struct VarianceDecomposition {
    /// Whether the terms were corrected before measuring.
    pub orthogonalized: bool,
    /// Per-draw overall shares (`n_draws x 5`, columns in [`TERM_LABELS`]
    /// order); each row sums to one.
    pub proportions: DMatrix<f64>,
    /// Per-draw between-spectrum shares by wavelength
    /// (each `n_wavelengths x 5`).
    pub curves: Vec<DMatrix<f64>>,
}

impl VarianceDecomposition {
    /// Across-draw average of the overall shares.
    pub fn mean_proportions(&self) -> [f64; 5] {
        let m = self.proportions.nrows() as f64;
        let mut out = [0.0; 5];
        for (j, v) in out.iter_mut().enumerate() {
            *v = self.proportions.column(j).sum() / m;
        }
        out
    }

    /// Pointwise `q`-quantile of the between-spectrum share curves
    /// (`n_wavelengths x 5`).
    pub fn curve_quantiles(&self, q: f64) -> Result<DMatrix<f64>> {
        let first = self
            .curves
            .first()
            .ok_or_else(|| Error::Data("decomposition holds no draws".into()))?;
        let (n_wave, k) = first.shape();
        let mut out = DMatrix::zeros(n_wave, k);
        for t in 0..n_wave {
            for j in 0..k {
                let vals: Vec<f64> = self.curves.iter().map(|c| c[(t, j)]).collect();
                out[(t, j)] = quantile(&vals, q)?;
            }
        }
        Ok(out)
    }
}

/// Population variance of every entry of a matrix.
fn pop_var_all(m: &DMatrix<f64>) -> f64 {
    let n = (m.nrows() * m.ncols()) as f64;
    let mean = m.sum() / n;
    m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Population variance of one row (across records at a fixed wavelength).
fn pop_var_row(m: &DMatrix<f64>, t: usize) -> f64 {
    let n = m.ncols() as f64;
    let row = m.row(t);
    let mean = row.sum() / n;
    row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn normalize(mut vals: [f64; 5]) -> [f64; 5] {
    let total: f64 = vals.iter().sum();
    if total > 0.0 {
        for v in &mut vals {
            *v /= total;
        }
    }
    vals
}

/// Measure each mean-zero term's share of the variance, overall and by
/// wavelength, for every draw. With `orthogonalized` the corrected terms are
/// measured (and the regression term uses the unconfounded coefficients);
/// otherwise the raw terms are. The residual term is identical either way.
pub fn variance_decomposition(
    ctx: &FitContext,
    states: &[ChainState],
    orthogonalized: bool,
    gamma: GammaTreatment,
) -> Result<VarianceDecomposition> {
    if states.is_empty() {
        return Err(Error::Data("decomposition needs at least one draw".into()));
    }
    let basis = if orthogonalized {
        Some(OrthoBasis::new(ctx, gamma)?)
    } else {
        None
    };
    let x_fixed = projection_design(ctx.design(), gamma);
    let n_wave = ctx.n_wave();
    let mut proportions = DMatrix::zeros(states.len(), 5);
    let mut curves = Vec::with_capacity(states.len());

    for (m, state) in states.iter().enumerate() {
        ctx.check_state(state)?;
        let bases = ctx.bases(state)?;
        let surface = ctx.mean_surface_with(&bases, state);
        let eps = ctx.dataset().responses() - &surface;

        let (regression, gamma_s, icpt_s, eta_s) = match &basis {
            Some(b) => {
                let draw = b.draw(state)?;
                let reg = &bases.k_beta * draw.b_star.transpose() * x_fixed.transpose();
                (reg, draw.gamma_perp, draw.intercept_perp, draw.eta_perp)
            }
            None => {
                let (gamma_s, icpt_s, eta_s) = effect_surfaces(ctx, &bases, state);
                (ctx.beta_term(&bases, state), gamma_s, icpt_s, eta_s)
            }
        };
        let terms = [&eps, &regression, &icpt_s, &gamma_s, &eta_s];

        let overall = normalize([
            pop_var_all(terms[0]),
            pop_var_all(terms[1]),
            pop_var_all(terms[2]),
            pop_var_all(terms[3]),
            pop_var_all(terms[4]),
        ]);
        for (j, v) in overall.iter().enumerate() {
            proportions[(m, j)] = *v;
        }

        let mut curve = DMatrix::zeros(n_wave, 5);
        for t in 0..n_wave {
            let by_term = normalize([
                pop_var_row(terms[0], t),
                pop_var_row(terms[1], t),
                pop_var_row(terms[2], t),
                pop_var_row(terms[3], t),
                pop_var_row(terms[4], t),
            ]);
            for (j, v) in by_term.iter().enumerate() {
                curve[(t, j)] = *v;
            }
        }
        curves.push(curve);
    }
    Ok(VarianceDecomposition {
        orthogonalized,
        proportions,
        curves,
    })
}

// --- covariate importance -------------------------------------------------------

/// Mean absolute value of each row of a curve matrix (`rows x n_points`).
pub fn importance_of_curves(curves: &DMatrix<f64>) -> DVector<f64> {
    let n = curves.ncols() as f64;
    DVector::from_fn(curves.nrows(), |j, _| {
        curves.row(j).iter().map(|v| v.abs()).sum::<f64>() / n
    })
}

/// Per-draw, per-covariate importance: the mean over the wavelength grid of
/// the absolute coefficient curve. Pass `coeffs` to measure unconfounded
/// draws instead of the raw ones; each entry must conform to the draw's
/// kernel design.
pub fn covariate_importance(
    ctx: &FitContext,
    states: &[ChainState],
    coeffs: Option<&[DMatrix<f64>]>,
) -> Result<DMatrix<f64>> {
    if states.is_empty() {
        return Err(Error::Data("importance needs at least one draw".into()));
    }
    if let Some(c) = coeffs {
        if c.len() != states.len() {
            return Err(Error::dim("coefficient draws", states.len(), c.len()));
        }
    }
    let n_rows = coeffs.map_or(ctx.n_covariates(), |c| c[0].nrows());
    let mut out = DMatrix::zeros(states.len(), n_rows);
    for (m, state) in states.iter().enumerate() {
        ctx.check_state(state)?;
        let bases = ctx.bases(state)?;
        let b = coeffs.map_or(&state.coeffs, |c| &c[m]);
        if b.ncols() != bases.k_beta.ncols() || b.nrows() != n_rows {
            return Err(Error::dim(
                "coefficient draw",
                format!("{}x{}", n_rows, bases.k_beta.ncols()),
                format!("{}x{}", b.nrows(), b.ncols()),
            ));
        }
        let curves = b * bases.k_beta.transpose();
        out.row_mut(m)
            .copy_from(&importance_of_curves(&curves).transpose());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    use crate::config::{BetaMode, EtaVariant, GammaMode, KnotSpec, ModelConfig};
    use crate::data::WavelengthGrid;
    use crate::synth::{draw_truth, simulate, SynthSpec};

    fn randn(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn assert_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64, what: &str) {
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let scale = b[(i, j)].abs().max(1.0);
                assert!(
                    (a[(i, j)] - b[(i, j)]).abs() <= tol * scale,
                    "{what}: entry ({i}, {j}) differs: {} vs {}",
                    a[(i, j)],
                    b[(i, j)]
                );
            }
        }
    }

    fn fixture(seed: u64, edit: impl FnOnce(&mut ModelConfig)) -> (FitContext, ChainState) {
        let mut cfg = ModelConfig {
            eta_variant: EtaVariant::Factor { r: 2 },
            beta_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 105.0 },
            gamma_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 131.25 },
            eta_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 105.0 },
            sigma_knots: KnotSpec { lo: 440.0, hi: 960.0, spacing: 260.0 },
            ..ModelConfig::default()
        };
        edit(&mut cfg);
        let spec = SynthSpec::new(6, 3, 24, WavelengthGrid::new(450.0, 950.0, 8).unwrap(), cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let out = simulate(&spec, &mut rng).unwrap();
        let state = draw_truth(&out.context, &mut rng).unwrap();
        (out.context, state)
    }

    // --- projections ------------------------------------------------------------

    #[test]
    fn projectors_are_idempotent_symmetric_and_fix_their_span() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = randn(&mut rng, 6, 2);
        let p = projector(&x, "x").unwrap();

        assert_close(&(&p * &p), &p, 1e-10, "idempotence");
        assert_close(&p.transpose(), &p, 1e-10, "symmetry");
        assert_close(&(&p * &x), &x, 1e-10, "fixes the span");

        // Hat-matrix oracle from the normal equations.
        let hat = &x * (x.transpose() * &x).try_inverse().unwrap() * x.transpose();
        assert_close(&p, &hat, 1e-10, "hat matrix");

        // A single column projects onto itself.
        let v = randn(&mut rng, 5, 1);
        let p1 = projector(&v, "v").unwrap();
        let outer = &v * v.transpose() / v.norm_squared();
        assert_close(&p1, &outer, 1e-12, "rank-1 projector");
    }

    #[test]
    fn rank_deficiency_names_the_dependent_column() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut x = randn(&mut rng, 8, 3);
        let sum = x.column(0) + x.column(1);
        x.set_column(2, &sum);
        let err = projector(&x, "test design").unwrap_err().to_string();
        assert!(
            err.contains("[2]"),
            "error should name the dependent column: {err}"
        );
    }

    #[test]
    fn factored_application_matches_the_materialized_kronecker() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = randn(&mut rng, 4, 2); // records
        let k = randn(&mut rng, 3, 2); // wavelengths
        let pair = build_projections(&x, &k).unwrap();
        let s = randn(&mut rng, 3, 4);

        // Column-stacked Kronecker projector, materialized the slow way.
        let (nr, nw) = (4, 3);
        let mut big = DMatrix::zeros(nr * nw, nr * nw);
        for i in 0..nr {
            for j in 0..nr {
                for r in 0..nw {
                    for c in 0..nw {
                        big[(i * nw + r, j * nw + c)] =
                            pair.p_x[(i, j)] * pair.p_k[(r, c)];
                    }
                }
            }
        }
        let vec_s = DVector::from_column_slice(s.as_slice());
        let direct = &big * vec_s;
        let fast = pair.apply(&s);
        let fast_vec = DVector::from_column_slice(fast.as_slice());
        assert_close(
            &DMatrix::from_column_slice(direct.len(), 1, direct.as_slice()),
            &DMatrix::from_column_slice(fast_vec.len(), 1, fast_vec.as_slice()),
            1e-10,
            "kronecker application",
        );

        // The remainder is annihilated by the projector.
        let rem = pair.remainder(&s);
        let zero = pair.apply(&rem);
        assert!(zero.amax() <= 1e-10, "P(I - P) should vanish");
    }

    // --- unconfounded coefficients ------------------------------------------------

    #[test]
    fn coefficient_update_matches_hand_arithmetic() {
        // Two records, two wavelengths, one covariate, one knot.
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let k = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
        let b = DMatrix::from_element(1, 1, 0.5);
        let eta = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        // X'X = 5, K'K = 10, X' eta' K = 11, so B* = 0.5 + 11/50.
        let b_star = unconfound_coeffs(&x, &k, &b, &eta).unwrap();
        assert!((b_star[(0, 0)] - 0.72).abs() < 1e-12, "got {}", b_star[(0, 0)]);
    }

    #[test]
    fn surfaces_inside_the_span_are_fully_absorbed() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x = randn(&mut rng, 9, 2);
        let k = randn(&mut rng, 5, 3);
        let b = randn(&mut rng, 2, 3);
        let c = randn(&mut rng, 3, 2);
        let inside = &k * &c * x.transpose();

        // The update recovers the generating coefficients exactly.
        let b_star = unconfound_coeffs(&x, &k, &b, &inside).unwrap();
        assert_close(&b_star, &(&b + c.transpose()), 1e-9, "absorbed coefficients");

        // And the remainder vanishes.
        let pair = build_projections(&x, &k).unwrap();
        assert!(
            pair.remainder(&inside).amax() <= 1e-9,
            "span member should leave no remainder"
        );
    }

    #[test]
    fn zero_random_effects_leave_the_coefficients_alone() {
        let (ctx, mut state) = fixture(13, |_| {});
        state.grand_mean = 0.4;
        state.genus_means.fill(0.4);
        for v in &mut state.site_intercepts {
            v.fill(0.0);
        }
        state.wave_knots.fill(0.0);
        state.loadings.fill(0.0);
        let draw = unconfound_draw(&ctx, &state, GammaTreatment::Random).unwrap();
        assert_close(&draw.b_star, &state.coeffs, 1e-12, "b_star");
        assert!(draw.gamma_perp.amax() <= 1e-12);
        assert!(draw.intercept_perp.amax() <= 1e-12);
        assert!(draw.eta_perp.amax() <= 1e-12);
    }

    #[test]
    fn the_fitted_surface_is_invariant_under_the_correction() {
        for gamma in [GammaTreatment::Random, GammaTreatment::Fixed] {
            let (ctx, state) = fixture(17, |_| {});
            let before = ctx.mean_surface(&state).unwrap();
            let draw = unconfound_draw(&ctx, &state, gamma).unwrap();
            let bases = ctx.bases(&state).unwrap();
            let x = projection_design(ctx.design(), gamma);
            let mut after = &bases.k_beta * draw.b_star.transpose() * x.transpose()
                + &draw.gamma_perp
                + &draw.intercept_perp
                + &draw.eta_perp;
            after.add_scalar_mut(state.grand_mean);
            assert_close(&after, &before, 1e-9, "fit invariance");
        }
    }

    // --- variance decomposition ---------------------------------------------------

    #[test]
    fn proportions_are_normalized_and_noise_only_states_score_one() {
        let (ctx, mut state) = fixture(19, |_| {});
        let states = vec![state.clone(), {
            let mut rng = ChaCha20Rng::seed_from_u64(23);
            draw_truth(&ctx, &mut rng).unwrap()
        }];
        for ortho in [false, true] {
            let dec =
                variance_decomposition(&ctx, &states, ortho, GammaTreatment::Random).unwrap();
            for m in 0..dec.proportions.nrows() {
                let row: f64 = dec.proportions.row(m).sum();
                assert!((row - 1.0).abs() <= 1e-10, "row {m} sums to {row}");
                assert!(dec.proportions.row(m).iter().all(|v| (0.0..=1.0).contains(v)));
                for t in 0..ctx.n_wave() {
                    let s: f64 = dec.curves[m].row(t).sum();
                    assert!((s - 1.0).abs() <= 1e-10, "curve row sums to {s}");
                }
            }
        }

        // A state with every random effect switched off leaves only noise.
        state.grand_mean = 0.0;
        state.genus_means.fill(0.0);
        for v in &mut state.site_intercepts {
            v.fill(0.0);
        }
        state.coeffs.fill(0.0);
        state.wave_knots.fill(0.0);
        state.loadings.fill(0.0);
        let dec = variance_decomposition(&ctx, &[state], false, GammaTreatment::Random).unwrap();
        assert!((dec.proportions[(0, 0)] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn dominant_surfaces_claim_the_largest_share() {
        // Generate data whose space-wavelength surface dwarfs the other
        // terms, then decompose draws concentrated near the generating state.
        let (ctx0, mut truth) = fixture(29, |_| {});
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        truth.loadings *= 10.0;
        truth.log_var_knots.fill(-6.0);
        let bases = ctx0.bases(&truth).unwrap();
        let mut responses = ctx0.mean_surface(&truth).unwrap();
        for k in 0..responses.ncols() {
            for t in 0..responses.nrows() {
                responses[(t, k)] +=
                    bases.sigma2[t].sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let ctx = ctx0.with_responses(responses).unwrap();
        let states: Vec<ChainState> = (0..20)
            .map(|_| {
                let mut s = truth.clone();
                s.loadings
                    .apply(|v| *v += 0.05 * rng.sample::<f64, _>(StandardNormal));
                s.coeffs
                    .apply(|v| *v += 0.02 * rng.sample::<f64, _>(StandardNormal));
                s.wave_knots
                    .apply(|v| *v += 0.02 * rng.sample::<f64, _>(StandardNormal));
                s
            })
            .collect();
        let dec = variance_decomposition(&ctx, &states, false, GammaTreatment::Random).unwrap();
        let eta_largest = (0..states.len())
            .filter(|&m| {
                let row = dec.proportions.row(m);
                (0..5).all(|j| j == 4 || row[4] >= row[j])
            })
            .count();
        assert!(
            eta_largest * 100 >= 95 * states.len(),
            "space-wavelength term led in only {eta_largest}/{} draws",
            states.len()
        );
    }

    #[test]
    fn decomposition_ignores_a_constant_shift_of_the_responses() {
        let (ctx, state) = fixture(37, |_| {});
        let states = [state];
        let base =
            variance_decomposition(&ctx, &states, false, GammaTreatment::Random).unwrap();
        let shifted_responses = ctx.dataset().responses().add_scalar(3.0);
        let ctx2 = ctx.with_responses(shifted_responses).unwrap();
        let shifted =
            variance_decomposition(&ctx2, &states, false, GammaTreatment::Random).unwrap();
        assert_close(&base.proportions, &shifted.proportions, 1e-9, "proportions");
        assert_close(&base.curves[0], &shifted.curves[0], 1e-9, "curves");
    }

    // --- covariate importance -----------------------------------------------------

    #[test]
    fn importance_follows_the_grid_sums() {
        // Constant curves measure their absolute level.
        let flat = DMatrix::from_element(2, 50, -0.7);
        let imp = importance_of_curves(&flat);
        assert!((imp[0] - 0.7).abs() < 1e-14);

        // A linear ramp over the grid measures the enumerated mean.
        let n = 101;
        let ramp = DMatrix::from_fn(1, n, |_, j| -1.0 + 2.0 * j as f64 / (n - 1) as f64);
        let want = ramp.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        assert!((importance_of_curves(&ramp)[0] - want).abs() < 1e-14);

        // Sign flips change nothing.
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let b = randn(&mut rng, 3, 60);
        assert_close(
            &DMatrix::from_column_slice(3, 1, importance_of_curves(&b).as_slice()),
            &DMatrix::from_column_slice(3, 1, importance_of_curves(&(-&b)).as_slice()),
            1e-14,
            "sign flip",
        );
    }

    #[test]
    fn scalar_mode_importance_is_the_absolute_coefficient() {
        let (ctx, state) = fixture(43, |cfg| {
            cfg.beta_mode = BetaMode::Scalar;
        });
        let imp = covariate_importance(&ctx, std::slice::from_ref(&state), None).unwrap();
        for j in 0..ctx.n_covariates() {
            assert!(
                (imp[(0, j)] - state.coeffs[(j, 0)].abs()).abs() <= 1e-12,
                "scalar-mode importance should be |B_j|"
            );
        }
    }

    #[test]
    fn unconfounded_importance_accepts_coefficient_overrides() {
        let (ctx, state) = fixture(47, |cfg| {
            cfg.gamma_mode = GammaMode::Global;
        });
        let states = vec![state.clone(), state];
        let b_star = unconfound(&ctx, &states, GammaTreatment::Random).unwrap();
        let imp = covariate_importance(&ctx, &states, Some(&b_star)).unwrap();
        assert_eq!(imp.shape(), (2, ctx.n_covariates()));
        assert!(imp.iter().all(|v| v.is_finite() && *v >= 0.0));

        // The fixed treatment grows a leading intercept row.
        let b_fixed = unconfound(&ctx, &states, GammaTreatment::Fixed).unwrap();
        assert_eq!(b_fixed[0].nrows(), ctx.n_covariates() + 1);
        let imp_fixed = covariate_importance(&ctx, &states, Some(&b_fixed)).unwrap();
        assert_eq!(imp_fixed.ncols(), ctx.n_covariates() + 1);
    }
}
