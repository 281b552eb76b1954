//! Spatial machinery: distances, exponential correlation, robust Cholesky,
//! Gaussian-process conditionals, and the latent factor field covariance.
//!
//! All spatial correlation uses the exponential family `exp(-phi * d)` with a
//! decay rate `phi > 0` and distances in km (great-circle for lon/lat data,
//! Euclidean for planar data). Factorizations use a jitter ladder: a failed
//! Cholesky retries with diagonal inflation starting at `1e-10 * trace/n`,
//! escalating tenfold up to `1e-6 * trace/n` before giving up with
//! diagnostics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::CoordUnits;
use crate::error::{Error, Result};

/// Mean Earth radius in km, for great-circle distances.
const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Distance between two points in km under the given coordinate units.
pub fn distance(units: CoordUnits, a: [f64; 2], b: [f64; 2]) -> f64 {
    match units {
        CoordUnits::PlanarKm => {
            let dx = a[0] - b[0];
            let dy = a[1] - b[1];
            (dx * dx + dy * dy).sqrt()
        }
        CoordUnits::LonLat => {
            let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
            let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
            let dlat = lat2 - lat1;
            let dlon = lon2 - lon1;
            let h = (dlat / 2.0).sin().powi(2)
                + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
            2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
        }
    }
}

/// Symmetric pairwise distance matrix in km. Duplicate locations are legal
/// (their correlation is one) but are logged as a warning because they make
/// correlation matrices singular up to jitter.
pub fn distance_matrix(units: CoordUnits, coords: &[[f64; 2]]) -> DMatrix<f64> {
    let n = coords.len();
    let mut d = DMatrix::zeros(n, n);
    let mut duplicates = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = distance(units, coords[i], coords[j]);
            if dist == 0.0 {
                duplicates += 1;
            }
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    if duplicates > 0 {
        log::warn!(
            "{duplicates} site pair(s) share identical coordinates; their spatial \
             correlation is exactly 1 and factorizations will rely on jitter"
        );
    }
    d
}

/// Exponential correlation matrix `exp(-decay * d)` from a distance matrix.
pub fn exp_corr_matrix(dist: &DMatrix<f64>, decay: f64) -> Result<DMatrix<f64>> {
    if !(decay.is_finite() && decay > 0.0) {
        return Err(Error::Numeric(format!(
            "correlation decay must be positive and finite, got {decay}"
        )));
    }
    Ok(dist.map(|d| (-decay * d).exp()))
}

/// Cholesky factorization with diagonal jitter escalation.
///
/// Returns the factor of `m + jitter * I` for the smallest jitter in
/// `{0, 1e-10, 1e-9, ..., 1e-6} * (trace/n)` that succeeds.
pub fn jittered_cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::dim(
            format!("cholesky of {context}"),
            format!("square nonempty, {n} rows"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let trace: f64 = m.diagonal().sum();
    let mean_diag = trace / n as f64;
    if let Some(f) = Cholesky::new(m.clone()) {
        return Ok(f);
    }
    let mut rel = 1e-10;
    while rel <= 1e-6 {
        let jitter = rel * mean_diag;
        let mut jittered = m.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        if let Some(f) = Cholesky::new(jittered) {
            return Ok(f);
        }
        rel *= 10.0;
    }
    let min_diag = m.diagonal().iter().cloned().fold(f64::INFINITY, f64::min);
    Err(Error::Factorization {
        context: context.to_string(),
        n,
        trace,
        min_diag,
        max_jitter: 1e-6 * mean_diag,
    })
}

/// Draw `mean + L z` with `z` standard normal, where `L` is a lower Cholesky
/// factor of the covariance. Entries of `z` are consumed in index order, so
/// a fixed RNG stream yields a fixed draw.
pub fn chol_sample<R: Rng>(rng: &mut R, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> DVector<f64> {
    let n = mean.len();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol.l() * z
}

/// Moments of a Gaussian given its precision matrix `q` and linear term `b`
/// (the density `exp(-x' q x / 2 + b' x)`): mean `q^{-1} b`, covariance
/// `q^{-1}`. The covariance is materialized, so reserve this for small blocks
/// and oracle checks; sampling paths should use [`sample_from_precision`].
pub fn moments_from_precision(
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    context: &str,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let chol = jittered_cholesky(q, context)?;
    let mean = chol.solve(b);
    let cov = chol.inverse();
    Ok((mean, cov))
}

/// Draw from the Gaussian with precision `q` and linear term `b`.
///
/// Uses the standard device: with `q = L L'`, the draw is
/// `q^{-1} b + L^{-T} z`.
pub fn sample_from_precision<R: Rng>(
    rng: &mut R,
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    context: &str,
) -> Result<DVector<f64>> {
    let chol = jittered_cholesky(q, context)?;
    let mean = chol.solve(b);
    let z = DVector::from_fn(q.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    // Solve L' u = z by back substitution.
    let u = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numeric(format!("triangular solve failed in {context}")))?;
    Ok(mean + u)
}

/// Reusable kriging geometry: conditionals of a unit-variance exponential GP
/// at query points given values at observed points.
#[derive(Debug, Clone)]
pub struct GpConditioner {
    /// `R_qo R_oo^{-1}` (query x observed).
    weights: DMatrix<f64>,
    /// `R_qq - R_qo R_oo^{-1} R_oq` (query x query), unit-scale.
    residual_corr: DMatrix<f64>,
}

impl GpConditioner {
    /// Precompute conditioning weights for fixed geometry and decay.
    pub fn new(
        units: CoordUnits,
        observed: &[[f64; 2]],
        query: &[[f64; 2]],
        decay: f64,
    ) -> Result<Self> {
        if observed.is_empty() {
            return Err(Error::Data("gp conditioning needs at least one observed point".into()));
        }
        let d_oo = distance_matrix(units, observed);
        let r_oo = exp_corr_matrix(&d_oo, decay)?;
        let chol = jittered_cholesky(&r_oo, "gp observed correlation")?;
        let nq = query.len();
        let no = observed.len();
        let mut r_qo = DMatrix::zeros(nq, no);
        for (qi, q) in query.iter().enumerate() {
            for (oi, o) in observed.iter().enumerate() {
                r_qo[(qi, oi)] = (-decay * distance(units, *q, *o)).exp();
            }
        }
        let mut d_qq = DMatrix::zeros(nq, nq);
        for i in 0..nq {
            for j in 0..nq {
                d_qq[(i, j)] = distance(units, query[i], query[j]);
            }
        }
        let r_qq = exp_corr_matrix(&d_qq, decay)?;
        // weights = R_qo R_oo^{-1}  (solve on the transpose).
        let weights = chol.solve(&r_qo.transpose()).transpose();
        let residual_corr = &r_qq - &weights * r_qo.transpose();
        Ok(GpConditioner {
            weights,
            residual_corr,
        })
    }

    /// Conditional mean at the query points given observed values.
    pub fn mean(&self, observed_values: &DVector<f64>) -> Result<DVector<f64>> {
        if observed_values.len() != self.weights.ncols() {
            return Err(Error::dim(
                "gp observed values",
                self.weights.ncols(),
                observed_values.len(),
            ));
        }
        Ok(&self.weights * observed_values)
    }

    /// Conditional covariance at the query points for process scale `sigma2`.
    pub fn cov(&self, sigma2: f64) -> DMatrix<f64> {
        // Clamp tiny negative diagonal round-off so callers can take sqrt.
        let mut c = self.residual_corr.map(|v| v * sigma2);
        for i in 0..c.nrows() {
            if c[(i, i)] < 0.0 {
                c[(i, i)] = 0.0;
            }
        }
        c
    }
}

/// One-shot Gaussian-process conditional: mean and covariance at `query`
/// given `values` observed at `observed`, for an exponential GP with decay
/// `decay` and scale `sigma2`.
pub fn gp_conditional(
    units: CoordUnits,
    observed: &[[f64; 2]],
    values: &DVector<f64>,
    query: &[[f64; 2]],
    decay: f64,
    sigma2: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(sigma2.is_finite() && sigma2 >= 0.0) {
        return Err(Error::Numeric(format!(
            "gp scale must be nonnegative, got {sigma2}"
        )));
    }
    let cond = GpConditioner::new(units, observed, query, decay)?;
    Ok((cond.mean(values)?, cond.cov(sigma2)))
}

/// The wavelength side of the space-wavelength surface: loadings `A`
/// (`j_eta x r`) applied to `r` independent unit-variance spatial processes
/// with per-factor decays.
#[derive(Debug, Clone)]
pub struct LatentFactorField {
    loadings: DMatrix<f64>,
    decays: Vec<f64>,
}

impl LatentFactorField {
    /// Bundle loadings and decays, checking shapes and positivity.
    pub fn new(loadings: DMatrix<f64>, decays: Vec<f64>) -> Result<Self> {
        if loadings.ncols() != decays.len() {
            return Err(Error::dim("factor decays", loadings.ncols(), decays.len()));
        }
        if loadings.ncols() == 0 {
            return Err(Error::Config("factor field needs at least one factor".into()));
        }
        if decays.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Numeric("factor decays must be positive".into()));
        }
        Ok(LatentFactorField { loadings, decays })
    }

    /// Loadings matrix (`j_eta x r`).
    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    /// Per-factor spatial decay rates.
    pub fn decays(&self) -> &[f64] {
        &self.decays
    }

    /// Number of factors.
    pub fn rank(&self) -> usize {
        self.decays.len()
    }

    /// Cross-covariance of the surface between `(t, s)` and `(t', s')`:
    /// `K(t)' A diag(exp(-phi_j d(s,s'))) A' K(t')`, where `k_t` and `k_t2`
    /// are the kernel basis vectors at the two wavelengths and `dist` is the
    /// site distance in km.
    pub fn cov(&self, k_t: &DVector<f64>, k_t2: &DVector<f64>, dist: f64) -> Result<f64> {
        let j = self.loadings.nrows();
        if k_t.len() != j || k_t2.len() != j {
            return Err(Error::dim(
                "kernel basis vectors",
                j,
                format!("{} and {}", k_t.len(), k_t2.len()),
            ));
        }
        if !(dist.is_finite() && dist >= 0.0) {
            return Err(Error::Numeric(format!("site distance must be >= 0, got {dist}")));
        }
        let u = self.loadings.transpose() * k_t;
        let v = self.loadings.transpose() * k_t2;
        let mut acc = 0.0;
        for f in 0..self.rank() {
            acc += u[f] * v[f] * (-self.decays[f] * dist).exp();
        }
        Ok(acc)
    }
}

/// Default decay ladder for fixed per-factor decays: `r` values log-spaced on
/// `[3/d_max, 3/d_min]`, sorted increasing, where `d_min`/`d_max` are the
/// smallest nonzero and largest pairwise site distances. With `r = 1` the
/// geometric midpoint of the interval is used.
pub fn default_decay_ladder(dist: &DMatrix<f64>, r: usize) -> Result<Vec<f64>> {
    if r == 0 {
        return Err(Error::Config("decay ladder needs r >= 1".into()));
    }
    let n = dist.nrows();
    let mut d_min = f64::INFINITY;
    let mut d_max: f64 = 0.0;
    for i in 0..n {
        for jj in (i + 1)..n {
            let d = dist[(i, jj)];
            if d > 0.0 {
                d_min = d_min.min(d);
            }
            d_max = d_max.max(d);
        }
    }
    if !d_min.is_finite() || d_max <= 0.0 {
        return Err(Error::Data(
            "decay ladder needs at least two distinct site locations".into(),
        ));
    }
    let lo = (3.0 / d_max).ln();
    let hi = (3.0 / d_min).ln();
    let ladder: Vec<f64> = if r == 1 {
        vec![(0.5 * (lo + hi)).exp()]
    } else {
        (0..r)
            .map(|i| (lo + (hi - lo) * i as f64 / (r - 1) as f64).exp())
            .collect()
    };
    Ok(ladder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn planar_and_great_circle_distances() {
        let a = [0.0, 0.0];
        let b = [3.0, 4.0];
        assert_abs_diff_eq!(distance(CoordUnits::PlanarKm, a, b), 5.0, epsilon = 1e-12);
        // One degree of latitude is ~111.19 km on the mean sphere.
        let d = distance(CoordUnits::LonLat, [0.0, 0.0], [0.0, 1.0]);
        assert_abs_diff_eq!(d, EARTH_RADIUS_KM * 1f64.to_radians(), epsilon = 1e-9);
        // Longitude degrees shrink with latitude.
        let at_equator = distance(CoordUnits::LonLat, [0.0, 0.0], [1.0, 0.0]);
        let at_60 = distance(CoordUnits::LonLat, [0.0, 60.0], [1.0, 60.0]);
        assert!(at_60 < 0.52 * at_equator && at_60 > 0.48 * at_equator);
    }

    #[test]
    fn exp_corr_has_unit_diagonal_and_decays() {
        let coords = [[0.0, 0.0], [10.0, 0.0], [0.0, 20.0]];
        let d = distance_matrix(CoordUnits::PlanarKm, &coords);
        let r = exp_corr_matrix(&d, 0.1).unwrap();
        assert_abs_diff_eq!(r[(0, 0)], 1.0);
        assert_abs_diff_eq!(r[(0, 1)], (-1.0f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(r[(0, 2)], (-2.0f64).exp(), epsilon = 1e-14);
        assert!(exp_corr_matrix(&d, 0.0).is_err());
        assert!(exp_corr_matrix(&d, -0.5).is_err());
    }

    #[test]
    fn jitter_ladder_rescues_duplicate_sites() {
        // Exact duplicates make the correlation matrix singular; the ladder
        // must still produce a factor.
        let coords = [[0.0, 0.0], [0.0, 0.0], [5.0, 5.0]];
        let d = distance_matrix(CoordUnits::PlanarKm, &coords);
        let r = exp_corr_matrix(&d, 0.2).unwrap();
        let f = jittered_cholesky(&r, "duplicate test").unwrap();
        assert_eq!(f.l().nrows(), 3);
    }

    #[test]
    fn factorization_failure_reports_diagnostics() {
        // Indefinite matrix that no jitter within the ladder can fix.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 5.0, 1.0]);
        let err = jittered_cholesky(&m, "indefinite").unwrap_err();
        match err {
            Error::Factorization { context, n, .. } => {
                assert_eq!(context, "indefinite");
                assert_eq!(n, 2);
            }
            other => panic!("expected factorization error, got {other}"),
        }
    }

    #[test]
    fn chol_sample_is_deterministic_and_matches_moments() {
        let coords = [[0.0, 0.0], [15.0, 0.0], [0.0, 30.0]];
        let d = distance_matrix(CoordUnits::PlanarKm, &coords);
        let r = exp_corr_matrix(&d, 0.07).unwrap();
        let chol = jittered_cholesky(&r, "test").unwrap();
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);

        let mut rng1 = ChaCha20Rng::seed_from_u64(7);
        let mut rng2 = ChaCha20Rng::seed_from_u64(7);
        let a = chol_sample(&mut rng1, &mean, &chol);
        let b = chol_sample(&mut rng2, &mean, &chol);
        assert_eq!(a, b);

        // Moment check over many draws.
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let n_draws = 20_000;
        let mut sum = DVector::zeros(3);
        let mut sum_sq = DMatrix::zeros(3, 3);
        for _ in 0..n_draws {
            let x = chol_sample(&mut rng, &mean, &chol);
            sum += &x;
            sum_sq += &x * x.transpose();
        }
        let emp_mean = &sum / n_draws as f64;
        let emp_cov = &sum_sq / n_draws as f64 - &emp_mean * emp_mean.transpose();
        for i in 0..3 {
            assert_abs_diff_eq!(emp_mean[i], mean[i], epsilon = 0.03);
            for j in 0..3 {
                assert_abs_diff_eq!(emp_cov[(i, j)], r[(i, j)], epsilon = 0.03);
            }
        }
    }

    #[test]
    fn sample_from_precision_matches_moments_from_precision() {
        let q = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![2.0, -1.0]);
        let (mean, cov) = moments_from_precision(&q, &b, "test").unwrap();
        // Hand inverse of [[4,1],[1,3]] is [[3,-1],[-1,4]]/11.
        assert_abs_diff_eq!(cov[(0, 0)], 3.0 / 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(0, 1)], -1.0 / 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mean[0], (3.0 * b[0] - 1.0 * b[1]) / 11.0, epsilon = 1e-12);

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n_draws = 40_000;
        let mut sum = DVector::zeros(2);
        let mut sum_sq = DMatrix::zeros(2, 2);
        for _ in 0..n_draws {
            let x = sample_from_precision(&mut rng, &q, &b, "test").unwrap();
            sum += &x;
            sum_sq += &x * x.transpose();
        }
        let emp_mean = &sum / n_draws as f64;
        let emp_cov = &sum_sq / n_draws as f64 - &emp_mean * emp_mean.transpose();
        for i in 0..2 {
            assert_abs_diff_eq!(emp_mean[i], mean[i], epsilon = 0.02);
            for j in 0..2 {
                assert_abs_diff_eq!(emp_cov[(i, j)], cov[(i, j)], epsilon = 0.02);
            }
        }
    }

    #[test]
    fn gp_conditional_interpolates_and_reverts_to_prior() {
        let observed = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let values = DVector::from_vec(vec![1.0, -1.0, 2.0]);
        let sigma2 = 1.7;
        // Query exactly at an observed point: conditional mean equals the
        // observed value, conditional variance collapses.
        let (m, c) = gp_conditional(
            CoordUnits::PlanarKm,
            &observed,
            &values,
            &[[10.0, 0.0]],
            0.08,
            sigma2,
        )
        .unwrap();
        assert_abs_diff_eq!(m[0], -1.0, epsilon = 1e-8);
        assert!(c[(0, 0)].abs() < 1e-8);
        // Query far from everything: prior mean 0 and full scale.
        let (m, c) = gp_conditional(
            CoordUnits::PlanarKm,
            &observed,
            &values,
            &[[4000.0, 4000.0]],
            0.08,
            sigma2,
        )
        .unwrap();
        assert!(m[0].abs() < 1e-10);
        assert_abs_diff_eq!(c[(0, 0)], sigma2, epsilon = 1e-10);
    }

    #[test]
    fn rank_one_factor_field_is_separable() {
        let loadings = DMatrix::from_column_slice(3, 1, &[0.5, 1.0, -0.3]);
        let field = LatentFactorField::new(loadings, vec![0.05]).unwrap();
        let k1 = DVector::from_vec(vec![1.0, 0.4, 0.1]);
        let k2 = DVector::from_vec(vec![0.2, 0.9, 0.5]);
        let c0 = field.cov(&k1, &k2, 0.0).unwrap();
        let cd = field.cov(&k1, &k2, 30.0).unwrap();
        assert_abs_diff_eq!(cd / c0, (-0.05f64 * 30.0).exp(), epsilon = 1e-12);
        // Same ratio for a different wavelength pair: separability.
        let k3 = DVector::from_vec(vec![0.8, 0.1, 0.6]);
        let c0b = field.cov(&k1, &k3, 0.0).unwrap();
        let cdb = field.cov(&k1, &k3, 30.0).unwrap();
        assert_abs_diff_eq!(cdb / c0b, cd / c0, epsilon = 1e-12);
    }

    #[test]
    fn two_factors_with_distinct_decays_are_nonseparable() {
        let loadings = DMatrix::from_row_slice(3, 2, &[1.0, 0.1, 0.2, 1.0, 0.5, -0.4]);
        let field = LatentFactorField::new(loadings, vec![0.02, 0.3]).unwrap();
        let k1 = DVector::from_vec(vec![1.0, 0.3, 0.05]);
        let k2 = DVector::from_vec(vec![0.05, 0.3, 1.0]);
        let ratio_a = field.cov(&k1, &k1, 25.0).unwrap() / field.cov(&k1, &k1, 0.0).unwrap();
        let ratio_b = field.cov(&k2, &k2, 25.0).unwrap() / field.cov(&k2, &k2, 0.0).unwrap();
        assert!(
            (ratio_a - ratio_b).abs() > 1e-6,
            "spatial decay profile should depend on wavelength: {ratio_a} vs {ratio_b}"
        );
    }

    #[test]
    fn decay_ladder_spans_the_distance_range() {
        let coords = [[0.0, 0.0], [10.0, 0.0], [0.0, 100.0]];
        let d = distance_matrix(CoordUnits::PlanarKm, &coords);
        let ladder = default_decay_ladder(&d, 3).unwrap();
        assert_eq!(ladder.len(), 3);
        let d_max = 100.49875621; // hypot(10, 100)
        assert_abs_diff_eq!(ladder[0], 3.0 / d_max, epsilon = 1e-6);
        assert_abs_diff_eq!(ladder[2], 3.0 / 10.0, epsilon = 1e-12);
        assert!(ladder[0] < ladder[1] && ladder[1] < ladder[2]);
        let single = default_decay_ladder(&d, 1).unwrap();
        assert_abs_diff_eq!(
            single[0],
            (3.0 / d_max * 3.0f64 / 10.0).sqrt(),
            epsilon = 1e-6
        );
    }
}
