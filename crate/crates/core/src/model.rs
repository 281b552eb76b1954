//! The fit context: a dataset bound to a configuration, with every reusable
//! precomputation, plus the mean surface and the model log-likelihood.
//!
//! The response surface for record `k` (genus `g`, site `s`) is
//!
//! ```text
//! Y_k(t) = genus_means[g] + site_intercepts[g](s)
//!        + x(s)' B k_beta(t) + wave_effect[g](t) + space_wave(s, t)
//!        + eps_k(t),          eps_k(t) ~ N(0, sigma2(t))
//! ```
//!
//! Likelihood evaluation walks cells in a fixed record-major order with
//! compensated summation, so results are reproducible bit-for-bit regardless
//! of call site.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{BetaMode, DecayMode, EtaVariant, GammaMode, InterceptMode, ModelConfig};
use crate::data::{build_design, DesignIndex, SpectraDataset};
use crate::error::{Error, Result};
use crate::kernels::{design_matrix, Bandwidths, VarianceBasis};
use crate::spatial::{default_decay_ladder, distance_matrix, exp_corr_matrix, jittered_cholesky};
use crate::state::ChainState;
use crate::stats::{gamma_median, KahanSum};

/// `ln(2 pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Basis matrices and the variance curve implied by one chain state.
#[derive(Debug, Clone)]
pub struct BasisSet {
    /// Coefficient basis (`n_wavelengths x j_beta`); a single flat column in
    /// scalar mode.
    pub k_beta: DMatrix<f64>,
    /// Wavelength-effect basis with per-knot bandwidths.
    pub k_gamma: DMatrix<f64>,
    /// Interaction basis (`n_wavelengths x j_eta`); zero columns for variants
    /// without wavelength knots.
    pub k_eta: DMatrix<f64>,
    /// Spatial kernel weights of the spatial-convolution variant
    /// (`n_sites x n_sites`, row = record site, column = knot site).
    pub conv_weights: Option<DMatrix<f64>>,
    /// Error variance at every grid point.
    pub sigma2: DVector<f64>,
    /// Reciprocal of `sigma2`.
    pub inv_sigma2: DVector<f64>,
}

/// A dataset bound to a configuration, with derived structure cached.
#[derive(Debug, Clone)]
pub struct FitContext {
    ds: SpectraDataset,
    design: DesignIndex,
    config: ModelConfig,
    beta_knots: Vec<f64>,
    gamma_knots: Vec<f64>,
    eta_knots: Vec<f64>,
    sigma_basis: VarianceBasis,
    /// Number of latent factors (0 for `none` / `spatial_convolution`).
    rank: usize,
    /// Rows of the loading matrix (columns of `k_eta`).
    j_eta: usize,
    wave_values: Vec<f64>,
    site_dist: DMatrix<f64>,
    /// Per-genus distance submatrices over that genus's observed sites.
    genus_dist: Vec<DMatrix<f64>>,
    /// Resolved fixed factor decays (absent when decays are sampled).
    fixed_factor_decays: Option<Vec<f64>>,
    /// Correlation of the log-bandwidths across wavelength knots.
    r_gamma: DMatrix<f64>,
    r_gamma_inv: DMatrix<f64>,
    r_gamma_logdet: f64,
    /// Precision of the per-site wavelength processes (spatial-convolution
    /// variant only), at unit scale.
    conv_corr_inv: Option<DMatrix<f64>>,
    /// Gram matrix of the standardized record-expanded covariates.
    xtx: DMatrix<f64>,
    /// `site_slot[g][s]`: position of site `s` in genus `g`'s observed-site
    /// list, when observed.
    site_slot: Vec<Vec<Option<usize>>>,
    /// `rec_slot[k]`: position of record `k`'s site in its genus's list.
    rec_slot: Vec<usize>,
}

impl FitContext {
    /// Bind `ds` to `config`, validating the combination and precomputing
    /// all reusable structure.
    pub fn new(ds: SpectraDataset, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let design = build_design(&ds)?;
        let wave_values = ds.grid().values();

        let beta_knots = match config.beta_mode {
            BetaMode::Functional => config.beta_knots.knots()?,
            // Scalar mode: one flat basis function; the knot location is inert.
            BetaMode::Scalar => vec![0.5 * (ds.grid().lo() + ds.grid().hi())],
        };
        let gamma_knots = config.gamma_knots.knots()?;
        let eta_knots = config.eta_knots.knots()?;
        let sigma_knots = config.sigma_knots.knots()?;
        let sigma_basis = VarianceBasis::new(&wave_values, &sigma_knots)?;

        let (rank, j_eta) = match config.eta_variant {
            EtaVariant::None | EtaVariant::SpatialConvolution => (0, 0),
            EtaVariant::SpatialOnly => (1, 1),
            EtaVariant::Factor { r } => (r, eta_knots.len()),
            EtaVariant::Independent | EtaVariant::Separable | EtaVariant::Lmc => {
                (eta_knots.len(), eta_knots.len())
            }
        };

        let site_dist = distance_matrix(ds.sites().units(), ds.sites().coords());
        let genus_dist = design
            .genus_sites
            .iter()
            .map(|sites| {
                DMatrix::from_fn(sites.len(), sites.len(), |a, b| {
                    site_dist[(sites[a], sites[b])]
                })
            })
            .collect();

        let fixed_factor_decays = if rank > 0 {
            match &config.factor_decays {
                DecayMode::FixedSingle { value } => Some(vec![*value; rank]),
                DecayMode::FixedSequence { values: Some(v) } => {
                    if v.len() != rank {
                        return Err(Error::dim("fixed_sequence decays", rank, v.len()));
                    }
                    Some(v.clone())
                }
                DecayMode::FixedSequence { values: None } => {
                    Some(default_decay_ladder(&site_dist, rank)?)
                }
                DecayMode::RandomSingle | DecayMode::RandomSequence => None,
            }
        } else {
            None
        };

        // Correlation of log-bandwidths over the wavelength-effect knots.
        let gamma_knot_dist = DMatrix::from_fn(gamma_knots.len(), gamma_knots.len(), |a, b| {
            (gamma_knots[a] - gamma_knots[b]).abs()
        });
        let r_gamma = exp_corr_matrix(&gamma_knot_dist, config.priors.log_bandwidth_corr_decay)?;
        let r_gamma_chol = jittered_cholesky(&r_gamma, "log-bandwidth correlation")?;
        let r_gamma_logdet = 2.0 * r_gamma_chol.l().diagonal().map(f64::ln).sum();
        let r_gamma_inv = r_gamma_chol.inverse();

        let conv_corr_inv = if matches!(config.eta_variant, EtaVariant::SpatialConvolution) {
            let wave_dist = DMatrix::from_fn(wave_values.len(), wave_values.len(), |a, b| {
                (wave_values[a] - wave_values[b]).abs()
            });
            let corr = exp_corr_matrix(&wave_dist, config.priors.conv_field_corr_decay)?;
            let chol = jittered_cholesky(&corr, "conv-field wavelength correlation")?;
            Some(chol.inverse())
        } else {
            None
        };

        let xtx = design.x_rec.transpose() * &design.x_rec;

        let n_s = ds.sites().len();
        let site_slot: Vec<Vec<Option<usize>>> = design
            .genus_sites
            .iter()
            .map(|sites| {
                let mut slots = vec![None; n_s];
                for (slot, &s) in sites.iter().enumerate() {
                    slots[s] = Some(slot);
                }
                slots
            })
            .collect();
        let rec_slot: Vec<usize> = ds
            .records()
            .iter()
            .map(|r| {
                site_slot[r.genus][r.site]
                    .expect("every record's site is in its genus's observed list")
            })
            .collect();

        Ok(FitContext {
            ds,
            design,
            config,
            beta_knots,
            gamma_knots,
            eta_knots,
            sigma_basis,
            rank,
            j_eta,
            wave_values,
            site_dist,
            genus_dist,
            fixed_factor_decays,
            r_gamma,
            r_gamma_inv,
            r_gamma_logdet,
            conv_corr_inv,
            xtx,
            site_slot,
            rec_slot,
        })
    }

    /// A context identical to this one except for the response values:
    /// same sites, genera, replicate labels, covariates, grid, and
    /// configuration.
    pub fn with_responses(&self, responses: DMatrix<f64>) -> Result<FitContext> {
        let ds = SpectraDataset::new(
            self.ds.grid().clone(),
            self.ds.sites().clone(),
            self.ds.genus_ids().to_vec(),
            self.ds.records().to_vec(),
            responses,
        )?;
        FitContext::new(ds, self.config.clone())
    }

    // --- accessors -------------------------------------------------------

    pub fn dataset(&self) -> &SpectraDataset {
        &self.ds
    }
    pub fn design(&self) -> &DesignIndex {
        &self.design
    }
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
    pub fn n_wave(&self) -> usize {
        self.ds.grid().len()
    }
    pub fn n_records(&self) -> usize {
        self.ds.n_records()
    }
    pub fn n_sites(&self) -> usize {
        self.ds.sites().len()
    }
    pub fn n_genera(&self) -> usize {
        self.ds.n_genera()
    }
    pub fn n_covariates(&self) -> usize {
        self.design.x_rec.ncols()
    }
    pub fn beta_knots(&self) -> &[f64] {
        &self.beta_knots
    }
    pub fn gamma_knots(&self) -> &[f64] {
        &self.gamma_knots
    }
    pub fn eta_knots(&self) -> &[f64] {
        &self.eta_knots
    }
    pub fn sigma_basis(&self) -> &VarianceBasis {
        &self.sigma_basis
    }
    pub fn rank(&self) -> usize {
        self.rank
    }
    pub fn j_eta(&self) -> usize {
        self.j_eta
    }
    pub fn j_beta(&self) -> usize {
        self.beta_knots.len()
    }
    pub fn j_gamma(&self) -> usize {
        self.gamma_knots.len()
    }
    pub fn wave_values(&self) -> &[f64] {
        &self.wave_values
    }
    pub fn site_dist(&self) -> &DMatrix<f64> {
        &self.site_dist
    }
    pub fn genus_dist(&self, g: usize) -> &DMatrix<f64> {
        &self.genus_dist[g]
    }
    pub fn fixed_factor_decays(&self) -> Option<&[f64]> {
        self.fixed_factor_decays.as_deref()
    }
    pub fn r_gamma(&self) -> &DMatrix<f64> {
        &self.r_gamma
    }
    pub fn r_gamma_inv(&self) -> &DMatrix<f64> {
        &self.r_gamma_inv
    }
    pub fn r_gamma_logdet(&self) -> f64 {
        self.r_gamma_logdet
    }
    pub fn conv_corr_inv(&self) -> Option<&DMatrix<f64>> {
        self.conv_corr_inv.as_ref()
    }
    pub fn xtx(&self) -> &DMatrix<f64> {
        &self.xtx
    }
    /// Position of site `s` in genus `g`'s observed-site list, when observed.
    pub fn site_slot(&self, g: usize, s: usize) -> Option<usize> {
        self.site_slot[g][s]
    }
    /// Position of record `k`'s site in its genus's observed-site list.
    pub fn rec_slot(&self, k: usize) -> usize {
        self.rec_slot[k]
    }

    /// True when the variant carries latent factors (loadings + factors).
    pub fn has_factors(&self) -> bool {
        self.rank > 0
    }

    // --- basis evaluation -------------------------------------------------

    /// Evaluate every basis and the variance curve at a state.
    pub fn bases(&self, state: &ChainState) -> Result<BasisSet> {
        let family = self.config.kernel;
        let k_beta = match self.config.beta_mode {
            BetaMode::Functional => design_matrix(
                family,
                &self.wave_values,
                &self.beta_knots,
                Bandwidths::Shared(state.coeff_bandwidth),
            )?,
            BetaMode::Scalar => DMatrix::from_element(self.n_wave(), 1, 1.0),
        };
        let k_gamma = design_matrix(
            family,
            &self.wave_values,
            &self.gamma_knots,
            Bandwidths::PerKnot(state.wave_bandwidths.as_slice()),
        )?;
        let k_eta = match self.config.eta_variant {
            EtaVariant::None | EtaVariant::SpatialConvolution => {
                DMatrix::zeros(self.n_wave(), 0)
            }
            EtaVariant::SpatialOnly => DMatrix::from_element(self.n_wave(), 1, 1.0),
            _ => design_matrix(
                family,
                &self.wave_values,
                &self.eta_knots,
                Bandwidths::Shared(state.space_wave_bandwidth),
            )?,
        };
        let conv_weights = if matches!(self.config.eta_variant, EtaVariant::SpatialConvolution) {
            let n_s = self.n_sites();
            let mut w = DMatrix::zeros(n_s, n_s);
            for s in 0..n_s {
                for j in 0..n_s {
                    w[(s, j)] = crate::kernels::kernel_value(
                        family,
                        self.site_dist[(s, j)],
                        state.space_wave_bandwidth,
                    )?;
                }
            }
            Some(w)
        } else {
            None
        };
        let sigma2 = self.sigma_basis.variance(&state.log_var_knots)?;
        let inv_sigma2 = sigma2.map(|v| 1.0 / v);
        Ok(BasisSet {
            k_beta,
            k_gamma,
            k_eta,
            conv_weights,
            sigma2,
            inv_sigma2,
        })
    }

    // --- mean terms --------------------------------------------------------

    /// Per-record scalar intercepts `genus_means[g] + site_intercepts[g](s)`.
    pub fn intercept_offsets(&self, state: &ChainState) -> DVector<f64> {
        DVector::from_fn(self.n_records(), |k, _| {
            let r = &self.ds.records()[k];
            let mut v = state.genus_means[r.genus];
            if matches!(self.config.intercept_mode, InterceptMode::GenusSpatial) {
                v += state.site_intercepts[r.genus][self.rec_slot[k]];
            }
            v
        })
    }

    /// Regression surface `K_beta B' X'` (`n_wavelengths x n_records`).
    pub fn beta_term(&self, bases: &BasisSet, state: &ChainState) -> DMatrix<f64> {
        let f = &bases.k_beta * state.coeffs.transpose(); // n_wave x p
        f * self.design.x_rec.transpose()
    }

    /// Wavelength-effect curves: one column (global/none) or one per genus.
    pub fn gamma_curves(&self, bases: &BasisSet, state: &ChainState) -> DMatrix<f64> {
        match self.config.gamma_mode {
            GammaMode::None => DMatrix::zeros(self.n_wave(), 1),
            GammaMode::Global => {
                let curve = &bases.k_gamma * &state.wave_knots;
                DMatrix::from_columns(&[curve])
            }
            GammaMode::PerGenus => {
                let knots = state
                    .wave_knots_genus
                    .as_ref()
                    .expect("per-genus mode carries genus knots");
                &bases.k_gamma * knots.transpose()
            }
        }
    }

    /// Space-wavelength surface per site (`n_wavelengths x n_sites`).
    pub fn eta_sites(&self, bases: &BasisSet, state: &ChainState) -> DMatrix<f64> {
        match self.config.eta_variant {
            EtaVariant::None => DMatrix::zeros(self.n_wave(), self.n_sites()),
            EtaVariant::SpatialConvolution => {
                let z = state
                    .conv_field
                    .as_ref()
                    .expect("spatial-convolution state carries the field");
                let w = bases
                    .conv_weights
                    .as_ref()
                    .expect("spatial-convolution bases carry kernel weights");
                z * w.transpose()
            }
            _ => {
                let u = &bases.k_eta * &state.loadings; // n_wave x r
                u * state.factors.transpose()
            }
        }
    }

    /// The full mean surface (`n_wavelengths x n_records`).
    pub fn mean_surface(&self, state: &ChainState) -> Result<DMatrix<f64>> {
        let bases = self.bases(state)?;
        Ok(self.mean_surface_with(&bases, state))
    }

    /// The mean surface using already-evaluated bases.
    pub fn mean_surface_with(&self, bases: &BasisSet, state: &ChainState) -> DMatrix<f64> {
        let mut mean = self.beta_term(bases, state);
        let gamma = self.gamma_curves(bases, state);
        let eta = self.eta_sites(bases, state);
        let offsets = self.intercept_offsets(state);
        let per_genus_gamma = gamma.ncols() > 1;
        for k in 0..self.n_records() {
            let r = &self.ds.records()[k];
            let g_col = if per_genus_gamma { r.genus } else { 0 };
            let mut col = mean.column_mut(k);
            col += gamma.column(g_col);
            col += eta.column(r.site);
            col.add_scalar_mut(offsets[k]);
        }
        mean
    }

    // --- likelihood ---------------------------------------------------------

    /// Log-likelihood at a state.
    pub fn log_likelihood(&self, state: &ChainState) -> Result<f64> {
        let bases = self.bases(state)?;
        let mean = self.mean_surface_with(&bases, state);
        Ok(self.log_likelihood_given(&mean, &bases.sigma2))
    }

    /// Log-likelihood for an explicit mean surface and variance curve.
    pub fn log_likelihood_given(&self, mean: &DMatrix<f64>, sigma2: &DVector<f64>) -> f64 {
        gaussian_loglik(self.ds.responses(), mean, sigma2)
    }

    /// Deviance `-2 log p(Y | state)`.
    pub fn deviance(&self, state: &ChainState) -> Result<f64> {
        Ok(-2.0 * self.log_likelihood(state)?)
    }

    /// Check that a state's block shapes match this context.
    pub fn check_state(&self, state: &ChainState) -> Result<()> {
        let want = |context: &str, expected: usize, got: usize| -> Result<()> {
            if expected == got {
                Ok(())
            } else {
                Err(Error::dim(context, expected, got))
            }
        };
        want("genus means", self.n_genera(), state.genus_means.len())?;
        want("site-intercept groups", self.n_genera(), state.site_intercepts.len())?;
        if matches!(self.config.intercept_mode, InterceptMode::GenusSpatial) {
            for (g, sites) in self.design.genus_sites.iter().enumerate() {
                want("site intercepts", sites.len(), state.site_intercepts[g].len())?;
            }
        }
        want("coefficient rows", self.n_covariates(), state.coeffs.nrows())?;
        want("coefficient columns", self.j_beta(), state.coeffs.ncols())?;
        want("wavelength-effect knots", self.j_gamma(), state.wave_knots.len())?;
        match (&self.config.gamma_mode, &state.wave_knots_genus) {
            (GammaMode::PerGenus, Some(m)) => {
                want("per-genus knot rows", self.n_genera(), m.nrows())?;
                want("per-genus knot columns", self.j_gamma(), m.ncols())?;
            }
            (GammaMode::PerGenus, None) => {
                return Err(Error::Config(
                    "per-genus wavelength mode requires per-genus knots in the state".into(),
                ));
            }
            (_, Some(_)) => {
                return Err(Error::Config(
                    "per-genus knots present but the wavelength mode is not per-genus".into(),
                ));
            }
            (_, None) => {}
        }
        want("loading rows", self.j_eta, state.loadings.nrows())?;
        want("loading columns", self.rank, state.loadings.ncols())?;
        want("factor rows", self.n_sites(), state.factors.nrows())?;
        want("factor columns", self.rank, state.factors.ncols())?;
        match (&self.config.eta_variant, &state.conv_field) {
            (EtaVariant::SpatialConvolution, Some(z)) => {
                want("conv-field rows", self.n_wave(), z.nrows())?;
                want("conv-field columns", self.n_sites(), z.ncols())?;
            }
            (EtaVariant::SpatialConvolution, None) => {
                return Err(Error::Config(
                    "spatial-convolution variant requires a conv field in the state".into(),
                ));
            }
            (_, Some(_)) => {
                return Err(Error::Config(
                    "conv field present but the variant is not spatial-convolution".into(),
                ));
            }
            (_, None) => {}
        }
        want("log-variance knots", self.sigma_basis.n_knots(), state.log_var_knots.len())?;
        want("wavelength bandwidths", self.j_gamma(), state.wave_bandwidths.len())?;
        want("factor decays", self.rank, state.factor_decays.len())?;
        if !state.all_finite() {
            return Err(Error::Numeric("state contains non-finite values".into()));
        }
        Ok(())
    }

    // --- initialization -----------------------------------------------------

    /// Deterministic-given-RNG starting state: data-scale intercepts, zero
    /// curves and factors, small random loadings, prior-mean variances,
    /// prior-median bandwidths, and the geometric midpoint of each decay
    /// support.
    pub fn init_state<R: Rng>(&self, rng: &mut R) -> Result<ChainState> {
        let y = self.ds.responses();
        let grand_mean = y.iter().sum::<f64>() / (y.nrows() * y.ncols()) as f64;
        let pooled_var = {
            let mut acc = 0.0;
            for v in y.iter() {
                let d = v - grand_mean;
                acc += d * d;
            }
            (acc / (y.nrows() * y.ncols()) as f64).max(1e-12)
        };
        let p = &self.config.priors;

        let site_intercepts = match self.config.intercept_mode {
            InterceptMode::GenusSpatial => self
                .design
                .genus_sites
                .iter()
                .map(|sites| DVector::zeros(sites.len()))
                .collect(),
            InterceptMode::Genus => vec![DVector::zeros(0); self.n_genera()],
        };

        let loadings = self.init_loadings(rng);
        let factors = DMatrix::zeros(self.n_sites(), self.rank);
        let conv_field = matches!(self.config.eta_variant, EtaVariant::SpatialConvolution)
            .then(|| DMatrix::zeros(self.n_wave(), self.n_sites()));

        let coeff_bandwidth = gamma_median(p.coeff_bandwidth.shape, p.coeff_bandwidth.rate)?;
        let space_wave_bandwidth =
            gamma_median(p.space_wave_bandwidth.shape, p.space_wave_bandwidth.rate)?;
        let wave_bandwidths =
            DVector::from_element(self.j_gamma(), p.mean_log_bandwidth.mean.exp());

        let factor_decays = if self.rank == 0 {
            DVector::zeros(0)
        } else if let Some(fixed) = &self.fixed_factor_decays {
            DVector::from_vec(fixed.clone())
        } else {
            let (lo, hi) = p.factor_decay_range;
            match self.config.factor_decays {
                DecayMode::RandomSingle => {
                    DVector::from_element(self.rank, (lo * hi).sqrt())
                }
                DecayMode::RandomSequence => {
                    // Strictly inside the open support: the walk moves on the
                    // logit scale, which is infinite at the endpoints.
                    let (llo, lhi) = (lo.ln(), hi.ln());
                    DVector::from_fn(self.rank, |i, _| {
                        (llo + (lhi - llo) * (i + 1) as f64 / (self.rank + 1) as f64).exp()
                    })
                }
                _ => unreachable!("fixed modes resolve above"),
            }
        };

        let (dlo, dhi) = p.intercept_decay_range;
        Ok(ChainState {
            grand_mean,
            genus_means: DVector::from_element(self.n_genera(), grand_mean),
            site_intercepts,
            coeffs: DMatrix::zeros(self.n_covariates(), self.j_beta()),
            wave_knots: DVector::zeros(self.j_gamma()),
            wave_knots_genus: matches!(self.config.gamma_mode, GammaMode::PerGenus)
                .then(|| DMatrix::zeros(self.n_genera(), self.j_gamma())),
            loadings,
            factors,
            conv_field,
            log_var_knots: DVector::from_element(self.sigma_basis.n_knots(), pooled_var.ln()),
            coeff_bandwidth,
            wave_bandwidths,
            space_wave_bandwidth,
            var_genus_mean: p.var_genus_mean.mean(),
            var_site_intercept: p.var_site_intercept.mean(),
            var_coeff: p.var_coeff.mean(),
            var_wave: p.var_wave.mean(),
            var_wave_genus: p.var_wave_genus.mean(),
            var_loading: p.var_loading.mean(),
            var_log_bandwidth: p.var_log_bandwidth.mean(),
            mean_log_bandwidth: p.mean_log_bandwidth.mean,
            var_conv_field: p.var_conv_field.mean(),
            intercept_decay: (dlo * dhi).sqrt(),
            factor_decays,
        })
    }

    /// Small random loadings respecting the variant's structural mask.
    fn init_loadings<R: Rng>(&self, rng: &mut R) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.j_eta, self.rank);
        let draw = |rng: &mut R| 0.1 * rng.sample::<f64, _>(StandardNormal);
        match self.config.eta_variant {
            EtaVariant::None | EtaVariant::SpatialConvolution => {}
            EtaVariant::Independent => {
                for i in 0..self.rank {
                    a[(i, i)] = draw(rng);
                }
            }
            EtaVariant::Lmc => {
                for c in 0..self.rank {
                    for r in c..self.j_eta {
                        let v = draw(rng);
                        a[(r, c)] = if r == c { v.abs().max(1e-3) } else { v };
                    }
                }
            }
            _ => {
                for c in 0..self.rank {
                    for r in 0..self.j_eta {
                        a[(r, c)] = draw(rng);
                    }
                }
            }
        }
        a
    }
}

/// Independent-Gaussian log-density of `y` around `mean` with per-row
/// variances `sigma2`.
///
/// Cells are visited column-by-column (records), rows (wavelengths) inner,
/// with compensated summation; the order never varies, so repeated
/// evaluation is bit-stable.
pub fn gaussian_loglik(y: &DMatrix<f64>, mean: &DMatrix<f64>, sigma2: &DVector<f64>) -> f64 {
    let ln_sig: Vec<f64> = sigma2.iter().map(|v| v.ln()).collect();
    let inv_sig: Vec<f64> = sigma2.iter().map(|v| 1.0 / v).collect();
    let mut acc = KahanSum::new();
    for k in 0..y.ncols() {
        for t in 0..y.nrows() {
            let r = y[(t, k)] - mean[(t, k)];
            acc.add(-0.5 * (LN_2PI + ln_sig[t] + r * r * inv_sig[t]));
        }
    }
    acc.total()
}
