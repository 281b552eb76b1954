//! Model configuration: structural toggles, knot layouts, priors, and the
//! sampler schedule.
//!
//! The JSON representation mirrors [`ModelConfig`] field-for-field; unknown
//! keys are rejected so that misspelled options fail loudly. Every field has
//! a default matching the reference analysis configuration (genus-level
//! spatial intercepts, a global wavelength effect, functional covariate
//! coefficients, and a rank-10 latent factor field for the space-wavelength
//! residual term).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::make_knot_grid;
use crate::error::{Error, Result};
use crate::kernels::KernelFamily;

/// Structure of the genus intercepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterceptMode {
    /// A scalar intercept per genus.
    Genus,
    /// A scalar intercept per genus plus a genus-specific spatial Gaussian
    /// process over that genus's observed sites.
    GenusSpatial,
}

/// Structure of the wavelength random effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// No wavelength random effect (used by reduced fixtures).
    None,
    /// One shared curve for all genera.
    Global,
    /// Genus-specific curves hierarchically centered on a shared curve.
    PerGenus,
}

/// Structure of the covariate coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// Coefficients constant in wavelength (a single knot with a flat basis).
    Scalar,
    /// Wavelength-varying coefficients built by kernel convolution of knots.
    Functional,
}

/// Structure of the space-wavelength interaction surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum EtaVariant {
    /// No interaction surface.
    None,
    /// A single spatial process shared by all wavelengths (a family-level
    /// spatial intercept).
    SpatialOnly,
    /// Rank-`r` latent factor field: wavelength kernel basis times a
    /// `j_eta x r` loading matrix times `r` independent unit-variance spatial
    /// processes with increasing decay.
    Factor { r: usize },
    /// Diagonal loadings: one independently scaled spatial process per
    /// wavelength knot.
    Independent,
    /// A separable space-wavelength covariance: full loadings with a single
    /// shared spatial decay.
    Separable,
    /// Linear model of coregionalization: square lower-triangular loadings
    /// with positive diagonal and increasing decays.
    Lmc,
    /// The mirrored construction: a spatial kernel over observed sites applied
    /// to per-site wavelength processes. Exposed for structural comparisons;
    /// heavier per sweep and not tuned for large grids.
    SpatialConvolution,
}

/// How the spatial decay rates of the latent factor processes are handled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecayMode {
    /// All factors share one fixed decay.
    FixedSingle { value: f64 },
    /// Fixed per-factor decays. `values: null` requests the default ladder:
    /// log-spaced on `[3 / d_max, 3 / d_min]` (d = nonzero site distances),
    /// sorted increasing.
    FixedSequence { values: Option<Vec<f64>> },
    /// One shared decay, sampled.
    RandomSingle,
    /// Per-factor decays, sampled subject to an increasing-order constraint.
    RandomSequence,
}

/// An evenly spaced knot layout `lo, lo+spacing, ..., hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnotSpec {
    pub lo: f64,
    pub hi: f64,
    pub spacing: f64,
}

impl KnotSpec {
    /// Materialize the knot locations.
    pub fn knots(&self) -> Result<Vec<f64>> {
        make_knot_grid(self.lo, self.hi, self.spacing)
    }
}

/// Inverse-gamma prior `IG(shape, scale)` with mean `scale / (shape - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IgPrior {
    pub shape: f64,
    pub scale: f64,
}

impl IgPrior {
    /// Prior mean (defined for `shape > 1`).
    pub fn mean(&self) -> f64 {
        self.scale / (self.shape - 1.0)
    }
}

/// Gamma prior `Gamma(shape, rate)` with mean `shape / rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// Normal prior with mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

/// Prior hyperparameters for every sampled block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Grand mean: `N(0, intercept_sd^2)`.
    pub intercept_sd: f64,
    /// Variance of genus means around the grand mean.
    pub var_genus_mean: IgPrior,
    /// Scale of the genus-level spatial intercepts.
    pub var_site_intercept: IgPrior,
    /// Scale of the covariate coefficient knots.
    pub var_coeff: IgPrior,
    /// Scale of the wavelength-effect knots.
    pub var_wave: IgPrior,
    /// Scale of genus-specific wavelength knots around the shared curve.
    pub var_wave_genus: IgPrior,
    /// Scale of the factor loadings.
    pub var_loading: IgPrior,
    /// Variance of the log-bandwidths of the wavelength effect.
    pub var_log_bandwidth: IgPrior,
    /// Scale of the per-site wavelength processes (spatial-convolution
    /// variant only).
    pub var_conv_field: IgPrior,
    /// Uniform support for the spatial decay of the genus intercept processes.
    pub intercept_decay_range: (f64, f64),
    /// Uniform support for sampled factor decays (random decay modes).
    pub factor_decay_range: (f64, f64),
    /// Bandwidth of the coefficient kernel basis (nm).
    pub coeff_bandwidth: GammaPrior,
    /// Bandwidth of the interaction kernel basis (nm; km for the
    /// spatial-convolution variant's spatial kernel).
    pub space_wave_bandwidth: GammaPrior,
    /// Mean of the log-bandwidths of the wavelength effect.
    pub mean_log_bandwidth: NormalPrior,
    /// Coefficients of the piecewise-linear log-variance curve: `N(0, sd^2)`.
    pub log_var_sd: f64,
    /// Fixed decay of the correlation between log-bandwidths (per nm).
    pub log_bandwidth_corr_decay: f64,
    /// Fixed decay of the wavelength correlation of the per-site processes in
    /// the spatial-convolution variant (per nm).
    pub conv_field_corr_decay: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            intercept_sd: 10.0,
            var_genus_mean: IgPrior { shape: 3.0, scale: 0.2 },
            var_site_intercept: IgPrior { shape: 3.0, scale: 2.0 },
            var_coeff: IgPrior { shape: 3.0, scale: 2.0 },
            var_wave: IgPrior { shape: 3.0, scale: 2.0 },
            var_wave_genus: IgPrior { shape: 3.0, scale: 2.0 },
            var_loading: IgPrior { shape: 11.0, scale: 10.0 },
            var_log_bandwidth: IgPrior { shape: 5.0, scale: 2.0 },
            var_conv_field: IgPrior { shape: 3.0, scale: 2.0 },
            intercept_decay_range: (0.01, 1.0),
            factor_decay_range: (0.01, 1.0),
            coeff_bandwidth: GammaPrior { shape: 5.0, rate: 0.1 },
            space_wave_bandwidth: GammaPrior { shape: 5.0, rate: 0.1 },
            mean_log_bandwidth: NormalPrior { mean: 3.0, sd: 3.0 },
            log_var_sd: 10.0,
            log_bandwidth_corr_decay: 1.0 / 50.0,
            conv_field_corr_decay: 1.0 / 50.0,
        }
    }
}

/// Metropolis proposal scales, one per non-conjugate block. All proposals are
/// Gaussian random walks on an unconstrained transform of the block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSizes {
    pub intercept_decay: f64,
    pub coeff_bandwidth: f64,
    pub wave_bandwidths: f64,
    pub space_wave_bandwidth: f64,
    pub log_var_knots: f64,
    pub factor_decays: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        StepSizes {
            intercept_decay: 0.5,
            coeff_bandwidth: 0.3,
            wave_bandwidths: 0.12,
            space_wave_bandwidth: 0.3,
            log_var_knots: 0.15,
            factor_decays: 0.3,
        }
    }
}

/// Sampler schedule and tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    /// Total sweeps.
    pub n_iter: usize,
    /// Sweeps discarded as burn-in.
    pub n_burn: usize,
    /// Draws kept after thinning the post-burn-in stream. The thinning
    /// interval is `floor((n_iter - n_burn) / n_keep)`; with a non-divisible
    /// schedule the first `n_keep` thinned positions are retained and any
    /// trailing ones are dropped.
    pub n_keep: usize,
    /// Seed of the chain's random stream.
    pub seed: u64,
    /// Adapt proposal scales toward 30% acceptance during burn-in.
    pub adapt: bool,
    /// Proposal scales (starting values when `adapt` is on).
    pub steps: StepSizes,
    /// Write a checkpoint every this many sweeps (none when absent).
    pub checkpoint_every: Option<usize>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_iter: 200_000,
            n_burn: 150_000,
            n_keep: 10_000,
            seed: 0,
            adapt: true,
            steps: StepSizes::default(),
            checkpoint_every: None,
        }
    }
}

/// Complete model + sampler configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Optional human-readable label used in comparison tables.
    pub label: Option<String>,
    pub intercept_mode: InterceptMode,
    pub gamma_mode: GammaMode,
    pub beta_mode: BetaMode,
    pub eta_variant: EtaVariant,
    /// Kernel family shared by all kernel-convolution bases.
    pub kernel: KernelFamily,
    /// Knot layout of the coefficient basis (ignored in scalar mode).
    pub beta_knots: KnotSpec,
    /// Knot layout of the wavelength-effect basis.
    pub gamma_knots: KnotSpec,
    /// Knot layout of the interaction basis.
    pub eta_knots: KnotSpec,
    /// Knot layout of the piecewise-linear log-variance curve.
    pub sigma_knots: KnotSpec,
    /// Spatial decay handling for the latent factor processes.
    pub factor_decays: DecayMode,
    pub priors: PriorConfig,
    pub mcmc: McmcConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            label: None,
            intercept_mode: InterceptMode::GenusSpatial,
            gamma_mode: GammaMode::Global,
            beta_mode: BetaMode::Functional,
            eta_variant: EtaVariant::Factor { r: 10 },
            kernel: KernelFamily::Gaussian,
            beta_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 25.0 },
            gamma_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 25.0 },
            eta_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 25.0 },
            sigma_knots: KnotSpec { lo: 440.0, hi: 960.0, spacing: 20.0 },
            factor_decays: DecayMode::FixedSequence { values: None },
            priors: PriorConfig::default(),
            mcmc: McmcConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A label for result tables: the configured one, or a structural summary.
    pub fn display_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let intercept = match self.intercept_mode {
            InterceptMode::Genus => "genus",
            InterceptMode::GenusSpatial => "genus_spatial",
        };
        let eta = match self.eta_variant {
            EtaVariant::None => "none".to_string(),
            EtaVariant::SpatialOnly => "spatial_only".to_string(),
            EtaVariant::Factor { r } => format!("factor{r}"),
            EtaVariant::Independent => "independent".to_string(),
            EtaVariant::Separable => "separable".to_string(),
            EtaVariant::Lmc => "lmc".to_string(),
            EtaVariant::SpatialConvolution => "spatial_convolution".to_string(),
        };
        format!("{intercept}+{eta}")
    }

    /// Dataset-independent consistency checks, all evaluated; one message
    /// per violated field, empty when the configuration is consistent.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let m = &self.mcmc;
        if m.n_iter == 0 || m.n_burn >= m.n_iter {
            out.push(format!(
                "schedule must satisfy 0 <= n_burn < n_iter, got n_iter={} n_burn={}",
                m.n_iter, m.n_burn
            ));
        } else if m.n_keep == 0 || m.n_keep > m.n_iter - m.n_burn {
            out.push(format!(
                "n_keep must lie in [1, n_iter - n_burn], got {}",
                m.n_keep
            ));
        }
        if m.checkpoint_every == Some(0) {
            out.push("checkpoint_every must be positive".into());
        }
        for (name, v) in [
            ("intercept_decay", m.steps.intercept_decay),
            ("coeff_bandwidth", m.steps.coeff_bandwidth),
            ("wave_bandwidths", m.steps.wave_bandwidths),
            ("space_wave_bandwidth", m.steps.space_wave_bandwidth),
            ("log_var_knots", m.steps.log_var_knots),
            ("factor_decays", m.steps.factor_decays),
        ] {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("step size `{name}` must be positive"));
            }
        }

        let p = &self.priors;
        for (name, ig) in [
            ("var_genus_mean", p.var_genus_mean),
            ("var_site_intercept", p.var_site_intercept),
            ("var_coeff", p.var_coeff),
            ("var_wave", p.var_wave),
            ("var_wave_genus", p.var_wave_genus),
            ("var_loading", p.var_loading),
            ("var_log_bandwidth", p.var_log_bandwidth),
            ("var_conv_field", p.var_conv_field),
        ] {
            if !(ig.shape > 1.0 && ig.scale > 0.0) {
                out.push(format!(
                    "inverse-gamma prior `{name}` needs shape > 1 and scale > 0, \
                     got ({}, {})",
                    ig.shape, ig.scale
                ));
            }
        }
        for (name, g) in [
            ("coeff_bandwidth", p.coeff_bandwidth),
            ("space_wave_bandwidth", p.space_wave_bandwidth),
        ] {
            if !(g.shape > 0.0 && g.rate > 0.0) {
                out.push(format!("gamma prior `{name}` needs positive shape and rate"));
            }
        }
        for (name, sd) in [
            ("intercept_sd", p.intercept_sd),
            ("log_var_sd", p.log_var_sd),
            ("mean_log_bandwidth.sd", p.mean_log_bandwidth.sd),
        ] {
            if !(sd.is_finite() && sd > 0.0) {
                out.push(format!("prior sd `{name}` must be positive"));
            }
        }
        for (name, (lo, hi)) in [
            ("intercept_decay_range", p.intercept_decay_range),
            ("factor_decay_range", p.factor_decay_range),
        ] {
            if !(lo > 0.0 && hi > lo) {
                out.push(format!(
                    "`{name}` must satisfy 0 < lo < hi, got ({lo}, {hi})"
                ));
            }
        }
        for (name, value) in [
            ("log_bandwidth_corr_decay", p.log_bandwidth_corr_decay),
            ("conv_field_corr_decay", p.conv_field_corr_decay),
        ] {
            let positive = value > 0.0; // also rejects NaN
            if !positive {
                out.push(format!("`{name}` must be positive, got {value}"));
            }
        }

        match self.eta_variant {
            EtaVariant::Factor { r: 0 } => {
                out.push("factor rank r must be at least 1".into());
            }
            EtaVariant::Separable
                if !matches!(
                    self.factor_decays,
                    DecayMode::FixedSingle { .. } | DecayMode::RandomSingle
                ) =>
            {
                out.push(
                    "the separable variant needs a single shared spatial decay \
                     (fixed_single or random_single)"
                        .into(),
                );
            }
            _ => {}
        }
        if let DecayMode::FixedSingle { value } = self.factor_decays {
            if !(value.is_finite() && value > 0.0) {
                out.push("fixed_single decay must be positive".into());
            }
        }
        if let DecayMode::FixedSequence { values: Some(v) } = &self.factor_decays {
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                out.push("fixed_sequence decays must be positive".into());
            }
            if v.windows(2).any(|w| w[0] > w[1]) {
                out.push("fixed_sequence decays must be sorted increasing".into());
            }
        }

        // Knot layouts must themselves be constructible.
        for (name, spec) in [
            ("beta_knots", self.beta_knots),
            ("gamma_knots", self.gamma_knots),
            ("eta_knots", self.eta_knots),
            ("sigma_knots", self.sigma_knots),
        ] {
            match spec.knots() {
                Err(Error::Config(msg)) => out.push(format!("`{name}`: {msg}")),
                Err(e) => out.push(format!("`{name}`: {e}")),
                Ok(_) => {}
            }
        }
        out
    }

    /// Dataset-independent consistency checks; the error message lists every
    /// violated field.
    pub fn validate(&self) -> Result<()> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations.join("; ")))
        }
    }

    /// The thinning interval implied by the schedule.
    pub fn thin(&self) -> usize {
        (self.mcmc.n_iter - self.mcmc.n_burn) / self.mcmc.n_keep
    }
}

/// Read a config from JSON, rejecting unknown keys.
pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| {
        Error::parse(path.display().to_string(), e.line(), e.to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Serialize a config to canonical JSON (used for hashing and manifests).
pub fn config_json(cfg: &ModelConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serialization cannot fail")
}

/// Hex SHA-256 of the canonical JSON form of a config.
pub fn config_hash(cfg: &ModelConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(config_json(cfg).as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
