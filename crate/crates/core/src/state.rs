//! The full parameter state of one MCMC chain.
//!
//! Field names follow the role each block plays in the mean decomposition
//! rather than any symbol convention: the response surface for record `k`
//! (genus `g` at site `s`) is
//!
//! ```text
//! mean(t) = genus_mean[g] + site_intercept[g](s)
//!         + x(s)' * coeff_curves(t)
//!         + wave_effect[g](t)
//!         + space_wave(s, t)
//! ```
//!
//! with heteroscedastic noise `N(0, sigma2(t))`,
//! `log sigma2(t)` piecewise linear with knot coefficients `log_var_knots`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every sampled quantity of the model, at one point of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    /// Grand mean of the log-response.
    pub grand_mean: f64,
    /// Genus-level intercepts (length `n_genera`).
    pub genus_means: DVector<f64>,
    /// Genus-specific spatial intercepts, one vector per genus over that
    /// genus's observed sites (lengths follow `genus_sites`). Empty vectors
    /// when the intercept mode is non-spatial.
    pub site_intercepts: Vec<DVector<f64>>,
    /// Covariate coefficient knots (`p x j_beta`); row `j` holds the knots of
    /// covariate `j`'s coefficient curve.
    pub coeffs: DMatrix<f64>,
    /// Shared wavelength-effect knots (length `j_gamma`).
    pub wave_knots: DVector<f64>,
    /// Genus-specific wavelength-effect knots (`n_genera x j_gamma`), present
    /// only in per-genus mode.
    pub wave_knots_genus: Option<DMatrix<f64>>,
    /// Factor loadings (`j_eta x r`); empty for variants without factors.
    pub loadings: DMatrix<f64>,
    /// Latent spatial factors (`n_sites x r`); empty without factors.
    pub factors: DMatrix<f64>,
    /// Per-site wavelength processes of the spatial-convolution variant
    /// (`n_wavelengths x n_sites`), otherwise absent.
    pub conv_field: Option<DMatrix<f64>>,
    /// Knot coefficients of the piecewise-linear log-variance curve.
    pub log_var_knots: DVector<f64>,
    /// Bandwidth of the coefficient kernel basis (nm).
    pub coeff_bandwidth: f64,
    /// Per-knot bandwidths of the wavelength-effect basis (nm).
    pub wave_bandwidths: DVector<f64>,
    /// Bandwidth of the interaction kernel basis (nm), or of the spatial
    /// kernel (km) in the spatial-convolution variant.
    pub space_wave_bandwidth: f64,
    /// Variance of genus means around the grand mean.
    pub var_genus_mean: f64,
    /// Scale of the genus-level spatial intercept processes.
    pub var_site_intercept: f64,
    /// Scale of the coefficient knots.
    pub var_coeff: f64,
    /// Scale of the shared wavelength-effect knots.
    pub var_wave: f64,
    /// Scale of genus wavelength knots around the shared curve (per-genus
    /// mode only; carried but inert otherwise).
    pub var_wave_genus: f64,
    /// Scale of the loadings.
    pub var_loading: f64,
    /// Variance of the log-bandwidths of the wavelength effect.
    pub var_log_bandwidth: f64,
    /// Mean of the log-bandwidths of the wavelength effect.
    pub mean_log_bandwidth: f64,
    /// Scale of the spatial-convolution wavelength processes.
    pub var_conv_field: f64,
    /// Spatial decay of the genus intercept processes.
    pub intercept_decay: f64,
    /// Spatial decay rates of the latent factors (length `r`). Fixed-mode
    /// values are carried here too so the state is self-describing.
    pub factor_decays: DVector<f64>,
}

impl ChainState {
    /// Elementwise arithmetic mean of several states (all on the sampled
    /// scale), used for the plug-in deviance. Errors on an empty slice or
    /// mismatched shapes.
    pub fn component_mean(states: &[ChainState]) -> Result<ChainState> {
        let first = states
            .first()
            .ok_or_else(|| Error::Numeric("component mean of zero states".into()))?;
        let n = states.len() as f64;
        let mut out = first.clone();

        macro_rules! avg_scalar {
            ($field:ident) => {
                out.$field = states.iter().map(|s| s.$field).sum::<f64>() / n;
            };
        }
        macro_rules! avg_vector {
            ($field:ident) => {{
                let mut acc = DVector::zeros(first.$field.len());
                for s in states {
                    if s.$field.len() != acc.len() {
                        return Err(Error::dim(
                            concat!("component mean of ", stringify!($field)),
                            acc.len(),
                            s.$field.len(),
                        ));
                    }
                    acc += &s.$field;
                }
                out.$field = acc / n;
            }};
        }
        macro_rules! avg_matrix {
            ($field:ident) => {{
                let mut acc = DMatrix::zeros(first.$field.nrows(), first.$field.ncols());
                for s in states {
                    if s.$field.shape() != acc.shape() {
                        return Err(Error::dim(
                            concat!("component mean of ", stringify!($field)),
                            format!("{:?}", acc.shape()),
                            format!("{:?}", s.$field.shape()),
                        ));
                    }
                    acc += &s.$field;
                }
                out.$field = acc / n;
            }};
        }

        avg_scalar!(grand_mean);
        avg_vector!(genus_means);
        for g in 0..first.site_intercepts.len() {
            let mut acc = DVector::zeros(first.site_intercepts[g].len());
            for s in states {
                if s.site_intercepts.len() != first.site_intercepts.len()
                    || s.site_intercepts[g].len() != acc.len()
                {
                    return Err(Error::dim(
                        "component mean of site_intercepts",
                        acc.len(),
                        s.site_intercepts.get(g).map_or(0, |v| v.len()),
                    ));
                }
                acc += &s.site_intercepts[g];
            }
            out.site_intercepts[g] = acc / n;
        }
        avg_matrix!(coeffs);
        avg_vector!(wave_knots);
        if let Some(first_g) = &first.wave_knots_genus {
            let mut acc = DMatrix::zeros(first_g.nrows(), first_g.ncols());
            for s in states {
                let m = s.wave_knots_genus.as_ref().ok_or_else(|| {
                    Error::Numeric("mixed presence of wave_knots_genus in mean".into())
                })?;
                acc += m;
            }
            out.wave_knots_genus = Some(acc / n);
        }
        avg_matrix!(loadings);
        avg_matrix!(factors);
        if let Some(first_z) = &first.conv_field {
            let mut acc = DMatrix::zeros(first_z.nrows(), first_z.ncols());
            for s in states {
                let m = s
                    .conv_field
                    .as_ref()
                    .ok_or_else(|| Error::Numeric("mixed presence of conv_field in mean".into()))?;
                acc += m;
            }
            out.conv_field = Some(acc / n);
        }
        avg_vector!(log_var_knots);
        avg_scalar!(coeff_bandwidth);
        avg_vector!(wave_bandwidths);
        avg_scalar!(space_wave_bandwidth);
        avg_scalar!(var_genus_mean);
        avg_scalar!(var_site_intercept);
        avg_scalar!(var_coeff);
        avg_scalar!(var_wave);
        avg_scalar!(var_wave_genus);
        avg_scalar!(var_loading);
        avg_scalar!(var_log_bandwidth);
        avg_scalar!(mean_log_bandwidth);
        avg_scalar!(var_conv_field);
        avg_scalar!(intercept_decay);
        avg_vector!(factor_decays);
        Ok(out)
    }

    /// True when every entry of the state is finite.
    pub fn all_finite(&self) -> bool {
        let scalars = [
            self.grand_mean,
            self.coeff_bandwidth,
            self.space_wave_bandwidth,
            self.var_genus_mean,
            self.var_site_intercept,
            self.var_coeff,
            self.var_wave,
            self.var_wave_genus,
            self.var_loading,
            self.var_log_bandwidth,
            self.mean_log_bandwidth,
            self.var_conv_field,
            self.intercept_decay,
        ];
        scalars.iter().all(|v| v.is_finite())
            && self.genus_means.iter().all(|v| v.is_finite())
            && self.site_intercepts.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.coeffs.iter().all(|v| v.is_finite())
            && self.wave_knots.iter().all(|v| v.is_finite())
            && self
                .wave_knots_genus
                .as_ref()
                .map_or(true, |m| m.iter().all(|v| v.is_finite()))
            && self.loadings.iter().all(|v| v.is_finite())
            && self.factors.iter().all(|v| v.is_finite())
            && self
                .conv_field
                .as_ref()
                .map_or(true, |m| m.iter().all(|v| v.is_finite()))
            && self.log_var_knots.iter().all(|v| v.is_finite())
            && self.wave_bandwidths.iter().all(|v| v.is_finite())
            && self.factor_decays.iter().all(|v| v.is_finite())
    }
}
