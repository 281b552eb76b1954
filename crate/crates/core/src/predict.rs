//! Held-out prediction, proper scoring, and model comparison.
//!
//! A fitted chain predicts the spectrum of a (genus, site) pair by composing
//! each kept draw's mean components at the requested location and adding
//! observation noise. Components the training fit already carries transfer
//! as-is; genus-level site intercepts at unseen sites and the latent spatial
//! factors at new coordinates are drawn from their Gaussian-process
//! conditionals given the fitted values, so predictions borrow spatial
//! strength the same way the model does in-sample.
//!
//! Scoring treats the per-draw curves as the predictive distribution: squared
//! and absolute error are taken at the posterior-mean curve, the continuous
//! ranked probability score at the noisy draws, and central intervals at
//! empirical quantiles. Record selection for leave-out exercises enforces
//! that every held-out record leaves behind at least one spectrum at its site
//! and one same-genus spectrum elsewhere — exactly what the spatial and
//! genus-level components need to stay identified on the training remainder.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::config::{EtaVariant, InterceptMode, ModelConfig};
use crate::data::SpectraDataset;
use crate::error::{Error, Result};
use crate::kernels::kernel_value;
use crate::mcmc::{run_chain, RunOptions};
use crate::model::FitContext;
use crate::spatial::{
    chol_sample, distance, distance_matrix, exp_corr_matrix, gp_conditional, jittered_cholesky,
};
use crate::state::ChainState;
use crate::stats::{quantile, KahanSum};

// --- targets ----------------------------------------------------------------

/// Where a prediction is requested.
#[derive(Debug, Clone)]
pub enum PredictionSite {
    /// A site from the training site table, by index.
    Observed(usize),
    /// A new location, with raw (unstandardized) covariate values.
    New { coord: [f64; 2], covariates: Vec<f64> },
}

/// One curve to predict: a genus at a location.
#[derive(Debug, Clone)]
pub struct PredictionTarget {
    /// Index into the genus catalog.
    pub genus: usize,
    /// The location of the prediction.
    pub site: PredictionSite,
}

/// Per-draw predictive curves for one target.
#[derive(Debug, Clone)]
pub struct PredictiveCurves {
    /// Draws of the mean curve (`n_wavelengths x n_draws`).
    pub mean: DMatrix<f64>,
    /// The same draws with observation noise added (`n_wavelengths x n_draws`).
    pub noisy: DMatrix<f64>,
}

impl PredictiveCurves {
    /// The point prediction: the across-draw average of the mean curve.
    pub fn point(&self) -> DVector<f64> {
        let m = self.mean.ncols() as f64;
        DVector::from_fn(self.mean.nrows(), |t, _| self.mean.row(t).sum() / m)
    }

    /// Empirical `q`-quantile curve of the noisy draws.
    pub fn quantile_curve(&self, q: f64) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.noisy.nrows());
        for t in 0..self.noisy.nrows() {
            let row: Vec<f64> = self.noisy.row(t).iter().copied().collect();
            out[t] = quantile(&row, q)?;
        }
        Ok(out)
    }
}

// --- prediction ---------------------------------------------------------------

/// Predict curves for `targets` under every state in `states`.
///
/// For each draw, the mean curve is assembled from the draw's components at
/// the target location. A genus-level site intercept that the fit does not
/// carry (an unseen genus-site cell, or a new coordinate) is drawn from its
/// conditional given that genus's fitted intercepts; at new coordinates the
/// latent spatial factors are likewise extended by their unit-variance
/// conditionals, and a convolution surface is evaluated directly through its
/// kernel weights. The noisy curves add observation noise on top. The
/// composition is deterministic given `seed`.
pub fn predict(
    ctx: &FitContext,
    states: &[ChainState],
    targets: &[PredictionTarget],
    seed: u64,
) -> Result<Vec<PredictiveCurves>> {
    if states.is_empty() {
        return Err(Error::Data(
            "prediction needs at least one posterior draw".into(),
        ));
    }
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let n_wave = ctx.n_wave();
    let n_draws = states.len();
    let design = ctx.design();
    let sites = ctx.dataset().sites();
    let units = sites.units();

    // Covariate rows, validated up front.
    let mut xrows: Vec<DVector<f64>> = Vec::with_capacity(targets.len());
    for t in targets {
        if t.genus >= ctx.n_genera() {
            return Err(Error::Data(format!(
                "prediction genus {} out of range ({} genera)",
                t.genus,
                ctx.n_genera()
            )));
        }
        let x = match &t.site {
            PredictionSite::Observed(s) => {
                if *s >= ctx.n_sites() {
                    return Err(Error::Data(format!(
                        "prediction site {} out of range ({} sites)",
                        s,
                        ctx.n_sites()
                    )));
                }
                design.x_sites.row(*s).transpose()
            }
            PredictionSite::New { coord, covariates } => {
                if !coord.iter().all(|v| v.is_finite()) {
                    return Err(Error::Data(
                        "prediction coordinates must be finite".into(),
                    ));
                }
                design.standardize_row(covariates)?
            }
        };
        xrows.push(x);
    }

    // Targets whose genus-level site intercept the fit does not carry,
    // grouped by genus so each draw runs one conditional per genus.
    let spatial_intercepts = matches!(
        ctx.config().intercept_mode,
        InterceptMode::GenusSpatial
    );
    let mut krige_groups: BTreeMap<usize, Vec<(usize, [f64; 2])>> = BTreeMap::new();
    if spatial_intercepts {
        for (i, t) in targets.iter().enumerate() {
            let coord = match &t.site {
                PredictionSite::Observed(s) => {
                    if ctx.site_slot(t.genus, *s).is_some() {
                        continue;
                    }
                    sites.coords()[*s]
                }
                PredictionSite::New { coord, .. } => *coord,
            };
            krige_groups.entry(t.genus).or_default().push((i, coord));
        }
    }

    // New coordinates need the space-wavelength surface extended.
    let new_targets: Vec<(usize, [f64; 2])> = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| match &t.site {
            PredictionSite::New { coord, .. } => Some((i, *coord)),
            PredictionSite::Observed(_) => None,
        })
        .collect();
    let new_coords: Vec<[f64; 2]> = new_targets.iter().map(|&(_, c)| c).collect();
    let mut new_pos = vec![usize::MAX; targets.len()];
    for (q, &(i, _)) in new_targets.iter().enumerate() {
        new_pos[i] = q;
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out: Vec<PredictiveCurves> = targets
        .iter()
        .map(|_| PredictiveCurves {
            mean: DMatrix::zeros(n_wave, n_draws),
            noisy: DMatrix::zeros(n_wave, n_draws),
        })
        .collect();

    for (m, state) in states.iter().enumerate() {
        ctx.check_state(state)?;
        let bases = ctx.bases(state)?;
        let sigma = bases.sigma2.map(f64::sqrt);
        let gamma = ctx.gamma_curves(&bases, state);
        let per_genus_gamma = gamma.ncols() > 1;
        let eta_obs = ctx.eta_sites(&bases, state);
        let beta_f = &bases.k_beta * state.coeffs.transpose();

        // Genus-level site intercepts at locations the fit has not seen:
        // one joint conditional draw per genus. A genus with no fitted sites
        // falls back to its marginal prior field.
        let mut alpha_star = vec![0.0; targets.len()];
        for (&g, items) in &krige_groups {
            let query: Vec<[f64; 2]> = items.iter().map(|&(_, c)| c).collect();
            let obs_sites = &design.genus_sites[g];
            let (mean, cov) = if obs_sites.is_empty() {
                let dist = distance_matrix(units, &query);
                let corr = exp_corr_matrix(&dist, state.intercept_decay)?;
                (DVector::zeros(query.len()), corr * state.var_site_intercept)
            } else {
                let observed: Vec<[f64; 2]> =
                    obs_sites.iter().map(|&s| sites.coords()[s]).collect();
                gp_conditional(
                    units,
                    &observed,
                    &state.site_intercepts[g],
                    &query,
                    state.intercept_decay,
                    state.var_site_intercept,
                )?
            };
            let chol = jittered_cholesky(&cov, "predicted site-intercept covariance")?;
            let draw = chol_sample(&mut rng, &mean, &chol);
            for (slot, &(i, _)) in items.iter().enumerate() {
                alpha_star[i] = draw[slot];
            }
        }

        // Space-wavelength surface at the new coordinates.
        let eta_new: Option<DMatrix<f64>> = if new_targets.is_empty() {
            None
        } else {
            Some(match ctx.config().eta_variant {
                EtaVariant::None => DMatrix::zeros(n_wave, new_coords.len()),
                EtaVariant::SpatialConvolution => {
                    let z = state
                        .conv_field
                        .as_ref()
                        .expect("spatial-convolution state carries the field");
                    let mut w = DMatrix::zeros(new_coords.len(), ctx.n_sites());
                    for (q, c) in new_coords.iter().enumerate() {
                        for j in 0..ctx.n_sites() {
                            w[(q, j)] = kernel_value(
                                ctx.config().kernel,
                                distance(units, *c, sites.coords()[j]),
                                state.space_wave_bandwidth,
                            )?;
                        }
                    }
                    z * w.transpose()
                }
                _ => {
                    let r = ctx.rank();
                    let mut w_star = DMatrix::zeros(new_coords.len(), r);
                    for f in 0..r {
                        let vals = state.factors.column(f).into_owned();
                        let (mean, cov) = gp_conditional(
                            units,
                            sites.coords(),
                            &vals,
                            &new_coords,
                            state.factor_decays[f],
                            1.0,
                        )?;
                        let chol =
                            jittered_cholesky(&cov, "predicted factor covariance")?;
                        let draw = chol_sample(&mut rng, &mean, &chol);
                        w_star.set_column(f, &draw);
                    }
                    (&bases.k_eta * &state.loadings) * w_star.transpose()
                }
            })
        };

        for (i, t) in targets.iter().enumerate() {
            let mut col = &beta_f * &xrows[i];
            let g_col = if per_genus_gamma { t.genus } else { 0 };
            col += gamma.column(g_col);
            match &t.site {
                PredictionSite::Observed(s) => col += eta_obs.column(*s),
                PredictionSite::New { .. } => {
                    let surface = eta_new
                        .as_ref()
                        .expect("new targets imply the extended surface");
                    col += surface.column(new_pos[i]);
                }
            }
            let mut level = state.genus_means[t.genus];
            if spatial_intercepts {
                level += match &t.site {
                    PredictionSite::Observed(s) => match ctx.site_slot(t.genus, *s) {
                        Some(slot) => state.site_intercepts[t.genus][slot],
                        None => alpha_star[i],
                    },
                    PredictionSite::New { .. } => alpha_star[i],
                };
            }
            col.add_scalar_mut(level);
            out[i].mean.set_column(m, &col);
            let noisy = DVector::from_fn(n_wave, |tw, _| {
                col[tw] + sigma[tw] * rng.sample::<f64, _>(StandardNormal)
            });
            out[i].noisy.set_column(m, &noisy);
        }
    }
    Ok(out)
}

// --- scoring ------------------------------------------------------------------

/// Continuous ranked probability score of an empirical sample against an
/// observation, through the sorted-sample identity
/// `mean|x - y| - (1/m^2) * sum_j (2j + 1 - m) x_(j)` with `j` zero-based.
pub fn crps_empirical(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("crps needs a nonempty sample".into()));
    }
    if !(y.is_finite() && samples.iter().all(|v| v.is_finite())) {
        return Err(Error::Numeric("crps inputs must be finite".into()));
    }
    let m = samples.len() as f64;
    let mut xs = samples.to_vec();
    xs.sort_unstable_by(f64::total_cmp);
    let mut abs = KahanSum::new();
    let mut pair = KahanSum::new();
    for (j, &x) in xs.iter().enumerate() {
        abs.add((x - y).abs());
        pair.add((2.0 * j as f64 + 1.0 - m) * x);
    }
    Ok(abs.total() / m - pair.total() / (m * m))
}

/// Point and distributional scores over a set of predicted curves, averaged
/// across every (curve, wavelength) cell.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CurveScores {
    /// Mean squared error of the posterior-mean curves.
    pub mse: f64,
    /// Mean absolute error of the posterior-mean curves.
    pub mae: f64,
    /// Mean continuous ranked probability score of the noisy draws.
    pub mcrps: f64,
}

/// Score predictions against observed curves.
pub fn score_predictions(
    preds: &[PredictiveCurves],
    actual: &[DVector<f64>],
) -> Result<CurveScores> {
    if preds.len() != actual.len() {
        return Err(Error::dim("scored curves", preds.len(), actual.len()));
    }
    if preds.is_empty() {
        return Err(Error::Data("scoring needs at least one curve".into()));
    }
    let mut se = KahanSum::new();
    let mut ae = KahanSum::new();
    let mut cr = KahanSum::new();
    let mut cells = 0usize;
    for (p, y) in preds.iter().zip(actual) {
        if y.len() != p.mean.nrows() {
            return Err(Error::dim("actual curve length", p.mean.nrows(), y.len()));
        }
        let point = p.point();
        for t in 0..y.len() {
            let e = point[t] - y[t];
            se.add(e * e);
            ae.add(e.abs());
            let row: Vec<f64> = p.noisy.row(t).iter().copied().collect();
            cr.add(crps_empirical(&row, y[t])?);
            cells += 1;
        }
    }
    let n = cells as f64;
    Ok(CurveScores {
        mse: se.total() / n,
        mae: ae.total() / n,
        mcrps: cr.total() / n,
    })
}

/// Fraction of held-out values inside the central `level` predictive
/// interval, pooled over every (curve, wavelength) cell.
pub fn interval_coverage(
    preds: &[PredictiveCurves],
    actual: &[DVector<f64>],
    level: f64,
) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Data(format!(
            "coverage level must lie in (0, 1), got {level}"
        )));
    }
    if preds.len() != actual.len() {
        return Err(Error::dim("covered curves", preds.len(), actual.len()));
    }
    if preds.is_empty() {
        return Err(Error::Data("coverage needs at least one curve".into()));
    }
    let lo_q = (1.0 - level) / 2.0;
    let hi_q = 1.0 - lo_q;
    let mut inside = 0usize;
    let mut cells = 0usize;
    for (p, y) in preds.iter().zip(actual) {
        if y.len() != p.noisy.nrows() {
            return Err(Error::dim("actual curve length", p.noisy.nrows(), y.len()));
        }
        for t in 0..y.len() {
            let row: Vec<f64> = p.noisy.row(t).iter().copied().collect();
            let lo = quantile(&row, lo_q)?;
            let hi = quantile(&row, hi_q)?;
            if y[t] >= lo && y[t] <= hi {
                inside += 1;
            }
            cells += 1;
        }
    }
    Ok(inside as f64 / cells as f64)
}

/// Each value divided by the smallest, so 1.0 marks the best model.
pub fn relative_to_best(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Data("relative scores need at least one value".into()));
    }
    let best = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !best.is_finite() || best <= 0.0 {
        return Err(Error::Numeric(format!(
            "relative scores need positive finite entries, smallest was {best}"
        )));
    }
    Ok(values.iter().map(|v| v / best).collect())
}

// --- leave-out selection --------------------------------------------------------

/// Counts of records still in the training complement as records are marked
/// held out, with the feasibility rule for adding one more.
struct LeaveOutLedger {
    chosen: Vec<usize>,
    site_rem: Vec<usize>,
    genus_rem: Vec<usize>,
    cell_rem: BTreeMap<(usize, usize), usize>,
}

impl LeaveOutLedger {
    fn new(ds: &SpectraDataset) -> Self {
        let mut site_rem = vec![0usize; ds.sites().len()];
        let mut genus_rem = vec![0usize; ds.n_genera()];
        let mut cell_rem: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for r in ds.records() {
            site_rem[r.site] += 1;
            genus_rem[r.genus] += 1;
            *cell_rem.entry((r.genus, r.site)).or_insert(0) += 1;
        }
        Self {
            chosen: Vec::new(),
            site_rem,
            genus_rem,
            cell_rem,
        }
    }

    /// Whether record `k` can be held out without stranding it or any record
    /// already chosen: each held-out record must leave one training record at
    /// its site and one training record of its genus at another site.
    fn admits(&self, ds: &SpectraDataset, k: usize) -> bool {
        let r = &ds.records()[k];
        let cell = self.cell_rem[&(r.genus, r.site)];
        if self.site_rem[r.site] < 2 || self.genus_rem[r.genus] - cell < 1 {
            return false;
        }
        // Removing k also shrinks the elsewhere-count of earlier picks of the
        // same genus at other sites.
        self.chosen.iter().all(|&h| {
            let rh = &ds.records()[h];
            rh.genus != r.genus
                || rh.site == r.site
                || self.genus_rem[r.genus] - 1 - self.cell_rem[&(r.genus, rh.site)] >= 1
        })
    }

    fn remove(&mut self, ds: &SpectraDataset, k: usize) {
        let r = &ds.records()[k];
        self.site_rem[r.site] -= 1;
        self.genus_rem[r.genus] -= 1;
        *self.cell_rem.get_mut(&(r.genus, r.site)).unwrap() -= 1;
        self.chosen.push(k);
    }
}

/// Records that can be held out on their own: at least one other record at
/// the same site, and at least one same-genus record at another site.
pub fn eligible_records(ds: &SpectraDataset) -> Vec<usize> {
    let ledger = LeaveOutLedger::new(ds);
    (0..ds.n_records())
        .filter(|&k| ledger.admits(ds, k))
        .collect()
}

/// Choose `n` held-out records uniformly at random among the eligible,
/// keeping the joint selection feasible. Deterministic given `seed`; the
/// result is sorted.
pub fn select_holdouts(ds: &SpectraDataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Data("holdout selection needs n >= 1".into()));
    }
    let mut pool = eligible_records(ds);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut ledger = LeaveOutLedger::new(ds);
    for k in pool {
        if ledger.chosen.len() == n {
            break;
        }
        if ledger.admits(ds, k) {
            ledger.remove(ds, k);
        }
    }
    if ledger.chosen.len() < n {
        return Err(Error::Data(format!(
            "holdout selection found only {} feasible records of {} requested",
            ledger.chosen.len(),
            n
        )));
    }
    let mut chosen = ledger.chosen;
    chosen.sort_unstable();
    Ok(chosen)
}

/// Partition eligible records into `k` folds, each jointly feasible as a
/// held-out set. Eligible records no fold can absorb stay in every training
/// set. Deterministic given `seed`; folds are sorted internally.
pub fn make_folds(ds: &SpectraDataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Data(
            "cross-validation needs at least two folds".into(),
        ));
    }
    let mut pool = eligible_records(ds);
    if pool.len() < k {
        return Err(Error::Data(format!(
            "{} eligible records cannot fill {} folds",
            pool.len(),
            k
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut ledgers: Vec<LeaveOutLedger> = (0..k).map(|_| LeaveOutLedger::new(ds)).collect();
    for rec in pool {
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&f| (ledgers[f].chosen.len(), f));
        for f in order {
            if ledgers[f].admits(ds, rec) {
                ledgers[f].remove(ds, rec);
                break;
            }
        }
    }
    let folds: Vec<Vec<usize>> = ledgers
        .into_iter()
        .map(|l| {
            let mut v = l.chosen;
            v.sort_unstable();
            v
        })
        .collect();
    if folds.iter().any(|f| f.is_empty()) {
        return Err(Error::Data(
            "a cross-validation fold came out empty; use fewer folds".into(),
        ));
    }
    Ok(folds)
}

/// The sorted complement of `holdout` within `n_records` records.
pub fn complement(n_records: usize, holdout: &[usize]) -> Result<Vec<usize>> {
    let mut mask = vec![false; n_records];
    for &k in holdout {
        if k >= n_records {
            return Err(Error::Data(format!(
                "held-out record {k} out of range ({n_records} records)"
            )));
        }
        if mask[k] {
            return Err(Error::Data(format!("held-out record {k} listed twice")));
        }
        mask[k] = true;
    }
    Ok((0..n_records).filter(|&k| !mask[k]).collect())
}

// --- model comparison -----------------------------------------------------------

/// A labeled model configuration entered into a comparison.
#[derive(Debug, Clone)]
pub struct ModelEntry {
    /// Display name in reports.
    pub label: String,
    /// The configuration to fit.
    pub config: ModelConfig,
}

/// One model's row in a comparison report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ModelScore {
    /// The model's label.
    pub label: String,
    /// Held-out scores.
    pub scores: CurveScores,
    /// Empirical coverage of the central 90% predictive interval.
    pub coverage90: f64,
    /// Deviance information criterion of the training fit (averaged over
    /// folds when pooling).
    pub dic: f64,
}

/// Held-out comparison of several model configurations on a common split.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ComparisonReport {
    /// The held-out record indices (concatenated fold order when pooled).
    pub holdout: Vec<usize>,
    /// One row per model, in input order.
    pub models: Vec<ModelScore>,
}

impl ComparisonReport {
    /// Scores divided by each metric's best value, so 1.0 marks the winner.
    pub fn relative(&self) -> Result<Vec<CurveScores>> {
        let mse = relative_to_best(&self.models.iter().map(|m| m.scores.mse).collect::<Vec<_>>())?;
        let mae = relative_to_best(&self.models.iter().map(|m| m.scores.mae).collect::<Vec<_>>())?;
        let mcrps =
            relative_to_best(&self.models.iter().map(|m| m.scores.mcrps).collect::<Vec<_>>())?;
        Ok((0..self.models.len())
            .map(|i| CurveScores {
                mse: mse[i],
                mae: mae[i],
                mcrps: mcrps[i],
            })
            .collect())
    }
}

fn holdout_targets(
    ds: &SpectraDataset,
    holdout: &[usize],
) -> (Vec<PredictionTarget>, Vec<DVector<f64>>) {
    let targets = holdout
        .iter()
        .map(|&k| {
            let r = &ds.records()[k];
            PredictionTarget {
                genus: r.genus,
                site: PredictionSite::Observed(r.site),
            }
        })
        .collect();
    let actual = holdout
        .iter()
        .map(|&k| ds.responses().column(k).into_owned())
        .collect();
    (targets, actual)
}

/// Fit every model on the training complement of `holdout` and score its
/// predictions of the held-out spectra.
pub fn holdout_compare(
    ds: &SpectraDataset,
    models: &[ModelEntry],
    holdout: &[usize],
    predict_seed: u64,
    progress: Option<usize>,
) -> Result<ComparisonReport> {
    if models.is_empty() {
        return Err(Error::Data("comparison needs at least one model".into()));
    }
    if holdout.is_empty() {
        return Err(Error::Data("comparison needs a nonempty holdout".into()));
    }
    let train = complement(ds.n_records(), holdout)?;
    if train.is_empty() {
        return Err(Error::Data(
            "holding out every record leaves nothing to fit".into(),
        ));
    }
    let sub = ds.subset_records(&train)?;
    let (targets, actual) = holdout_targets(ds, holdout);
    let opts = RunOptions {
        checkpoint: None,
        progress,
    };
    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        let ctx = FitContext::new(sub.clone(), m.config.clone())?;
        let fit = run_chain(&ctx, &opts)?;
        let preds = predict(&ctx, &fit.kept, &targets, predict_seed)?;
        let scores = score_predictions(&preds, &actual)?;
        let coverage90 = interval_coverage(&preds, &actual, 0.90)?;
        rows.push(ModelScore {
            label: m.label.clone(),
            scores,
            coverage90,
            dic: fit.dic.dic,
        });
    }
    Ok(ComparisonReport {
        holdout: holdout.to_vec(),
        models: rows,
    })
}

/// Pooled cross-validation: each fold is held out in turn, predictions are
/// pooled across folds before scoring, and DIC is averaged over the fold
/// fits.
pub fn kfold_compare(
    ds: &SpectraDataset,
    models: &[ModelEntry],
    folds: &[Vec<usize>],
    predict_seed: u64,
    progress: Option<usize>,
) -> Result<ComparisonReport> {
    if models.is_empty() {
        return Err(Error::Data("comparison needs at least one model".into()));
    }
    if folds.is_empty() || folds.iter().any(|f| f.is_empty()) {
        return Err(Error::Data(
            "cross-validation needs nonempty folds".into(),
        ));
    }
    let mut seen = vec![false; ds.n_records()];
    for &k in folds.iter().flatten() {
        if k >= ds.n_records() {
            return Err(Error::Data(format!(
                "held-out record {k} out of range ({} records)",
                ds.n_records()
            )));
        }
        if seen[k] {
            return Err(Error::Data(format!(
                "record {k} appears in more than one fold"
            )));
        }
        seen[k] = true;
    }
    let opts = RunOptions {
        checkpoint: None,
        progress,
    };
    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        let mut preds_all: Vec<PredictiveCurves> = Vec::new();
        let mut actual_all: Vec<DVector<f64>> = Vec::new();
        let mut dic_sum = 0.0;
        for fold in folds {
            let train = complement(ds.n_records(), fold)?;
            let sub = ds.subset_records(&train)?;
            let ctx = FitContext::new(sub, m.config.clone())?;
            let fit = run_chain(&ctx, &opts)?;
            let (targets, actual) = holdout_targets(ds, fold);
            let preds = predict(&ctx, &fit.kept, &targets, predict_seed)?;
            preds_all.extend(preds);
            actual_all.extend(actual);
            dic_sum += fit.dic.dic;
        }
        let scores = score_predictions(&preds_all, &actual_all)?;
        let coverage90 = interval_coverage(&preds_all, &actual_all, 0.90)?;
        rows.push(ModelScore {
            label: m.label.clone(),
            scores,
            coverage90,
            dic: dic_sum / folds.len() as f64,
        });
    }
    Ok(ComparisonReport {
        holdout: folds.iter().flatten().copied().collect(),
        models: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::config::{GammaMode, IgPrior, KnotSpec};
    use crate::data::WavelengthGrid;
    use crate::synth::{draw_truth, simulate, SynthSpec};

    fn small_grid() -> WavelengthGrid {
        WavelengthGrid::new(450.0, 950.0, 8).unwrap()
    }

    fn base_config() -> ModelConfig {
        let mut cfg = ModelConfig {
            eta_variant: EtaVariant::Factor { r: 2 },
            beta_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 105.0 },
            gamma_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 131.25 },
            eta_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 105.0 },
            sigma_knots: KnotSpec { lo: 440.0, hi: 960.0, spacing: 260.0 },
            ..ModelConfig::default()
        };
        cfg.mcmc.n_iter = 40;
        cfg.mcmc.n_burn = 20;
        cfg.mcmc.n_keep = 10;
        cfg.mcmc.seed = 5;
        cfg
    }

    fn fixture(
        seed: u64,
        n_records: usize,
        edit: impl FnOnce(&mut ModelConfig),
    ) -> (FitContext, ChainState) {
        let mut cfg = base_config();
        edit(&mut cfg);
        let spec = SynthSpec::new(6, 3, n_records, small_grid(), cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let out = simulate(&spec, &mut rng).unwrap();
        let state = draw_truth(&out.context, &mut rng).unwrap();
        (out.context, state)
    }

    // --- crps -----------------------------------------------------------------

    #[test]
    fn crps_matches_the_pairwise_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let samples: Vec<f64> = (0..37)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal) + 0.3)
            .collect();
        for y in [-1.5, 0.0, 0.31, 4.0] {
            let fast = crps_empirical(&samples, y).unwrap();
            let m = samples.len() as f64;
            let abs: f64 = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
            let mut pair = 0.0;
            for a in &samples {
                for b in &samples {
                    pair += (a - b).abs();
                }
            }
            let slow = abs - pair / (2.0 * m * m);
            assert!(
                (fast - slow).abs() <= 1e-12 * slow.abs().max(1.0),
                "crps mismatch at y = {y}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn crps_rewards_sharp_calibrated_samples() {
        let point = vec![1.7; 5];
        let got = crps_empirical(&point, 0.4).unwrap();
        assert!((got - 1.3).abs() < 1e-14, "point mass should score |x - y|");

        let sharp: Vec<f64> = (0..100).map(|i| 0.4 + 0.01 * (i as f64 - 49.5)).collect();
        let diffuse: Vec<f64> = (0..100).map(|i| 0.4 + 0.5 * (i as f64 - 49.5)).collect();
        let s = crps_empirical(&sharp, 0.4).unwrap();
        let d = crps_empirical(&diffuse, 0.4).unwrap();
        assert!(s < d, "a sharper sample at the truth must score lower");

        assert!(crps_empirical(&[], 0.0).is_err());
        assert!(crps_empirical(&[f64::NAN], 0.0).is_err());
    }

    // --- leave-out selection -----------------------------------------------------

    /// Direct recount of the two holdout conditions for record `k` against a
    /// training set given as a mask.
    fn feasible_against(ds: &SpectraDataset, k: usize, in_train: &[bool]) -> bool {
        let r = &ds.records()[k];
        let mut same_site = 0;
        let mut genus_elsewhere = 0;
        for (j, rj) in ds.records().iter().enumerate() {
            if !in_train[j] {
                continue;
            }
            if rj.site == r.site {
                same_site += 1;
            }
            if rj.genus == r.genus && rj.site != r.site {
                genus_elsewhere += 1;
            }
        }
        same_site >= 1 && genus_elsewhere >= 1
    }

    #[test]
    fn eligibility_matches_a_direct_recount() {
        let (ctx, _) = fixture(7, 30, |_| {});
        let ds = ctx.dataset();
        let eligible = eligible_records(ds);
        for k in 0..ds.n_records() {
            let mut in_train = vec![true; ds.n_records()];
            in_train[k] = false;
            let expect = feasible_against(ds, k, &in_train);
            assert_eq!(
                eligible.contains(&k),
                expect,
                "record {k} eligibility disagrees with the recount"
            );
        }
    }

    #[test]
    fn holdout_selection_is_feasible_and_deterministic() {
        let (ctx, _) = fixture(11, 40, |_| {});
        let ds = ctx.dataset();
        let chosen = select_holdouts(ds, 8, 3).unwrap();
        assert_eq!(chosen.len(), 8);
        assert!(chosen.windows(2).all(|w| w[0] < w[1]), "sorted and unique");

        let mut in_train = vec![true; ds.n_records()];
        for &k in &chosen {
            in_train[k] = false;
        }
        for &k in &chosen {
            assert!(
                feasible_against(ds, k, &in_train),
                "held-out record {k} is stranded by the joint selection"
            );
        }
        assert_eq!(chosen, select_holdouts(ds, 8, 3).unwrap());
        assert!(select_holdouts(ds, ds.n_records(), 3).is_err());
    }

    #[test]
    fn folds_are_disjoint_and_each_is_feasible() {
        let (ctx, _) = fixture(13, 36, |_| {});
        let ds = ctx.dataset();
        let folds = make_folds(ds, 4, 9).unwrap();
        assert_eq!(folds.len(), 4);

        let eligible = eligible_records(ds);
        let mut seen = vec![false; ds.n_records()];
        for fold in &folds {
            assert!(!fold.is_empty());
            let mut in_train = vec![true; ds.n_records()];
            for &k in fold {
                assert!(!seen[k], "record {k} appears in two folds");
                seen[k] = true;
                assert!(eligible.contains(&k));
                in_train[k] = false;
            }
            for &k in fold {
                assert!(
                    feasible_against(ds, k, &in_train),
                    "fold strands record {k}"
                );
            }
        }
    }

    #[test]
    fn complement_validates_and_inverts() {
        assert_eq!(complement(5, &[1, 3]).unwrap(), vec![0, 2, 4]);
        assert!(complement(5, &[5]).is_err());
        assert!(complement(5, &[2, 2]).is_err());
    }

    // --- prediction -----------------------------------------------------------

    #[test]
    fn prediction_matches_the_training_surface_at_an_observed_cell() {
        let (ctx, state) = fixture(17, 24, |_| {});
        let surface = ctx.mean_surface(&state).unwrap();
        let k = 5;
        let r = &ctx.dataset().records()[k];
        let targets = [PredictionTarget {
            genus: r.genus,
            site: PredictionSite::Observed(r.site),
        }];
        let states = [state];
        let preds = predict(&ctx, &states, &targets, 77).unwrap();
        assert_eq!(preds.len(), 1);
        let got = preds[0].mean.column(0);
        let want = surface.column(k);
        for t in 0..ctx.n_wave() {
            assert!(
                (got[t] - want[t]).abs() <= 1e-10 * want[t].abs().max(1.0),
                "mean curve differs from the fitted surface at t = {t}"
            );
        }
        let noise = (preds[0].noisy.column(0) - got).norm();
        assert!(noise > 0.0, "noisy draws must differ from the mean");
    }

    #[test]
    fn unseen_cells_follow_the_intercept_conditional() {
        let (ctx_full, _) = fixture(19, 30, |cfg| {
            cfg.eta_variant = EtaVariant::None;
            cfg.gamma_mode = GammaMode::Global;
        });
        let ds = ctx_full.dataset();

        // Drop every record of one cell whose genus and site both survive.
        let mut pick = None;
        'outer: for k in eligible_records(ds) {
            let r = &ds.records()[k];
            let cell: Vec<usize> = ds
                .records()
                .iter()
                .enumerate()
                .filter(|(_, rj)| rj.genus == r.genus && rj.site == r.site)
                .map(|(j, _)| j)
                .collect();
            let mut in_train = vec![true; ds.n_records()];
            for &j in &cell {
                in_train[j] = false;
            }
            for &j in &cell {
                if !feasible_against(ds, j, &in_train) {
                    continue 'outer;
                }
            }
            pick = Some((r.genus, r.site, cell));
            break;
        }
        let (g, s, cell) = pick.expect("the fixture should offer a droppable cell");
        let train: Vec<usize> = (0..ds.n_records()).filter(|k| !cell.contains(k)).collect();
        let sub = ds.subset_records(&train).unwrap();
        let ctx = FitContext::new(sub, ctx_full.config().clone()).unwrap();
        assert!(ctx.site_slot(g, s).is_none(), "the cell must be unseen");

        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let state = draw_truth(&ctx, &mut rng).unwrap();
        let n_draws = 4000;
        let states = vec![state.clone(); n_draws];
        let targets = [PredictionTarget {
            genus: g,
            site: PredictionSite::Observed(s),
        }];
        let preds = predict(&ctx, &states, &targets, 29).unwrap();

        // Deterministic part of the curve, without the site intercept.
        let bases = ctx.bases(&state).unwrap();
        let x = ctx.design().x_sites.row(s).transpose();
        let det = (&bases.k_beta * state.coeffs.transpose()) * x
            + &bases.k_gamma * &state.wave_knots;
        let alpha: Vec<f64> = (0..n_draws)
            .map(|m| preds[0].mean[(0, m)] - det[0] - state.genus_means[g])
            .collect();

        // The conditional the draws should follow.
        let sites = ctx.dataset().sites();
        let observed: Vec<[f64; 2]> = ctx.design().genus_sites[g]
            .iter()
            .map(|&j| sites.coords()[j])
            .collect();
        let (mean, cov) = gp_conditional(
            sites.units(),
            &observed,
            &state.site_intercepts[g],
            &[sites.coords()[s]],
            state.intercept_decay,
            state.var_site_intercept,
        )
        .unwrap();

        let m = n_draws as f64;
        let avg = alpha.iter().sum::<f64>() / m;
        let var = alpha.iter().map(|a| (a - avg).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (cov[(0, 0)] / m).sqrt();
        assert!(
            (avg - mean[0]).abs() <= 4.0 * se,
            "kriged mean {avg} vs conditional {} (se {se})",
            mean[0]
        );
        let ratio = var / cov[(0, 0)];
        assert!(
            (0.85..=1.15).contains(&ratio),
            "kriged variance ratio {ratio} strays from 1"
        );
    }

    #[test]
    fn convolution_surfaces_extend_exactly_to_new_sites() {
        let (ctx, state) = fixture(31, 24, |cfg| {
            cfg.eta_variant = EtaVariant::SpatialConvolution;
            cfg.intercept_mode = InterceptMode::Genus;
        });
        let sites = ctx.dataset().sites();
        let coord = [37.0, 84.0];
        let raw = vec![0.4, -1.2];
        let targets = [PredictionTarget {
            genus: 1,
            site: PredictionSite::New {
                coord,
                covariates: raw.clone(),
            },
        }];
        let states = [state.clone()];
        let preds = predict(&ctx, &states, &targets, 3).unwrap();

        let bases = ctx.bases(&state).unwrap();
        let x = ctx.design().standardize_row(&raw).unwrap();
        let mut want = (&bases.k_beta * state.coeffs.transpose()) * x
            + &bases.k_gamma * &state.wave_knots;
        let z = state.conv_field.as_ref().unwrap();
        let mut w = DVector::zeros(ctx.n_sites());
        for j in 0..ctx.n_sites() {
            w[j] = kernel_value(
                ctx.config().kernel,
                distance(sites.units(), coord, sites.coords()[j]),
                state.space_wave_bandwidth,
            )
            .unwrap();
        }
        want += z * w;
        want.add_scalar_mut(state.genus_means[1]);

        let got = preds[0].mean.column(0);
        for t in 0..ctx.n_wave() {
            assert!(
                (got[t] - want[t]).abs() <= 1e-10 * want[t].abs().max(1.0),
                "convolution extension differs at t = {t}"
            );
        }
    }

    #[test]
    fn factor_fields_interpolate_near_sites_and_revert_far_away() {
        let (ctx, state) = fixture(37, 24, |cfg| {
            cfg.eta_variant = EtaVariant::SpatialOnly;
            cfg.intercept_mode = InterceptMode::Genus;
            cfg.gamma_mode = GammaMode::None;
        });
        let sites = ctx.dataset().sites();
        let raw = vec![0.0, 0.0];
        let near = {
            let c = sites.coords()[0];
            [c[0] + 1e-9, c[1]]
        };
        let far = [1.0e5, 1.0e5];
        let targets = [
            PredictionTarget {
                genus: 0,
                site: PredictionSite::New { coord: near, covariates: raw.clone() },
            },
            PredictionTarget {
                genus: 0,
                site: PredictionSite::New { coord: far, covariates: raw.clone() },
            },
        ];
        let n_draws = 3000;
        let states = vec![state.clone(); n_draws];
        let preds = predict(&ctx, &states, &targets, 101).unwrap();

        let bases = ctx.bases(&state).unwrap();
        let x = ctx.design().standardize_row(&raw).unwrap();
        let det = ((&bases.k_beta * state.coeffs.transpose()) * x)
            .add_scalar(state.genus_means[0]);
        let loading = state.loadings[(0, 0)];

        // Next to a fitted site the field reproduces that site's factor.
        let want = det[0] + loading * state.factors[(0, 0)];
        for m in 0..n_draws {
            assert!(
                (preds[0].mean[(0, m)] - want).abs() <= 1e-4 * want.abs().max(1.0),
                "near-duplicate site should pin the factor (draw {m})"
            );
        }

        // Far from every site the field reverts to its unit-variance prior.
        let eps: Vec<f64> = (0..n_draws)
            .map(|m| (preds[1].mean[(0, m)] - det[0]) / loading)
            .collect();
        let m = n_draws as f64;
        let avg = eps.iter().sum::<f64>() / m;
        let var = eps.iter().map(|e| (e - avg).powi(2)).sum::<f64>() / (m - 1.0);
        assert!(
            avg.abs() <= 4.0 / m.sqrt(),
            "far-field factor mean {avg} strays from 0"
        );
        assert!(
            (0.85..=1.15).contains(&var),
            "far-field factor variance {var} strays from 1"
        );
    }

    // --- scoring arithmetic -----------------------------------------------------

    #[test]
    fn scores_and_relatives_follow_the_hand_calculation() {
        let mean = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 5.0]);
        let preds = [PredictiveCurves {
            mean: mean.clone(),
            noisy: mean,
        }];
        let actual = [DVector::from_vec(vec![1.0, 6.0])];
        let scores = score_predictions(&preds, &actual).unwrap();
        assert!((scores.mse - 2.5).abs() < 1e-14);
        assert!((scores.mae - 1.5).abs() < 1e-14);
        assert!((scores.mcrps - 1.0).abs() < 1e-14);

        let rel = relative_to_best(&[2.0, 1.0, 4.0]).unwrap();
        assert_eq!(rel, vec![2.0, 1.0, 4.0]);
        assert!(relative_to_best(&[]).is_err());
        assert!(relative_to_best(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn coverage_counts_the_central_interval() {
        let n = 100;
        let row: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let noisy = DMatrix::from_fn(1, n, |_, j| row[j]);
        let preds = [PredictiveCurves {
            mean: noisy.clone(),
            noisy,
        }];
        assert_eq!(
            interval_coverage(&preds, &[DVector::from_vec(vec![50.0])], 0.9).unwrap(),
            1.0
        );
        assert_eq!(
            interval_coverage(&preds, &[DVector::from_vec(vec![99.9])], 0.9).unwrap(),
            0.0
        );
        assert!(interval_coverage(&preds, &[DVector::from_vec(vec![0.0])], 1.0).is_err());
    }

    // --- end-to-end comparison ----------------------------------------------------

    #[test]
    fn holdout_comparison_fits_scores_and_ranks() {
        let mut cfg = base_config();
        cfg.mcmc.n_iter = 50;
        cfg.mcmc.n_burn = 25;
        cfg.mcmc.n_keep = 5;
        cfg.priors.var_loading = IgPrior { shape: 11.0, scale: 10.0 };
        let spec = SynthSpec::new(6, 3, 26, small_grid(), cfg.clone());
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let out = simulate(&spec, &mut rng).unwrap();
        let ds = out.context.dataset();

        let mut none_cfg = cfg.clone();
        none_cfg.eta_variant = EtaVariant::None;
        let mut spatial_cfg = cfg;
        spatial_cfg.eta_variant = EtaVariant::SpatialOnly;
        let models = [
            ModelEntry { label: "independent".into(), config: none_cfg },
            ModelEntry { label: "spatial".into(), config: spatial_cfg },
        ];

        let holdout = select_holdouts(ds, 4, 1).unwrap();
        let report = holdout_compare(ds, &models, &holdout, 7, None).unwrap();
        assert_eq!(report.models.len(), 2);
        for row in &report.models {
            assert!(row.scores.mse.is_finite() && row.scores.mse > 0.0);
            assert!(row.scores.mae.is_finite() && row.scores.mae > 0.0);
            assert!(row.scores.mcrps.is_finite() && row.scores.mcrps > 0.0);
            assert!((0.0..=1.0).contains(&row.coverage90));
            assert!(row.dic.is_finite());
        }
        let rel = report.relative().unwrap();
        assert!(rel.iter().any(|r| r.mcrps == 1.0), "someone must win");
        assert!(rel.iter().all(|r| r.mcrps >= 1.0));
        serde_json::to_string(&report).unwrap();
    }

    #[test]
    fn kfold_comparison_pools_across_folds() {
        let mut cfg = base_config();
        cfg.eta_variant = EtaVariant::None;
        cfg.mcmc.n_iter = 30;
        cfg.mcmc.n_burn = 15;
        cfg.mcmc.n_keep = 5;
        let spec = SynthSpec::new(5, 2, 20, small_grid(), cfg.clone());
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        let out = simulate(&spec, &mut rng).unwrap();
        let ds = out.context.dataset();

        let folds = make_folds(ds, 2, 3).unwrap();
        let models = [ModelEntry { label: "independent".into(), config: cfg }];
        let report = kfold_compare(ds, &models, &folds, 9, None).unwrap();
        assert_eq!(report.holdout.len(), folds[0].len() + folds[1].len());
        let row = &report.models[0];
        assert!(row.scores.mcrps.is_finite() && row.scores.mcrps > 0.0);
        assert!(row.dic.is_finite());
    }
}
