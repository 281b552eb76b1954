//! `orthogonalize`: project stored draws off the covariate span and report
//! unconfounded coefficients, variance shares, and covariate importance.

use std::fmt::Write as _;
use std::path::PathBuf;

use nalgebra::DMatrix;
use specwave::config::config_hash;
use specwave::error::{Error, Result};
use specwave::mcmc::samples::read_draws;
use specwave::ortho::{
    covariate_importance, unconfound, variance_decomposition, GammaTreatment, TERM_LABELS,
};
use specwave::stats::quantile;
use specwave::FitContext;

use crate::inputs::{fmt_f64, load_config, DataArgs};
use crate::manifest::RunRecorder;

/// Correct stored draws for spatial confounding and decompose the variance.
#[derive(Debug, clap::Args)]
pub struct OrthogonalizeArgs {
    /// The training data the samples were fit on.
    #[command(flatten)]
    data: DataArgs,

    /// Samples directory written by `fit`.
    #[arg(long, value_name = "DIR")]
    samples: PathBuf,

    /// The configuration the samples were drawn under.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Treat the shared wavelength effect as fixed: a ones column joins the
    /// projection design and the corrected coefficients gain a leading
    /// intercept-curve row.
    #[arg(long)]
    gamma_fixed: bool,

    /// Decompose the raw (uncorrected) terms instead of the projected ones.
    #[arg(long)]
    uncorrected: bool,
}

pub fn run(args: &OrthogonalizeArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let mut rec = RunRecorder::new("orthogonalize", 0, &args.out)?;
    rec.config(&cfg.display_label(), &cfg);

    let archive = rec.stage("load", || read_draws(&args.samples))?;
    if archive.config_hash != config_hash(&cfg) {
        return Err(Error::Config(format!(
            "--config does not match the configuration the samples were drawn \
             under (hash {} vs {})",
            config_hash(&cfg),
            archive.config_hash
        )));
    }
    let ds = args.data.load()?;
    let ctx = FitContext::new(ds, cfg)?;
    let gamma = if args.gamma_fixed {
        GammaTreatment::Fixed
    } else {
        GammaTreatment::Random
    };

    let bstars = rec.stage("unconfound", || unconfound(&ctx, &archive.draws, gamma))?;
    rec.write_file("bstar_draws.csv", &bstar_csv(&ctx, &bstars, gamma))?;

    let decomp = rec.stage("decompose", || {
        variance_decomposition(&ctx, &archive.draws, !args.uncorrected, gamma)
    })?;
    let mut overall = String::from("draw,term,share\n");
    for m in 0..decomp.proportions.nrows() {
        for (j, term) in TERM_LABELS.iter().enumerate() {
            let _ = writeln!(overall, "{m},{term},{}", fmt_f64(decomp.proportions[(m, j)]));
        }
    }
    rec.write_file("decomposition_overall.csv", &overall)?;

    let q05 = decomp.curve_quantiles(0.05)?;
    let q50 = decomp.curve_quantiles(0.50)?;
    let q95 = decomp.curve_quantiles(0.95)?;
    let n_draws = decomp.curves.len() as f64;
    let wave = ctx.wave_values();
    let mut by_wave = String::from("wavelength,term,mean,q05,q50,q95\n");
    for t in 0..wave.len() {
        for (j, term) in TERM_LABELS.iter().enumerate() {
            let mean = decomp.curves.iter().map(|c| c[(t, j)]).sum::<f64>() / n_draws;
            let _ = writeln!(
                by_wave,
                "{},{term},{},{},{},{}",
                fmt_f64(wave[t]),
                fmt_f64(mean),
                fmt_f64(q05[(t, j)]),
                fmt_f64(q50[(t, j)]),
                fmt_f64(q95[(t, j)])
            );
        }
    }
    rec.write_file("decomposition_wavelength.csv", &by_wave)?;

    let raw_imp = covariate_importance(&ctx, &archive.draws, None)?;
    let ortho_imp = covariate_importance(&ctx, &archive.draws, Some(&bstars))?;
    let mut importance = String::from("treatment,covariate,mean,sd,q05,q50,q95\n");
    append_importance(&mut importance, "raw", &covariate_labels(&ctx, GammaTreatment::Random), &raw_imp)?;
    append_importance(
        &mut importance,
        "orthogonalized",
        &covariate_labels(&ctx, gamma),
        &ortho_imp,
    )?;
    rec.write_file("importance.csv", &importance)?;
    rec.finish()?;

    let shares = decomp.mean_proportions();
    let pretty: Vec<String> = TERM_LABELS
        .iter()
        .zip(shares)
        .map(|(t, s)| format!("{t} {:.1}%", 100.0 * s))
        .collect();
    println!(
        "orthogonalize: {} draws corrected ({}); variance shares: {}",
        bstars.len(),
        if args.uncorrected { "raw decomposition" } else { "projected decomposition" },
        pretty.join(", ")
    );
    Ok(())
}

/// Row labels of a coefficient matrix under a treatment: the covariate
/// names, preceded by the intercept-curve row when the wavelength effect is
/// treated as fixed.
fn covariate_labels(ctx: &FitContext, gamma: GammaTreatment) -> Vec<String> {
    let names = ctx.dataset().sites().covariate_names();
    let mut labels = Vec::with_capacity(names.len() + 1);
    if gamma == GammaTreatment::Fixed {
        labels.push("(intercept)".to_string());
    }
    labels.extend(names.iter().cloned());
    labels
}

/// Long-format corrected coefficient draws, one row per (draw, row, knot).
fn bstar_csv(ctx: &FitContext, bstars: &[DMatrix<f64>], gamma: GammaTreatment) -> String {
    let labels = covariate_labels(ctx, gamma);
    let knots = ctx.beta_knots();
    let mut out = String::from("draw,covariate,knot,value\n");
    for (m, b) in bstars.iter().enumerate() {
        for (row, label) in labels.iter().enumerate() {
            for (j, knot) in knots.iter().enumerate() {
                let _ = writeln!(out, "{m},{label},{},{}", fmt_f64(*knot), fmt_f64(b[(row, j)]));
            }
        }
    }
    out
}

/// Summarize an importance matrix (draws x covariates) one covariate per row.
fn append_importance(
    out: &mut String,
    treatment: &str,
    labels: &[String],
    imp: &DMatrix<f64>,
) -> Result<()> {
    if labels.len() != imp.ncols() {
        return Err(Error::dim("importance columns", labels.len(), imp.ncols()));
    }
    let n = imp.nrows() as f64;
    for (j, label) in labels.iter().enumerate() {
        let col: Vec<f64> = imp.column(j).iter().copied().collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        let _ = writeln!(
            out,
            "{treatment},{label},{},{},{},{},{}",
            fmt_f64(mean),
            fmt_f64(var.sqrt()),
            fmt_f64(quantile(&col, 0.05)?),
            fmt_f64(quantile(&col, 0.50)?),
            fmt_f64(quantile(&col, 0.95)?)
        );
    }
    Ok(())
}
