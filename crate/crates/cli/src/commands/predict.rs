//! `predict`: composition-sample predictive curves for listed targets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use specwave::config::config_hash;
use specwave::data::SpectraDataset;
use specwave::error::{Error, Result};
use specwave::mcmc::samples::read_draws;
use specwave::predict::{predict, PredictionSite, PredictionTarget};
use specwave::FitContext;

use crate::inputs::{fmt_f64, load_config, DataArgs};
use crate::manifest::RunRecorder;

/// Predict spectra at observed or new locations from a stored fit.
#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    /// The training data the samples were fit on.
    #[command(flatten)]
    data: DataArgs,

    /// Samples directory written by `fit`.
    #[arg(long, value_name = "DIR")]
    samples: PathBuf,

    /// The configuration the samples were drawn under.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Targets CSV: either `genus_id,site_id` rows for observed sites, or
    /// `genus_id,lon,lat,<covariate>...` rows for new locations (covariate
    /// columns must match the site table).
    #[arg(long, value_name = "FILE")]
    targets: PathBuf,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Seed of the composition sampler.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
}

/// A parsed target together with its display name for reports.
struct NamedTarget {
    target: PredictionTarget,
    genus_id: String,
    site_label: String,
}

/// Parse the targets CSV against the dataset's site and genus catalogs.
fn parse_targets(path: &Path, ds: &SpectraDataset) -> Result<Vec<NamedTarget>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), 1, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(path.display().to_string(), 1, e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();

    let cov_names = ds.sites().covariate_names();
    let observed_form = header == ["genus_id", "site_id"];
    let new_form = header.len() == 3 + cov_names.len()
        && header[0] == "genus_id"
        && header[1] == "lon"
        && header[2] == "lat"
        && header[3..] == *cov_names;
    if !observed_form && !new_form {
        return Err(Error::parse(
            path.display().to_string(),
            1,
            format!(
                "expected header `genus_id,site_id` or `genus_id,lon,lat,{}`, got `{}`",
                cov_names.join(","),
                header.join(",")
            ),
        ));
    }

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::parse(path.display().to_string(), row, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(Error::parse(
                path.display().to_string(),
                row,
                format!("expected {} fields, got {}", header.len(), rec.len()),
            ));
        }
        let genus_id = rec[0].to_string();
        let genus = ds.genus_index(&genus_id).ok_or_else(|| {
            Error::parse(
                path.display().to_string(),
                row,
                format!("unknown genus id `{genus_id}`"),
            )
        })?;
        if observed_form {
            let site_id = rec[1].to_string();
            let site = ds.sites().index_of(&site_id).ok_or_else(|| {
                Error::parse(
                    path.display().to_string(),
                    row,
                    format!("unknown site id `{site_id}`"),
                )
            })?;
            out.push(NamedTarget {
                target: PredictionTarget {
                    genus,
                    site: PredictionSite::Observed(site),
                },
                genus_id,
                site_label: site_id,
            });
        } else {
            let parse = |field: usize, name: &str| -> Result<f64> {
                rec[field].parse::<f64>().map_err(|_| {
                    Error::parse(
                        path.display().to_string(),
                        row,
                        format!("bad {name} value `{}`", &rec[field]),
                    )
                })
            };
            let lon = parse(1, "lon")?;
            let lat = parse(2, "lat")?;
            let mut covariates = Vec::with_capacity(cov_names.len());
            for (j, name) in cov_names.iter().enumerate() {
                covariates.push(parse(3 + j, name)?);
            }
            out.push(NamedTarget {
                target: PredictionTarget {
                    genus,
                    site: PredictionSite::New {
                        coord: [lon, lat],
                        covariates,
                    },
                },
                genus_id,
                site_label: format!("new({lon},{lat})"),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{}: no target rows",
            path.display()
        )));
    }
    Ok(out)
}

pub fn run(args: &PredictArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let mut rec = RunRecorder::new("predict", args.seed, &args.out)?;
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
    let targets = parse_targets(&args.targets, &ds)?;
    let ctx = FitContext::new(ds, cfg)?;

    let wanted: Vec<PredictionTarget> = targets.iter().map(|t| t.target.clone()).collect();
    let preds = rec.stage("predict", || {
        predict(&ctx, &archive.draws, &wanted, args.seed)
    })?;

    let wave = ctx.wave_values().to_vec();
    let mut draws = String::from("target,wavelength,draw,mean,noisy\n");
    for (i, p) in preds.iter().enumerate() {
        for (t, w) in wave.iter().enumerate().take(p.mean.nrows()) {
            for m in 0..p.mean.ncols() {
                let _ = writeln!(
                    draws,
                    "{i},{},{m},{},{}",
                    fmt_f64(*w),
                    fmt_f64(p.mean[(t, m)]),
                    fmt_f64(p.noisy[(t, m)])
                );
            }
        }
    }
    rec.write_file("draws.csv", &draws)?;

    let mut summary = String::from("target,genus_id,site,wavelength,point,q05,q50,q95\n");
    for (i, (named, p)) in targets.iter().zip(&preds).enumerate() {
        let point = p.point();
        let q05 = p.quantile_curve(0.05)?;
        let q50 = p.quantile_curve(0.50)?;
        let q95 = p.quantile_curve(0.95)?;
        for t in 0..point.len() {
            let _ = writeln!(
                summary,
                "{i},{},{},{},{},{},{},{}",
                named.genus_id,
                named.site_label,
                fmt_f64(wave[t]),
                fmt_f64(point[t]),
                fmt_f64(q05[t]),
                fmt_f64(q50[t]),
                fmt_f64(q95[t])
            );
        }
    }
    rec.write_file("summary.csv", &summary)?;
    rec.finish()?;

    println!(
        "predict: {} targets x {} draws on {} wavelengths -> {}",
        preds.len(),
        archive.draws.len(),
        wave.len(),
        args.out.display()
    );
    Ok(())
}
