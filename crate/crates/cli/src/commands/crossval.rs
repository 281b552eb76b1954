//! `crossval`: score model configurations on held-out spectra.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;
use specwave::data::SpectraDataset;
use specwave::error::{Error, Result};
use specwave::predict::{
    kfold_compare, make_folds, select_holdouts, ComparisonReport, CurveScores,
};

use crate::inputs::{fmt_f64, parse_models, DataArgs};
use crate::manifest::RunRecorder;

/// Cross-validate one or more model configurations and tabulate their scores.
#[derive(Debug, clap::Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Model entry `[label=]config.json`; repeat to compare several.
    #[arg(long = "model", value_name = "[LABEL=]FILE", required = true)]
    models: Vec<String>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Number of cross-validation folds.
    #[arg(long, value_name = "K", conflicts_with = "holdout")]
    folds: Option<usize>,

    /// Single held-out set of this many records instead of folds.
    #[arg(long, value_name = "N")]
    holdout: Option<usize>,

    /// Seed of the split (predictions use seed + 1).
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,

    /// Print roughly this many progress lines per chain.
    #[arg(long, value_name = "N")]
    progress: Option<usize>,
}

/// The JSON form of the comparison, with relative scores attached.
#[derive(Serialize)]
struct ReportJson<'a> {
    split: String,
    seed: u64,
    report: &'a ComparisonReport,
    relative: &'a [CurveScores],
}

pub fn run(args: &CrossvalArgs) -> Result<()> {
    let ds = args.data.load()?;
    let models = parse_models(&args.models)?;
    let mut rec = RunRecorder::new("crossval", args.seed, &args.out)?;
    for m in &models {
        rec.config(&m.label, &m.config);
    }

    let (split, folds) = match (args.holdout, args.folds) {
        (Some(n), _) => ("holdout".to_string(), vec![select_holdouts(&ds, n, args.seed)?]),
        (None, k) => {
            let k = k.unwrap_or(10);
            (format!("{k}-fold"), make_folds(&ds, k, args.seed)?)
        }
    };
    log::info!(
        "crossval: {split} split holds out {} of {} records",
        folds.iter().map(Vec::len).sum::<usize>(),
        ds.n_records()
    );

    let predict_seed = args.seed.wrapping_add(1);
    let progress = args.progress;
    let report = rec.stage("fit+score", || {
        let per_model: Vec<ComparisonReport> = models
            .par_iter()
            .map(|m| kfold_compare(&ds, std::slice::from_ref(m), &folds, predict_seed, progress))
            .collect::<Result<_>>()?;
        merge_reports(per_model)
    })?;
    let relative = report.relative()?;

    rec.write_file("scores.csv", &scores_csv(&report, &relative))?;
    rec.write_file("folds.csv", &folds_csv(&ds, &folds))?;
    let json = serde_json::to_string_pretty(&ReportJson {
        split,
        seed: args.seed,
        report: &report,
        relative: &relative,
    })
    .map_err(|e| Error::Numeric(format!("report serialization failed: {e}")))?;
    rec.write_file("report.json", &json)?;
    rec.finish()?;

    println!("{:<28} {:>9} {:>9} {:>9} {:>9} {:>7} {:>10}",
             "model", "mse", "mae", "mcrps", "relative", "cov90", "dic");
    for (row, rel) in report.models.iter().zip(&relative) {
        println!(
            "{:<28} {:>9.4} {:>9.4} {:>9.4} {:>9.3} {:>7.3} {:>10.1}",
            row.label, row.scores.mse, row.scores.mae, row.scores.mcrps, rel.mcrps,
            row.coverage90, row.dic
        );
    }
    Ok(())
}

/// Concatenate single-model reports (identical splits) in input order.
fn merge_reports(mut per_model: Vec<ComparisonReport>) -> Result<ComparisonReport> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::Data("comparison produced no reports".into()))?;
    let holdout = first.holdout.clone();
    let models = per_model.iter_mut().flat_map(|r| r.models.drain(..)).collect();
    Ok(ComparisonReport { holdout, models })
}

/// The score table: absolute metrics at full precision, relatives to three
/// decimals so the winning row reads exactly 1.000.
fn scores_csv(report: &ComparisonReport, relative: &[CurveScores]) -> String {
    let mut out =
        String::from("label,mse,mae,mcrps,rel_mse,rel_mae,rel_mcrps,coverage90,dic\n");
    for (row, rel) in report.models.iter().zip(relative) {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3},{:.3},{:.3},{},{}",
            row.label,
            fmt_f64(row.scores.mse),
            fmt_f64(row.scores.mae),
            fmt_f64(row.scores.mcrps),
            rel.mse,
            rel.mae,
            rel.mcrps,
            fmt_f64(row.coverage90),
            fmt_f64(row.dic)
        );
    }
    out
}

/// The split inventory: which record went to which fold.
fn folds_csv(ds: &SpectraDataset, folds: &[Vec<usize>]) -> String {
    let mut out = String::from("fold,record,site_id,genus_id,replicate_id\n");
    for (f, fold) in folds.iter().enumerate() {
        for &k in fold {
            let r = &ds.records()[k];
            let _ = writeln!(
                out,
                "{f},{k},{},{},{}",
                ds.sites().ids()[r.site],
                ds.genus_ids()[r.genus],
                r.replicate
            );
        }
    }
    out
}
