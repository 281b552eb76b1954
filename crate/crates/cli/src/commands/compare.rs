//! `compare`: fit several configurations on the full dataset and tabulate
//! their deviance information criteria.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use specwave::error::{Error, Result};
use specwave::mcmc::dic::DicSummary;
use specwave::mcmc::{run_chain, RunOptions};
use specwave::FitContext;

use crate::inputs::{fmt_f64, parse_models, DataArgs};
use crate::manifest::RunRecorder;

/// Fit every configuration on the full data and compare by DIC.
#[derive(Debug, clap::Args)]
pub struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Model entry `[label=]config.json`; repeat to compare several.
    #[arg(long = "model", value_name = "[LABEL=]FILE", required = true)]
    models: Vec<String>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Override every configuration's chain seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Print roughly this many progress lines per chain.
    #[arg(long, value_name = "N")]
    progress: Option<usize>,
}

pub fn run(args: &CompareArgs) -> Result<()> {
    let ds = args.data.load()?;
    let mut models = parse_models(&args.models)?;
    if let Some(seed) = args.seed {
        for m in &mut models {
            m.config.mcmc.seed = seed;
        }
    }
    let mut rec = RunRecorder::new("compare", args.seed.unwrap_or(0), &args.out)?;
    for m in &models {
        rec.config(&m.label, &m.config);
    }

    let opts = RunOptions {
        checkpoint: None,
        progress: args.progress,
    };
    let rows: Vec<(String, DicSummary)> = rec.stage("fit", || {
        models
            .par_iter()
            .map(|m| {
                let ctx = FitContext::new(ds.clone(), m.config.clone())?;
                let fit = run_chain(&ctx, &opts)?;
                Ok((m.label.clone(), fit.dic))
            })
            .collect::<Result<_>>()
    })?;

    let best = rows
        .iter()
        .map(|(_, d)| d.dic)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Numeric("non-finite DIC in comparison".into()));
    }

    let mut csv = String::from("label,dbar,d_at_mean,p_d,dic,delta_dic\n");
    for (label, d) in &rows {
        let _ = writeln!(
            csv,
            "{label},{},{},{},{},{}",
            fmt_f64(d.dbar),
            fmt_f64(d.d_at_mean),
            fmt_f64(d.p_d),
            fmt_f64(d.dic),
            fmt_f64(d.dic - best)
        );
    }
    rec.write_file("dic.csv", &csv)?;
    rec.finish()?;

    println!("{:<28} {:>12} {:>10} {:>12} {:>10}", "model", "dbar", "pD", "DIC", "delta");
    for (label, d) in &rows {
        println!(
            "{:<28} {:>12.2} {:>10.2} {:>12.2} {:>10.2}",
            label, d.dbar, d.p_d, d.dic, d.dic - best
        );
    }
    Ok(())
}
