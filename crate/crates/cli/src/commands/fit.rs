//! `fit`: run the sampler on a dataset and store the retained draws.

use std::path::PathBuf;

use specwave::config::config_json;
use specwave::error::Result;
use specwave::mcmc::samples::write_samples;
use specwave::mcmc::{resume_chain, run_chain, RunOptions};
use specwave::FitContext;

use crate::inputs::{load_config, DataArgs};
use crate::manifest::RunRecorder;

/// Fit the model and write a samples directory (draws, summaries, manifest).
#[derive(Debug, clap::Args)]
pub struct FitArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Model configuration JSON.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Output directory of the fit.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Override the configuration's chain seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Override the configuration's report label.
    #[arg(long, value_name = "NAME")]
    label: Option<String>,

    /// Print roughly this many progress lines over the run.
    #[arg(long, value_name = "N")]
    progress: Option<usize>,

    /// Write restartable checkpoints to this file (every
    /// `mcmc.checkpoint_every` sweeps of the configuration).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    /// Resume from the checkpoint file instead of starting fresh.
    #[arg(long, requires = "checkpoint")]
    resume: bool,
}

pub fn run(args: &FitArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.mcmc.seed = seed;
    }
    if let Some(label) = &args.label {
        cfg.label = Some(label.clone());
    }

    let mut rec = RunRecorder::new("fit", cfg.mcmc.seed, &args.out)?;
    rec.config(&cfg.display_label(), &cfg);

    let ds = rec.stage("load", || args.data.load())?;
    log::info!(
        "fit: {} records, {} sites, {} genera, {} wavelengths",
        ds.n_records(),
        ds.sites().len(),
        ds.n_genera(),
        ds.grid().len()
    );
    let ctx = FitContext::new(ds, cfg)?;
    let opts = RunOptions {
        checkpoint: args.checkpoint.clone(),
        progress: args.progress,
    };
    let fit = rec.stage("mcmc", || {
        if args.resume {
            let path = args.checkpoint.as_deref().expect("clap enforces --checkpoint");
            resume_chain(&ctx, path, &opts)
        } else {
            run_chain(&ctx, &opts)
        }
    })?;

    let out_dir = rec.out_dir().to_path_buf();
    let manifest = rec.stage("write", || write_samples(&ctx, &fit, &out_dir))?;
    for entry in &manifest.files {
        rec.track_file(&entry.file)?;
    }
    rec.track_file("manifest.json")?;
    // The effective configuration (after --seed/--label overrides), so that
    // `predict --config <out>/config.json --samples <out>` always matches.
    rec.write_file("config.json", &config_json(ctx.config()))?;
    rec.finish()?;

    for (block, rate) in &fit.acceptance {
        log::info!("fit: acceptance {block} = {rate:.3}");
    }
    println!(
        "fit {}: {} draws kept, DIC {:.2} (pD {:.2}), {:.1}s -> {}",
        ctx.config().display_label(),
        fit.kept.len(),
        fit.dic.dic,
        fit.dic.p_d,
        fit.elapsed_secs,
        args.out.display()
    );
    Ok(())
}
