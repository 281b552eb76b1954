//! `simulate`: generate a synthetic dataset bundle.

use std::path::PathBuf;

use specwave::config::config_json;
use specwave::data::{write_sites_csv, write_spectra_csv, CoordUnits, WavelengthGrid};
use specwave::error::{Error, Result};
use specwave::synth::{make_benchmark, simulate_seeded, BenchmarkKind, SynthOutput, SynthSpec};

use crate::inputs::{load_config, meta_json, parse_grid, DatasetMeta};
use crate::manifest::RunRecorder;

/// Generate a synthetic dataset bundle (spectra, sites, truth, config).
#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// Output bundle directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Seed of the generator.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,

    /// Named benchmark tier: tiny, small, or medium.
    #[arg(
        long,
        value_name = "TIER",
        conflicts_with_all = ["config", "sites", "genera", "records", "grid",
                              "extent_km", "covariates", "covariate_decay"]
    )]
    benchmark: Option<String>,

    /// Model configuration JSON to generate under (custom layouts).
    #[arg(long, value_name = "FILE", requires_all = ["sites", "genera", "records", "grid"])]
    config: Option<PathBuf>,

    /// Number of sites, scattered uniformly on the square.
    #[arg(long, value_name = "N")]
    sites: Option<usize>,

    /// Number of genera in the catalog.
    #[arg(long, value_name = "N")]
    genera: Option<usize>,

    /// Total number of spectra.
    #[arg(long, value_name = "N")]
    records: Option<usize>,

    /// Wavelength grid `lo:hi:count`.
    #[arg(long, value_name = "LO:HI:N", value_parser = parse_grid)]
    grid: Option<WavelengthGrid>,

    /// Side length of the site square, in km.
    #[arg(long, value_name = "KM", default_value_t = 100.0)]
    extent_km: f64,

    /// Comma-separated covariate field names.
    #[arg(long, value_name = "NAMES", value_delimiter = ',',
          default_values_t = ["elev".to_string(), "moisture".to_string()])]
    covariates: Vec<String>,

    /// Exponential-correlation decay of the covariate fields (per km).
    #[arg(long, value_name = "RATE", default_value_t = 0.05)]
    covariate_decay: f64,
}

pub fn run(args: &SimulateArgs) -> Result<()> {
    let mut rec = RunRecorder::new("simulate", args.seed, &args.out)?;
    let out_dir = rec.out_dir().to_path_buf();

    let output: SynthOutput = if let Some(tier) = &args.benchmark {
        let kind = BenchmarkKind::parse(tier)?;
        let out = rec.stage("simulate", || make_benchmark(kind, args.seed, &out_dir))?;
        for name in ["spectra.csv", "sites.csv", "truth.json", "config.json"] {
            rec.track_file(name)?;
        }
        out
    } else {
        let (config_path, n_sites, n_genera, n_records, grid) = match (
            &args.config,
            args.sites,
            args.genera,
            args.records,
            &args.grid,
        ) {
            (Some(c), Some(s), Some(g), Some(r), Some(w)) => (c, s, g, r, w.clone()),
            _ => {
                return Err(Error::Config(
                    "pass --benchmark <tier>, or --config with --sites, --genera, \
                     --records, and --grid"
                        .into(),
                ))
            }
        };
        let config = load_config(config_path)?;
        let mut spec = SynthSpec::new(n_sites, n_genera, n_records, grid, config);
        spec.extent_km = args.extent_km;
        spec.covariate_names = args.covariates.clone();
        spec.covariate_decay = args.covariate_decay;

        let out = rec.stage("simulate", || simulate_seeded(&spec, args.seed))?;
        write_spectra_csv(&out.dataset, &out_dir.join("spectra.csv"))?;
        write_sites_csv(out.dataset.sites(), &out_dir.join("sites.csv"))?;
        rec.track_file("spectra.csv")?;
        rec.track_file("sites.csv")?;
        let truth = serde_json::to_string_pretty(&out.truth)
            .map_err(|e| Error::Numeric(format!("serializing truth: {e}")))?;
        rec.write_file("truth.json", &truth)?;
        rec.write_file("config.json", &config_json(&spec.config))?;
        out
    };

    let meta = DatasetMeta {
        grid: output.dataset.grid().clone(),
        units: CoordUnits::PlanarKm,
        log_transformed: true,
    };
    rec.write_file("dataset.json", &meta_json(&meta))?;
    rec.config(&output.context.config().display_label(), output.context.config());
    rec.finish()?;

    println!(
        "simulate: wrote {} spectra at {} sites ({} genera, {} wavelengths) to {}",
        output.dataset.n_records(),
        output.dataset.sites().len(),
        output.dataset.n_genera(),
        output.dataset.grid().len(),
        args.out.display()
    );
    Ok(())
}
