//! Shared input plumbing: dataset sources, configuration files, and model
//! lists.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use specwave::config::ModelConfig;
use specwave::data::{load_dataset, CoordUnits, LoadOptions, WavelengthGrid};
use specwave::error::{Error, Result};
use specwave::predict::ModelEntry;
use specwave::SpectraDataset;

/// Sidecar metadata of a dataset bundle, written by `simulate` next to the
/// CSVs so later commands can reload them without repeating the layout flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub grid: WavelengthGrid,
    pub units: CoordUnits,
    /// True when `spectra.csv` is already on the log scale.
    pub log_transformed: bool,
}

/// Where the dataset comes from: a bundle directory, or explicit files plus
/// layout flags.
#[derive(Debug, clap::Args)]
pub struct DataArgs {
    /// Bundle directory holding spectra.csv, sites.csv, and dataset.json.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["spectra", "sites", "grid", "lonlat", "raw_reflectance"])]
    pub data: Option<PathBuf>,

    /// Spectra CSV with header `site_id,genus_id,replicate_id,w1,...,wN`.
    #[arg(long, value_name = "FILE", requires_all = ["sites", "grid"])]
    pub spectra: Option<PathBuf>,

    /// Site table CSV with header `site_id,lon,lat,<covariate>...`.
    #[arg(long, value_name = "FILE")]
    pub sites: Option<PathBuf>,

    /// Wavelength grid of the spectra columns as `lo:hi:count`
    /// (`count` points evenly spaced on the half-open window `[lo, hi)`).
    #[arg(long, value_name = "LO:HI:N", value_parser = parse_grid)]
    pub grid: Option<WavelengthGrid>,

    /// Interpret site coordinates as lon/lat degrees (default: planar km).
    #[arg(long)]
    pub lonlat: bool,

    /// Curves are raw reflectance; validate positivity and log-transform on
    /// load (default: curves are already log scale).
    #[arg(long)]
    pub raw_reflectance: bool,
}

impl DataArgs {
    /// Load the dataset this source describes.
    pub fn load(&self) -> Result<SpectraDataset> {
        if let Some(dir) = &self.data {
            let meta = read_meta(&dir.join("dataset.json"))?;
            let opts = LoadOptions {
                grid: meta.grid,
                units: meta.units,
                log_transformed: meta.log_transformed,
            };
            return load_dataset(&dir.join("spectra.csv"), &dir.join("sites.csv"), &opts);
        }
        match (&self.spectra, &self.sites, &self.grid) {
            (Some(spectra), Some(sites), Some(grid)) => {
                let opts = LoadOptions {
                    grid: grid.clone(),
                    units: if self.lonlat {
                        CoordUnits::LonLat
                    } else {
                        CoordUnits::PlanarKm
                    },
                    log_transformed: !self.raw_reflectance,
                };
                load_dataset(spectra, sites, &opts)
            }
            _ => Err(Error::Config(
                "no dataset given: pass --data <dir>, or --spectra, --sites, and --grid together"
                    .into(),
            )),
        }
    }
}

/// Parse `lo:hi:count` into a wavelength grid.
pub fn parse_grid(raw: &str) -> std::result::Result<WavelengthGrid, String> {
    let parts: Vec<&str> = raw.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected `lo:hi:count`, got `{raw}`"));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| format!("bad grid lower edge `{}`", parts[0]))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| format!("bad grid upper edge `{}`", parts[1]))?;
    let count: usize = parts[2]
        .parse()
        .map_err(|_| format!("bad grid point count `{}`", parts[2]))?;
    WavelengthGrid::new(lo, hi, count).map_err(|e| e.to_string())
}

/// Read a dataset bundle's sidecar metadata.
pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
}

/// Write a dataset bundle's sidecar metadata as pretty JSON.
pub fn meta_json(meta: &DatasetMeta) -> String {
    serde_json::to_string_pretty(meta).expect("metadata serialization cannot fail")
}

/// Load a model configuration, reporting every violated field at once.
pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: ModelConfig = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
    let violations = cfg.violations();
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(format!(
            "{} violates {} constraint(s):\n  - {}",
            path.display(),
            violations.len(),
            violations.join("\n  - ")
        )))
    }
}

/// Parse repeated `--model [label=]path` flags into labeled entries.
/// Without an explicit label the configuration's display label is used.
pub fn parse_models(specs: &[String]) -> Result<Vec<ModelEntry>> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) if !l.is_empty() => (Some(l.to_string()), PathBuf::from(p)),
            _ => (None, PathBuf::from(spec)),
        };
        let config = load_config(&path)?;
        let label = label.unwrap_or_else(|| config.display_label());
        out.push(ModelEntry { label, config });
    }
    let mut seen = std::collections::BTreeSet::new();
    for entry in &out {
        if !seen.insert(entry.label.clone()) {
            return Err(Error::Config(format!(
                "duplicate model label `{}`; disambiguate with --model label=path",
                entry.label
            )));
        }
    }
    Ok(out)
}

/// Render a float for CSV output (shortest exact representation).
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
