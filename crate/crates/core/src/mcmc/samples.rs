//! Persisted posterior samples.
//!
//! A fit directory holds the retained draws exactly (`draws.json`, floats
//! round-tripped bit-for-bit), a per-draw scalar table and a posterior
//! summary table for quick inspection (`scalars.csv`, `summary.csv`), and a
//! `manifest.json` with checksums of every written file so downstream stages
//! can verify what they read.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::FitContext;
use crate::state::ChainState;
use crate::stats::quantile;

use super::dic::DicSummary;
use super::FitResult;

/// Exact record of a chain's retained draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawArchive {
    pub config_hash: String,
    pub draws: Vec<ChainState>,
    pub deviances: Vec<f64>,
}

/// One file of a fit directory, with its checksum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Index of a fit directory.
///
/// Every field is a pure function of the dataset, configuration, and seed,
/// so the file is byte-identical across repeated runs; wall time belongs to
/// [`FitResult::elapsed_secs`](super::FitResult) and is not recorded here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplesManifest {
    pub config_hash: String,
    pub label: String,
    pub n_draws: usize,
    pub dic: DicSummary,
    pub acceptance: Vec<(String, f64)>,
    pub files: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_entry(dir: &Path, name: &str, contents: &str) -> Result<ManifestEntry> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(ManifestEntry {
        file: name.to_string(),
        sha256: sha256_hex(contents.as_bytes()),
        bytes: contents.len() as u64,
    })
}

/// Shortest exact decimal representation of a float, for CSV cells.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// The per-draw scalar table.
fn scalars_csv(result: &FitResult) -> String {
    let mut out = String::from(
        "draw,deviance,grand_mean,intercept_decay,coeff_bandwidth,space_wave_bandwidth,\
         mean_log_bandwidth,var_genus_mean,var_site_intercept,var_coeff,var_wave,\
         var_wave_genus,var_loading,var_log_bandwidth,var_conv_field\n",
    );
    for (i, (s, d)) in result.kept.iter().zip(&result.deviances).enumerate() {
        let cells = [
            *d,
            s.grand_mean,
            s.intercept_decay,
            s.coeff_bandwidth,
            s.space_wave_bandwidth,
            s.mean_log_bandwidth,
            s.var_genus_mean,
            s.var_site_intercept,
            s.var_coeff,
            s.var_wave,
            s.var_wave_genus,
            s.var_loading,
            s.var_log_bandwidth,
            s.var_conv_field,
        ];
        let _ = write!(out, "{i}");
        for c in cells {
            let _ = write!(out, ",{}", fmt_f64(c));
        }
        out.push('\n');
    }
    out
}

/// Posterior mean/sd/quantile summary of the scalar blocks and genus means.
fn summary_csv(ctx: &FitContext, result: &FitResult) -> Result<String> {
    let mut out = String::from("parameter,mean,sd,q05,q50,q95\n");
    let mut push = |name: &str, values: &[f64]| -> Result<()> {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (n - 1.0).max(1.0);
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{}",
            fmt_f64(mean),
            fmt_f64(var.sqrt()),
            fmt_f64(quantile(values, 0.05)?),
            fmt_f64(quantile(values, 0.50)?),
            fmt_f64(quantile(values, 0.95)?),
        );
        Ok(())
    };

    let pull = |f: &dyn Fn(&ChainState) -> f64| -> Vec<f64> {
        result.kept.iter().map(f).collect()
    };
    push("deviance", &result.deviances)?;
    push("grand_mean", &pull(&|s| s.grand_mean))?;
    push("intercept_decay", &pull(&|s| s.intercept_decay))?;
    push("coeff_bandwidth", &pull(&|s| s.coeff_bandwidth))?;
    push("space_wave_bandwidth", &pull(&|s| s.space_wave_bandwidth))?;
    push("mean_log_bandwidth", &pull(&|s| s.mean_log_bandwidth))?;
    push("var_genus_mean", &pull(&|s| s.var_genus_mean))?;
    push("var_site_intercept", &pull(&|s| s.var_site_intercept))?;
    push("var_coeff", &pull(&|s| s.var_coeff))?;
    push("var_wave", &pull(&|s| s.var_wave))?;
    push("var_wave_genus", &pull(&|s| s.var_wave_genus))?;
    push("var_loading", &pull(&|s| s.var_loading))?;
    push("var_log_bandwidth", &pull(&|s| s.var_log_bandwidth))?;
    push("var_conv_field", &pull(&|s| s.var_conv_field))?;
    for g in 0..ctx.n_genera() {
        let name = format!("genus_mean[{}]", ctx.dataset().genus_ids()[g]);
        push(&name, &pull(&|s| s.genus_means[g]))?;
    }
    Ok(out)
}

/// Write a complete fit directory and return its manifest.
pub fn write_samples(ctx: &FitContext, result: &FitResult, dir: &Path) -> Result<SamplesManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let archive = DrawArchive {
        config_hash: result.config_hash.clone(),
        draws: result.kept.clone(),
        deviances: result.deviances.clone(),
    };
    let draws_json = serde_json::to_string(&archive)
        .map_err(|e| Error::Numeric(format!("draw serialization failed: {e}")))?;

    let files = vec![
        write_entry(dir, "draws.json", &draws_json)?,
        write_entry(dir, "scalars.csv", &scalars_csv(result))?,
        write_entry(dir, "summary.csv", &summary_csv(ctx, result)?)?,
    ];

    let manifest = SamplesManifest {
        config_hash: result.config_hash.clone(),
        label: ctx.config().display_label(),
        n_draws: result.kept.len(),
        dic: result.dic,
        acceptance: result.acceptance.clone(),
        files,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Numeric(format!("manifest serialization failed: {e}")))?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest_json)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}

/// Read back the draw archive of a fit directory, verifying its checksum
/// against the manifest when one is present.
pub fn read_draws(dir: &Path) -> Result<DrawArchive> {
    let draws_path = dir.join("draws.json");
    let json = std::fs::read_to_string(&draws_path)
        .map_err(|e| Error::io(draws_path.display().to_string(), e))?;

    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let manifest_json = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: SamplesManifest = serde_json::from_str(&manifest_json)
            .map_err(|e| Error::Config(format!("unreadable manifest: {e}")))?;
        if let Some(entry) = manifest.files.iter().find(|f| f.file == "draws.json") {
            let actual = sha256_hex(json.as_bytes());
            if actual != entry.sha256 {
                return Err(Error::Config(format!(
                    "draws.json does not match its manifest checksum \
                     (expected {}, found {actual})",
                    entry.sha256
                )));
            }
        }
    }
    serde_json::from_str(&json).map_err(|e| Error::Config(format!("unreadable draws: {e}")))
}
