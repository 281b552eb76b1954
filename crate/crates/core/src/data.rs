//! Observed data: wavelength grid, site table, spectra, and derived indexing.
//!
//! A dataset couples three things:
//!
//! * a shared [`WavelengthGrid`] on which every curve is measured,
//! * a [`SiteTable`] of spatial locations with site-level covariates,
//! * a stack of response curves (one record per measured spectrum), each tagged
//!   with a site, a genus, and a replicate id.
//!
//! Responses are stored on the natural-log scale throughout; raw reflectance
//! input is validated to be strictly positive and transformed on load.
//! [`DesignIndex`] precomputes the record bookkeeping the sampler needs —
//! records grouped by site, genus, and (genus, site) cell — plus the
//! standardized covariate design, where standardization is over the
//! *record-expanded* covariate matrix (sites weighted by how many records they
//! carry), using the population divisor.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that a knot spacing divides its range.
const KNOT_DIVISIBILITY_TOL: f64 = 1e-9;

/// An evenly spaced measurement grid on the half-open window `[lo, hi)`.
///
/// Point `m` sits at `lo + m * (hi - lo) / count`, so the spacing is
/// `(hi - lo) / count` and `hi` itself is not a grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    lo: f64,
    hi: f64,
    count: usize,
}

impl WavelengthGrid {
    /// Build a grid of `count` points evenly spaced on `[lo, hi)`.
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::Config(format!(
                "wavelength window must satisfy lo < hi and be finite, got [{lo}, {hi})"
            )));
        }
        if count < 2 {
            return Err(Error::Config(format!(
                "wavelength grid needs at least 2 points, got {count}"
            )));
        }
        Ok(WavelengthGrid { lo, hi, count })
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.count
    }

    /// True when the grid is empty (never the case for a constructed grid).
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Lower edge of the window (also the first grid point).
    pub fn lo(&self) -> f64 {
        self.lo
    }

    /// Upper edge of the half-open window (not itself a grid point).
    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// Spacing between consecutive points.
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    /// Wavelength of grid point `m`.
    pub fn value(&self, m: usize) -> f64 {
        debug_assert!(m < self.count);
        self.lo + m as f64 * self.step()
    }

    /// All grid points, in order.
    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|m| self.value(m)).collect()
    }
}

/// Coordinate interpretation for the site table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordUnits {
    /// Longitude/latitude in decimal degrees; distances are great-circle km.
    LonLat,
    /// Planar coordinates in km; distances are Euclidean.
    PlanarKm,
}

/// Spatial sites with raw (unstandardized) site-level covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteTable {
    ids: Vec<String>,
    coords: Vec<[f64; 2]>,
    units: CoordUnits,
    covariate_names: Vec<String>,
    covariates: DMatrix<f64>,
}

impl SiteTable {
    /// Assemble a site table, checking id uniqueness and value finiteness.
    pub fn new(
        ids: Vec<String>,
        coords: Vec<[f64; 2]>,
        units: CoordUnits,
        covariate_names: Vec<String>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("site table has no rows".into()));
        }
        if ids.len() != coords.len() || ids.len() != covariates.nrows() {
            return Err(Error::dim(
                "site table rows",
                ids.len(),
                format!("{} coords, {} covariate rows", coords.len(), covariates.nrows()),
            ));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::dim(
                "covariate names",
                covariates.ncols(),
                covariate_names.len(),
            ));
        }
        if covariates.ncols() == 0 {
            return Err(Error::Data(
                "site table must carry at least one covariate column".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for (row, id) in ids.iter().enumerate() {
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!(
                    "duplicate site id `{id}` (second occurrence at site row {})",
                    row + 1
                )));
            }
        }
        for (row, c) in coords.iter().enumerate() {
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(Error::Data(format!(
                    "non-finite coordinates for site `{}` (row {})",
                    ids[row],
                    row + 1
                )));
            }
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite covariate value in site table".into()));
        }
        Ok(SiteTable {
            ids,
            coords,
            units,
            covariate_names,
            covariates,
        })
    }

    /// Number of sites.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// True when there are no sites.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Site ids in table order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Coordinate pair of site `s`.
    pub fn coord(&self, s: usize) -> [f64; 2] {
        self.coords[s]
    }

    /// All coordinates in table order.
    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Coordinate units.
    pub fn units(&self) -> CoordUnits {
        self.units
    }

    /// Names of the covariate columns.
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Raw covariate matrix (sites x covariates).
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    /// Index of a site id, if present.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }
}

/// Identity of one measured spectrum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordKey {
    /// Index into the site table.
    pub site: usize,
    /// Index into the genus catalog.
    pub genus: usize,
    /// Replicate label, unique within a (site, genus) cell.
    pub replicate: String,
}

/// Options controlling dataset ingestion.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Measurement grid shared by all curves.
    pub grid: WavelengthGrid,
    /// How to read the coordinate columns.
    pub units: CoordUnits,
    /// When false, curves are raw reflectance: validated positive, then logged.
    /// When true, curves are already on the log scale and stored unchanged.
    pub log_transformed: bool,
}

/// A full dataset: grid, sites, genus catalog, records, and log-scale curves.
///
/// Responses are stored column-per-record (`n_wavelengths x n_records`).
/// The genus catalog is sorted lexicographically so that record order in the
/// input file never changes genus indexing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectraDataset {
    grid: WavelengthGrid,
    sites: SiteTable,
    genus_ids: Vec<String>,
    records: Vec<RecordKey>,
    responses: DMatrix<f64>,
}

impl SpectraDataset {
    /// Assemble a dataset from parts, validating shapes and key uniqueness.
    pub fn new(
        grid: WavelengthGrid,
        sites: SiteTable,
        genus_ids: Vec<String>,
        records: Vec<RecordKey>,
        responses: DMatrix<f64>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("dataset has no spectra".into()));
        }
        if responses.nrows() != grid.len() {
            return Err(Error::dim("response rows", grid.len(), responses.nrows()));
        }
        if responses.ncols() != records.len() {
            return Err(Error::dim("response columns", records.len(), responses.ncols()));
        }
        if genus_ids.is_empty() {
            return Err(Error::Data("genus catalog is empty".into()));
        }
        let mut seen_genus = BTreeSet::new();
        for g in &genus_ids {
            if !seen_genus.insert(g.clone()) {
                return Err(Error::Data(format!("duplicate genus id `{g}` in catalog")));
            }
        }
        let mut seen = BTreeSet::new();
        for (k, r) in records.iter().enumerate() {
            if r.site >= sites.len() {
                return Err(Error::Data(format!(
                    "record {k} references site index {} out of {}",
                    r.site,
                    sites.len()
                )));
            }
            if r.genus >= genus_ids.len() {
                return Err(Error::Data(format!(
                    "record {k} references genus index {} out of {}",
                    r.genus,
                    genus_ids.len()
                )));
            }
            if !seen.insert((r.site, r.genus, r.replicate.clone())) {
                return Err(Error::Data(format!(
                    "duplicate record key (site `{}`, genus `{}`, replicate `{}`)",
                    sites.ids()[r.site],
                    genus_ids[r.genus],
                    r.replicate
                )));
            }
        }
        if responses.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite response value".into()));
        }
        Ok(SpectraDataset {
            grid,
            sites,
            genus_ids,
            records,
            responses,
        })
    }

    /// The shared measurement grid.
    pub fn grid(&self) -> &WavelengthGrid {
        &self.grid
    }

    /// The site table.
    pub fn sites(&self) -> &SiteTable {
        &self.sites
    }

    /// Genus catalog (lexicographically sorted on load).
    pub fn genus_ids(&self) -> &[String] {
        &self.genus_ids
    }

    /// Number of genera in the catalog.
    pub fn n_genera(&self) -> usize {
        self.genus_ids.len()
    }

    /// Record keys, one per spectrum, in response-column order.
    pub fn records(&self) -> &[RecordKey] {
        &self.records
    }

    /// Number of spectra.
    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    /// Log-scale responses, one column per record.
    pub fn responses(&self) -> &DMatrix<f64> {
        &self.responses
    }

    /// Index of a genus id in the catalog, if present.
    pub fn genus_index(&self, id: &str) -> Option<usize> {
        self.genus_ids.iter().position(|g| g == id)
    }

    /// A copy keeping only the records selected by `keep` (indices into
    /// [`Self::records`], in the order given). Sites and the genus catalog are
    /// retained in full so indices stay comparable across subsets; genera or
    /// sites may be left with zero records.
    pub fn subset_records(&self, keep: &[usize]) -> Result<SpectraDataset> {
        if keep.is_empty() {
            return Err(Error::Data("record subset is empty".into()));
        }
        let mut records = Vec::with_capacity(keep.len());
        let mut responses = DMatrix::zeros(self.grid.len(), keep.len());
        for (out, &k) in keep.iter().enumerate() {
            if k >= self.records.len() {
                return Err(Error::Data(format!(
                    "record index {k} out of {} in subset",
                    self.records.len()
                )));
            }
            records.push(self.records[k].clone());
            responses.set_column(out, &self.responses.column(k));
        }
        SpectraDataset::new(
            self.grid.clone(),
            self.sites.clone(),
            self.genus_ids.clone(),
            records,
            responses,
        )
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                let msg = e.to_string();
                Error::io(path.display().to_string(), std::io::Error::other(msg))
            }
            _ => Error::parse(path.display().to_string(), 1, e.to_string()),
        })
}

fn parse_f64(path: &Path, row: usize, field: &str, raw: &str) -> Result<f64> {
    raw.parse::<f64>().map_err(|_| {
        Error::parse(
            path.display().to_string(),
            row,
            format!("field `{field}`: cannot parse `{raw}` as a number"),
        )
    })
}

/// Read a site table from CSV with header `site_id,lon,lat,<covariates...>`.
///
/// For planar data the `lon`/`lat` columns carry x/y in km; `units` selects the
/// interpretation. At least one covariate column is required.
pub fn load_sites(path: &Path, units: CoordUnits) -> Result<SiteTable> {
    let mut rdr = open_csv(path)?;
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(path.display().to_string(), 1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[0] != "site_id" || cols[1] != "lon" || cols[2] != "lat" {
        return Err(Error::parse(
            path.display().to_string(),
            1,
            format!(
                "expected header `site_id,lon,lat,<covariate>...` with at least one \
                 covariate column, got `{}`",
                cols.join(",")
            ),
        ));
    }
    let covariate_names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    let p = covariate_names.len();

    let mut ids = Vec::new();
    let mut coords = Vec::new();
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2; // 1-based, counting the header
        let rec = rec.map_err(|e| Error::parse(path.display().to_string(), row, e.to_string()))?;
        if rec.len() != 3 + p {
            return Err(Error::parse(
                path.display().to_string(),
                row,
                format!("expected {} fields, got {}", 3 + p, rec.len()),
            ));
        }
        ids.push(rec[0].to_string());
        let lon = parse_f64(path, row, "lon", &rec[1])?;
        let lat = parse_f64(path, row, "lat", &rec[2])?;
        coords.push([lon, lat]);
        let mut r = Vec::with_capacity(p);
        for (j, name) in covariate_names.iter().enumerate() {
            r.push(parse_f64(path, row, name, &rec[3 + j])?);
        }
        cov_rows.push(r);
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("{}: no site rows", path.display())));
    }
    let covariates = DMatrix::from_fn(ids.len(), p, |r, c| cov_rows[r][c]);
    SiteTable::new(ids, coords, units, covariate_names, covariates)
}

/// Read spectra + sites CSVs into a dataset.
///
/// The spectra header must be `site_id,genus_id,replicate_id,w1,...,wN` with
/// `N` equal to `opts.grid.len()`. Every `site_id` must appear in the site
/// table, keys must be unique, and raw reflectance (when
/// `opts.log_transformed == false`) must be strictly positive.
pub fn load_dataset(spectra_path: &Path, sites_path: &Path, opts: &LoadOptions) -> Result<SpectraDataset> {
    let sites = load_sites(sites_path, opts.units)?;
    let n_wave = opts.grid.len();

    let mut rdr = open_csv(spectra_path)?;
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(spectra_path.display().to_string(), 1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() != 3 + n_wave
        || cols[0] != "site_id"
        || cols[1] != "genus_id"
        || cols[2] != "replicate_id"
    {
        return Err(Error::parse(
            spectra_path.display().to_string(),
            1,
            format!(
                "expected header `site_id,genus_id,replicate_id,w1,...,w{n_wave}` \
                 ({} fields), got {} fields",
                3 + n_wave,
                cols.len()
            ),
        ));
    }

    struct RawRecord {
        site: usize,
        genus_id: String,
        replicate: String,
        curve: Vec<f64>,
    }
    let mut raws: Vec<RawRecord> = Vec::new();
    let mut genus_set: BTreeSet<String> = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec =
            rec.map_err(|e| Error::parse(spectra_path.display().to_string(), row, e.to_string()))?;
        if rec.len() != 3 + n_wave {
            return Err(Error::parse(
                spectra_path.display().to_string(),
                row,
                format!(
                    "curve length mismatch: expected {} wavelength fields, got {}",
                    n_wave,
                    rec.len().saturating_sub(3)
                ),
            ));
        }
        let site_id = rec[0].to_string();
        let site = sites.index_of(&site_id).ok_or_else(|| {
            Error::parse(
                spectra_path.display().to_string(),
                row,
                format!("unknown site id `{site_id}`"),
            )
        })?;
        let genus_id = rec[1].to_string();
        if genus_id.is_empty() {
            return Err(Error::parse(
                spectra_path.display().to_string(),
                row,
                "empty genus id".to_string(),
            ));
        }
        genus_set.insert(genus_id.clone());
        let replicate = rec[2].to_string();
        let mut curve = Vec::with_capacity(n_wave);
        for m in 0..n_wave {
            let v = parse_f64(spectra_path, row, &format!("w{}", m + 1), &rec[3 + m])?;
            if !v.is_finite() {
                return Err(Error::parse(
                    spectra_path.display().to_string(),
                    row,
                    format!("non-finite response at w{}", m + 1),
                ));
            }
            if !opts.log_transformed && v <= 0.0 {
                return Err(Error::parse(
                    spectra_path.display().to_string(),
                    row,
                    format!(
                        "reflectance must be strictly positive before the log \
                         transform; got {v} at w{}",
                        m + 1
                    ),
                ));
            }
            curve.push(if opts.log_transformed { v } else { v.ln() });
        }
        raws.push(RawRecord {
            site,
            genus_id,
            replicate,
            curve,
        });
    }
    if raws.is_empty() {
        return Err(Error::Data(format!(
            "{}: no spectra rows",
            spectra_path.display()
        )));
    }

    let genus_ids: Vec<String> = genus_set.into_iter().collect();
    let genus_index: BTreeMap<&str, usize> = genus_ids
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();

    let mut records = Vec::with_capacity(raws.len());
    let mut responses = DMatrix::zeros(n_wave, raws.len());
    for (k, raw) in raws.iter().enumerate() {
        records.push(RecordKey {
            site: raw.site,
            genus: genus_index[raw.genus_id.as_str()],
            replicate: raw.replicate.clone(),
        });
        for m in 0..n_wave {
            responses[(m, k)] = raw.curve[m];
        }
    }
    SpectraDataset::new(opts.grid.clone(), sites, genus_ids, records, responses)
}

/// Write the site table as CSV (header `site_id,lon,lat,<covariates...>`).
pub fn write_sites_csv(sites: &SiteTable, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("site_id,lon,lat");
    for name in sites.covariate_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for s in 0..sites.len() {
        let c = sites.coord(s);
        out.push_str(&format!("{},{},{}", sites.ids()[s], c[0], c[1]));
        for j in 0..sites.covariates().ncols() {
            out.push_str(&format!(",{}", sites.covariates()[(s, j)]));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Write the spectra as CSV on the stored (log) scale; reloading with
/// `log_transformed = true` reproduces the dataset up to float formatting.
pub fn write_spectra_csv(ds: &SpectraDataset, path: &Path) -> Result<()> {
    let n_wave = ds.grid().len();
    let mut out = String::new();
    out.push_str("site_id,genus_id,replicate_id");
    for m in 0..n_wave {
        out.push_str(&format!(",w{}", m + 1));
    }
    out.push('\n');
    for (k, r) in ds.records().iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}",
            ds.sites().ids()[r.site],
            ds.genus_ids()[r.genus],
            r.replicate
        ));
        for m in 0..n_wave {
            out.push_str(&format!(",{}", ds.responses()[(m, k)]));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub(crate) fn write_text(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(content.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// An evenly spaced knot grid `lo, lo + spacing, ..., hi` (both ends included).
///
/// Errors when `spacing <= 0`, `hi <= lo`, or `spacing` does not divide
/// `hi - lo` to within a relative tolerance of 1e-9.
pub fn make_knot_grid(lo: f64, hi: f64, spacing: f64) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && spacing.is_finite()) {
        return Err(Error::Config("knot grid bounds must be finite".into()));
    }
    if spacing <= 0.0 {
        return Err(Error::Config(format!(
            "knot spacing must be positive, got {spacing}"
        )));
    }
    if hi <= lo {
        return Err(Error::Config(format!(
            "knot range must satisfy lo < hi, got [{lo}, {hi}]"
        )));
    }
    let steps = (hi - lo) / spacing;
    let rounded = steps.round();
    if rounded < 1.0 || (steps - rounded).abs() > KNOT_DIVISIBILITY_TOL * steps.max(1.0) {
        return Err(Error::Config(format!(
            "spacing {spacing} does not evenly divide the range [{lo}, {hi}]"
        )));
    }
    let n = rounded as usize;
    Ok((0..=n).map(|i| lo + i as f64 * spacing).collect())
}

/// Precomputed record bookkeeping plus the standardized covariate design.
///
/// Covariates are standardized over the record expansion: each site's row is
/// repeated once per record at that site, then every column is centered and
/// scaled to unit variance with the population divisor (the record count).
/// Constant columns are rejected.
#[derive(Debug, Clone)]
pub struct DesignIndex {
    /// Record indices at each site (site-table order).
    pub records_by_site: Vec<Vec<usize>>,
    /// Record indices of each genus (catalog order).
    pub records_by_genus: Vec<Vec<usize>>,
    /// Record indices per (genus, site) cell, only for occupied cells.
    pub records_by_cell: BTreeMap<(usize, usize), Vec<usize>>,
    /// For each genus, the sorted list of sites where it was observed.
    pub genus_sites: Vec<Vec<usize>>,
    /// Column means of the record-expanded raw covariates.
    pub x_mean: Vec<f64>,
    /// Column standard deviations (population divisor) of the same.
    pub x_scale: Vec<f64>,
    /// Standardized covariates at site level (`n_sites x p`).
    pub x_sites: DMatrix<f64>,
    /// Standardized record-expanded covariates (`n_records x p`).
    pub x_rec: DMatrix<f64>,
}

impl DesignIndex {
    /// Standardize a raw covariate row (e.g. for a new prediction site) with
    /// the training means and scales.
    pub fn standardize_row(&self, raw: &[f64]) -> Result<DVector<f64>> {
        if raw.len() != self.x_mean.len() {
            return Err(Error::dim("covariate row", self.x_mean.len(), raw.len()));
        }
        Ok(DVector::from_fn(raw.len(), |j, _| {
            (raw[j] - self.x_mean[j]) / self.x_scale[j]
        }))
    }
}

/// Build the [`DesignIndex`] for a dataset.
pub fn build_design(ds: &SpectraDataset) -> Result<DesignIndex> {
    let n_s = ds.sites().len();
    let n_g = ds.n_genera();
    let n_rep = ds.n_records();
    let p = ds.sites().covariates().ncols();

    let mut records_by_site = vec![Vec::new(); n_s];
    let mut records_by_genus = vec![Vec::new(); n_g];
    let mut records_by_cell: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (k, r) in ds.records().iter().enumerate() {
        records_by_site[r.site].push(k);
        records_by_genus[r.genus].push(k);
        records_by_cell.entry((r.genus, r.site)).or_default().push(k);
    }
    let genus_sites: Vec<Vec<usize>> = (0..n_g)
        .map(|g| {
            let mut sites: Vec<usize> = records_by_cell
                .range((g, 0)..=(g, n_s.saturating_sub(1)))
                .map(|((_, s), _)| *s)
                .collect();
            sites.dedup();
            sites
        })
        .collect();

    // Standardization over the record expansion, population divisor.
    let raw = ds.sites().covariates();
    let mut x_mean = vec![0.0; p];
    let mut x_scale = vec![0.0; p];
    for j in 0..p {
        let mut sum = 0.0;
        for r in ds.records() {
            sum += raw[(r.site, j)];
        }
        let mean = sum / n_rep as f64;
        let mut ss = 0.0;
        for r in ds.records() {
            let d = raw[(r.site, j)] - mean;
            ss += d * d;
        }
        let var = ss / n_rep as f64;
        if var <= 0.0 || !var.is_finite() {
            return Err(Error::Data(format!(
                "covariate `{}` is constant over the observed records and cannot \
                 be standardized",
                ds.sites().covariate_names()[j]
            )));
        }
        x_mean[j] = mean;
        x_scale[j] = var.sqrt();
    }
    let x_sites = DMatrix::from_fn(n_s, p, |s, j| (raw[(s, j)] - x_mean[j]) / x_scale[j]);
    let x_rec = DMatrix::from_fn(n_rep, p, |k, j| x_sites[(ds.records()[k].site, j)]);

    Ok(DesignIndex {
        records_by_site,
        records_by_genus,
        records_by_cell,
        genus_sites,
        x_mean,
        x_scale,
        x_sites,
        x_rec,
    })
}
