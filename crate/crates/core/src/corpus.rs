//! Dataset manifests, train/test splitting, DEM elevation lookup and
//! EXIF-derived quantities.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Missing-data marker used when a DEM file does not declare its own.
pub const DEM_NODATA: f64 = -32768.0;

/// Accepted ground-truth elevation range in meters.
pub const ELEVATION_RANGE_M: (f64, f64) = (-500.0, 9000.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
            return Err(Error::Validation(format!("latitude {lat} out of range")));
        }
        if !(lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
            return Err(Error::Validation(format!("longitude {lon} out of range")));
        }
        Ok(Self { lat, lon })
    }
}

/// Camera metadata. Every field is independently optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExifRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aperture_n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iso: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_mm: Option<f64>,
}

impl ExifRecord {
    fn validate(&self) -> Result<()> {
        let numeric = [
            ("aperture_n", self.aperture_n),
            ("exposure_s", self.exposure_s),
            ("iso", self.iso),
            ("focal_mm", self.focal_mm),
            ("sensor_mm", self.sensor_mm),
        ];
        for (name, value) in numeric {
            if let Some(v) = value {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Validation(format!("exif {name} must be positive, got {v}")));
                }
            }
        }
        if let Some(ts) = &self.timestamp {
            parse_timestamp(ts)
                .ok_or_else(|| Error::Validation(format!("exif timestamp {ts:?} is not ISO-8601")))?;
        }
        Ok(())
    }

    /// The timestamp as a naive local date-time; offsets, when present, are dropped.
    pub fn parsed_timestamp(&self) -> Option<chrono::NaiveDateTime> {
        self.timestamp.as_deref().and_then(parse_timestamp)
    }
}

fn parse_timestamp(ts: &str) -> Option<chrono::NaiveDateTime> {
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(ts) {
        return Some(dt.naive_local());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|fmt| chrono::NaiveDateTime::parse_from_str(ts, fmt).ok())
}

/// One photograph of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub geo: Option<GeoPoint>,
    pub elevation_m: Option<f64>,
    pub feature_path: Option<PathBuf>,
    pub exif: Option<ExifRecord>,
    pub scene_score: Option<f64>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            geo: None,
            elevation_m: None,
            feature_path: None,
            exif: None,
            scene_score: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("empty image id".into()));
        }
        if let Some(e) = self.elevation_m {
            let (lo, hi) = ELEVATION_RANGE_M;
            if !(e.is_finite() && (lo..=hi).contains(&e)) {
                return Err(Error::Validation(format!("elevation {e} m outside [{lo}, {hi}]")));
            }
        }
        if let Some(s) = self.scene_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Validation(format!("scene_score {s} outside [0, 1]")));
            }
        }
        if let Some(exif) = &self.exif {
            exif.validate()?;
        }
        Ok(())
    }

    /// Feature file location; relative paths resolve against `base`
    /// (normally the manifest's directory).
    pub fn resolved_feature_path(&self, base: &Path) -> Option<PathBuf> {
        self.feature_path.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                base.join(p)
            }
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    elevation_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exif: Option<ExifRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_score: Option<f64>,
}

impl TryFrom<ManifestLine> for ImageRecord {
    type Error = Error;

    fn try_from(line: ManifestLine) -> Result<Self> {
        let geo = match (line.lat, line.lon) {
            (Some(lat), Some(lon)) => Some(GeoPoint::new(lat, lon)?),
            (None, None) => None,
            _ => return Err(Error::Validation("lat and lon must be given together".into())),
        };
        let record = ImageRecord {
            id: line.id,
            geo,
            elevation_m: line.elevation_m,
            feature_path: line.feature_path,
            exif: line.exif,
            scene_score: line.scene_score,
        };
        record.validate()?;
        Ok(record)
    }
}

impl From<&ImageRecord> for ManifestLine {
    fn from(r: &ImageRecord) -> Self {
        ManifestLine {
            id: r.id.clone(),
            lat: r.geo.map(|g| g.lat),
            lon: r.geo.map(|g| g.lon),
            elevation_m: r.elevation_m,
            feature_path: r.feature_path.clone(),
            exif: r.exif.clone(),
            scene_score: r.scene_score,
        }
    }
}

/// Reads a JSON-lines manifest. Blank lines are skipped; unknown fields ignored.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file), path)
}

pub fn parse_manifest(reader: impl BufRead, path: &Path) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: ManifestLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let record = ImageRecord::try_from(raw).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&ManifestLine::from(r))
            .map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub seed: u64,
}

/// Seeded shuffle, then the first `round(test_fraction * N)` records become
/// the test set.
pub fn split_dataset(records: &[ImageRecord], test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if records.is_empty() {
        return Err(Error::Validation("cannot split an empty record list".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Validation(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    if let Some(r) = records.iter().find(|r| r.elevation_m.is_none()) {
        return Err(Error::Validation(format!("record {:?} has no elevation", r.id)));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_fraction * records.len() as f64).round() as usize;
    let (test, train) = order.split_at(n_test);
    let ids = |idx: &[usize]| idx.iter().map(|&i| records[i].id.clone()).collect();
    Ok(DatasetSplit {
        train_ids: ids(train),
        test_ids: ids(test),
        seed,
    })
}

/// Regular lat/lon elevation grid. Row 0 is the southernmost row and
/// `origin` is the position of its westernmost sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DemGrid {
    pub origin: GeoPoint,
    pub lat_spacing_deg: f64,
    pub lon_spacing_deg: f64,
    pub rows: usize,
    pub cols: usize,
    pub samples: Vec<f64>,
    pub nodata: f64,
}

impl DemGrid {
    pub fn new(
        origin: GeoPoint,
        lat_spacing_deg: f64,
        lon_spacing_deg: f64,
        rows: usize,
        cols: usize,
        samples: Vec<f64>,
    ) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::Validation(format!("DEM must be at least 2x2, got {rows}x{cols}")));
        }
        if !(lat_spacing_deg > 0.0 && lon_spacing_deg > 0.0) {
            return Err(Error::Validation("DEM spacing must be positive".into()));
        }
        if samples.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: samples.len(),
            });
        }
        Ok(Self {
            origin,
            lat_spacing_deg,
            lon_spacing_deg,
            rows,
            cols,
            samples,
            nodata: DEM_NODATA,
        })
    }

    pub fn with_nodata(mut self, nodata: f64) -> Self {
        self.nodata = nodata;
        self
    }

    pub fn sample(&self, row: usize, col: usize) -> f64 {
        self.samples[row * self.cols + col]
    }

    /// Reads an ESRI ASCII grid. Both corner and center registration are
    /// accepted; `cellsize` or a `dx`/`dy` pair give the spacing.
    pub fn from_esri_ascii(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_esri_ascii(&text, path)
    }

    pub fn parse_esri_ascii(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut header = std::collections::HashMap::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((idx, line)) = lines.peek().copied() {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else {
                lines.next();
                continue;
            };
            if !key.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                break;
            }
            let value: f64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(idx + 1, format!("header {key} lacks a numeric value")))?;
            header.insert(key.to_ascii_lowercase(), value);
            lines.next();
        }
        let get = |k: &str| header.get(k).copied();
        let need = |k: &str| get(k).ok_or_else(|| parse_err(1, format!("missing header {k}")));
        let cols = need("ncols")? as usize;
        let rows = need("nrows")? as usize;
        let (dx, dy) = match (get("cellsize"), get("dx"), get("dy")) {
            (Some(c), _, _) => (c, c),
            (None, Some(dx), Some(dy)) => (dx, dy),
            _ => return Err(parse_err(1, "missing header cellsize".into())),
        };
        let (west, south) = match (get("xllcenter"), get("yllcenter")) {
            (Some(x), Some(y)) => (x, y),
            _ => (need("xllcorner")? + 0.5 * dx, need("yllcorner")? + 0.5 * dy),
        };
        let nodata = get("nodata_value").unwrap_or(DEM_NODATA);

        let mut file_rows = Vec::with_capacity(rows * cols);
        for (idx, line) in lines {
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(idx + 1, format!("bad sample {tok:?}")))?;
                file_rows.push(v);
            }
        }
        if file_rows.len() != rows * cols {
            return Err(parse_err(
                text.lines().count(),
                format!("expected {} samples, found {}", rows * cols, file_rows.len()),
            ));
        }
        // File rows run north to south.
        let samples = file_rows
            .chunks(cols)
            .rev()
            .flat_map(|r| r.iter().copied())
            .collect();
        Ok(DemGrid::new(GeoPoint { lat: south, lon: west }, dy, dx, rows, cols, samples)?.with_nodata(nodata))
    }
}

/// Bilinear interpolation of the four samples surrounding `p`.
pub fn dem_lookup(grid: &DemGrid, p: GeoPoint) -> Result<f64> {
    let out = Error::OutOfBounds { lat: p.lat, lon: p.lon };
    let fx = (p.lon - grid.origin.lon) / grid.lon_spacing_deg;
    let fy = (p.lat - grid.origin.lat) / grid.lat_spacing_deg;
    let max_x = (grid.cols - 1) as f64;
    let max_y = (grid.rows - 1) as f64;
    const EDGE: f64 = 1e-9;
    if !(fx >= -EDGE && fx <= max_x + EDGE && fy >= -EDGE && fy <= max_y + EDGE) {
        return Err(out);
    }
    let fx = fx.clamp(0.0, max_x);
    let fy = fy.clamp(0.0, max_y);
    let c0 = (fx.floor() as usize).min(grid.cols - 2);
    let r0 = (fy.floor() as usize).min(grid.rows - 2);
    let tx = fx - c0 as f64;
    let ty = fy - r0 as f64;
    let corners = [
        grid.sample(r0, c0),
        grid.sample(r0, c0 + 1),
        grid.sample(r0 + 1, c0),
        grid.sample(r0 + 1, c0 + 1),
    ];
    if corners.iter().any(|&z| z == grid.nodata || !z.is_finite()) {
        return Err(Error::MissingData { lat: p.lat, lon: p.lon });
    }
    let [z00, z01, z10, z11] = corners;
    let south = z00 + (z01 - z00) * tx;
    let north = z10 + (z11 - z10) * tx;
    Ok(south + (north - south) * ty)
}

/// Exposure coefficient `log2(N^2) - log2(t * ISO / 100)`, in stops.
pub fn compute_ec(exif: &ExifRecord) -> Option<f64> {
    let n = exif.aperture_n?;
    let t = exif.exposure_s?;
    let iso = exif.iso?;
    Some((n * n).log2() - (t * iso / 100.0).log2())
}

/// Half-angle field of view `atan(S / 2f)` in radians.
pub fn compute_fov(exif: &ExifRecord) -> Option<f64> {
    let f = exif.focal_mm?;
    let s = exif.sensor_mm?;
    Some((0.5 * s / f).atan())
}

#[derive(Debug, Clone)]
pub struct Annotated {
    pub records: Vec<ImageRecord>,
    /// Records passed through unchanged because they carry no position.
    pub skipped_without_geo: usize,
}

/// Fills `elevation_m` from the DEM for every record with a position.
pub fn annotate_elevations(records: &[ImageRecord], grid: &DemGrid) -> Result<Annotated> {
    let mut skipped = 0;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut r = r.clone();
        match r.geo {
            Some(geo) => {
                let z = dem_lookup(grid, geo).map_err(|e| Error::for_record(&r.id, e))?;
                r.elevation_m = Some(z);
            }
            None => skipped += 1,
        }
        out.push(r);
    }
    if skipped > 0 {
        log::warn!("{skipped} records without geo position left unannotated");
    }
    Ok(Annotated {
        records: out,
        skipped_without_geo: skipped,
    })
}
