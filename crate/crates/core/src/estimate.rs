//! Elevation estimators and the two-stage hybrid combiner.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bowindex::{IndexBuilder, InvertedIndex};
use crate::error::{Error, Result};
use crate::features::{load_features_as, power_normalize, FeatureSet, NormalizationConfig, RegionScaleConfig};
use crate::geomverify::{rerank, FeatureLookup, QuantizedImage, RerankedHit, VerifyParams};
use crate::mvocab::{knn_search, DbEntry, Neighbor, ShortVector, ShortVectorModel};
use crate::vocab::{quantize_features, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    BowVerified,
    BowMedian,
    Mvocab,
    Baseline,
    External,
    Hybrid,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::BowVerified => "bow-verified",
            Method::BowMedian => "bow-median",
            Method::Mvocab => "mvocab",
            Method::Baseline => "baseline",
            Method::External => "external",
            Method::Hybrid => "hybrid",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bow-verified" => Method::BowVerified,
            "bow-median" => Method::BowMedian,
            "mvocab" => Method::Mvocab,
            "baseline" => Method::Baseline,
            "external" => Method::External,
            "hybrid" => Method::Hybrid,
            other => return Err(Error::Validation(format!("unknown method {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    /// Neighbors retrieved by both retrieval estimators.
    pub k: usize,
    /// Cut-off of the dissimilarity weighting, relative to the top match.
    pub w_t: f64,
    pub t_sp: usize,
    pub reproj_tol: f64,
    pub shortlist: usize,
    pub orientation_tol: f64,
    pub scale_tol: f64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        let v = VerifyParams::default();
        Self {
            k: 100,
            w_t: 1.4,
            t_sp: v.t_sp,
            reproj_tol: v.reproj_tol,
            shortlist: v.shortlist,
            orientation_tol: v.orientation_tol,
            scale_tol: v.scale_tol,
        }
    }
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if !(self.w_t >= 1.0) {
            return Err(Error::Validation(format!("w_t = {} must be at least 1", self.w_t)));
        }
        self.verify_params().validate()
    }

    pub fn verify_params(&self) -> VerifyParams {
        VerifyParams {
            t_sp: self.t_sp,
            reproj_tol: self.reproj_tol,
            shortlist: self.shortlist.min(self.k),
            orientation_tol: self.orientation_tol,
            scale_tol: self.scale_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElevationEstimate {
    pub elevation_m: f64,
    pub method: Method,
    pub verified: bool,
    pub neighbor_count: usize,
}

/// Descriptor configuration of the sparse retrieval pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BowFeatureConfig {
    pub region: RegionScaleConfig,
    pub norm: NormalizationConfig,
}

impl Default for BowFeatureConfig {
    fn default() -> Self {
        Self {
            region: RegionScaleConfig::BASE,
            norm: NormalizationConfig::ROOT_SIFT,
        }
    }
}

pub fn quantize_image(features: &FeatureSet, vocab: &Vocabulary, cfg: BowFeatureConfig) -> Result<QuantizedImage> {
    let feats = features.variant(cfg.region).ok_or_else(|| {
        Error::Validation(format!(
            "image {:?} lacks the x{} measurement region",
            features.image_id, cfg.region.multiplier
        ))
    })?;
    let words = quantize_features(vocab, feats, cfg.norm)?;
    QuantizedImage::new(feats.to_vec(), words)
}

/// Normalized descriptors of the sparse pipeline's region, in corpus order.
pub fn bow_training_descriptors(sets: &[FeatureSet], cfg: BowFeatureConfig) -> Result<Vec<Vec<f64>>> {
    let per_image = sets
        .par_iter()
        .map(|fs| {
            let feats = fs.variant(cfg.region).ok_or_else(|| {
                Error::Validation(format!(
                    "image {:?} lacks the x{} measurement region",
                    fs.image_id, cfg.region.multiplier
                ))
            })?;
            feats
                .iter()
                .map(|f| power_normalize(&f.descriptor, cfg.norm))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Inverted index plus the quantized database images used for verification.
pub struct BowDatabase {
    pub index: InvertedIndex,
    pub images: HashMap<String, Arc<QuantizedImage>>,
}

/// Quantizes and indexes `(features, elevation)` pairs.
pub fn build_bow_database(vocab: &Vocabulary, sets: &[(&FeatureSet, f64)], cfg: BowFeatureConfig) -> Result<BowDatabase> {
    let quantized = sets
        .par_iter()
        .map(|(fs, _)| quantize_image(fs, vocab, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut builder = IndexBuilder::new(vocab.len());
    let mut images = HashMap::with_capacity(sets.len());
    for ((fs, elevation), q) in sets.iter().zip(quantized) {
        builder.add(fs.image_id.clone(), q.words.clone(), Some(*elevation))?;
        images.insert(fs.image_id.clone(), Arc::new(q));
    }
    Ok(BowDatabase {
        index: builder.build()?,
        images,
    })
}

/// Lazily loads and quantizes database images from feature files.
pub struct FeatureStore {
    paths: HashMap<String, PathBuf>,
    vocab: Arc<Vocabulary>,
    cfg: BowFeatureConfig,
    cache: RwLock<HashMap<String, Arc<QuantizedImage>>>,
}

impl FeatureStore {
    pub fn new(paths: HashMap<String, PathBuf>, vocab: Arc<Vocabulary>, cfg: BowFeatureConfig) -> Self {
        Self {
            paths,
            vocab,
            cfg,
            cache: RwLock::new(HashMap::new()),
        }
    }
}

impl FeatureLookup for FeatureStore {
    fn quantized(&self, image_id: &str) -> Result<Arc<QuantizedImage>> {
        if let Some(hit) = self.cache.read().expect("feature cache poisoned").get(image_id) {
            return Ok(hit.clone());
        }
        let path = self
            .paths
            .get(image_id)
            .ok_or_else(|| Error::Validation(format!("no feature file for database image {image_id:?}")))?;
        let fs = load_features_as(path, image_id)?;
        let q = Arc::new(quantize_image(&fs, &self.vocab, self.cfg)?);
        self.cache
            .write()
            .expect("feature cache poisoned")
            .insert(image_id.to_string(), q.clone());
        Ok(q)
    }
}

/// Median; even counts average the two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

#[derive(Debug, Clone)]
pub struct BowOutcome {
    pub estimate: ElevationEstimate,
    pub reranked: Vec<RerankedHit>,
}

/// Sparse retrieval with spatial verification over an inverted index.
pub struct BowEstimator<'a> {
    pub index: &'a InvertedIndex,
    pub lookup: &'a dyn FeatureLookup,
    pub params: EstimatorParams,
}

impl BowEstimator<'_> {
    /// Top-k retrieval and re-ranking. A verified top image gives its own
    /// elevation; otherwise the median over all k retrieved images.
    pub fn estimate_detailed(&self, query: &QuantizedImage) -> Result<BowOutcome> {
        self.params.validate()?;
        if query.is_empty() {
            return Err(Error::NoEstimate("query has no local features".into()));
        }
        let q = self.index.encode(&query.words)?;
        let ranked = self.index.query(&q, self.params.k);
        if ranked.is_empty() {
            return Err(Error::NoEstimate("no indexed image shares a visual word with the query".into()));
        }
        let reranked = rerank(&ranked, query, self.lookup, &self.params.verify_params())?;
        let elevation_of = |id: &str| {
            self.index
                .elevation(id)
                .ok_or_else(|| Error::Validation(format!("index lacks elevation for {id:?}")))
        };
        let top = &reranked[0];
        let estimate = if top.is_verified() {
            ElevationEstimate {
                elevation_m: elevation_of(&top.image_id)?,
                method: Method::BowVerified,
                verified: true,
                neighbor_count: 1,
            }
        } else {
            let elevations = ranked
                .hits
                .iter()
                .map(|h| elevation_of(&h.image_id))
                .collect::<Result<Vec<_>>>()?;
            ElevationEstimate {
                elevation_m: median(&elevations).expect("non-empty retrieval"),
                method: Method::BowMedian,
                verified: false,
                neighbor_count: elevations.len(),
            }
        };
        Ok(BowOutcome { estimate, reranked })
    }

    pub fn estimate(&self, query: &QuantizedImage) -> Result<ElevationEstimate> {
        self.estimate_detailed(query).map(|o| o.estimate)
    }
}

pub fn estimate_bow(
    query: &QuantizedImage,
    index: &InvertedIndex,
    lookup: &dyn FeatureLookup,
    params: &EstimatorParams,
) -> Result<ElevationEstimate> {
    BowEstimator {
        index,
        lookup,
        params: *params,
    }
    .estimate(query)
}

/// `max(0, 1 - d / (w_t * d_1))` with `d_1` the first (smallest) dissimilarity.
pub fn dissimilarity_weights(dissimilarities: &[f64], w_t: f64) -> Vec<f64> {
    let Some(&d1) = dissimilarities.first() else {
        return Vec::new();
    };
    dissimilarities
        .iter()
        .map(|&d| (1.0 - d / (w_t * d1)).max(0.0))
        .collect()
}

/// Weighted average of neighbor elevations, neighbors sorted by ascending
/// dissimilarity.
pub fn weighted_elevation(neighbors: &[Neighbor], w_t: f64) -> Result<ElevationEstimate> {
    let first = neighbors
        .first()
        .ok_or_else(|| Error::NoEstimate("no neighbors retrieved".into()))?;
    let d1 = first.dissimilarity;
    // Without a usable weight, average the neighbors tied with the top match.
    let tied_mean = || {
        let tied: Vec<f64> = neighbors
            .iter()
            .filter(|n| n.dissimilarity == d1)
            .map(|n| n.elevation_m)
            .collect();
        ElevationEstimate {
            elevation_m: tied.iter().sum::<f64>() / tied.len() as f64,
            method: Method::Mvocab,
            verified: false,
            neighbor_count: tied.len(),
        }
    };
    if d1 == 0.0 {
        return Ok(tied_mean());
    }
    let d: Vec<f64> = neighbors.iter().map(|n| n.dissimilarity).collect();
    let w = dissimilarity_weights(&d, w_t);
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Ok(tied_mean());
    }
    let weighted: f64 = w.iter().zip(neighbors).map(|(w, n)| w * n.elevation_m).sum();
    Ok(ElevationEstimate {
        elevation_m: weighted / total,
        method: Method::Mvocab,
        verified: false,
        neighbor_count: w.iter().filter(|&&x| x > 0.0).count(),
    })
}

pub fn estimate_mvocab(query: &ShortVector, database: &[DbEntry], params: &EstimatorParams) -> Result<ElevationEstimate> {
    params.validate()?;
    weighted_elevation(&knn_search(database, query, params.k)?, params.w_t)
}

/// Mean training elevation, reported for every query.
pub fn estimate_baseline(train_elevations: &[f64]) -> Result<ElevationEstimate> {
    if train_elevations.is_empty() {
        return Err(Error::Validation("baseline needs a non-empty training set".into()));
    }
    Ok(ElevationEstimate {
        elevation_m: train_elevations.iter().sum::<f64>() / train_elevations.len() as f64,
        method: Method::Baseline,
        verified: false,
        neighbor_count: train_elevations.len(),
    })
}

/// A query image as seen by the estimators.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub id: &'a str,
    pub features: &'a FeatureSet,
    pub quantized: &'a QuantizedImage,
}

/// Fallback used by the hybrid combiner when nothing is verified.
pub trait SecondaryEstimator: Sync {
    fn estimate(&self, query: &Query<'_>) -> Result<ElevationEstimate>;
}

pub struct MvocabEstimator<'a> {
    pub model: &'a ShortVectorModel,
    pub database: &'a [DbEntry],
    pub params: EstimatorParams,
}

impl SecondaryEstimator for MvocabEstimator<'_> {
    fn estimate(&self, query: &Query<'_>) -> Result<ElevationEstimate> {
        let v = self.model.embed(query.features)?;
        estimate_mvocab(&v, self.database, &self.params)
    }
}

/// Predictions produced outside this crate, keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalPredictions {
    pub source: String,
    pub predictions: BTreeMap<String, f64>,
}

impl ExternalPredictions {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.predictions.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

impl SecondaryEstimator for ExternalPredictions {
    fn estimate(&self, query: &Query<'_>) -> Result<ElevationEstimate> {
        let e = self
            .get(query.id)
            .ok_or_else(|| Error::NoEstimate(format!("no {} prediction for {:?}", self.source, query.id)))?;
        Ok(ElevationEstimate {
            elevation_m: e,
            method: Method::External,
            verified: false,
            neighbor_count: 0,
        })
    }
}

/// Verified sparse retrieval first, then the secondary estimator. Without a
/// secondary this is exactly the sparse estimator.
pub fn estimate_hybrid(
    query: &Query<'_>,
    bow: &BowEstimator<'_>,
    secondary: Option<&dyn SecondaryEstimator>,
) -> Result<ElevationEstimate> {
    estimate_hybrid_detailed(query, bow, secondary).map(|(e, _)| e)
}

/// [`estimate_hybrid`] plus the re-ranked retrieval list, when retrieval
/// found anything.
pub fn estimate_hybrid_detailed(
    query: &Query<'_>,
    bow: &BowEstimator<'_>,
    secondary: Option<&dyn SecondaryEstimator>,
) -> Result<(ElevationEstimate, Option<Vec<RerankedHit>>)> {
    let (primary, reranked) = match bow.estimate_detailed(query.quantized) {
        Ok(o) if o.estimate.method == Method::BowVerified => return Ok((o.estimate, Some(o.reranked))),
        Ok(o) => (Ok(o.estimate), Some(o.reranked)),
        Err(Error::NoEstimate(msg)) => (Err(msg), None),
        Err(other) => return Err(other),
    };
    let Some(secondary) = secondary else {
        return primary.map(|e| (e, reranked)).map_err(Error::NoEstimate);
    };
    match secondary.estimate(query) {
        Ok(e) => Ok((
            ElevationEstimate {
                method: Method::Hybrid,
                verified: false,
                ..e
            },
            reranked,
        )),
        Err(err) => Err(Error::NoEstimate(match primary {
            Err(msg) => format!("{msg}; secondary failed: {err}"),
            Ok(_) => format!("no verified match and secondary failed: {err}"),
        })),
    }
}

pub const PREDICTIONS_HEADER: [&str; 3] = ["image_id", "elevation_m", "method"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: String,
    pub elevation_m: f64,
    pub method: String,
}

/// Reads a predictions CSV into rows, checking the header and values.
pub fn read_prediction_rows(path: &Path) -> Result<Vec<PredictionRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_prediction_rows(file, path)
}

pub fn parse_prediction_rows(reader: impl std::io::Read, path: &Path) -> Result<Vec<PredictionRow>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = rdr.records();
    match records.next() {
        None => return Ok(Vec::new()),
        Some(header) => {
            let header = header.map_err(|e| parse_err(1, e.to_string()))?;
            let names: Vec<&str> = header.iter().map(str::trim).collect();
            if names != PREDICTIONS_HEADER {
                return Err(parse_err(1, format!("expected header {}", PREDICTIONS_HEADER.join(","))));
            }
        }
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, found {}", rec.len())));
        }
        let image_id = rec[0].trim().to_string();
        if image_id.is_empty() {
            return Err(parse_err(line, "empty image_id".into()));
        }
        let elevation_m: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("elevation {:?} is not a number", &rec[1])))?;
        if !elevation_m.is_finite() {
            return Err(parse_err(line, "elevation must be finite".into()));
        }
        rows.push(PredictionRow {
            image_id,
            elevation_m,
            method: rec[2].trim().to_string(),
        });
    }
    Ok(rows)
}

pub fn load_external_predictions(path: &Path) -> Result<ExternalPredictions> {
    let rows = read_prediction_rows(path)?;
    let mut predictions = BTreeMap::new();
    for r in &rows {
        if predictions.insert(r.image_id.clone(), r.elevation_m).is_some() {
            return Err(Error::DuplicateId(r.image_id.clone()));
        }
    }
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let source = match methods.as_slice() {
        [one] => one.to_string(),
        _ => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "external".into()),
    };
    Ok(ExternalPredictions { source, predictions })
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(PREDICTIONS_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([r.image_id.as_str(), &r.elevation_m.to_string(), r.method.as_str()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
