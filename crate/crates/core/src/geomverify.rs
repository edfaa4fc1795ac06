//! Spatial verification of retrieved images and shortlist re-ranking.
//!
//! Every tentative correspondence between two images carries a full
//! similarity frame (position, scale, orientation), so a single pair fixes a
//! 4-DoF similarity transform. All such hypotheses are enumerated in
//! correspondence order and the one with the most inliers wins; a later
//! hypothesis must strictly improve on the best count to replace it.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bowindex::RankedList;
use crate::error::{Error, Result};
use crate::features::LocalFeature;

/// A matched point pair, query coordinates first.
pub type PointPair = ((f64, f64), (f64, f64));

/// Cap on query and database features contributing pairs for a single word.
pub const PER_WORD_CAP: usize = 5;

/// Local features of one image with their visual words, index-aligned.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantizedImage {
    pub features: Vec<LocalFeature>,
    pub words: Vec<u32>,
}

impl QuantizedImage {
    pub fn new(features: Vec<LocalFeature>, words: Vec<u32>) -> Result<Self> {
        if features.len() != words.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                got: words.len(),
            });
        }
        Ok(Self { features, words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Correspondence {
    pub query: usize,
    pub db: usize,
    pub word: u32,
}

/// `p -> scale * R(rotation) * p + (tx, ty)`, mapping query to database
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub fn from_pair(query: &LocalFeature, db: &LocalFeature) -> Self {
        let scale = db.scale / query.scale;
        let rotation = db.orientation - query.orientation;
        let (s, c) = rotation.sin_cos();
        let tx = db.x - scale * (c * query.x - s * query.y);
        let ty = db.y - scale * (s * query.x + c * query.y);
        Self {
            scale,
            rotation,
            tx,
            ty,
        }
    }

    /// Least-squares similarity between matched point sets; `None` when the
    /// query points coincide.
    pub fn fit(pairs: &[PointPair]) -> Option<Self> {
        if pairs.len() < 2 {
            return None;
        }
        let n = pairs.len() as f64;
        let (mut qx, mut qy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
        for &((a, b), (c, d)) in pairs {
            qx += a;
            qy += b;
            dx += c;
            dy += d;
        }
        let (qx, qy, dx, dy) = (qx / n, qy / n, dx / n, dy / n);
        let (mut a, mut b, mut sq) = (0.0, 0.0, 0.0);
        for &((x, y), (u, v)) in pairs {
            let (x, y, u, v) = (x - qx, y - qy, u - dx, v - dy);
            a += x * u + y * v;
            b += x * v - y * u;
            sq += x * x + y * y;
        }
        if sq <= f64::EPSILON * n {
            return None;
        }
        let scale = a.hypot(b) / sq;
        let rotation = b.atan2(a);
        let (s, c) = rotation.sin_cos();
        Some(Self {
            scale,
            rotation,
            tx: dx - scale * (c * qx - s * qy),
            ty: dy - scale * (s * qx + c * qy),
        })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (
            self.scale * (c * x - s * y) + self.tx,
            self.scale * (s * x + c * y) + self.ty,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyParams {
    /// A pair verifies with strictly more than `t_sp` inliers.
    pub t_sp: usize,
    /// Inlier tolerance as a fraction of the database image diagonal.
    pub reproj_tol: f64,
    /// How many top-ranked images are verified.
    pub shortlist: usize,
    /// Largest deviation, in radians, of an inlier's orientation change from
    /// the hypothesis rotation.
    pub orientation_tol: f64,
    /// Largest `|log2|` deviation of an inlier's scale ratio from the
    /// hypothesis scale.
    pub scale_tol: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            t_sp: 8,
            reproj_tol: 0.05,
            shortlist: 50,
            orientation_tol: std::f64::consts::FRAC_PI_6,
            scale_tol: 1.0,
        }
    }
}

impl VerifyParams {
    pub fn validate(&self) -> Result<()> {
        if self.t_sp < 1 {
            return Err(Error::Validation("t_sp must be at least 1".into()));
        }
        if !(self.reproj_tol > 0.0) {
            return Err(Error::Validation("reproj_tol must be positive".into()));
        }
        if !(self.orientation_tol >= 0.0 && self.scale_tol >= 0.0) {
            return Err(Error::Validation("shape tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationResult {
    pub inlier_count: usize,
    pub transform: Option<SimilarityTransform>,
    pub verified: bool,
    /// Indices into the correspondence list.
    pub inliers: Vec<usize>,
}

impl VerificationResult {
    fn none() -> Self {
        Self {
            inlier_count: 0,
            transform: None,
            verified: false,
            inliers: Vec::new(),
        }
    }
}

/// All cross pairs sharing a word, at most `PER_WORD_CAP` features per side
/// and word. Ordered by word, then query index, then database index.
pub fn tentative_correspondences(query: &QuantizedImage, db: &QuantizedImage) -> Vec<Correspondence> {
    let group = |img: &QuantizedImage| {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &w) in img.words.iter().enumerate() {
            let slot = m.entry(w).or_default();
            if slot.len() < PER_WORD_CAP {
                slot.push(i);
            }
        }
        m
    };
    let q = group(query);
    let d = group(db);
    let mut out = Vec::new();
    for (word, qs) in &q {
        if let Some(ds) = d.get(word) {
            for &qi in qs {
                for &di in ds {
                    out.push(Correspondence {
                        query: qi,
                        db: di,
                        word: *word,
                    });
                }
            }
        }
    }
    out
}

fn diagonal(features: &[LocalFeature]) -> f64 {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for f in features {
        x0 = x0.min(f.x);
        y0 = y0.min(f.y);
        x1 = x1.max(f.x);
        y1 = y1.max(f.y);
    }
    if features.is_empty() {
        0.0
    } else {
        (x1 - x0).hypot(y1 - y0)
    }
}

/// Angle in `[-pi, pi)`.
fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    (a + PI).rem_euclid(TAU) - PI
}

/// Best single-correspondence similarity hypothesis by inlier count. An
/// inlier must reproject within tolerance and agree with the hypothesis in
/// local scale and orientation. The reported transform is refit to that
/// hypothesis's inliers by least squares.
///
/// The image diagonal is taken from the bounding box of the database
/// features.
pub fn verify(
    correspondences: &[Correspondence],
    query: &[LocalFeature],
    db: &[LocalFeature],
    params: &VerifyParams,
) -> Result<VerificationResult> {
    if correspondences.is_empty() {
        return Ok(VerificationResult::none());
    }
    if let Some(c) = correspondences.iter().find(|c| c.query >= query.len() || c.db >= db.len()) {
        return Err(Error::Validation(format!(
            "correspondence ({}, {}) outside feature lists",
            c.query, c.db
        )));
    }
    let tol = params.reproj_tol * diagonal(db);
    let tol2 = tol * tol + 1e-18;
    let mut best: Option<(SimilarityTransform, Vec<usize>)> = None;
    for hyp in correspondences {
        let t = SimilarityTransform::from_pair(&query[hyp.query], &db[hyp.db]);
        let log_scale = t.scale.log2();
        let inliers: Vec<usize> = correspondences
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                let q = &query[c.query];
                let d = &db[c.db];
                let turn = wrap_angle(d.orientation - q.orientation - t.rotation);
                if turn.abs() > params.orientation_tol
                    || ((d.scale / q.scale).log2() - log_scale).abs() > params.scale_tol
                {
                    return false;
                }
                let (x, y) = t.apply(q.x, q.y);
                let (dx, dy) = (x - d.x, y - d.y);
                dx * dx + dy * dy <= tol2 + 1e-12 * (d.x * d.x + d.y * d.y)
            })
            .map(|(i, _)| i)
            .collect();
        if best.as_ref().is_none_or(|b| inliers.len() > b.1.len()) {
            best = Some((t, inliers));
        }
    }
    let (hypothesis, inliers) = best.expect("non-empty correspondences");
    let inlier_count = inliers.len();
    let matched: Vec<_> = inliers
        .iter()
        .map(|&i| {
            let c = &correspondences[i];
            ((query[c.query].x, query[c.query].y), (db[c.db].x, db[c.db].y))
        })
        .collect();
    let transform = SimilarityTransform::fit(&matched).unwrap_or(hypothesis);
    Ok(VerificationResult {
        inlier_count,
        transform: (inlier_count > 0).then_some(transform),
        verified: inlier_count > params.t_sp,
        inliers,
    })
}

/// Source of quantized database images for verification.
pub trait FeatureLookup: Sync {
    fn quantized(&self, image_id: &str) -> Result<Arc<QuantizedImage>>;
}

impl FeatureLookup for std::collections::HashMap<String, Arc<QuantizedImage>> {
    fn quantized(&self, image_id: &str) -> Result<Arc<QuantizedImage>> {
        self.get(image_id)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("no features for database image {image_id:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    pub correspondences: Vec<Correspondence>,
    pub result: VerificationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RerankedHit {
    pub image_id: String,
    pub score: f64,
    /// Present for shortlisted images.
    pub verification: Option<Verification>,
}

impl RerankedHit {
    pub fn is_verified(&self) -> bool {
        self.verification.as_ref().is_some_and(|v| v.result.verified)
    }

    pub fn inlier_count(&self) -> usize {
        self.verification.as_ref().map_or(0, |v| v.result.inlier_count)
    }
}

/// Verifies the top `shortlist` images and moves verified ones to the front,
/// ordered by inlier count; the rest keep their similarity order.
pub fn rerank(
    ranked: &RankedList,
    query: &QuantizedImage,
    lookup: &dyn FeatureLookup,
    params: &VerifyParams,
) -> Result<Vec<RerankedHit>> {
    params.validate()?;
    let n = params.shortlist.min(ranked.hits.len());
    let verified: Vec<Verification> = ranked.hits[..n]
        .par_iter()
        .map(|hit| {
            let db = lookup.quantized(&hit.image_id)?;
            let correspondences = tentative_correspondences(query, &db);
            let result = verify(&correspondences, &query.features, &db.features, params)?;
            Ok(Verification {
                correspondences,
                result,
            })
        })
        .collect::<Result<_>>()?;
    let mut hits: Vec<RerankedHit> = ranked
        .hits
        .iter()
        .zip(verified.into_iter().map(Some).chain(std::iter::repeat_with(|| None)))
        .map(|(h, v)| RerankedHit {
            image_id: h.image_id.clone(),
            score: h.score,
            verification: v,
        })
        .collect();
    // Stable: equal keys keep similarity order.
    hits.sort_by_key(|h| {
        if h.is_verified() {
            std::cmp::Reverse(h.inlier_count() + 1)
        } else {
            std::cmp::Reverse(0)
        }
    });
    Ok(hits)
}
