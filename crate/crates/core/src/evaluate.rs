//! Accuracy metrics, comparison reports and a synthetic corpus generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_manifest, GeoPoint, ImageRecord};
use crate::error::{Error, Result};
use crate::estimate::{write_predictions, PredictionRow};
use crate::features::{write_features, FeatureSet, LocalFeature, RegionScaleConfig, DESCRIPTOR_DIM};

/// Root-mean-square difference.
pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} ground-truth values",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("rmse of an empty set".into()));
    }
    let sq: f64 = predictions.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / predictions.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub threshold_m: f64,
    pub fraction: f64,
}

/// Fraction of `|error| <= threshold` for each threshold.
pub fn cumulative_accuracy(errors: &[f64], thresholds: &[f64]) -> Result<Vec<AccuracyPoint>> {
    if errors.is_empty() {
        return Err(Error::Validation("cumulative accuracy of an empty set".into()));
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) || thresholds.iter().any(|t| t.is_nan()) {
        return Err(Error::Validation("thresholds must be sorted ascending".into()));
    }
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| AccuracyPoint {
            threshold_m: t,
            fraction: abs.partition_point(|&e| e <= t) as f64 / n,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasBin {
    pub bin_center_m: f64,
    pub mean_signed_error_m: f64,
    pub count: usize,
}

/// Mean of `prediction - truth` over bins `[k*w, (k+1)*w)` of the truth.
pub fn bias_by_elevation(pairs: &[(f64, f64)], bin_width_m: f64) -> Result<Vec<BiasBin>> {
    if !(bin_width_m > 0.0) || !bin_width_m.is_finite() {
        return Err(Error::Validation(format!("bin width {bin_width_m} must be positive")));
    }
    if pairs.is_empty() {
        return Err(Error::Validation("bias of an empty set".into()));
    }
    let mut bins: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for &(truth, pred) in pairs {
        let slot = bins.entry((truth / bin_width_m).floor() as i64).or_insert((0.0, 0));
        slot.0 += pred - truth;
        slot.1 += 1;
    }
    Ok(bins
        .into_iter()
        .map(|(k, (sum, count))| BiasBin {
            bin_center_m: (k as f64 + 0.5) * bin_width_m,
            mean_signed_error_m: sum / count as f64,
            count,
        })
        .collect())
}

/// 0 to 3000 m in 100 m steps.
pub fn default_thresholds() -> Vec<f64> {
    (0..=30).map(|i| i as f64 * 100.0).collect()
}

pub const DEFAULT_BIAS_BIN_M: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub method: String,
    pub test_rmse_m: Option<f64>,
    pub user_set_rmse_m: Option<f64>,
}

/// Published results on the original 98K-image alpine corpus. Informational
/// only; not comparable with synthetic runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConstants {
    pub human_rmse_m: f64,
    pub rows: Vec<ReferenceRow>,
}

pub const HUMAN_RMSE_M: f64 = 879.95;

impl Default for ReferenceConstants {
    fn default() -> Self {
        let row = |m: &str, t: Option<f64>, u: Option<f64>| ReferenceRow {
            method: m.into(),
            test_rmse_m: t,
            user_set_rmse_m: u,
        };
        Self {
            human_rmse_m: HUMAN_RMSE_M,
            rows: vec![
                row("baseline", Some(801.49), Some(1383.64)),
                row("baseline (test mean)", Some(786.42), Some(1154.43)),
                row("human", None, Some(HUMAN_RMSE_M)),
                row("cnn", Some(537.11), Some(709.10)),
                row("bow", Some(601.63), Some(757.76)),
                row("mvocab", Some(610.36), Some(811.00)),
                row("bow+mvocab", Some(564.14), Some(646.89)),
                row("bow+cnn", Some(500.44), Some(531.05)),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub rmse_m: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub image_id: String,
    pub truth_m: f64,
    pub prediction_m: f64,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_count: usize,
    /// Ground-truth images without a prediction.
    pub missing_predictions: usize,
    pub rmse_m: f64,
    /// RMSE of predicting the mean of the evaluated truths.
    pub truth_std_m: f64,
    /// Per method tag in the predictions, sorted by tag.
    pub methods: Vec<MethodScore>,
    pub cumulative_accuracy: Vec<AccuracyPoint>,
    pub bias_bin_width_m: f64,
    pub bias: Vec<BiasBin>,
    pub reference: ReferenceConstants,
}

impl EvalReport {
    /// The threshold grid is extended with the largest absolute error when
    /// needed so the curve reaches 1.
    pub fn build(samples: &[EvalSample], missing: usize, thresholds: &[f64], bin_width_m: f64) -> Result<Self> {
        let preds: Vec<f64> = samples.iter().map(|s| s.prediction_m).collect();
        let truths: Vec<f64> = samples.iter().map(|s| s.truth_m).collect();
        let overall = rmse(&preds, &truths)?;
        let mean = truths.iter().sum::<f64>() / truths.len() as f64;
        let truth_std_m = rmse(&vec![mean; truths.len()], &truths)?;

        let mut by_method: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for s in samples {
            let e = by_method.entry(&s.method).or_default();
            e.0.push(s.prediction_m);
            e.1.push(s.truth_m);
        }
        let methods = by_method
            .into_iter()
            .map(|(m, (p, t))| {
                Ok(MethodScore {
                    method: m.to_string(),
                    rmse_m: rmse(&p, &t)?,
                    count: p.len(),
                })
            })
            .collect::<Result<_>>()?;

        let errors: Vec<f64> = samples.iter().map(|s| s.prediction_m - s.truth_m).collect();
        let max_err = errors.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let mut grid = thresholds.to_vec();
        if grid.last().is_none_or(|&t| t < max_err) {
            grid.push(max_err);
        }
        let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.truth_m, s.prediction_m)).collect();
        Ok(Self {
            sample_count: samples.len(),
            missing_predictions: missing,
            rmse_m: overall,
            truth_std_m,
            methods,
            cumulative_accuracy: cumulative_accuracy(&errors, &grid)?,
            bias_bin_width_m: bin_width_m,
            bias: bias_by_elevation(&pairs, bin_width_m)?,
            reference: ReferenceConstants::default(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("malformed report: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images evaluated: {}", self.sample_count);
        if self.missing_predictions > 0 {
            let _ = writeln!(s, "images without prediction: {}", self.missing_predictions);
        }
        let _ = writeln!(s, "overall RMSE: {:.2} m", self.rmse_m);
        let _ = writeln!(s, "constant (truth mean) RMSE: {:.2} m", self.truth_std_m);
        let _ = writeln!(s, "\n{:<16} {:>8} {:>12}", "method", "count", "RMSE (m)");
        for m in &self.methods {
            let _ = writeln!(s, "{:<16} {:>8} {:>12.2}", m.method, m.count, m.rmse_m);
        }
        let _ = writeln!(s, "\ncumulative accuracy");
        for p in &self.cumulative_accuracy {
            let _ = writeln!(s, "  |err| <= {:>8.1} m  {:>6.3}", p.threshold_m, p.fraction);
        }
        let _ = writeln!(s, "\nbias by elevation ({} m bins)", self.bias_bin_width_m);
        for b in &self.bias {
            let _ = writeln!(
                s,
                "  {:>8.1} m  {:>+9.2} m  (n={})",
                b.bin_center_m, b.mean_signed_error_m, b.count
            );
        }
        let _ = writeln!(s, "\nreference results on the original corpus (not comparable)");
        for r in &self.reference.rows {
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
            let _ = writeln!(
                s,
                "  {:<22} test {:>8}  user set {:>8}",
                r.method,
                fmt(r.test_rmse_m),
                fmt(r.user_set_rmse_m)
            );
        }
        s
    }

    /// Writes `cumulative_accuracy.csv` and `bias.csv` into `dir`.
    pub fn write_curves(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
            let path = dir.join(name);
            let io = |e: csv::Error| Error::io(&path, e.into());
            let mut w = csv::Writer::from_path(&path).map_err(io)?;
            w.write_record(header).map_err(io)?;
            for r in rows {
                w.write_record(&r).map_err(io)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))
        };
        write(
            "cumulative_accuracy.csv",
            &["threshold_m", "fraction"],
            self.cumulative_accuracy
                .iter()
                .map(|p| vec![p.threshold_m.to_string(), p.fraction.to_string()])
                .collect(),
        )?;
        write(
            "bias.csv",
            &["bin_center_m", "mean_signed_error_m", "count"],
            self.bias
                .iter()
                .map(|b| {
                    vec![
                        b.bin_center_m.to_string(),
                        b.mean_signed_error_m.to_string(),
                        b.count.to_string(),
                    ]
                })
                .collect(),
        )
    }
}

/// Joins predictions with ground truth. Returns matched samples (in
/// prediction order) and the number of truths left without a prediction.
pub fn match_predictions(truth: &BTreeMap<String, f64>, rows: &[PredictionRow]) -> Result<(Vec<EvalSample>, usize)> {
    let mut seen = std::collections::HashSet::new();
    let mut samples = Vec::with_capacity(rows.len());
    for r in rows {
        let t = *truth
            .get(&r.image_id)
            .ok_or_else(|| Error::Validation(format!("no ground truth for predicted image {:?}", r.image_id)))?;
        if !seen.insert(r.image_id.as_str()) {
            return Err(Error::DuplicateId(r.image_id.clone()));
        }
        samples.push(EvalSample {
            image_id: r.image_id.clone(),
            truth_m: t,
            prediction_m: r.elevation_m,
            method: r.method.clone(),
        });
    }
    let missing = truth.len() - samples.len();
    Ok((samples, missing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub places: usize,
    pub images_per_place: usize,
    pub features_per_image: usize,
    /// Fraction of each image's features that are landmarks of its place.
    pub inlier_fraction: f64,
    pub elevation_range_m: (f64, f64),
    pub seed: u64,
    pub image_size: (f64, f64),
    /// Relative Gaussian perturbation of landmark descriptors per view.
    pub descriptor_noise: f64,
    /// Gaussian jitter of landmark positions per view, in pixels.
    pub position_noise_px: f64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            places: 20,
            images_per_place: 10,
            features_per_image: 100,
            inlier_fraction: 0.7,
            elevation_range_m: (0.0, 4782.0),
            seed: 0,
            image_size: (640.0, 480.0),
            descriptor_noise: 0.05,
            position_noise_px: 0.5,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.places == 0 || self.images_per_place == 0 || self.features_per_image == 0 {
            return Err(Error::Validation("synthetic corpus counts must be positive".into()));
        }
        if !(self.inlier_fraction > 0.0 && self.inlier_fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "inlier fraction {} outside (0, 1]",
                self.inlier_fraction
            )));
        }
        let (lo, hi) = self.elevation_range_m;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Validation("elevation range must be finite and ordered".into()));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return Err(Error::Validation("image size must be positive".into()));
        }
        if !(self.descriptor_noise >= 0.0 && self.position_noise_px >= 0.0) {
            return Err(Error::Validation("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn landmarks_per_image(&self) -> usize {
        ((self.inlier_fraction * self.features_per_image as f64).round() as usize).clamp(1, self.features_per_image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub record: ImageRecord,
    pub features: FeatureSet,
    pub place: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub images: Vec<SyntheticImage>,
    pub place_elevations: Vec<f64>,
}

struct Landmark {
    x: f64,
    y: f64,
    scale: f64,
    orientation: f64,
    descriptors: [Vec<f64>; 2],
}

fn random_descriptor(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let exp = Exp::new(1.0).expect("valid rate");
    (0..DESCRIPTOR_DIM)
        .map(|_| if rng.random_bool(0.5) { exp.sample(rng) } else { 0.0 })
        .collect()
}

fn perturb(desc: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = Normal::new(0.0, noise).expect("valid sigma");
    let mut out: Vec<f64> = desc
        .iter()
        .map(|&v| (v + n.sample(rng) * (v + 0.1)).max(0.0))
        .collect();
    if out.iter().all(|&v| v == 0.0) {
        out[0] = 1.0;
    }
    out
}

/// Rounds through f32 so in-memory values equal their on-disk form.
fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

fn build_feature(x: f64, y: f64, scale: f64, orientation: f64, desc: Vec<f64>) -> LocalFeature {
    LocalFeature {
        x: f32r(x),
        y: f32r(y),
        scale: f32r(scale),
        orientation: f32r(orientation),
        descriptor: desc.into_iter().map(f32r).collect(),
    }
}

const REGIONS: [RegionScaleConfig; 2] = [RegionScaleConfig::BASE, RegionScaleConfig::WIDE];

/// Deterministic corpus of places seen from several viewpoints.
///
/// Every place owns a pool of landmarks; each of its images shows all of them
/// under a random similarity transform with position and descriptor noise,
/// padded with clutter drawn independently per image. Features carry one
/// descriptor per measurement region.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = spec.image_size;
    let (cx, cy) = (w / 2.0, h / 2.0);
    let m = spec.landmarks_per_image();
    let jitter = Normal::new(0.0, spec.position_noise_px).expect("valid sigma");
    let mut images = Vec::with_capacity(spec.places * spec.images_per_place);
    let mut place_elevations = Vec::with_capacity(spec.places);
    for p in 0..spec.places {
        let (lo, hi) = spec.elevation_range_m;
        let elevation = f32r(if hi > lo { rng.random_range(lo..=hi) } else { lo });
        place_elevations.push(elevation);
        let lat = 45.5 + rng.random_range(0.0..2.5);
        let lon = 6.0 + rng.random_range(0.0..8.0);
        let landmarks: Vec<Landmark> = (0..m)
            .map(|_| Landmark {
                x: rng.random_range(0.1 * w..0.9 * w),
                y: rng.random_range(0.1 * h..0.9 * h),
                scale: rng.random_range(1.5..12.0),
                orientation: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                descriptors: [random_descriptor(&mut rng), random_descriptor(&mut rng)],
            })
            .collect();
        for i in 0..spec.images_per_place {
            let id = format!("p{p:03}_i{i:03}");
            let s = rng.random_range(0.75..1.33);
            let theta: f64 = rng.random_range(-0.35..0.35);
            let (tx, ty) = (rng.random_range(-0.08 * w..0.08 * w), rng.random_range(-0.08 * h..0.08 * h));
            let (sin, cos) = theta.sin_cos();
            let mut variants: [Vec<LocalFeature>; 2] = Default::default();
            for l in &landmarks {
                let (dx, dy) = (l.x - cx, l.y - cy);
                let x = cx + s * (cos * dx - sin * dy) + tx + jitter.sample(&mut rng);
                let y = cy + s * (sin * dx + cos * dy) + ty + jitter.sample(&mut rng);
                let scale = l.scale * s;
                let orientation = l.orientation + theta;
                for (v, d) in variants.iter_mut().zip(&l.descriptors) {
                    v.push(build_feature(x, y, scale, orientation, perturb(d, spec.descriptor_noise, &mut rng)));
                }
            }
            for _ in m..spec.features_per_image {
                let x = rng.random_range(0.0..w);
                let y = rng.random_range(0.0..h);
                let scale = rng.random_range(1.5..12.0);
                let orientation = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                for v in variants.iter_mut() {
                    v.push(build_feature(x, y, scale, orientation, random_descriptor(&mut rng)));
                }
            }
            let [base, wide] = variants;
            let features = FeatureSet::new(id.clone(), vec![(REGIONS[0], base), (REGIONS[1], wide)])?;
            let mut record = ImageRecord::new(id.clone());
            record.geo = Some(GeoPoint::new(
                lat + rng.random_range(-0.005..0.005),
                lon + rng.random_range(-0.005..0.005),
            )?);
            record.elevation_m = Some(elevation);
            record.feature_path = Some(PathBuf::from("features").join(format!("{id}.elfv")));
            record.scene_score = Some(1.0);
            images.push(SyntheticImage {
                record,
                features,
                place: p,
            });
        }
    }
    Ok(SyntheticCorpus {
        images,
        place_elevations,
    })
}

/// Paths written by [`write_synthetic_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLayout {
    pub manifest: PathBuf,
    pub features_dir: PathBuf,
    pub truth: PathBuf,
}

/// Writes `manifest.jsonl`, `features/<id>.elfv` and `truth.csv` (the ground
/// truth in predictions format) under `dir`.
pub fn write_synthetic_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<SyntheticLayout> {
    let features_dir = dir.join("features");
    std::fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;
    for img in &corpus.images {
        let rel = img.record.feature_path.as_ref().expect("generator sets feature paths");
        write_features(&dir.join(rel), &img.features)?;
    }
    let manifest = dir.join("manifest.jsonl");
    let records: Vec<ImageRecord> = corpus.images.iter().map(|i| i.record.clone()).collect();
    write_manifest(&manifest, &records)?;
    let truth = dir.join("truth.csv");
    let rows: Vec<PredictionRow> = corpus
        .images
        .iter()
        .map(|i| PredictionRow {
            image_id: i.record.id.clone(),
            elevation_m: i.record.elevation_m.expect("generator sets elevations"),
            method: "truth".into(),
        })
        .collect();
    write_predictions(&truth, &rows)?;
    Ok(SyntheticLayout {
        manifest,
        features_dir,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((rmse(&[100.0, 200.0], &[100.0, 100.0]).unwrap() - 70.710_678_118_654_76).abs() < 1e-9);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let c = cumulative_accuracy(&[10.0, -50.0, 100.0], &[0.0, 50.0, 100.0, 1000.0]).unwrap();
        let f: Vec<f64> = c.iter().map(|p| p.fraction).collect();
        assert_eq!(f, vec![0.0, 2.0 / 3.0, 1.0, 1.0]);
        assert!(cumulative_accuracy(&[], &[1.0]).is_err());
        assert!(cumulative_accuracy(&[1.0], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn bias_examples() {
        let b = bias_by_elevation(&[(100.0, 200.0), (150.0, 150.0)], 500.0).unwrap();
        assert_eq!(b, vec![BiasBin { bin_center_m: 250.0, mean_signed_error_m: 50.0, count: 2 }]);
        let b = bias_by_elevation(&[(100.0, 100.0), (600.0, 600.0)], 500.0).unwrap();
        assert_eq!(b.iter().map(|x| x.count).collect::<Vec<_>>(), vec![1, 1]);
        assert!(b.iter().all(|x| x.mean_signed_error_m == 0.0));
        assert_eq!(bias_by_elevation(&[(500.0, 0.0)], 500.0).unwrap()[0].bin_center_m, 750.0);
        assert!(bias_by_elevation(&[(1.0, 1.0)], 0.0).is_err());
        assert!(bias_by_elevation(&[], 10.0).is_err());
    }

    fn sample(id: &str, t: f64, p: f64, m: &str) -> EvalSample {
        EvalSample { image_id: id.into(), truth_m: t, prediction_m: p, method: m.into() }
    }

    #[test]
    fn report_contents() {
        let s = vec![
            sample("a", 1000.0, 1100.0, "bow-verified"),
            sample("b", 2000.0, 1000.0, "hybrid"),
            sample("c", 3000.0, 3000.0, "bow-verified"),
        ];
        let r = EvalReport::build(&s, 1, &default_thresholds(), 500.0).unwrap();
        assert_eq!(r.sample_count, 3);
        assert_eq!(r.missing_predictions, 1);
        assert_eq!(r.methods.len(), 2);
        assert_eq!(r.methods[1].method, "hybrid");
        assert_eq!(r.methods[1].rmse_m, 1000.0);
        assert_eq!(r.cumulative_accuracy.last().unwrap().fraction, 1.0);
        assert_eq!(r.cumulative_accuracy.last().unwrap().threshold_m, 3000.0);
        assert_eq!(r.bias.iter().map(|b| b.count).sum::<usize>(), 3);
        let back = EvalReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_text().contains("overall RMSE"));
        assert_eq!(r.reference.human_rmse_m, 879.95);

        let big = vec![sample("a", 0.0, 4000.0, "x")];
        let r = EvalReport::build(&big, 0, &default_thresholds(), 500.0).unwrap();
        let last = r.cumulative_accuracy.last().unwrap();
        assert_eq!((last.threshold_m, last.fraction), (4000.0, 1.0));

        let dir = tempfile::tempdir().unwrap();
        r.write_curves(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("bias.csv")).unwrap();
        assert!(text.starts_with("bin_center_m,mean_signed_error_m,count\n"));
    }

    #[test]
    fn matching() {
        let truth: BTreeMap<String, f64> = [("a".to_string(), 1.0), ("b".to_string(), 2.0)].into();
        let rows = vec![PredictionRow { image_id: "b".into(), elevation_m: 3.0, method: "m".into() }];
        let (s, missing) = match_predictions(&truth, &rows).unwrap();
        assert_eq!((s.len(), missing, s[0].truth_m), (1, 1, 2.0));
        let stray = vec![PredictionRow { image_id: "z".into(), elevation_m: 3.0, method: "m".into() }];
        assert!(match_predictions(&truth, &stray).is_err());
        let dup = vec![rows[0].clone(), rows[0].clone()];
        assert!(matches!(match_predictions(&truth, &dup), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn synthetic_shape_and_determinism() {
        let spec = SyntheticCorpusSpec { places: 3, images_per_place: 2, features_per_image: 20, ..Default::default() };
        let a = generate_synthetic_corpus(&spec).unwrap();
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.len(), 6);
        assert_eq!(spec.landmarks_per_image(), 14);
        for img in &a.images {
            assert_eq!(img.features.feature_count(), 20);
            assert_eq!(img.features.variants().len(), 2);
            assert_eq!(img.record.elevation_m, Some(a.place_elevations[img.place]));
            img.record.validate().unwrap();
        }
        assert!(a.place_elevations.iter().all(|e| (0.0..=4782.0).contains(e)));
        let other = generate_synthetic_corpus(&SyntheticCorpusSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(a, other);

        let bad = SyntheticCorpusSpec { inlier_fraction: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SyntheticCorpusSpec { places: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn synthetic_files_identical() {
        let spec = SyntheticCorpusSpec { places: 2, images_per_place: 2, features_per_image: 10, ..Default::default() };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let l1 = write_synthetic_corpus(&c, d1.path()).unwrap();
        let l2 = write_synthetic_corpus(&generate_synthetic_corpus(&spec).unwrap(), d2.path()).unwrap();
        assert_eq!(std::fs::read(&l1.manifest).unwrap(), std::fs::read(&l2.manifest).unwrap());
        assert_eq!(std::fs::read(&l1.truth).unwrap(), std::fs::read(&l2.truth).unwrap());
        for img in &c.images {
            let rel = img.record.feature_path.as_ref().unwrap();
            let bytes = std::fs::read(d1.path().join(rel)).unwrap();
            assert_eq!(bytes, std::fs::read(d2.path().join(rel)).unwrap());
            let back = FeatureSet::from_bytes(img.record.id.clone(), &bytes).unwrap();
            assert_eq!(back, img.features);
        }
    }

    proptest! {
        #[test]
        fn rmse_nonnegative_zero_iff_equal(t in prop::collection::vec(-1000f64..5000.0, 1..40), d in -10f64..10.0) {
            prop_assert_eq!(rmse(&t, &t).unwrap(), 0.0);
            let shifted: Vec<f64> = t.iter().map(|x| x + d).collect();
            let r = rmse(&shifted, &t).unwrap();
            prop_assert!(r >= 0.0);
            if d != 0.0 { prop_assert!(r > 0.0); }
        }

        #[test]
        fn constant_predictor_identity(t in prop::collection::vec(0f64..4800.0, 1..60), c in 0f64..4800.0) {
            let n = t.len() as f64;
            let mean = t.iter().sum::<f64>() / n;
            let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let r = rmse(&vec![c; t.len()], &t).unwrap();
            prop_assert!((r - (var + (c - mean).powi(2)).sqrt()).abs() < 1e-6);
        }

        #[test]
        fn accuracy_monotone(e in prop::collection::vec(-3000f64..3000.0, 1..60), mut th in prop::collection::vec(0f64..4000.0, 1..20)) {
            th.sort_by(f64::total_cmp);
            let c = cumulative_accuracy(&e, &th).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0].fraction <= w[1].fraction));
            let max = e.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let full = cumulative_accuracy(&e, &[max]).unwrap();
            prop_assert_eq!(full[0].fraction, 1.0);
        }

        #[test]
        fn bias_counts_sum(pairs in prop::collection::vec((0f64..4800.0, 0f64..4800.0), 1..60), w in 1f64..2000.0) {
            let b = bias_by_elevation(&pairs, w).unwrap();
            prop_assert_eq!(b.iter().map(|x| x.count).sum::<usize>(), pairs.len());
            prop_assert!(b.windows(2).all(|x| x[0].bin_center_m < x[1].bin_center_m));
        }
    }
}
