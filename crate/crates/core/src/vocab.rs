//! Visual vocabularies: k-means training and nearest-word quantization.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{read_file, write_file, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::features::{power_normalize, LocalFeature, NormalizationConfig};

const VOCAB_MAGIC: &[u8; 4] = b"ELVC";
const VOCAB_VERSION: u32 = 1;

/// Word count of the large single vocabulary used for sparse retrieval.
pub const BOW_WORDS_PRESET: usize = 1_000_000;
/// Word count of each vocabulary in the multi-vocabulary bank ("8K").
pub const MVOCAB_WORDS_PRESET: usize = 8192;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    centroids: Vec<Vec<f64>>,
    dim: usize,
    trained_on: String,
}

impl Vocabulary {
    pub fn new(centroids: Vec<Vec<f64>>, trained_on: impl Into<String>) -> Result<Self> {
        let dim = centroids
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Validation("vocabulary needs at least one word".into()))?;
        let mut seen = HashSet::with_capacity(centroids.len());
        for c in &centroids {
            if c.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.len(),
                });
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation("non-finite centroid component".into()));
            }
            let key: Vec<u64> = c.iter().map(|x| (x + 0.0).to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::Validation("vocabulary contains identical centroids".into()));
            }
        }
        Ok(Self {
            centroids,
            dim,
            trained_on: trained_on.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn trained_on(&self) -> &str {
        &self.trained_on
    }

    /// Nearest centroid by squared Euclidean distance, lowest id on ties.
    pub fn quantize(&self, descriptor: &[f64]) -> Result<usize> {
        if descriptor.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: descriptor.len(),
            });
        }
        Ok(nearest(&self.centroids, descriptor).0)
    }

    /// Same values rounded to f32 precision, so that a save/load round trip
    /// is lossless.
    pub fn to_storage_precision(&self) -> Result<Self> {
        let centroids = self
            .centroids
            .iter()
            .map(|c| c.iter().map(|&x| crate::codec::f32_round(x)).collect())
            .collect();
        Vocabulary::new(centroids, self.trained_on.clone())
    }

    pub(crate) fn encode_into(&self, enc: &mut Encoder<Vec<u8>>) -> std::io::Result<()> {
        enc.bytes(VOCAB_MAGIC)?;
        enc.u32(VOCAB_VERSION)?;
        enc.u32(self.len() as u32)?;
        enc.u32(self.dim as u32)?;
        for c in &self.centroids {
            enc.f32_slice(c)?;
        }
        enc.short_string(&self.trained_on)
    }

    pub(crate) fn decode_from<R: std::io::Read>(dec: &mut Decoder<R>) -> Result<Self> {
        dec.magic(VOCAB_MAGIC)?;
        dec.version(VOCAB_VERSION)?;
        let k = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let mut centroids = Vec::with_capacity(k.min(1 << 20));
        for _ in 0..k {
            centroids.push(dec.f32_vec(dim)?);
        }
        let tag = dec.short_string()?;
        Vocabulary::new(centroids, tag)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(Vec::new());
        self.encode_into(&mut enc).expect("writing to a Vec cannot fail");
        enc.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, "vocabulary");
        let v = Self::decode_from(&mut dec)?;
        dec.finish()?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub fn quantize(vocab: &Vocabulary, descriptor: &[f64]) -> Result<usize> {
    vocab.quantize(descriptor)
}

/// Power-normalizes each descriptor and assigns it a word.
pub fn quantize_features(
    vocab: &Vocabulary,
    features: &[LocalFeature],
    norm: NormalizationConfig,
) -> Result<Vec<u32>> {
    features
        .par_iter()
        .map(|f| {
            let d = power_normalize(&f.descriptor, norm)?;
            vocab.quantize(&d).map(|w| w as u32)
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the largest centroid movement drops below this.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub vocabulary: Vocabulary,
    /// Sum of squared distances to the nearest centroid, one entry per
    /// assignment step, the last one for the returned centroids.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn validate_points(data: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    if data.len() < k {
        return Err(Error::Validation(format!("{} points cannot form {k} clusters", data.len())));
    }
    let dim = data[0].len();
    if let Some(bad) = data.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    Ok(dim)
}

/// k-means++ seeding: first center uniform, later ones sampled with
/// probability proportional to squared distance from the chosen set.
pub fn kmeans_plus_plus(data: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    validate_points(data, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.par_iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Validation(format!("fewer than {k} distinct points")));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                acc += w;
                if acc > target {
                    break;
                }
            }
        }
        let next = data[pick.expect("positive total implies a candidate")].clone();
        d2.par_iter_mut()
            .zip(data.par_iter())
            .for_each(|(d, p)| *d = d.min(sq_dist(p, &next)));
        centers.push(next);
    }
    Ok(centers)
}

/// Lloyd iterations from k-means++ seeds.
///
/// Assignments run in parallel; centroid sums are reduced in point order so
/// the result does not depend on the worker count. An empty cluster is
/// re-seeded at the point farthest from its assigned centroid.
pub fn fit_kmeans(data: &[Vec<f64>], cfg: &KMeansConfig, trained_on: &str) -> Result<KMeansFit> {
    let dim = validate_points(data, cfg.k)?;
    let mut centroids = kmeans_plus_plus(data, cfg.k, cfg.seed)?;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        let assigned: Vec<(usize, f64)> = data.par_iter().map(|p| nearest(&centroids, p)).collect();
        history.push(assigned.iter().map(|a| a.1).sum());

        let mut sums = vec![vec![0.0; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (p, &(label, _)) in data.iter().zip(&assigned) {
            counts[label] += 1;
            sums[label].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut taken = vec![false; data.len()];
        let mut movement = 0.0f64;
        for (c, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
            let updated = if count > 0 {
                sum.into_iter().map(|s| s / count as f64).collect()
            } else {
                let far = assigned
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .fold((0, f64::NEG_INFINITY), |best, (i, a)| if a.1 > best.1 { (i, a.1) } else { best })
                    .0;
                taken[far] = true;
                data[far].clone()
            };
            movement = movement.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if movement < cfg.tol || movement == 0.0 {
            converged = true;
            break;
        }
    }
    history.push(data.par_iter().map(|p| nearest(&centroids, p).1).collect::<Vec<_>>().iter().sum());
    Ok(KMeansFit {
        vocabulary: Vocabulary::new(centroids, trained_on)?,
        objective_history: history,
        iterations,
        converged,
    })
}

pub fn train_kmeans(descriptors: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<Vocabulary> {
    let cfg = KMeansConfig {
        k,
        seed,
        max_iter,
        tol,
    };
    fit_kmeans(descriptors, &cfg, "").map(|f| f.vocabulary)
}
