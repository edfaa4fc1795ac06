//! Multi-vocabulary short vectors: per-vocabulary BOW blocks, concatenated
//! and reduced jointly by PCA, searched by exhaustive k-NN.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::bowindex::{compute_idf, encode_words, IdfTable};
use crate::codec::{f32_round, read_file, write_file, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::features::{power_normalize, FeatureSet, NormalizationConfig, RegionScaleConfig};
use crate::vocab::{fit_kmeans, quantize_features, KMeansConfig, Vocabulary, MVOCAB_WORDS_PRESET};

const MODEL_MAGIC: &[u8; 4] = b"ELMV";
const MODEL_VERSION: u32 = 1;
const DB_MAGIC: &[u8; 4] = b"ELMB";
const DB_VERSION: u32 = 1;

pub const DEFAULT_DIMS: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct VocabBankConfig {
    pub entries: Vec<(RegionScaleConfig, NormalizationConfig)>,
    pub words_per_vocab: usize,
}

impl VocabBankConfig {
    /// Both measurement regions crossed with beta in {0.4, 0.5, 0.6, 1.0}.
    pub fn standard(words_per_vocab: usize) -> Self {
        let mut entries = Vec::with_capacity(8);
        for region in [RegionScaleConfig::BASE, RegionScaleConfig::WIDE] {
            for beta in [0.4, 0.5, 0.6, 1.0] {
                entries.push((region, NormalizationConfig { beta }));
            }
        }
        Self {
            entries,
            words_per_vocab,
        }
    }

    pub fn full_scale() -> Self {
        Self::standard(MVOCAB_WORDS_PRESET)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() || self.words_per_vocab == 0 {
            return Err(Error::Validation("vocabulary bank is empty".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            NormalizationConfig::new(e.1.beta)?;
            if self.entries[..i].contains(e) {
                return Err(Error::Validation("vocabulary bank repeats a configuration".into()));
            }
        }
        Ok(())
    }
}

/// Principal component analysis with population covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub variances: Vec<f64>,
    pub whiten: bool,
}

const WHITEN_EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram-Schmidt; returns false if `v` is (numerically) in the span.
fn orthonormalize_against(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let n = dot(v, v).sqrt();
    if n < 1e-8 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

impl Pca {
    pub fn fit(samples: &[Vec<f64>], dims: usize, whiten: bool) -> Result<Self> {
        let n = samples.len();
        if n == 0 || dims == 0 {
            return Err(Error::Validation("PCA needs samples and at least one output dimension".into()));
        }
        let d = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        if dims > n.min(d) {
            return Err(Error::Validation(format!(
                "{dims} output dimensions exceed min(samples {n}, input {d})"
            )));
        }
        let mut mean = vec![0.0; d];
        for s in samples {
            mean.iter_mut().zip(s).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);

        // Eigenpairs of the smaller of the covariance and Gram matrices.
        let mut pairs: Vec<(f64, Vec<f64>)> = if d <= n {
            let cov = centered.transpose() * &centered / n as f64;
            let eig = SymmetricEigen::new(cov);
            (0..d)
                .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect()))
                .collect()
        } else {
            let gram = &centered * centered.transpose() / n as f64;
            let eig = SymmetricEigen::new(gram);
            (0..n)
                .map(|k| {
                    let lambda = eig.eigenvalues[k];
                    let u = eig.eigenvectors.column(k);
                    let v = centered.transpose() * u;
                    (lambda, v.iter().copied().collect())
                })
                .collect()
        };
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let top = pairs.first().map_or(0.0, |p| p.0.max(0.0));
        let floor = top * 1e-10;

        let mut components: Vec<Vec<f64>> = Vec::with_capacity(dims);
        let mut variances = Vec::with_capacity(dims);
        for (lambda, mut v) in pairs.into_iter() {
            if components.len() == dims || lambda <= floor {
                break;
            }
            if orthonormalize_against(&mut v, &components) {
                components.push(v);
                variances.push(lambda);
            }
        }
        // Null-space directions carry no variance; complete the basis.
        let mut j = 0;
        while components.len() < dims && j < d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            if orthonormalize_against(&mut e, &components) {
                components.push(e);
                variances.push(0.0);
            }
            j += 1;
        }
        for c in &mut components {
            let lead = c.iter().enumerate().fold(0, |b, (i, x)| if x.abs() > c[b].abs() { i } else { b });
            if c[lead] < 0.0 {
                c.iter_mut().for_each(|x| *x = -*x);
            }
        }
        Ok(Self {
            mean,
            components,
            variances,
            whiten,
        })
    }

    pub fn dims(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.components
            .iter()
            .zip(&self.variances)
            .map(|(c, &var)| {
                let y = dot(c, &centered);
                if self.whiten {
                    y / (var + WHITEN_EPS).sqrt()
                } else {
                    y
                }
            })
            .collect()
    }

    /// Inverse of [`Pca::project`] restricted to the retained subspace.
    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for ((c, &var), &yi) in self.components.iter().zip(&self.variances).zip(y) {
            let coef = if self.whiten { yi * (var + WHITEN_EPS).sqrt() } else { yi };
            x.iter_mut().zip(c).for_each(|(a, b)| *a += coef * b);
        }
        x
    }

    /// Rows of the linear map applied after centering.
    pub fn projection_rows(&self) -> Vec<Vec<f64>> {
        self.components
            .iter()
            .zip(&self.variances)
            .map(|(c, &var)| {
                let s = if self.whiten { 1.0 / (var + WHITEN_EPS).sqrt() } else { 1.0 };
                c.iter().map(|x| x * s).collect()
            })
            .collect()
    }
}

/// One vocabulary of the bank with its descriptor configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabBlock {
    pub region: RegionScaleConfig,
    pub norm: NormalizationConfig,
    pub vocabulary: Vocabulary,
    pub idf: IdfTable,
}

/// Unit-norm reduced descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortVector(Vec<f64>);

impl ShortVector {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        let n = dot(&values, &values).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::DegenerateEmbedding);
        }
        values.iter_mut().for_each(|x| *x /= n);
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &ShortVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortVectorModel {
    blocks: Vec<VocabBlock>,
    mean: Vec<f64>,
    /// D' rows over the concatenated space.
    projection: Vec<Vec<f64>>,
}

impl ShortVectorModel {
    pub fn new(blocks: Vec<VocabBlock>, mean: Vec<f64>, projection: Vec<Vec<f64>>) -> Result<Self> {
        let total: usize = blocks.iter().map(|b| b.vocabulary.len()).sum();
        for b in &blocks {
            if b.idf.vocab_size() != b.vocabulary.len() {
                return Err(Error::DimensionMismatch {
                    expected: b.vocabulary.len(),
                    got: b.idf.vocab_size(),
                });
            }
        }
        if mean.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                got: mean.len(),
            });
        }
        if projection.is_empty() {
            return Err(Error::Validation("projection has no rows".into()));
        }
        if let Some(r) = projection.iter().find(|r| r.len() != total) {
            return Err(Error::DimensionMismatch {
                expected: total,
                got: r.len(),
            });
        }
        Ok(Self {
            blocks,
            mean,
            projection,
        })
    }

    pub fn blocks(&self) -> &[VocabBlock] {
        &self.blocks
    }

    pub fn projection(&self) -> &[Vec<f64>] {
        &self.projection
    }

    pub fn dims(&self) -> usize {
        self.projection.len()
    }

    pub fn concatenated_dims(&self) -> usize {
        self.mean.len()
    }

    /// Per-block idf-weighted, L2-normalized BOW vectors, concatenated densely.
    pub fn concatenated(&self, features: &FeatureSet) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.mean.len());
        for b in &self.blocks {
            let words = block_words(features, b.region, b.norm, &b.vocabulary)?;
            out.extend(encode_words(&words, &b.idf)?.to_dense(b.vocabulary.len()));
        }
        Ok(out)
    }

    /// Centers and projects a concatenated vector, without normalization.
    pub fn project(&self, concatenated: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = concatenated.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.projection.iter().map(|row| dot(row, &centered)).collect()
    }

    pub fn embed(&self, features: &FeatureSet) -> Result<ShortVector> {
        ShortVector::new(self.project(&self.concatenated(features)?))
    }

    fn rounded(&self) -> Result<Self> {
        let round_vec = |v: &[f64]| v.iter().map(|&x| f32_round(x)).collect::<Vec<_>>();
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                Ok(VocabBlock {
                    region: b.region,
                    norm: NormalizationConfig {
                        beta: f32_round(b.norm.beta),
                    },
                    vocabulary: b.vocabulary.to_storage_precision()?,
                    idf: IdfTable::from_weights(round_vec(b.idf.weights()), b.idf.doc_count())?,
                })
            })
            .collect::<Result<_>>()?;
        ShortVectorModel::new(
            blocks,
            round_vec(&self.mean),
            self.projection.iter().map(|r| round_vec(r)).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(Vec::new());
        let mut write = || -> std::io::Result<()> {
            enc.bytes(MODEL_MAGIC)?;
            enc.u32(MODEL_VERSION)?;
            enc.u32(self.blocks.len() as u32)?;
            for b in &self.blocks {
                b.vocabulary.encode_into(&mut enc)?;
                enc.u32(b.idf.doc_count() as u32)?;
                enc.f32_slice(b.idf.weights())?;
                enc.f32(b.region.multiplier)?;
                enc.f32(b.norm.beta as f32)?;
            }
            enc.u32(self.projection.len() as u32)?;
            enc.f32_slice(&self.mean)?;
            for row in &self.projection {
                enc.f32_slice(row)?;
            }
            Ok(())
        };
        write().expect("writing to a Vec cannot fail");
        enc.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, "mvocab model");
        dec.magic(MODEL_MAGIC)?;
        dec.version(MODEL_VERSION)?;
        let count = dec.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let vocabulary = Vocabulary::decode_from(&mut dec)?;
            let doc_count = dec.u32()? as usize;
            let idf = IdfTable::from_weights(dec.f32_vec(vocabulary.len())?, doc_count)?;
            let region = RegionScaleConfig { multiplier: dec.f32()? };
            let norm = NormalizationConfig::new(f64::from(dec.f32()?))?;
            blocks.push(VocabBlock {
                region,
                norm,
                vocabulary,
                idf,
            });
        }
        let dims = dec.u32()? as usize;
        let total: usize = blocks.iter().map(|b| b.vocabulary.len()).sum();
        if bytes.len() < dims.saturating_mul(total).saturating_mul(4) {
            return Err(Error::Truncated("mvocab model"));
        }
        let mean = dec.f32_vec(total)?;
        let projection = (0..dims).map(|_| dec.f32_vec(total)).collect::<Result<_>>()?;
        dec.finish()?;
        ShortVectorModel::new(blocks, mean, projection)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn block_words(
    features: &FeatureSet,
    region: RegionScaleConfig,
    norm: NormalizationConfig,
    vocab: &Vocabulary,
) -> Result<Vec<u32>> {
    let feats = features.variant(region).ok_or_else(|| {
        Error::Validation(format!(
            "image {:?} lacks the x{} measurement region",
            features.image_id, region.multiplier
        ))
    })?;
    if feats.is_empty() {
        return Err(Error::EmptyImage);
    }
    quantize_features(vocab, feats, norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionOptions {
    pub whiten: bool,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl Default for ReductionOptions {
    fn default() -> Self {
        Self {
            whiten: false,
            kmeans_max_iter: 25,
            kmeans_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedReduction {
    pub model: ShortVectorModel,
    /// Training images embedded with the final model, in corpus order.
    pub embeddings: Vec<(String, ShortVector)>,
    /// Variance captured by each retained component.
    pub variances: Vec<f64>,
}

/// Trains the vocabulary bank, idf tables and joint PCA on `corpus`.
///
/// Model parameters are rounded to their on-disk precision before the
/// training embeddings are computed, so a saved model reproduces them.
pub fn train_reduction(
    corpus: &[FeatureSet],
    cfg: &VocabBankConfig,
    dims: usize,
    seed: u64,
    opts: &ReductionOptions,
) -> Result<TrainedReduction> {
    cfg.validate()?;
    if corpus.len() < dims {
        return Err(Error::Validation(format!(
            "corpus of {} images is smaller than {dims} output dimensions",
            corpus.len()
        )));
    }
    let mut blocks = Vec::with_capacity(cfg.entries.len());
    for (i, &(region, norm)) in cfg.entries.iter().enumerate() {
        let descriptors: Vec<Vec<f64>> = corpus
            .par_iter()
            .map(|fs| {
                let feats = fs.variant(region).ok_or_else(|| {
                    Error::Validation(format!(
                        "image {:?} lacks the x{} measurement region",
                        fs.image_id, region.multiplier
                    ))
                })?;
                feats
                    .iter()
                    .map(|f| power_normalize(&f.descriptor, norm))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let kcfg = KMeansConfig {
            k: cfg.words_per_vocab,
            seed: seed.wrapping_add(i as u64),
            max_iter: opts.kmeans_max_iter,
            tol: opts.kmeans_tol,
        };
        let tag = format!("mvocab x{} beta {}", region.multiplier, norm.beta);
        let vocabulary = fit_kmeans(&descriptors, &kcfg, &tag)?.vocabulary;
        let words: Vec<Vec<u32>> = corpus
            .iter()
            .map(|fs| block_words(fs, region, norm, &vocabulary))
            .collect::<Result<_>>()?;
        let mut doc_counts = vec![0u32; vocabulary.len()];
        for w in &words {
            let mut distinct = w.clone();
            distinct.sort_unstable();
            distinct.dedup();
            distinct.into_iter().for_each(|x| doc_counts[x as usize] += 1);
        }
        let idf = compute_idf(&doc_counts, corpus.len())?;
        blocks.push(VocabBlock {
            region,
            norm,
            vocabulary,
            idf,
        });
    }
    let total: usize = blocks.iter().map(|b| b.vocabulary.len()).sum();
    let scaffold = ShortVectorModel::new(blocks, vec![0.0; total], vec![vec![0.0; total]])?;
    let samples: Vec<Vec<f64>> = corpus
        .par_iter()
        .map(|fs| scaffold.concatenated(fs))
        .collect::<Result<_>>()?;
    let pca = Pca::fit(&samples, dims, opts.whiten)?;
    let model = ShortVectorModel::new(scaffold.blocks, pca.mean.clone(), pca.projection_rows())?.rounded()?;
    let embeddings = corpus
        .par_iter()
        .map(|fs| Ok((fs.image_id.clone(), model.embed(fs)?)))
        .collect::<Result<_>>()?;
    Ok(TrainedReduction {
        model,
        embeddings,
        variances: pca.variances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub image_id: String,
    pub vector: ShortVector,
    pub elevation_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub image_id: String,
    pub dissimilarity: f64,
    pub elevation_m: f64,
}

/// Exhaustive Euclidean k-NN, ascending distance, ties by image id.
pub fn knn_search(database: &[DbEntry], q: &ShortVector, k: usize) -> Result<Vec<Neighbor>> {
    if database.is_empty() {
        return Err(Error::Validation("short-vector database is empty".into()));
    }
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let mut all: Vec<Neighbor> = database
        .par_iter()
        .map(|e| Neighbor {
            image_id: e.image_id.clone(),
            dissimilarity: e.vector.distance(q),
            elevation_m: e.elevation_m,
        })
        .collect();
    all.sort_by(|a, b| {
        a.dissimilarity
            .total_cmp(&b.dissimilarity)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    all.truncate(k);
    Ok(all)
}

pub fn save_database(path: &Path, database: &[DbEntry]) -> Result<()> {
    let dims = database.first().map_or(0, |e| e.vector.dims());
    let mut enc = Encoder::new(Vec::new());
    let mut write = || -> std::io::Result<()> {
        enc.bytes(DB_MAGIC)?;
        enc.u32(DB_VERSION)?;
        enc.u32(database.len() as u32)?;
        enc.u32(dims as u32)?;
        for e in database {
            enc.short_string(&e.image_id)?;
            enc.f32(e.elevation_m as f32)?;
            enc.f32_slice(e.vector.values())?;
        }
        Ok(())
    };
    write().map_err(|e| Error::io(path, e))?;
    write_file(path, &enc.into_inner())
}

pub fn load_database(path: &Path) -> Result<Vec<DbEntry>> {
    let bytes = read_file(path)?;
    let mut dec = Decoder::new(bytes.as_slice(), "mvocab database");
    dec.magic(DB_MAGIC)?;
    dec.version(DB_VERSION)?;
    let n = dec.u32()? as usize;
    let dims = dec.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(bytes.len()));
    for _ in 0..n {
        let image_id = dec.short_string()?;
        let elevation_m = f64::from(dec.f32()?);
        let vector = ShortVector::new(dec.f32_vec(dims)?)?;
        out.push(DbEntry {
            image_id,
            vector,
            elevation_m,
        });
    }
    dec.finish()?;
    Ok(out)
}
