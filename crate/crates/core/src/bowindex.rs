//! idf-weighted bag-of-words vectors and the inverted file.

use std::collections::HashMap;
use std::path::Path;

use crate::codec::{read_file, write_file, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::features::{LocalFeature, NormalizationConfig};
use crate::vocab::{quantize_features, Vocabulary};

const INDEX_MAGIC: &[u8; 4] = b"ELIX";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    weights: Vec<f64>,
    doc_count: usize,
}

impl IdfTable {
    pub fn from_weights(weights: Vec<f64>, doc_count: usize) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation("idf weights must be finite and non-negative".into()));
        }
        Ok(Self { weights, doc_count })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, word: u32) -> f64 {
        self.weights[word as usize]
    }
}

/// `ln(N / n_w)` for words seen in `n_w` documents, `ln(N + 1)` for unseen words.
pub fn compute_idf(word_document_counts: &[u32], doc_count: usize) -> Result<IdfTable> {
    if doc_count == 0 {
        return Err(Error::Validation("idf needs at least one document".into()));
    }
    let n = doc_count as f64;
    let weights = word_document_counts
        .iter()
        .enumerate()
        .map(|(w, &c)| match c as usize {
            0 => Ok((n + 1.0).ln()),
            c if c > doc_count => Err(Error::Validation(format!(
                "word {w} occurs in {c} documents out of {doc_count}"
            ))),
            c => Ok((n / c as f64).ln()),
        })
        .collect::<Result<_>>()?;
    Ok(IdfTable { weights, doc_count })
}

/// Sparse unit-norm vector; word ids strictly increasing, weights positive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BowVector {
    entries: Vec<(u32, f64)>,
}

impl BowVector {
    pub fn from_entries(entries: Vec<(u32, f64)>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Validation("word ids must be strictly increasing".into()));
        }
        if entries.iter().any(|e| !(e.1 > 0.0 && e.1.is_finite())) {
            return Err(Error::Validation("bow weights must be positive".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    /// True when every word was dropped for having zero idf.
    pub fn is_degenerate(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &BowVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        for &(w, x) in &self.entries {
            v[w as usize] = x;
        }
        v
    }
}

/// Word histogram scaled by idf and L2-normalized. Zero-idf words are dropped,
/// which may leave a degenerate (empty) vector.
pub fn encode_words(words: &[u32], idf: &IdfTable) -> Result<BowVector> {
    if words.is_empty() {
        return Err(Error::EmptyImage);
    }
    let mut sorted = words.to_vec();
    sorted.sort_unstable();
    let mut entries: Vec<(u32, f64)> = Vec::new();
    for w in sorted {
        if w as usize >= idf.vocab_size() {
            return Err(Error::Validation(format!("word {w} outside vocabulary of {}", idf.vocab_size())));
        }
        match entries.last_mut() {
            Some(last) if last.0 == w => last.1 += 1.0,
            _ => entries.push((w, 1.0)),
        }
    }
    entries.retain_mut(|(w, count)| {
        *count *= idf.weight(*w);
        *count > 0.0
    });
    let norm = entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
    entries.iter_mut().for_each(|e| e.1 /= norm);
    Ok(BowVector { entries })
}

pub fn encode_bow(
    features: &[LocalFeature],
    vocab: &Vocabulary,
    norm: NormalizationConfig,
    idf: &IdfTable,
) -> Result<BowVector> {
    if features.is_empty() {
        return Err(Error::EmptyImage);
    }
    encode_words(&quantize_features(vocab, features, norm)?, idf)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedHit {
    pub image_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedList {
    pub query_id: Option<String>,
    pub hits: Vec<RankedHit>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    idf: IdfTable,
    ids: Vec<String>,
    elevations: Vec<f64>,
    /// Per word: (image ordinal, weight), ordinals increasing.
    postings: Vec<Vec<(u32, f64)>>,
    lookup: HashMap<String, u32>,
}

/// Accumulates quantized images, then builds an index whose idf comes from
/// the accumulated corpus.
#[derive(Debug, Clone)]
pub struct IndexBuilder {
    vocab_size: usize,
    images: Vec<(String, Vec<u32>, f64)>,
    seen: HashMap<String, usize>,
}

impl IndexBuilder {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            images: Vec::new(),
            seen: HashMap::new(),
        }
    }

    pub fn add(&mut self, id: impl Into<String>, words: Vec<u32>, elevation_m: Option<f64>) -> Result<()> {
        let id = id.into();
        let elevation = elevation_m
            .filter(|e| e.is_finite())
            .ok_or_else(|| Error::Validation(format!("image {id:?} has no elevation")))?;
        if self.seen.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        if let Some(&w) = words.iter().find(|&&w| w as usize >= self.vocab_size) {
            return Err(Error::Validation(format!("word {w} outside vocabulary of {}", self.vocab_size)));
        }
        self.seen.insert(id.clone(), self.images.len());
        self.images.push((id, words, elevation));
        Ok(())
    }

    pub fn build(self) -> Result<InvertedIndex> {
        let mut doc_counts = vec![0u32; self.vocab_size];
        for (_, words, _) in &self.images {
            let mut distinct = words.clone();
            distinct.sort_unstable();
            distinct.dedup();
            for w in distinct {
                doc_counts[w as usize] += 1;
            }
        }
        let idf = if self.images.is_empty() {
            IdfTable {
                weights: vec![0.0; self.vocab_size],
                doc_count: 0,
            }
        } else {
            compute_idf(&doc_counts, self.images.len())?
        };
        let vectors = self
            .images
            .into_iter()
            .map(|(id, words, e)| {
                let v = if words.is_empty() {
                    BowVector::default()
                } else {
                    encode_words(&words, &idf)?
                };
                Ok((id, v, e))
            })
            .collect::<Result<Vec<_>>>()?;
        InvertedIndex::from_vectors(idf, vectors)
    }
}

/// Convenience wrapper over [`IndexBuilder`].
pub fn build_index(vocab_size: usize, images: Vec<(String, Vec<u32>, Option<f64>)>) -> Result<InvertedIndex> {
    let mut b = IndexBuilder::new(vocab_size);
    for (id, words, e) in images {
        b.add(id, words, e)?;
    }
    b.build()
}

impl InvertedIndex {
    /// Indexes already-encoded vectors under a fixed idf table.
    pub fn from_vectors(idf: IdfTable, images: Vec<(String, BowVector, f64)>) -> Result<Self> {
        let k = idf.vocab_size();
        let mut postings = vec![Vec::new(); k];
        let mut ids = Vec::with_capacity(images.len());
        let mut elevations = Vec::with_capacity(images.len());
        let mut lookup = HashMap::with_capacity(images.len());
        for (ord, (id, vector, e)) in images.into_iter().enumerate() {
            if !e.is_finite() {
                return Err(Error::Validation(format!("image {id:?} has no elevation")));
            }
            if lookup.insert(id.clone(), ord as u32).is_some() {
                return Err(Error::DuplicateId(id));
            }
            for &(w, x) in vector.entries() {
                let list = postings
                    .get_mut(w as usize)
                    .ok_or_else(|| Error::Validation(format!("word {w} outside vocabulary of {k}")))?;
                list.push((ord as u32, x));
            }
            ids.push(id);
            elevations.push(e);
        }
        Ok(Self {
            idf,
            ids,
            elevations,
            postings,
            lookup,
        })
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }

    pub fn vocab_size(&self) -> usize {
        self.idf.vocab_size()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn elevations(&self) -> &[f64] {
        &self.elevations
    }

    pub fn elevation(&self, id: &str) -> Option<f64> {
        self.lookup.get(id).map(|&o| self.elevations[o as usize])
    }

    pub fn posting(&self, word: u32) -> &[(u32, f64)] {
        &self.postings[word as usize]
    }

    pub fn total_postings(&self) -> usize {
        self.postings.iter().map(Vec::len).sum()
    }

    /// Encodes a query against this index's idf.
    pub fn encode(&self, words: &[u32]) -> Result<BowVector> {
        encode_words(words, &self.idf)
    }

    /// Cosine similarity against every image sharing a word with `q`; the
    /// `top_n` best, ties broken by image id.
    pub fn query(&self, q: &BowVector, top_n: usize) -> RankedList {
        let mut scores = vec![0.0f64; self.ids.len()];
        let mut touched = vec![false; self.ids.len()];
        let mut hit_ords = Vec::new();
        for &(w, qw) in q.entries() {
            let Some(list) = self.postings.get(w as usize) else {
                continue;
            };
            for &(ord, dw) in list {
                let o = ord as usize;
                scores[o] += qw * dw;
                if !touched[o] {
                    touched[o] = true;
                    hit_ords.push(o);
                }
            }
        }
        let mut hits: Vec<RankedHit> = hit_ords
            .into_iter()
            .map(|o| RankedHit {
                image_id: self.ids[o].clone(),
                score: scores[o].clamp(0.0, 1.0),
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id)));
        hits.truncate(top_n);
        RankedList { query_id: None, hits }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(Vec::new());
        let mut write = || -> std::io::Result<()> {
            enc.bytes(INDEX_MAGIC)?;
            enc.u32(INDEX_VERSION)?;
            enc.u32(self.vocab_size() as u32)?;
            enc.u32(self.ids.len() as u32)?;
            enc.f32_slice(self.idf.weights())?;
            for (id, &e) in self.ids.iter().zip(&self.elevations) {
                enc.short_string(id)?;
                enc.f32(e as f32)?;
            }
            for list in &self.postings {
                enc.u32(list.len() as u32)?;
                for &(ord, w) in list {
                    enc.u32(ord)?;
                    enc.f32(w as f32)?;
                }
            }
            Ok(())
        };
        write().expect("writing to a Vec cannot fail");
        enc.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, "index");
        dec.magic(INDEX_MAGIC)?;
        dec.version(INDEX_VERSION)?;
        let k = dec.u32()? as usize;
        let n = dec.u32()? as usize;
        if bytes.len() < 16 + 4 * k {
            return Err(Error::Truncated("index"));
        }
        let weights = dec.f32_vec(k)?;
        let idf = IdfTable::from_weights(weights, n)?;
        let mut ids = Vec::with_capacity(n.min(bytes.len()));
        let mut elevations = Vec::with_capacity(n.min(bytes.len()));
        let mut lookup = HashMap::new();
        for ord in 0..n {
            let id = dec.short_string()?;
            if lookup.insert(id.clone(), ord as u32).is_some() {
                return Err(Error::DuplicateId(id));
            }
            ids.push(id);
            elevations.push(f64::from(dec.f32()?));
        }
        let mut postings = Vec::with_capacity(k);
        for _ in 0..k {
            let len = dec.u32()? as usize;
            let mut list = Vec::with_capacity(len.min(n));
            for _ in 0..len {
                let ord = dec.u32()?;
                if ord as usize >= n {
                    return Err(Error::Validation(format!("posting refers to image {ord} of {n}")));
                }
                list.push((ord, f64::from(dec.f32()?)));
            }
            postings.push(list);
        }
        dec.finish()?;
        Ok(Self {
            idf,
            ids,
            elevations,
            postings,
            lookup,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
