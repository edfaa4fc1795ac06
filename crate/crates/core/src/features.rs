//! Local-feature files and descriptor power-law normalization.

use std::path::Path;

use crate::codec::{read_file, write_file, Decoder, Encoder};
use crate::error::{Error, Result};

/// Relative scale between a detected region and its measurement region.
pub const MEASUREMENT_REGION_FACTOR: f64 = 5.196_152_422_706_632; // 3 * sqrt(3)

pub const DESCRIPTOR_DIM: usize = 128;

const FEATURE_MAGIC: &[u8; 4] = b"ELFV";
const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeature {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub orientation: f64,
    pub descriptor: Vec<f64>,
}

impl LocalFeature {
    pub fn same_geometry(&self, other: &LocalFeature) -> bool {
        self.x == other.x
            && self.y == other.y
            && self.scale == other.scale
            && self.orientation == other.orientation
    }
}

/// Measurement region size relative to `MEASUREMENT_REGION_FACTOR * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionScaleConfig {
    pub multiplier: f32,
}

impl RegionScaleConfig {
    pub const BASE: RegionScaleConfig = RegionScaleConfig { multiplier: 1.0 };
    pub const WIDE: RegionScaleConfig = RegionScaleConfig { multiplier: 1.5 };

    pub fn radius(&self, scale: f64) -> f64 {
        f64::from(self.multiplier) * MEASUREMENT_REGION_FACTOR * scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationConfig {
    pub beta: f64,
}

impl NormalizationConfig {
    pub const SIFT: NormalizationConfig = NormalizationConfig { beta: 1.0 };
    pub const ROOT_SIFT: NormalizationConfig = NormalizationConfig { beta: 0.5 };

    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Validation(format!("power-law exponent {beta} not in (0, 1]")));
        }
        Ok(Self { beta })
    }
}

/// Features of one image under several measurement regions. All variants
/// share detection geometry; only descriptors differ.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub image_id: String,
    variants: Vec<(RegionScaleConfig, Vec<LocalFeature>)>,
}

impl FeatureSet {
    pub fn new(image_id: impl Into<String>, variants: Vec<(RegionScaleConfig, Vec<LocalFeature>)>) -> Result<Self> {
        if let Some((first, rest)) = variants.split_first() {
            let dim = first.1.first().map(|f| f.descriptor.len());
            for (vi, (_, feats)) in rest.iter().enumerate() {
                if feats.len() != first.1.len() {
                    return Err(Error::GeometryMismatch {
                        variant: vi + 1,
                        feature: feats.len().min(first.1.len()),
                    });
                }
                if let Some(fi) = feats.iter().zip(&first.1).position(|(a, b)| !a.same_geometry(b)) {
                    return Err(Error::GeometryMismatch {
                        variant: vi + 1,
                        feature: fi,
                    });
                }
            }
            for (_, feats) in &variants {
                for f in feats {
                    if Some(f.descriptor.len()) != dim {
                        return Err(Error::DimensionMismatch {
                            expected: dim.unwrap_or(0),
                            got: f.descriptor.len(),
                        });
                    }
                    if !(f.scale > 0.0) {
                        return Err(Error::Validation(format!("feature scale {} must be positive", f.scale)));
                    }
                }
            }
            for (i, (cfg, _)) in variants.iter().enumerate() {
                if variants[..i].iter().any(|(c, _)| c == cfg) {
                    return Err(Error::Validation(format!("duplicate region multiplier {}", cfg.multiplier)));
                }
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            variants,
        })
    }

    pub fn variants(&self) -> &[(RegionScaleConfig, Vec<LocalFeature>)] {
        &self.variants
    }

    pub fn variant(&self, region: RegionScaleConfig) -> Option<&[LocalFeature]> {
        self.variants
            .iter()
            .find(|(c, _)| *c == region)
            .map(|(_, f)| f.as_slice())
    }

    pub fn feature_count(&self) -> usize {
        self.variants.first().map_or(0, |(_, f)| f.len())
    }

    pub fn descriptor_dim(&self) -> Option<usize> {
        self.variants
            .iter()
            .find_map(|(_, f)| f.first().map(|x| x.descriptor.len()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dim = self.descriptor_dim().unwrap_or(DESCRIPTOR_DIM);
        let mut enc = Encoder::new(Vec::new());
        let write = |enc: &mut Encoder<Vec<u8>>| -> std::io::Result<()> {
            enc.bytes(FEATURE_MAGIC)?;
            enc.u32(FEATURE_VERSION)?;
            enc.u32(self.variants.len() as u32)?;
            enc.u32(self.feature_count() as u32)?;
            enc.u32(dim as u32)?;
            for (cfg, feats) in &self.variants {
                enc.f32(cfg.multiplier)?;
                for f in feats {
                    enc.f32(f.x as f32)?;
                    enc.f32(f.y as f32)?;
                    enc.f32(f.scale as f32)?;
                    enc.f32(f.orientation as f32)?;
                    enc.f32_slice(&f.descriptor)?;
                }
            }
            Ok(())
        };
        write(&mut enc).expect("writing to a Vec cannot fail");
        enc.into_inner()
    }

    pub fn from_bytes(image_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes, "feature file");
        dec.magic(FEATURE_MAGIC)?;
        dec.version(FEATURE_VERSION)?;
        let variant_count = dec.u32()? as usize;
        let feature_count = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let record_len = 4 + dim;
        // Reject sizes the payload cannot possibly hold before allocating.
        let needed = variant_count
            .checked_mul(4 + feature_count.saturating_mul(record_len).saturating_mul(4))
            .ok_or(Error::Truncated("feature file"))?;
        if bytes.len().saturating_sub(20) < needed {
            return Err(Error::Truncated("feature file"));
        }
        let mut variants = Vec::with_capacity(variant_count);
        for _ in 0..variant_count {
            let multiplier = dec.f32()?;
            let mut feats = Vec::with_capacity(feature_count);
            for _ in 0..feature_count {
                let rec = dec.f32_vec(record_len)?;
                feats.push(LocalFeature {
                    x: rec[0],
                    y: rec[1],
                    scale: rec[2],
                    orientation: rec[3],
                    descriptor: rec[4..].to_vec(),
                });
            }
            variants.push((RegionScaleConfig { multiplier }, feats));
        }
        dec.finish()?;
        FeatureSet::new(image_id, variants)
    }
}

/// Loads a feature file; the image id is the file stem.
pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_features_as(path, id)
}

pub fn load_features_as(path: &Path, image_id: impl Into<String>) -> Result<FeatureSet> {
    FeatureSet::from_bytes(image_id, &read_file(path)?)
}

pub fn write_features(path: &Path, set: &FeatureSet) -> Result<()> {
    write_file(path, &set.to_bytes())
}

fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateDescriptor);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

/// Componentwise power `beta` followed by L2 normalization.
///
/// `beta = 0.5` is RootSIFT: L1-normalize, square root, L2-normalize. Other
/// exponents L2-normalize first.
pub fn power_normalize(descriptor: &[f64], cfg: NormalizationConfig) -> Result<Vec<f64>> {
    if descriptor.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Validation("descriptor components must be finite and non-negative".into()));
    }
    let mut v = descriptor.to_vec();
    if cfg.beta == 0.5 {
        let l1: f64 = v.iter().sum();
        if l1 == 0.0 {
            return Err(Error::DegenerateDescriptor);
        }
        v.iter_mut().for_each(|x| *x = (*x / l1).sqrt());
    } else {
        l2_normalize(&mut v)?;
        if cfg.beta != 1.0 {
            v.iter_mut().for_each(|x| *x = x.powf(cfg.beta));
        }
    }
    l2_normalize(&mut v)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feature(i: usize, dim: usize, fill: f64) -> LocalFeature {
        LocalFeature {
            x: 10.0 * i as f64,
            y: 5.0 + i as f64,
            scale: 1.5 + i as f64 * 0.25,
            orientation: -1.0 + 0.125 * i as f64,
            descriptor: (0..dim).map(|k| fill + k as f64).collect(),
        }
    }

    fn two_variants(n: usize) -> FeatureSet {
        let base: Vec<_> = (0..n).map(|i| feature(i, 8, 0.0)).collect();
        let wide: Vec<_> = (0..n).map(|i| feature(i, 8, 3.0)).collect();
        FeatureSet::new("img", vec![(RegionScaleConfig::BASE, base), (RegionScaleConfig::WIDE, wide)]).unwrap()
    }

    #[test]
    fn empty_feature_file() {
        let set = FeatureSet::new("e", vec![(RegionScaleConfig::BASE, vec![])]).unwrap();
        let back = FeatureSet::from_bytes("e", &set.to_bytes()).unwrap();
        assert_eq!(back.feature_count(), 0);
        assert_eq!(back.variants().len(), 1);
    }

    #[test]
    fn fixture_round_trip() {
        let set = two_variants(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.elfv");
        write_features(&path, &set).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.image_id, "img");
        assert_eq!(back.variant(RegionScaleConfig::WIDE).unwrap().len(), 5);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let good = two_variants(5).to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(FeatureSet::from_bytes("a", &bad_magic), Err(Error::BadMagic { .. })));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(FeatureSet::from_bytes("a", truncated), Err(Error::Truncated(_))));

        // Second variant with a shifted feature position.
        let base: Vec<_> = (0..5).map(|i| feature(i, 8, 0.0)).collect();
        let mut wide = base.clone();
        wide[3].x += 1.0;
        assert!(matches!(
            FeatureSet::new("a", vec![(RegionScaleConfig::BASE, base.clone()), (RegionScaleConfig::WIDE, wide)]),
            Err(Error::GeometryMismatch { variant: 1, feature: 3 })
        ));
        let short = base[..4].to_vec();
        assert!(matches!(
            FeatureSet::new("a", vec![(RegionScaleConfig::BASE, base), (RegionScaleConfig::WIDE, short)]),
            Err(Error::GeometryMismatch { variant: 1, .. })
        ));
    }

    #[test]
    fn sift_identity_and_rootsift() {
        let mut e1 = vec![0.0; DESCRIPTOR_DIM];
        e1[0] = 1.0;
        assert_eq!(power_normalize(&e1, NormalizationConfig::SIFT).unwrap(), e1);

        let mut v = vec![0.0; DESCRIPTOR_DIM];
        v[0] = 1.0;
        v[1] = 1.0;
        let out = power_normalize(&v, NormalizationConfig::ROOT_SIFT).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] - h).abs() < 1e-15 && (out[1] - h).abs() < 1e-15);
        assert!(out[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn degenerate_and_invalid() {
        let zero = vec![0.0; 16];
        for beta in [0.4, 0.5, 1.0] {
            assert!(matches!(
                power_normalize(&zero, NormalizationConfig::new(beta).unwrap()),
                Err(Error::DegenerateDescriptor)
            ));
        }
        assert!(power_normalize(&[1.0, -0.1], NormalizationConfig::SIFT).is_err());
        assert!(NormalizationConfig::new(0.0).is_err());
        assert!(NormalizationConfig::new(1.2).is_err());
    }

    #[test]
    fn measurement_radius() {
        assert!((RegionScaleConfig::BASE.radius(2.0) - 6.0 * 3f64.sqrt()).abs() < 1e-12);
        assert!((RegionScaleConfig::WIDE.radius(2.0) - 9.0 * 3f64.sqrt()).abs() < 1e-12);
    }

    fn descriptor() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..255.0], 2..64)
            .prop_filter("not all zero", |v| v.iter().any(|&x| x > 0.0))
    }

    fn beta() -> impl Strategy<Value = f64> {
        prop_oneof![Just(0.4), Just(0.5), Just(0.6), Just(1.0), 0.05f64..=1.0]
    }

    proptest! {
        #[test]
        fn unit_norm(d in descriptor(), b in beta()) {
            let out = power_normalize(&d, NormalizationConfig::new(b).unwrap()).unwrap();
            let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }

        #[test]
        fn zero_pattern_preserved(d in descriptor(), b in beta()) {
            let out = power_normalize(&d, NormalizationConfig::new(b).unwrap()).unwrap();
            for (x, y) in d.iter().zip(&out) {
                prop_assert_eq!(*x == 0.0, *y == 0.0);
            }
        }

        #[test]
        fn sift_idempotent(d in descriptor()) {
            let once = power_normalize(&d, NormalizationConfig::SIFT).unwrap();
            let twice = power_normalize(&once, NormalizationConfig::SIFT).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_commutes(d in descriptor(), b in beta(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..d.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let cfg = NormalizationConfig::new(b).unwrap();
            let permuted: Vec<f64> = perm.iter().map(|&i| d[i]).collect();
            let a = power_normalize(&permuted, cfg).unwrap();
            let out = power_normalize(&d, cfg).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((a[k] - out[i]).abs() < 1e-12);
            }
        }
    }
}
