//! TOML run configuration. Every field is optional; command-line flags win.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub paths: PathsConfig,
    pub estimator: EstimatorConfig,
    pub vocab: VocabConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
    pub evaluate: EvaluateConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub mvocab: Option<PathBuf>,
    pub mvocab_db: Option<PathBuf>,
    pub dem: Option<PathBuf>,
    pub external_predictions: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub top_k: Option<usize>,
    pub w_t: Option<f64>,
    pub t_sp: Option<usize>,
    pub reproj_tol: Option<f64>,
    pub shortlist: Option<usize>,
    pub orientation_tol: Option<f64>,
    pub scale_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub words: Option<usize>,
    pub mvocab_words: Option<usize>,
    pub dims: Option<usize>,
    pub max_iter: Option<usize>,
    pub whiten: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub places: Option<usize>,
    pub images_per_place: Option<usize>,
    pub features_per_image: Option<usize>,
    pub inlier_fraction: Option<f64>,
    pub descriptor_noise: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub thresholds: Option<Vec<f64>>,
    pub bin_width: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            [paths]
            manifest = "data/manifest.jsonl"
            [estimator]
            top_k = 50
            w_t = 1.2
            [vocab]
            words = 2048
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.paths.manifest.as_deref(), Some(Path::new("data/manifest.jsonl")));
        assert_eq!(cfg.estimator.top_k, Some(50));
        assert_eq!(cfg.vocab.words, Some(2048));
        assert!(cfg.threads.is_none());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(toml::from_str::<RunConfig>("[estimator]\ntopk = 3\n").is_err());
    }
}
