use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use elevest_core::corpus::{
    annotate_elevations, load_manifest, split_dataset, write_manifest, DatasetSplit, DemGrid, ImageRecord,
};
use elevest_core::estimate::{
    bow_training_descriptors, build_bow_database, estimate_baseline, estimate_hybrid_detailed, estimate_mvocab,
    load_external_predictions, quantize_image, read_prediction_rows, write_predictions, BowEstimator,
    BowFeatureConfig, ElevationEstimate, EstimatorParams, ExternalPredictions, FeatureStore, MvocabEstimator,
    PredictionRow, Query, SecondaryEstimator,
};
use elevest_core::evaluate::{
    default_thresholds, generate_synthetic_corpus, match_predictions, write_synthetic_corpus, EvalReport,
    SyntheticCorpusSpec, DEFAULT_BIAS_BIN_M,
};
use elevest_core::features::{load_features_as, FeatureSet};
use elevest_core::geomverify::RerankedHit;
use elevest_core::mvocab::{
    load_database, save_database, train_reduction, DbEntry, ReductionOptions, ShortVectorModel, VocabBankConfig,
    DEFAULT_DIMS,
};
use elevest_core::vocab::{fit_kmeans, KMeansConfig, Vocabulary};
use elevest_core::bowindex::InvertedIndex;
use elevest_core::Error;
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{
    AnnotateArgs, Cli, CliError, EstimateArgs, EvaluateArgs, MethodArg, SecondaryKind, SplitArgs, SynthArgs,
    TrainMvocabArgs, TrainVocabArgs,
};

pub const DEFAULT_BOW_WORDS: usize = 1024;
pub const DEFAULT_MVOCAB_WORDS: usize = 256;
pub const DEFAULT_TEST_FRACTION: f64 = 0.13;
pub const SYNTH_TEST_FRACTION: f64 = 0.2;

type Result<T> = std::result::Result<T, CliError>;

pub struct Context<'a> {
    pub cli: &'a Cli,
    pub config: RunConfig,
}

impl Context<'_> {
    fn seed(&self) -> u64 {
        self.cli.seed.or(self.config.seed).unwrap_or(0)
    }

    fn required(flag: Option<&PathBuf>, cfg: Option<&PathBuf>, name: &'static str) -> Result<PathBuf> {
        flag.or(cfg).cloned().ok_or(CliError::Missing(name))
    }

    fn manifest(&self) -> Result<PathBuf> {
        Self::required(self.cli.manifest.as_ref(), self.config.paths.manifest.as_ref(), "--manifest")
    }

    fn out(&self) -> Result<PathBuf> {
        Self::required(self.cli.out.as_ref(), self.config.paths.out.as_ref(), "--out")
    }

    fn vocab_path(&self) -> Result<PathBuf> {
        Self::required(self.cli.vocab.as_ref(), self.config.paths.vocab.as_ref(), "--vocab")
    }

    fn index_path(&self) -> Result<PathBuf> {
        Self::required(self.cli.index.as_ref(), self.config.paths.index.as_ref(), "--index")
    }

    fn mvocab_path(&self) -> Result<PathBuf> {
        Self::required(self.cli.mvocab.as_ref(), self.config.paths.mvocab.as_ref(), "--mvocab")
    }

    fn features_dir(&self) -> Option<PathBuf> {
        self.cli.features_dir.clone().or_else(|| self.config.paths.features_dir.clone())
    }

    fn split(&self) -> Result<Option<DatasetSplit>> {
        match self.cli.split.as_ref().or(self.config.paths.split.as_ref()) {
            None => Ok(None),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map(Some)
                    .map_err(|e| CliError::Invalid(format!("split file {}: {e}", p.display())))
            }
        }
    }

    fn estimator_params(&self, args: Option<&EstimateArgs>) -> Result<EstimatorParams> {
        let c = &self.config.estimator;
        let d = EstimatorParams::default();
        let p = EstimatorParams {
            k: self.cli.top_k.or(c.top_k).unwrap_or(d.k),
            w_t: self.cli.w_t.or(c.w_t).unwrap_or(d.w_t),
            t_sp: self.cli.t_sp.or(c.t_sp).unwrap_or(d.t_sp),
            reproj_tol: args.and_then(|a| a.reproj_tol).or(c.reproj_tol).unwrap_or(d.reproj_tol),
            shortlist: args.and_then(|a| a.shortlist).or(c.shortlist).unwrap_or(d.shortlist),
            orientation_tol: c.orientation_tol.unwrap_or(d.orientation_tol),
            scale_tol: c.scale_tol.unwrap_or(d.scale_tol),
        };
        p.validate()?;
        Ok(p)
    }
}

/// Where an image's feature file lives.
fn feature_path(record: &ImageRecord, manifest: &Path, features_dir: Option<&Path>) -> PathBuf {
    if let Some(dir) = features_dir {
        return dir.join(format!("{}.elfv", record.id));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    record
        .resolved_feature_path(base)
        .unwrap_or_else(|| base.join(format!("{}.elfv", record.id)))
}

#[derive(Clone, Copy, PartialEq)]
enum Subset {
    Train,
    Test,
}

fn select(records: Vec<ImageRecord>, split: Option<&DatasetSplit>, subset: Subset) -> Vec<ImageRecord> {
    let Some(split) = split else {
        return records;
    };
    let keep = match subset {
        Subset::Train => &split.train_ids,
        Subset::Test => &split.test_ids,
    };
    records.into_iter().filter(|r| keep.contains(&r.id)).collect()
}

fn load_sets(records: &[ImageRecord], manifest: &Path, features_dir: Option<&Path>) -> Result<Vec<FeatureSet>> {
    Ok(records
        .par_iter()
        .map(|r| load_features_as(&feature_path(r, manifest, features_dir), r.id.clone()))
        .collect::<elevest_core::Result<Vec<_>>>()?)
}

/// Records with a finite elevation; the rest are reported and dropped.
fn with_elevation(records: Vec<ImageRecord>, purpose: &str) -> Vec<ImageRecord> {
    let total = records.len();
    let kept: Vec<ImageRecord> = records
        .into_iter()
        .filter(|r| r.elevation_m.is_some_and(f64::is_finite))
        .collect();
    if kept.len() < total {
        warn!("{} images without elevation left out of the {purpose}", total - kept.len());
    }
    kept
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_path_buf(),
            source,
        }),
        _ => Ok(()),
    }
}

pub fn synth(ctx: &Context<'_>, args: &SynthArgs) -> Result<()> {
    let c = &ctx.config.synth;
    let d = SyntheticCorpusSpec::default();
    let spec = SyntheticCorpusSpec {
        places: args.places.or(c.places).unwrap_or(d.places),
        images_per_place: args.images_per_place.or(c.images_per_place).unwrap_or(d.images_per_place),
        features_per_image: args.features_per_image.or(c.features_per_image).unwrap_or(d.features_per_image),
        inlier_fraction: args.inlier_fraction.or(c.inlier_fraction).unwrap_or(d.inlier_fraction),
        descriptor_noise: args.descriptor_noise.or(c.descriptor_noise).unwrap_or(d.descriptor_noise),
        seed: ctx.seed(),
        ..d
    };
    let out = ctx.out()?;
    let corpus = generate_synthetic_corpus(&spec)?;
    let layout = write_synthetic_corpus(&corpus, &out)?;
    let records: Vec<ImageRecord> = corpus.images.iter().map(|i| i.record.clone()).collect();
    let fraction = args.test_fraction.unwrap_or(SYNTH_TEST_FRACTION);
    let split = split_dataset(&records, fraction, spec.seed)?;
    write_json(&out.join("split.json"), &split)?;
    info!(
        "wrote {} images of {} places to {} ({} train, {} test)",
        records.len(),
        spec.places,
        layout.manifest.display(),
        split.train_ids.len(),
        split.test_ids.len()
    );
    Ok(())
}

pub fn split(ctx: &Context<'_>, args: &SplitArgs) -> Result<()> {
    let records = load_manifest(&ctx.manifest()?)?;
    let fraction = args
        .test_fraction
        .or(ctx.config.split.test_fraction)
        .unwrap_or(DEFAULT_TEST_FRACTION);
    let split = split_dataset(&records, fraction, ctx.seed())?;
    let out = ctx.out()?;
    ensure_parent(&out)?;
    write_json(&out, &split)?;
    info!("{} train, {} test images", split.train_ids.len(), split.test_ids.len());
    Ok(())
}

pub fn train_vocab(ctx: &Context<'_>, args: &TrainVocabArgs) -> Result<()> {
    let manifest = ctx.manifest()?;
    let split = ctx.split()?;
    let records = select(load_manifest(&manifest)?, split.as_ref(), Subset::Train);
    let sets = load_sets(&records, &manifest, ctx.features_dir().as_deref())?;
    let descriptors = bow_training_descriptors(&sets, BowFeatureConfig::default())?;
    let cfg = KMeansConfig {
        k: args.words.or(ctx.config.vocab.words).unwrap_or(DEFAULT_BOW_WORDS),
        max_iter: args.max_iter.or(ctx.config.vocab.max_iter).unwrap_or(50),
        ..KMeansConfig::new(0, ctx.seed())
    };
    info!("clustering {} descriptors into {} words", descriptors.len(), cfg.k);
    let tag = manifest
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let fit = fit_kmeans(&descriptors, &cfg, &tag)?;
    info!(
        "{} iterations (converged: {}), objective {:.4} -> {:.4}",
        fit.iterations,
        fit.converged,
        fit.objective_history.first().copied().unwrap_or(0.0),
        fit.objective_history.last().copied().unwrap_or(0.0)
    );
    let out = ctx.out()?;
    ensure_parent(&out)?;
    fit.vocabulary.save(&out)?;
    Ok(())
}

pub fn build_index(ctx: &Context<'_>) -> Result<()> {
    let manifest = ctx.manifest()?;
    let vocab = Vocabulary::load(&ctx.vocab_path()?)?;
    let split = ctx.split()?;
    let records = with_elevation(
        select(load_manifest(&manifest)?, split.as_ref(), Subset::Train),
        "index",
    );
    let sets = load_sets(&records, &manifest, ctx.features_dir().as_deref())?;
    let pairs: Vec<(&FeatureSet, f64)> = sets
        .iter()
        .zip(&records)
        .map(|(s, r)| (s, r.elevation_m.expect("filtered")))
        .collect();
    let db = build_bow_database(&vocab, &pairs, BowFeatureConfig::default())?;
    let out = ctx.out()?;
    ensure_parent(&out)?;
    db.index.save(&out)?;
    info!("indexed {} images, {} postings", db.index.len(), db.index.total_postings());
    Ok(())
}

pub fn train_mvocab(ctx: &Context<'_>, args: &TrainMvocabArgs) -> Result<()> {
    let manifest = ctx.manifest()?;
    let split = ctx.split()?;
    let records = with_elevation(
        select(load_manifest(&manifest)?, split.as_ref(), Subset::Train),
        "short-vector database",
    );
    let sets = load_sets(&records, &manifest, ctx.features_dir().as_deref())?;
    let v = &ctx.config.vocab;
    let bank = VocabBankConfig::standard(args.words.or(v.mvocab_words).unwrap_or(DEFAULT_MVOCAB_WORDS));
    let dims = ctx.cli.dims.or(v.dims).unwrap_or(DEFAULT_DIMS);
    let opts = ReductionOptions {
        whiten: args.whiten || v.whiten.unwrap_or(false),
        kmeans_max_iter: args.max_iter.or(v.max_iter).unwrap_or(ReductionOptions::default().kmeans_max_iter),
        ..ReductionOptions::default()
    };
    info!(
        "training {} vocabularies of {} words and a {dims}-dimensional projection on {} images",
        bank.entries.len(),
        bank.words_per_vocab,
        sets.len()
    );
    let trained = train_reduction(&sets, &bank, dims, ctx.seed(), &opts)?;
    let elevations: HashMap<&str, f64> = records
        .iter()
        .map(|r| (r.id.as_str(), r.elevation_m.expect("filtered")))
        .collect();
    let database: Vec<DbEntry> = trained
        .embeddings
        .into_iter()
        .map(|(id, vector)| DbEntry {
            elevation_m: elevations[id.as_str()],
            image_id: id,
            vector,
        })
        .collect();
    let out = ctx.out()?;
    ensure_parent(&out)?;
    trained.model.save(&out)?;
    let db_path = ctx
        .cli
        .mvocab_db
        .clone()
        .or_else(|| ctx.config.paths.mvocab_db.clone())
        .unwrap_or_else(|| out.with_extension("elmb"));
    ensure_parent(&db_path)?;
    save_database(&db_path, &database)?;
    let captured: f64 = trained.variances.iter().sum();
    info!("captured variance {captured:.4}; database written to {}", db_path.display());
    Ok(())
}

pub fn annotate(ctx: &Context<'_>, args: &AnnotateArgs) -> Result<()> {
    let dem_path = Context::required(args.dem.as_ref(), ctx.config.paths.dem.as_ref(), "--dem")?;
    let grid = DemGrid::from_esri_ascii(&dem_path)?;
    let records = load_manifest(&ctx.manifest()?)?;
    let annotated = annotate_elevations(&records, &grid)?;
    let out = ctx.out()?;
    ensure_parent(&out)?;
    write_manifest(&out, &annotated.records)?;
    info!(
        "annotated {} records ({} without position)",
        annotated.records.len() - annotated.skipped_without_geo,
        annotated.skipped_without_geo
    );
    Ok(())
}

#[derive(Serialize)]
struct VerificationDump<'a> {
    query: &'a str,
    estimate: Option<&'a ElevationEstimate>,
    hits: &'a [RerankedHit],
}

pub fn estimate(ctx: &Context<'_>, args: &EstimateArgs) -> Result<()> {
    let params = ctx.estimator_params(Some(args))?;
    let features_dir = ctx.features_dir();
    let out = ctx.out()?;

    // Artifacts each method needs, loaded before any query work.
    let needs_bow = matches!(args.method, MethodArg::Hybrid | MethodArg::Bow | MethodArg::Baseline);
    let index = if needs_bow {
        Some(InvertedIndex::load(&ctx.index_path()?)?)
    } else {
        None
    };
    let manifest = ctx.manifest()?;
    let db_records = load_manifest(&manifest)?;
    let split = ctx.split()?;

    let secondary_kind = match args.method {
        MethodArg::Hybrid => ctx.cli.secondary,
        MethodArg::Mvocab => Some(SecondaryKind::Mvocab),
        _ => None,
    };
    let mvocab: Option<(ShortVectorModel, Vec<DbEntry>)> = if secondary_kind == Some(SecondaryKind::Mvocab) {
        let model_path = ctx.mvocab_path()?;
        let db_path = ctx
            .cli
            .mvocab_db
            .clone()
            .or_else(|| ctx.config.paths.mvocab_db.clone())
            .unwrap_or_else(|| model_path.with_extension("elmb"));
        Some((ShortVectorModel::load(&model_path)?, load_database(&db_path)?))
    } else {
        None
    };
    let external: Option<ExternalPredictions> = if secondary_kind == Some(SecondaryKind::External) {
        let path = Context::required(
            ctx.cli.external_predictions.as_ref(),
            ctx.config.paths.external_predictions.as_ref(),
            "--external-predictions",
        )?;
        Some(load_external_predictions(&path)?)
    } else {
        None
    };
    let vocab = if matches!(args.method, MethodArg::Hybrid | MethodArg::Bow) {
        Some(Arc::new(Vocabulary::load(&ctx.vocab_path()?)?))
    } else {
        None
    };

    let (query_manifest, mut queries) =
        match args.queries.clone().or_else(|| ctx.config.paths.queries.clone()) {
            Some(q) => {
                let records = load_manifest(&q)?;
                (q, records)
            }
            None => (manifest.clone(), select(db_records.clone(), split.as_ref(), Subset::Test)),
        };
    queries.sort_by(|a, b| a.id.cmp(&b.id));
    info!("estimating {} queries with method {:?}", queries.len(), args.method);

    let store = match (&index, &vocab) {
        (Some(index), Some(vocab)) => {
            let indexed: BTreeSet<&str> = index.image_ids().iter().map(String::as_str).collect();
            let paths = db_records
                .iter()
                .filter(|r| indexed.contains(r.id.as_str()))
                .map(|r| (r.id.clone(), feature_path(r, &manifest, features_dir.as_deref())))
                .collect::<HashMap<_, _>>();
            if paths.len() < indexed.len() {
                warn!(
                    "{} indexed images are missing from {}; they cannot be verified",
                    indexed.len() - paths.len(),
                    manifest.display()
                );
            }
            Some(FeatureStore::new(paths, vocab.clone(), BowFeatureConfig::default()))
        }
        _ => None,
    };
    let mvocab_estimator = mvocab.as_ref().map(|(model, database)| MvocabEstimator {
        model,
        database,
        params,
    });
    let secondary: Option<&dyn SecondaryEstimator> = match (&mvocab_estimator, &external) {
        (Some(m), _) => Some(m),
        (None, Some(e)) => Some(e),
        _ => None,
    };
    let baseline = match (args.method, &index) {
        (MethodArg::Baseline, Some(index)) => Some(estimate_baseline(index.elevations())?),
        _ => None,
    };

    let results: Vec<(String, Option<ElevationEstimate>, Vec<RerankedHit>)> = queries
        .par_iter()
        .map(|record| -> Result<_> {
            if let Some(b) = baseline {
                return Ok((record.id.clone(), Some(b), Vec::new()));
            }
            let features = load_features_as(
                &feature_path(record, &query_manifest, features_dir.as_deref()),
                record.id.clone(),
            )?;
            let outcome = match args.method {
                MethodArg::Mvocab => {
                    let (model, database) = mvocab.as_ref().expect("loaded for mvocab");
                    model
                        .embed(&features)
                        .and_then(|v| estimate_mvocab(&v, database, &params))
                        .map(|e| (e, None))
                }
                _ => {
                    let vocab = vocab.as_ref().expect("loaded for retrieval");
                    let quantized = quantize_image(&features, vocab, BowFeatureConfig::default())?;
                    let bow = BowEstimator {
                        index: index.as_ref().expect("loaded for retrieval"),
                        lookup: store.as_ref().expect("built for retrieval"),
                        params,
                    };
                    let query = Query {
                        id: &record.id,
                        features: &features,
                        quantized: &quantized,
                    };
                    let sec = if args.method == MethodArg::Hybrid { secondary } else { None };
                    estimate_hybrid_detailed(&query, &bow, sec)
                }
            };
            match outcome {
                Ok((e, hits)) => Ok((record.id.clone(), Some(e), hits.unwrap_or_default())),
                Err(Error::NoEstimate(why)) => {
                    warn!("no estimate for {}: {why}", record.id.clone());
                    Ok((record.id.clone(), None, Vec::new()))
                }
                Err(e) => Err(Error::for_record(&record.id, e).into()),
            }
        })
        .collect::<Result<_>>()?;

    let rows: Vec<PredictionRow> = results
        .iter()
        .filter_map(|(id, e, _)| {
            e.map(|e| PredictionRow {
                image_id: id.clone(),
                elevation_m: e.elevation_m,
                method: e.method.to_string(),
            })
        })
        .collect();
    ensure_parent(&out)?;
    write_predictions(&out, &rows)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &rows {
        *counts.entry(r.method.as_str()).or_default() += 1;
    }
    info!(
        "wrote {} predictions ({} queries without estimate): {:?}",
        rows.len(),
        results.len() - rows.len(),
        counts
    );

    if let Some(dump) = &args.dump_verification {
        ensure_parent(dump)?;
        let io = |source| CliError::Write {
            path: dump.clone(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(dump).map_err(io)?);
        for (id, e, hits) in &results {
            let line = serde_json::to_string(&VerificationDump {
                query: id,
                estimate: e.as_ref(),
                hits,
            })
            .expect("plain data serializes");
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    Ok(())
}

fn load_truth(path: &Path) -> Result<BTreeMap<String, f64>> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut truth = BTreeMap::new();
        for r in read_prediction_rows(path)? {
            if truth.insert(r.image_id.clone(), r.elevation_m).is_some() {
                return Err(Error::DuplicateId(r.image_id).into());
            }
        }
        Ok(truth)
    } else {
        Ok(load_manifest(path)?
            .into_iter()
            .filter_map(|r| r.elevation_m.filter(|e| e.is_finite()).map(|e| (r.id, e)))
            .collect())
    }
}

pub fn evaluate(ctx: &Context<'_>, args: &EvaluateArgs) -> Result<()> {
    let paths = &ctx.config.paths;
    let predictions = Context::required(args.predictions.as_ref(), paths.predictions.as_ref(), "--predictions")?;
    let truth_path = args
        .truth
        .clone()
        .or_else(|| paths.truth.clone())
        .or_else(|| ctx.cli.manifest.clone())
        .or_else(|| paths.manifest.clone())
        .ok_or(CliError::Missing("--truth"))?;
    let mut truth = load_truth(&truth_path)?;
    if let Some(split) = ctx.split()? {
        truth.retain(|id, _| split.test_ids.contains(id));
    }
    let rows = read_prediction_rows(&predictions)?;
    let (samples, missing) = match_predictions(&truth, &rows)?;
    if samples.is_empty() {
        return Err(CliError::Invalid(format!(
            "{} has no predictions to evaluate",
            predictions.display()
        )));
    }
    let e = &ctx.config.evaluate;
    let thresholds = args
        .thresholds
        .clone()
        .or_else(|| e.thresholds.clone())
        .unwrap_or_else(default_thresholds);
    let bin_width = args.bin_width.or(e.bin_width).unwrap_or(DEFAULT_BIAS_BIN_M);
    let report = EvalReport::build(&samples, missing, &thresholds, bin_width)?;
    print!("{}", report.to_text());
    if let Some(out) = ctx.cli.out.clone().or_else(|| paths.out.clone()) {
        ensure_parent(&out)?;
        std::fs::write(&out, report.to_json() + "\n").map_err(|source| CliError::Write { path: out, source })?;
    }
    if let Some(dir) = &args.curves_dir {
        report.write_curves(dir)?;
    }
    Ok(())
}
