//! Acceptance gate. Every criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant};

use elevest_core::bowindex::build_index;
use elevest_core::corpus::{dem_lookup, split_dataset, DemGrid, GeoPoint};
use elevest_core::estimate::{
    build_bow_database, bow_training_descriptors, estimate_baseline, estimate_hybrid, estimate_mvocab,
    quantize_image, weighted_elevation, BowEstimator, BowFeatureConfig, EstimatorParams, Method, MvocabEstimator,
    Query,
};
use elevest_core::evaluate::{
    bias_by_elevation, cumulative_accuracy, generate_synthetic_corpus, rmse, SyntheticCorpusSpec,
};
use elevest_core::features::LocalFeature;
use elevest_core::geomverify::{tentative_correspondences, verify, QuantizedImage, VerifyParams};
use elevest_core::mvocab::{train_reduction, DbEntry, Neighbor, Pca, ReductionOptions, VocabBankConfig};
use elevest_core::vocab::{fit_kmeans, kmeans_plus_plus, KMeansConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {:.1?}, limit {:.0?}", t, limit))
}

// ---------------------------------------------------------------------------
// Inverted file vs dense cosine scan

fn dense_oracle(docs: &[(String, Vec<u32>)], k: usize, query: &[u32]) -> Vec<(String, f64)> {
    let n = docs.len() as f64;
    let mut df = vec![0usize; k];
    for (_, words) in docs {
        let distinct: HashSet<u32> = words.iter().copied().collect();
        for w in distinct {
            df[w as usize] += 1;
        }
    }
    let idf: Vec<f64> = df
        .iter()
        .map(|&c| if c == 0 { (n + 1.0).ln() } else { (n / c as f64).ln() })
        .collect();
    let dense = |words: &[u32]| {
        let mut v = vec![0.0f64; k];
        for &w in words {
            v[w as usize] += 1.0;
        }
        for (x, w) in v.iter_mut().zip(&idf) {
            *x *= w;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    };
    let q = dense(query);
    let mut out: Vec<(String, f64)> = docs
        .iter()
        .filter_map(|(id, words)| {
            let d = dense(words);
            let shares = q.iter().zip(&d).any(|(a, b)| *a > 0.0 && *b > 0.0);
            shares.then(|| (id.clone(), q.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()))
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn skewed_words(rng: &mut ChaCha8Rng, k: usize, len: usize) -> Vec<u32> {
    (0..len)
        .map(|_| {
            let u: f64 = rng.random();
            ((u * u * k as f64) as u32).min(k as u32 - 1)
        })
        .collect()
}

fn inverted_file_oracle() -> Check {
    let start = Instant::now();
    const K: usize = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let docs: Vec<(String, Vec<u32>)> = (0..200)
        .map(|i| {
            let len = rng.random_range(20..200);
            (format!("img{i:03}"), skewed_words(&mut rng, K, len))
        })
        .collect();
    let index = build_index(
        K,
        docs.iter().map(|(id, w)| (id.clone(), w.clone(), Some(0.0))).collect(),
    )
    .map_err(|e| e.to_string())?;
    let mut queries: Vec<Vec<u32>> = docs.iter().map(|d| d.1.clone()).collect();
    for _ in 0..50 {
        let len = rng.random_range(5..150);
        queries.push(skewed_words(&mut rng, K, len));
    }
    let mut worst = 0.0f64;
    for (qi, q) in queries.iter().enumerate() {
        let got = index.query(&index.encode(q).map_err(|e| e.to_string())?, docs.len());
        let want = dense_oracle(&docs, K, q);
        ensure(got.hits.len() == want.len(), || {
            format!("query {qi}: {} hits vs {} in oracle", got.hits.len(), want.len())
        })?;
        for (pos, (h, (id, score))) in got.hits.iter().zip(&want).enumerate() {
            ensure(&h.image_id == id, || format!("query {qi} rank {pos}: {} vs oracle {id}", h.image_id))?;
            let diff = (h.score - score.clamp(0.0, 1.0)).abs();
            worst = worst.max(diff);
            ensure(diff <= 1e-9, || format!("query {qi} rank {pos}: score off by {diff:e}"))?;
        }
    }
    within_time(start, Duration::from_secs(10))?;
    Ok(format!(
        "{} queries over 200 images, max score error {worst:.1e}, {:.2?}",
        queries.len(),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// k-means vs brute-force Lloyd

fn brute_lloyd(data: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, iterations: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let assign = |c: &[Vec<f64>]| -> Vec<(usize, f64)> {
        data.iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (j, cj) in c.iter().enumerate() {
                    let d = sq(p, cj);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best
            })
            .collect()
    };
    let mut objectives = Vec::new();
    for _ in 0..iterations {
        let a = assign(&centroids);
        objectives.push(a.iter().map(|x| x.1).sum());
        for (j, c) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = data.iter().zip(&a).filter(|(_, x)| x.0 == j).map(|(p, _)| p).collect();
            assert!(!members.is_empty(), "oracle fixture must not empty a cluster");
            for (d, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    objectives.push(assign(&centroids).iter().map(|x| x.1).sum());
    (centroids, objectives)
}

fn kmeans_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 1.4).unwrap();
    let centers = [[0.0, 0.0], [6.0, 1.0], [2.0, 7.0]];
    let data: Vec<Vec<f64>> = (0..60)
        .map(|i| {
            let c = centers[i % 3];
            vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
        })
        .collect();
    let cfg = KMeansConfig {
        k: 3,
        seed: 42,
        max_iter: 100,
        tol: 0.0,
    };
    let fit = fit_kmeans(&data, &cfg, "blobs").map_err(|e| e.to_string())?;
    let init = kmeans_plus_plus(&data, 3, 42).map_err(|e| e.to_string())?;
    let (oracle, oracle_obj) = brute_lloyd(&data, init, fit.iterations);
    let mut worst = 0.0f64;
    for (a, b) in fit.vocabulary.centroids().iter().zip(&oracle) {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("centroids differ by {worst:e}"))?;
    ensure(fit.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-12), || {
        format!("objective not monotone: {:?}", fit.objective_history)
    })?;
    ensure(
        fit.objective_history.len() == oracle_obj.len()
            && fit.objective_history.iter().zip(&oracle_obj).all(|(a, b)| (a - b).abs() <= 1e-9),
        || "objective history differs from oracle".into(),
    )?;
    Ok(format!(
        "{} iterations, max centroid difference {worst:.1e}, objective {:.3} -> {:.3}",
        fit.iterations,
        fit.objective_history[0],
        fit.objective_history.last().unwrap()
    ))
}

// ---------------------------------------------------------------------------
// Planted similarity transforms

fn feature(x: f64, y: f64, scale: f64, orientation: f64) -> LocalFeature {
    LocalFeature {
        x,
        y,
        scale,
        orientation,
        descriptor: vec![1.0],
    }
}

/// Returns (verified, recovered scale, planted scale).
fn planted_trial(rng: &mut ChaCha8Rng, inliers: usize, outliers: usize) -> Result<(bool, f64, f64), String> {
    let (w, h) = (640.0, 480.0);
    let s = rng.random_range(0.5..2.0);
    let theta: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    let (tx, ty) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
    let jitter = Normal::new(0.0, 0.5).unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (mut qf, mut qw, mut df, mut dw) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..inliers {
        let (x, y) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let sc = rng.random_range(1.0..10.0);
        let o = rng.random_range(-3.0..3.0);
        let (dx, dy) = (x - w / 2.0, y - h / 2.0);
        let mx = w / 2.0 + s * (cos * dx - sin * dy) + tx + jitter.sample(rng);
        let my = h / 2.0 + s * (sin * dx + cos * dy) + ty + jitter.sample(rng);
        qf.push(feature(x, y, sc, o));
        let scale_noise = 1.0 + 0.03 * normal.sample(rng);
        df.push(feature(mx, my, sc * s * scale_noise, o + theta + 0.03 * normal.sample(rng)));
        qw.push(i as u32);
        dw.push(i as u32);
    }
    for i in 0..outliers {
        let word = 1000 + i as u32;
        qf.push(feature(rng.random_range(0.0..w), rng.random_range(0.0..h), rng.random_range(1.0..10.0), rng.random_range(-3.0..3.0)));
        df.push(feature(rng.random_range(0.0..w), rng.random_range(0.0..h), rng.random_range(1.0..10.0), rng.random_range(-3.0..3.0)));
        qw.push(word);
        dw.push(word);
    }
    let q = QuantizedImage::new(qf, qw).map_err(|e| e.to_string())?;
    let d = QuantizedImage::new(df, dw).map_err(|e| e.to_string())?;
    let corrs = tentative_correspondences(&q, &d);
    let params = VerifyParams {
        t_sp: 8,
        ..VerifyParams::default()
    };
    let r = verify(&corrs, &q.features, &d.features, &params).map_err(|e| e.to_string())?;
    Ok((r.verified, r.transform.map_or(f64::NAN, |t| t.scale), s))
}

fn planted_transforms() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut verified = 0;
    let mut worst_scale = 0.0f64;
    for _ in 0..100 {
        let (ok, scale, planted) = planted_trial(&mut rng, 20, 30)?;
        if ok {
            verified += 1;
        }
        worst_scale = worst_scale.max((scale / planted - 1.0).abs());
    }
    let mut false_verified = 0;
    for _ in 0..100 {
        if planted_trial(&mut rng, 5, 30)?.0 {
            false_verified += 1;
        }
    }
    ensure(verified == 100, || format!("{verified}/100 planted pairs verified"))?;
    ensure(worst_scale <= 0.05, || format!("scale error {:.2}%", worst_scale * 100.0))?;
    ensure(false_verified == 0, || format!("{false_verified}/100 weak pairs verified"))?;
    within_time(start, Duration::from_secs(30))?;
    Ok(format!(
        "100/100 verified, worst scale error {:.3}%, 0/100 weak pairs verified, {:.2?}",
        worst_scale * 100.0,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// Weight formula

fn weight_fixture() -> Check {
    let neighbors: Vec<Neighbor> = [(1.0, 1000.0), (1.2, 2000.0), (1.5, 3000.0)]
        .iter()
        .enumerate()
        .map(|(i, &(d, e))| Neighbor {
            image_id: format!("n{i}"),
            dissimilarity: d,
            elevation_m: e,
        })
        .collect();
    let est = weighted_elevation(&neighbors, 1.4).map_err(|e| e.to_string())?;
    // Direct evaluation: w = {1 - 1/1.4, 1 - 1.2/1.4, 0} = {2/7, 1/7, 0}.
    let (w1, w2) = (1.0 - 1.0 / 1.4, 1.0 - 1.2 / 1.4);
    let direct = (w1 * 1000.0 + w2 * 2000.0) / (w1 + w2);
    ensure((est.elevation_m - 1333.33).abs() <= 0.01, || format!("got {:.4} m", est.elevation_m))?;
    ensure((est.elevation_m - direct).abs() <= 1e-9, || "disagrees with direct evaluation".into())?;
    Ok(format!("{:.4} m", est.elevation_m))
}

// ---------------------------------------------------------------------------
// PCA vs Jacobi eigendecomposition

/// Cyclic Jacobi eigenvalues of a symmetric matrix, descending.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn covariance(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

fn pca_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    // Known 3-dim subspace of R^20 with an offset.
    let d = 20;
    let basis: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect()).collect();
    let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
    let subspace: Vec<Vec<f64>> = (0..50)
        .map(|_| {
            let z: Vec<f64> = (0..3).map(|k| normal.sample(&mut rng) * (3.0 - k as f64)).collect();
            (0..d)
                .map(|j| offset[j] + (0..3).map(|k| z[k] * basis[k][j]).sum::<f64>())
                .collect()
        })
        .collect();
    let pca = Pca::fit(&subspace, 3, false).map_err(|e| e.to_string())?;
    let mut recon_err = 0.0f64;
    for x in &subspace {
        let r = pca.reconstruct(&pca.project(x));
        recon_err = recon_err.max(r.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(recon_err <= 1e-6, || format!("reconstruction error {recon_err:e}"))?;

    // Variance checks: covariance route (d <= n) and Gram route (d > n, D' = n - 1).
    let mut worst_rel = 0.0f64;
    for (n, d, dims) in [(40usize, 12usize, 12usize), (12, 30, 11)] {
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|j| normal.sample(&mut rng) * (1.0 + j as f64 * 0.3)).collect())
            .collect();
        let pca = Pca::fit(&samples, dims, false).map_err(|e| e.to_string())?;
        let oracle = jacobi_eigenvalues(covariance(&samples));
        for (k, (got, want)) in pca.variances.iter().zip(&oracle).enumerate() {
            let rel = (got - want).abs() / want.abs();
            worst_rel = worst_rel.max(rel);
            ensure(rel <= 1e-6, || format!("n={n} d={d} component {k}: {got} vs {want}"))?;
        }
        let total_got: f64 = pca.variances.iter().sum();
        let total_want: f64 = oracle[..dims].iter().sum();
        ensure((total_got - total_want).abs() <= 1e-6 * total_want, || {
            format!("captured variance {total_got} vs {total_want}")
        })?;
    }
    Ok(format!(
        "reconstruction error {recon_err:.1e}, worst relative variance error {worst_rel:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// End-to-end synthetic benchmark

fn end_to_end() -> Check {
    let start = Instant::now();
    let err = |e: elevest_core::Error| e.to_string();
    let spec = SyntheticCorpusSpec {
        places: 20,
        images_per_place: 10,
        inlier_fraction: 0.7,
        elevation_range_m: (0.0, 4782.0),
        seed: 17,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec).map_err(err)?;
    let records: Vec<_> = corpus.images.iter().map(|i| i.record.clone()).collect();
    let split = split_dataset(&records, 0.2, 17).map_err(err)?;
    let (train, test): (Vec<_>, Vec<_>) = corpus
        .images
        .iter()
        .partition(|i| split.train_ids.contains(&i.record.id));

    let cfg = BowFeatureConfig::default();
    let train_sets: Vec<_> = train.iter().map(|i| i.features.clone()).collect();
    let descriptors = bow_training_descriptors(&train_sets, cfg).map_err(err)?;
    let kcfg = KMeansConfig {
        k: 512,
        seed: 17,
        max_iter: 20,
        tol: 1e-6,
    };
    let vocab = fit_kmeans(&descriptors, &kcfg, "synthetic").map_err(err)?.vocabulary;
    let db_pairs: Vec<_> = train
        .iter()
        .map(|i| (&i.features, i.record.elevation_m.unwrap()))
        .collect();
    let bow_db = build_bow_database(&vocab, &db_pairs, cfg).map_err(err)?;

    let reduction = train_reduction(
        &train_sets,
        &VocabBankConfig::standard(64),
        64,
        17,
        &ReductionOptions::default(),
    )
    .map_err(err)?;
    let elevations: HashMap<&str, f64> = train
        .iter()
        .map(|i| (i.record.id.as_str(), i.record.elevation_m.unwrap()))
        .collect();
    let mvocab_db: Vec<DbEntry> = reduction
        .embeddings
        .iter()
        .map(|(id, v)| DbEntry {
            image_id: id.clone(),
            vector: v.clone(),
            elevation_m: elevations[id.as_str()],
        })
        .collect();

    let params = EstimatorParams::default();
    let bow = BowEstimator {
        index: &bow_db.index,
        lookup: &bow_db.images,
        params,
    };
    let secondary = MvocabEstimator {
        model: &reduction.model,
        database: &mvocab_db,
        params,
    };
    let train_elev: Vec<f64> = train.iter().map(|i| i.record.elevation_m.unwrap()).collect();
    let baseline = estimate_baseline(&train_elev).map_err(err)?.elevation_m;
    let train_places: HashSet<usize> = train.iter().map(|i| i.place).collect();

    let mut truths = Vec::new();
    let mut per_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let (mut same_place, mut verified) = (0, 0);
    for img in &test {
        let q = quantize_image(&img.features, &vocab, cfg).map_err(err)?;
        let query = Query {
            id: &img.record.id,
            features: &img.features,
            quantized: &q,
        };
        let hybrid = estimate_hybrid(&query, &bow, Some(&secondary)).map_err(err)?;
        let bow_only = bow.estimate(&q).map_err(err)?;
        let embedded = reduction.model.embed(&img.features).map_err(err)?;
        let mv = estimate_mvocab(&embedded, &mvocab_db, &params).map_err(err)?;
        if train_places.contains(&img.place) {
            same_place += 1;
            if bow_only.method == Method::BowVerified {
                verified += 1;
            }
        }
        truths.push(img.record.elevation_m.unwrap());
        per_method.entry("hybrid").or_default().push(hybrid.elevation_m);
        per_method.entry("bow").or_default().push(bow_only.elevation_m);
        per_method.entry("mvocab").or_default().push(mv.elevation_m);
        per_method.entry("baseline").or_default().push(baseline);
    }
    let scores: BTreeMap<&str, f64> = per_method
        .iter()
        .map(|(m, p)| Ok((*m, rmse(p, &truths)?)))
        .collect::<Result<_, elevest_core::Error>>()
        .map_err(err)?;
    let rate = verified as f64 / same_place.max(1) as f64;
    let summary = format!(
        "{} queries; RMSE hybrid {:.1} m, bow {:.1} m, mvocab {:.1} m, baseline {:.1} m; verified {verified}/{same_place} ({:.0}%); {:.1?}",
        test.len(),
        scores["hybrid"],
        scores["bow"],
        scores["mvocab"],
        scores["baseline"],
        rate * 100.0,
        start.elapsed()
    );
    ensure(scores["hybrid"] <= 0.5 * scores["baseline"], || format!("hybrid above half the baseline: {summary}"))?;
    ensure(same_place > 0 && rate >= 0.6, || format!("verification rate below 60%: {summary}"))?;
    within_time(start, Duration::from_secs(300))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// DEM interpolation

fn dem_planar() -> Check {
    let (a, b, c) = (1520.0, 350.0, -120.0);
    let origin = GeoPoint::new(45.0, 6.0).map_err(|e| e.to_string())?;
    let (dlat, dlon) = (0.000_216, 0.000_308);
    let (rows, cols) = (60, 80);
    let plane = |lat: f64, lon: f64| a + b * (lat - origin.lat) + c * (lon - origin.lon);
    let samples: Vec<f64> = (0..rows)
        .flat_map(|r| (0..cols).map(move |col| (r, col)))
        .map(|(r, col)| plane(origin.lat + r as f64 * dlat, origin.lon + col as f64 * dlon))
        .collect();
    let grid = DemGrid::new(origin, dlat, dlon, rows, cols, samples).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let lat = origin.lat + rng.random_range(0.0..(rows - 1) as f64 * dlat);
        let lon = origin.lon + rng.random_range(0.0..(cols - 1) as f64 * dlon);
        let z = dem_lookup(&grid, GeoPoint::new(lat, lon).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst = worst.max((z - plane(lat, lon)).abs());
    }
    ensure(worst <= 1e-9, || format!("max error {worst:e} m"))?;
    Ok(format!("1000 points, max error {worst:.1e} m"))
}

// ---------------------------------------------------------------------------
// Metric example suites

fn metric_identities() -> Check {
    let e = |x: elevest_core::Error| x.to_string();
    ensure(rmse(&[250.0, 1800.0], &[250.0, 1800.0]).map_err(e)? == 0.0, || "rmse(p, p) != 0".into())?;
    let r = rmse(&[100.0, 200.0], &[100.0, 100.0]).map_err(e)?;
    ensure((r - 70.711).abs() < 5e-4 && r == (5000.0f64).sqrt(), || format!("rmse example {r}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truths: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..4782.0)).collect();
    let c = 1234.5;
    let n = truths.len() as f64;
    let mean = truths.iter().sum::<f64>() / n;
    let var = truths.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let r = rmse(&vec![c; truths.len()], &truths).map_err(e)?;
    let identity = (var + (c - mean).powi(2)).sqrt();
    ensure((r - identity).abs() <= 1e-9 * identity, || format!("constant predictor {r} vs {identity}"))?;
    ensure(rmse(&[1.0], &[]).is_err() && rmse(&[], &[]).is_err(), || "rmse accepted bad lengths".into())?;

    let errs = [10.0, 50.0, 100.0];
    let curve = cumulative_accuracy(&errs, &[0.0, 50.0, 100.0, 150.0]).map_err(e)?;
    let f: Vec<f64> = curve.iter().map(|p| p.fraction).collect();
    ensure(f == [0.0, 2.0 / 3.0, 1.0, 1.0], || format!("cumulative accuracy {f:?}"))?;
    ensure(cumulative_accuracy(&[], &[1.0]).is_err(), || "empty errors accepted".into())?;

    let exact = bias_by_elevation(&[(100.0, 100.0), (900.0, 900.0), (2600.0, 2600.0)], 500.0).map_err(e)?;
    ensure(exact.iter().all(|b| b.mean_signed_error_m == 0.0), || "exact predictions biased".into())?;
    // Mean of {+100, 0}.
    let one = bias_by_elevation(&[(100.0, 200.0), (150.0, 150.0)], 500.0).map_err(e)?;
    ensure(one.len() == 1 && one[0].count == 2 && one[0].mean_signed_error_m == 50.0, || {
        format!("single bin {one:?}")
    })?;
    let two = bias_by_elevation(&[(100.0, 100.0), (600.0, 600.0)], 500.0).map_err(e)?;
    ensure(two.iter().map(|b| b.count).collect::<Vec<_>>() == [1, 1], || format!("two bins {two:?}"))?;
    Ok("rmse 3/3, cumulative accuracy 3/3, bias 3/3 examples".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("inverted file equals dense cosine scan", inverted_file_oracle),
        ("k-means equals brute-force Lloyd", kmeans_oracle),
        ("spatial verification planted transforms", planted_transforms),
        ("dissimilarity weight fixture", weight_fixture),
        ("PCA subspace and variance oracle", pca_oracle),
        ("end-to-end synthetic benchmark", end_to_end),
        ("DEM planar interpolation", dem_planar),
        ("metric example suites", metric_identities),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failures += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failures += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
