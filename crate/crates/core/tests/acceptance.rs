//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line straight to
//! stderr (bypassing the harness capture) before asserting.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{random_keypoints, random_map, random_model, random_rotation, random_transformer, random_unit};
use landmap::builder::{build_map, build_map_with_report, cluster_landmarks, witness_holds, BuildReport, TrainingSample};
use landmap::geometry::{
    epnp, project, ransac_pnp, refine_pose, CameraIntrinsics, Correspondence2D3D, Pose, RansacParams, RefineParams,
};
use landmap::localizer::{localize_batch, LocalizationResult, LocalizerParams};
use landmap::map::{deserialize_map, serialize_map, BuilderConfig, Keypoint2D, LandmarkLabel, MapError, SceneMap};
use landmap::recognition::{
    calibrate_null_bias, linear_head_gradient, linear_head_loss, read_weights, recognize, top1_precision,
    train_centroid_recognizer, weighted_ce_loss, write_weights, CentroidModel, CentroidParams, ModelKind,
    RecognitionError, RecognizerModel,
};
use landmap::synth::{
    evaluate, generate_scene, map_stats, sample_queries, EvalReport, QuerySpec, RenderedQuery, SceneSpec,
    SyntheticScene, DEFAULT_THRESHOLDS,
};

fn report(name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

fn k640() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
}

// ---------------------------------------------------------------- geometry

/// Random pose and `n` world points in front of it, with exact projections.
fn pnp_instance(rng: &mut impl Rng, n: usize) -> (Pose, Vec<Correspondence2D3D>) {
    let k = k640();
    let pose = Pose::new(random_rotation(rng), Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)));
    let inv = pose.inverse();
    let corrs = (0..n)
        .map(|_| {
            let uv = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let xc = k.unproject(&uv, rng.random_range(1.0..10.0));
            let xw = inv.transform(&xc);
            Correspondence2D3D::new(project(&pose, &k, &xw).unwrap(), xw)
        })
        .collect();
    (pose, corrs)
}

#[test]
fn geometry_oracle() {
    let start = Instant::now();
    let k = k640();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rot, mut worst_t) = (0f64, 0f64);
    for _ in 0..1000 {
        let n = rng.random_range(6..=60);
        let (gt, corrs) = pnp_instance(&mut rng, n);
        let init = epnp(&corrs, &k).unwrap();
        let pose = refine_pose(&init, &corrs, &k, &RefineParams::default()).unwrap().pose;
        worst_rot = worst_rot.max(pose.rotation_error(&gt));
        worst_t = worst_t.max((pose.translation - gt.translation).norm());
    }

    let mut exact = 0;
    for i in 0..1000u64 {
        let n = rng.random_range(20..=100);
        let (gt, mut corrs) = pnp_instance(&mut rng, n);
        let num_out = (0.3 * n as f64).round() as usize;
        let thr = RansacParams::default().inlier_px_threshold;
        let mut truth = vec![true; n];
        for (j, c) in corrs.iter_mut().enumerate() {
            if j < num_out {
                truth[j] = false;
                let true_uv = c.point2d;
                c.point2d = loop {
                    let uv = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                    if (uv - true_uv).norm() >= 2.0 * thr {
                        break uv;
                    }
                };
            } else {
                c.point2d += Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal));
            }
        }
        let out = ransac_pnp(&corrs, &k, &RansacParams { seed: i, ..Default::default() });
        if out.is_ok_and(|o| o.inlier_mask == truth && o.pose.rotation_error(&gt).is_finite()) {
            exact += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_rot < 1e-6 && worst_t < 1e-9 && exact >= 990 && elapsed < Duration::from_secs(10);
    report(
        "geometry oracle",
        pass,
        format!(
            "noiseless worst rotation {worst_rot:.2e} rad, translation {worst_t:.2e} m; \
             exact inlier sets {exact}/1000; {:.2} s",
            elapsed.as_secs_f64()
        ),
    );
}

// -------------------------------------------------------------- clustering

/// Disc-shaped clusters of radius `spread` whose centers are at least
/// `10 * spread` apart.
fn separable_points(rng: &mut impl Rng, clusters: usize, sizes: (usize, usize)) -> (Vec<Vector2<f64>>, Vec<usize>) {
    let spread = 1.0;
    let g = (clusters as f64).sqrt().ceil() as usize;
    let cell = 14.0 * spread;
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for c in 0..clusters {
        // jitter keeps neighbors at least 14 - 2*2 = 10 spreads apart
        let center = Vector2::new(
            (c % g) as f64 * cell + rng.random_range(-2.0..2.0),
            (c / g) as f64 * cell + rng.random_range(-2.0..2.0),
        );
        for _ in 0..rng.random_range(sizes.0..=sizes.1) {
            let r = spread * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            pts.push(center + Vector2::new(r * a.cos(), r * a.sin()));
            truth.push(c);
        }
    }
    (pts, truth)
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1) / 2) as f64
}

fn adjusted_rand_index<A: Ord + Copy, B: Ord + Copy>(a: &[A], b: &[B]) -> f64 {
    let mut joint = BTreeMap::new();
    let mut rows = BTreeMap::new();
    let mut cols = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0u64) += 1;
        *rows.entry(x).or_insert(0u64) += 1;
        *cols.entry(y).or_insert(0u64) += 1;
    }
    let index: f64 = joint.values().map(|&v| choose2(v)).sum();
    let sa: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sb: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(a.len() as u64);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[test]
fn clustering_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 1.0f64;
    let mut runs = 0;
    for lambda_l in [4, 16, 64] {
        for seed in 0..5 {
            let (pts, truth) = separable_points(&mut rng, lambda_l, (20, 80));
            let labels = cluster_landmarks(&pts, lambda_l, seed).unwrap();
            worst = worst.min(adjusted_rand_index(&truth, &labels));
            runs += 1;
        }
    }
    let (pts, truth) = separable_points(&mut rng, 16, (6250, 6250));
    let start = Instant::now();
    let labels = cluster_landmarks(&pts, 16, 0).unwrap();
    let elapsed = start.elapsed();
    let big_ari = adjusted_rand_index(&truth, &labels);
    report(
        "clustering recovery",
        worst == 1.0 && elapsed < Duration::from_secs(5),
        format!(
            "minimum ARI {worst} over {runs} scenes (lambda_l 4/16/64); {} points in {:.2} s (ARI {big_ari})",
            pts.len(),
            elapsed.as_secs_f64()
        ),
    );
}

// ------------------------------------------------------- shared benchmark

struct Run {
    map: SceneMap,
    results: Vec<LocalizationResult>,
    eval: EvalReport,
}

struct Bench {
    scene: SyntheticScene,
    queries: Vec<RenderedQuery>,
    gts: Vec<Pose>,
    report: BuildReport,
    pruned: Run,
    elapsed: Duration,
}

fn bench_spec() -> SceneSpec {
    SceneSpec {
        descriptor_noise_sigma: 0.05,
        seed: 7,
        ..Default::default()
    }
}

fn localize_all(queries: &[RenderedQuery], map: &SceneMap, model: &RecognizerModel, params: &LocalizerParams) -> Vec<LocalizationResult> {
    let batch: Vec<_> = queries.iter().map(|q| (q.keypoints.clone(), q.intrinsics)).collect();
    localize_batch(&batch, model, map, params).into_iter().map(|r| r.unwrap()).collect()
}

fn run(queries: &[RenderedQuery], gts: &[Pose], map: SceneMap, params: &LocalizerParams) -> Run {
    let model = train_centroid_recognizer(&map, &CentroidParams::default());
    let results = localize_all(queries, &map, &model, params);
    let eval = evaluate(&results, gts, &DEFAULT_THRESHOLDS).unwrap();
    Run { map, results, eval }
}

fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let start = Instant::now();
        let scene = generate_scene(&bench_spec()).unwrap();
        let queries = sample_queries(&scene, 200, &QuerySpec::default(), 1);
        let gts: Vec<Pose> = queries.iter().map(|q| q.pose).collect();
        let (map, report) = build_map_with_report(&scene.recon, &BuilderConfig::default()).unwrap();
        let pruned = run(&queries, &gts, map, &LocalizerParams::default());
        Bench {
            elapsed: start.elapsed(),
            scene,
            queries,
            gts,
            report,
            pruned,
        }
    })
}

fn success(r: &Run) -> f64 {
    r.eval.success_ratio(DEFAULT_THRESHOLDS[0]).unwrap()
}

fn unpruned() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| {
        let b = bench();
        let cfg = BuilderConfig {
            enable_pruning: false,
            ..Default::default()
        };
        run(&b.queries, &b.gts, build_map(&b.scene.recon, &cfg).unwrap(), &LocalizerParams::default())
    })
}

// ---------------------------------------------------------------- pruning

#[test]
fn pruning_safety_and_effect() {
    let b = bench();
    let cfg = BuilderConfig::default();
    let held = b.report.witnesses.iter().filter(|w| witness_holds(w, &b.scene.recon, cfg.lambda_o)).count();
    let removed = b.report.witnesses.len();
    let tracks: usize = b.scene.recon.points.values().map(|p| p.track.len()).sum();
    let coverage = tracks as f64 / b.scene.recon.points.len() as f64;
    let stats = map_stats(&b.scene.recon, &b.pruned.map);
    let vrfs_valid = b.pruned.map.landmarks.iter().all(|l| b.scene.recon.frame(l.vrf.source_frame_id).is_some());
    let pass = removed > 0
        && held == removed
        && removed == stats.num_points_filtered - stats.num_points_after
        && coverage >= 5.0
        && stats.retention <= 0.7
        && stats.num_vrfs == cfg.lambda_l
        && vrfs_valid;
    report(
        "pruning safety and effect",
        pass,
        format!(
            "witnesses hold for {held}/{removed} removals; coverage {coverage:.1} views/point; \
             retained {}/{} filtered points ({:.3}); {} reference frames -> {} VRFs",
            stats.num_points_after, stats.num_points_filtered, stats.retention, stats.num_ref_frames_before, stats.num_vrfs
        ),
    );
}

#[test]
fn pruning_preserves_accuracy() {
    let b = bench();
    let (p, u) = (success(&b.pruned), success(unpruned()));
    report(
        "pruning preserves accuracy",
        b.queries.len() >= 200 && (p - u).abs() <= 0.02,
        format!(
            "success at (5cm,5deg) over {} queries: pruned {:.3}, unpruned {:.3}; median error pruned {:.3} cm, unpruned {:.3} cm",
            b.queries.len(),
            p,
            u,
            b.pruned.eval.median_position_error_cm,
            unpruned().eval.median_position_error_cm
        ),
    );
}

// -------------------------------------------------------------------- loss

#[test]
fn loss_and_gradient() {
    let probs = DMatrix::from_element(4, 3, 1.0 / 3.0);
    let loss = weighted_ce_loss(&probs, &[0, 1, 2, 1]).unwrap();
    let expected = 0.375 * 3f64.ln();
    let fixture_ok = (loss - expected).abs() < 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (m, h, c) = (rng.random_range(1..12), rng.random_range(1..8), rng.random_range(2..7));
        let feats = DMatrix::from_fn(m, h, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<LandmarkLabel> = (0..m).map(|_| rng.random_range(0..c as LandmarkLabel)).collect();
        let w = DMatrix::from_fn(c, h, |_, _| rng.random_range(-1.0..1.0));
        let bias = DVector::from_fn(c, |_, _| rng.random_range(-1.0..1.0));
        let g = linear_head_gradient(&feats, &labels, &w, &bias).unwrap();
        let eps = 1e-6;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += eps;
            wm[i] -= eps;
            let d = linear_head_loss(&feats, &labels, &wp, &bias).unwrap() - linear_head_loss(&feats, &labels, &wm, &bias).unwrap();
            numeric.push(d / (2.0 * eps));
            analytic.push(g.weight[i]);
        }
        for i in 0..bias.len() {
            let (mut bp, mut bm) = (bias.clone(), bias.clone());
            bp[i] += eps;
            bm[i] -= eps;
            let d = linear_head_loss(&feats, &labels, &w, &bp).unwrap() - linear_head_loss(&feats, &labels, &w, &bm).unwrap();
            numeric.push(d / (2.0 * eps));
            analytic.push(g.bias[i]);
        }
        let (a, n) = (DVector::from_vec(analytic), DVector::from_vec(numeric));
        let scale = a.norm().max(n.norm());
        if scale > 0.0 {
            worst = worst.max((a - n).norm() / scale);
        }
    }
    report(
        "loss and gradient",
        fixture_ok && worst <= 1e-5,
        format!("fixture loss {loss:.12} vs {expected:.12}; worst relative gradient error {worst:.2e} over 100 instances"),
    );
}

// ------------------------------------------------------------- recognition

fn equivariant(model: &RecognizerModel, kps: &[Keypoint2D], perm: &[usize]) -> bool {
    let base = recognize(kps, model, (640, 480)).unwrap();
    let shuffled: Vec<Keypoint2D> = perm.iter().map(|&i| kps[i].clone()).collect();
    let out = recognize(&shuffled, model, (640, 480)).unwrap();
    perm.iter().enumerate().all(|(row, &src)| {
        out.confidences.row(row) == base.confidences.row(src) && out.argmax_labels[row] == base.argmax_labels[src]
    })
}

/// Ground-truth labels of query keypoints against a map.
fn query_labels(q: &RenderedQuery, map: &SceneMap) -> Vec<LandmarkLabel> {
    q.keypoints
        .iter()
        .map(|kp| kp.point3d_id.and_then(|id| map.point(id)).map_or(0, |p| p.landmark_label))
        .collect()
}

fn precision(model: &RecognizerModel, map: &SceneMap, queries: &[RenderedQuery]) -> f64 {
    let (mut hits, mut total) = (0.0, 0usize);
    for q in queries {
        let labels = query_labels(q, map);
        let out = recognize(&q.keypoints, model, (640, 480)).unwrap();
        hits += top1_precision(&out, &labels) * labels.len() as f64;
        total += labels.len();
    }
    hits / total as f64
}

/// Precision of a centroid recognizer on `queries` at descriptor noise `sigma`
/// for the unpruned and pruned maps, with b0 calibrated on a held-out split.
fn recognition_at(sigma: f64) -> (f64, f64, f32) {
    let spec = SceneSpec {
        descriptor_noise_sigma: sigma,
        cluster_spread_m: 0.035,
        seed: 7,
        ..Default::default()
    };
    let scene = generate_scene(&spec).unwrap();
    let q = QuerySpec {
        descriptor_sigma: sigma,
        ..Default::default()
    };
    let queries = sample_queries(&scene, 200, &q, 1);
    let validation_queries = sample_queries(&scene, 50, &q, 2);
    let grid: Vec<f32> = (0..=20).map(|i| i as f32 * 0.05).collect();
    let mut out = Vec::new();
    let mut bias = 0.0;
    for prune in [false, true] {
        let cfg = BuilderConfig {
            enable_pruning: prune,
            ..Default::default()
        };
        let map = build_map(&scene.recon, &cfg).unwrap();
        let validation: Vec<TrainingSample> = validation_queries
            .iter()
            .enumerate()
            .map(|(i, v)| TrainingSample {
                frame_id: i as u64,
                keypoints: v.keypoints.clone(),
                labels: query_labels(v, &map),
            })
            .collect();
        let uncalibrated = train_centroid_recognizer(&map, &CentroidParams::default());
        let b0 = calibrate_null_bias(&uncalibrated, &validation, &grid).unwrap();
        let model = train_centroid_recognizer(
            &map,
            &CentroidParams {
                null_bias: b0 as f64,
                ..Default::default()
            },
        );
        if !prune {
            bias = b0;
        }
        out.push(precision(&model, &map, &queries));
    }
    (out[0], out[1], bias)
}

#[test]
fn recognition_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let transformer = RecognizerModel::transformer(random_transformer(&mut rng, 32, 32, 4, 2, 17)).unwrap();
    let centroid = RecognizerModel {
        descriptor_dim: 32,
        num_classes: 17,
        kind: ModelKind::Centroid(CentroidModel {
            centroids: (0..16).map(|_| random_unit(&mut rng, 32)).collect(),
            temperature: 0.07,
            null_bias: 0.3,
        }),
    };
    let mut equivariance = 0;
    for _ in 0..20 {
        let n = rng.random_range(1..150);
        let kps = random_keypoints(&mut rng, n, 32);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        equivariance += equivariant(&transformer, &kps, &perm) as usize + equivariant(&centroid, &kps, &perm) as usize;
    }
    let (clean, clean_pruned, _) = recognition_at(0.0);
    let (noisy, noisy_pruned, b0) = recognition_at(0.1);
    report(
        "recognition properties",
        equivariance == 40 && clean == 1.0 && noisy >= 0.8,
        format!(
            "equivariant on {equivariance}/40 permutations (transformer and centroid); top-1 precision \
             {clean:.4} at sigma 0, {noisy:.4} at sigma 0.1 with 20% outliers (b0 {b0}); pruned map {clean_pruned:.4} / {noisy_pruned:.4}"
        ),
    );
}

// ------------------------------------------------------------ localization

#[test]
fn end_to_end_localization() {
    let b = bench();
    let e = &b.pruned.eval;
    let lambda_i = LocalizerParams::default().lambda_i;
    let localized: Vec<_> = b.pruned.results.iter().filter(|r| r.is_localized()).collect();
    let min_inliers = localized.iter().map(|r| r.num_inliers).min().unwrap_or(0);
    let pass = success(&b.pruned) >= 0.95
        && e.matcher_invocations.median == 1.0
        && min_inliers >= lambda_i
        && b.elapsed < Duration::from_secs(60);
    report(
        "end-to-end localization",
        pass,
        format!(
            "{:.3} of {} queries within (5cm,5deg); median error {:.3} cm / {:.3} deg; median candidates {}; \
             min inliers {min_inliers} (lambda_i {lambda_i}); full run {:.1} s",
            success(&b.pruned),
            b.queries.len(),
            e.median_position_error_cm,
            e.median_orientation_error_deg,
            e.matcher_invocations.median,
            b.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn progressive_verification_efficiency() {
    let b = bench();
    let lambda_c = LocalizerParams::default().lambda_c;
    let m = b.pruned.eval.matcher_invocations;
    report(
        "progressive verification efficiency",
        m.max <= lambda_c && m.mean <= 2.0,
        format!("matcher invocations per query: mean {:.3}, max {} (lambda_c {lambda_c})", m.mean, m.max),
    );
}

#[test]
fn ablation_toggles() {
    let b = bench();
    let on = &b.pruned;
    let off = run(
        &b.queries,
        &b.gts,
        on.map.clone(),
        &LocalizerParams {
            refine: false,
            ..Default::default()
        },
    );
    let only_refinement_differs = on.results.iter().zip(&off.results).all(|(a, c)| {
        !c.refined
            && a.status == c.status
            && a.used_landmark == c.used_landmark
            && a.num_inliers == c.num_inliers
            && a.candidates_tried == c.candidates_tried
            && a.inliers == c.inliers
    });
    let refine_ok = success(&off) <= success(on) && off.eval.median_position_error_cm >= on.eval.median_position_error_cm;

    let spec32 = SceneSpec {
        descriptor_dim: 32,
        ..bench_spec()
    };
    let scene32 = generate_scene(&spec32).unwrap();
    let queries32 = sample_queries(&scene32, 200, &QuerySpec::default(), 1);
    let gts32: Vec<Pose> = queries32.iter().map(|q| q.pose).collect();
    let dim32 = run(&queries32, &gts32, build_map(&scene32.recon, &BuilderConfig::default()).unwrap(), &LocalizerParams::default());
    let dim32_ok = dim32.results.len() == 200;

    let failure: Vec<f64> = [1, 5, 20]
        .iter()
        .map(|&lambda_c| {
            if lambda_c == LocalizerParams::default().lambda_c {
                on.eval.failure_rate
            } else {
                let p = LocalizerParams {
                    lambda_c,
                    ..Default::default()
                };
                run(&b.queries, &b.gts, on.map.clone(), &p).eval.failure_rate
            }
        })
        .collect();
    let monotone = failure.windows(2).all(|w| w[1] <= w[0]);
    report(
        "ablation toggles",
        only_refinement_differs && refine_ok && dim32_ok && monotone,
        format!(
            "refinement on/off: success {:.3}/{:.3}, median error {:.3}/{:.3} cm (delta {:+.3} cm), other fields identical: {only_refinement_differs}; \
             dim 128 -> 32: success {:.3} -> {:.3}, median {:.3} -> {:.3} cm; failure rate at lambda_c 1/5/20: {:.3}/{:.3}/{:.3}",
            success(on),
            success(&off),
            on.eval.median_position_error_cm,
            off.eval.median_position_error_cm,
            off.eval.median_position_error_cm - on.eval.median_position_error_cm,
            success(on),
            success(&dim32),
            on.eval.median_position_error_cm,
            dim32.eval.median_position_error_cm,
            failure[0],
            failure[1],
            failure[2]
        ),
    );
}

// ---------------------------------------------------------- serialization

/// Flips one byte; the expected error depends on whether it hit the magic.
fn corrupt(rng: &mut impl Rng, bytes: &[u8]) -> (Vec<u8>, bool) {
    let mut out = bytes.to_vec();
    let i = rng.random_range(0..out.len());
    out[i] ^= rng.random_range(1..=255u8);
    (out, i < 8)
}

#[test]
fn serialization_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut map_exact, mut map_rejected, mut model_exact, mut model_rejected) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let map = random_map(&mut rng);
        let bytes = serialize_map(&map);
        if deserialize_map(&bytes).is_ok_and(|back| back == map && serialize_map(&back) == bytes) {
            map_exact += 1;
        }
        let (bad, in_magic) = corrupt(&mut rng, &bytes);
        let cut = rng.random_range(0..bytes.len());
        map_rejected += match (deserialize_map(&bad), in_magic) {
            (Err(MapError::BadMagic), true) | (Err(MapError::ChecksumMismatch { .. }), false) => {
                deserialize_map(&bytes[..cut]).is_err() as usize
            }
            _ => 0,
        };

        let model = random_model(&mut rng);
        let bytes = write_weights(&model);
        if read_weights(&bytes).is_ok_and(|back| back == model && write_weights(&back) == bytes) {
            model_exact += 1;
        }
        let (bad, in_magic) = corrupt(&mut rng, &bytes);
        let cut = rng.random_range(0..bytes.len());
        model_rejected += match (read_weights(&bad), in_magic) {
            (Err(RecognitionError::BadMagic), true) | (Err(RecognitionError::ChecksumMismatch), false) => {
                read_weights(&bytes[..cut]).is_err() as usize
            }
            _ => 0,
        };
    }
    report(
        "serialization",
        map_exact == 1000 && map_rejected == 1000 && model_exact == 1000 && model_rejected == 1000,
        format!(
            "maps: {map_exact}/1000 bit-exact, {map_rejected}/1000 corruptions rejected; \
             weights: {model_exact}/1000 bit-exact, {model_rejected}/1000 corruptions rejected"
        ),
    );
}
