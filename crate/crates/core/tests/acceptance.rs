//! Acceptance criteria of the change-segmentation pipeline.
//!
//! Runs without the libtest harness so that every criterion prints exactly one
//! `PASS` or `FAIL` line, even when it passes. The process exits non-zero if any
//! criterion fails. Training-based criteria take several minutes on one core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dc3dcd_core::cloud::Matrix;
use dc3dcd_core::cluster::{minibatch_kmeans, nmi, split_empty, ClusterModel, KmeansParams};
use dc3dcd_core::evalmap::{apply_mapping, majority_map, MetricsReport};
use dc3dcd_core::features::eigen_from_points;
use dc3dcd_core::net::gradcheck::{check_backbone, check_op, OPS};
use dc3dcd_core::net::{BackboneConfig, Variant};
use dc3dcd_core::similarity::SimilaritySource;
use dc3dcd_core::spatial::{Dims, SpatialIndex};
use dc3dcd_core::synth::{generate, urban_scene, UrbanParams};
use dc3dcd_core::trainer::{
    infer, kmeans_baseline, score, train, Dataset, DatasetOptions, EpochDiagnostics, LossMode, RunFiles, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    let mut failures = Vec::new();
    for seed in 0..2u64 {
        for op in OPS {
            let e = check_op(op, 100 + seed).map_err(|e| format!("{op}: {e}"))?;
            instances += 1;
            worst = worst.max(e);
            if !(e < 1e-4) {
                failures.push(format!("{op}/seed{seed}={e:.2e}"));
            }
        }
        for variant in [Variant::Siamese, Variant::EncoderFusion] {
            let e = check_backbone(variant, 200 + seed).map_err(|e| format!("{variant:?}: {e}"))?;
            instances += 1;
            worst = worst.max(e);
            if !(e < 1e-4) {
                failures.push(format!("{variant:?}/seed{seed}={e:.2e}"));
            }
        }
    }
    let elapsed = t.elapsed();
    ensure(
        failures.is_empty() && instances >= 20 && elapsed < Duration::from_secs(60),
        format!(
            "{instances} instances ({} ops + 2 backbones, 2 seeds), worst relative error {worst:.2e}, {:.1}s{}",
            OPS.len(),
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!(", failing: {failures:?}") }
        ),
    )
}

// ----------------------------------------------------------------- features

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Normalized random quaternion.
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut q = [0.0f64; 4];
    q.iter_mut().for_each(|v| *v = n.sample(rng));
    let s = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / s);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn transform(p: [f64; 3], r: &[[f64; 3]; 3], t: [f64; 3]) -> [f64; 3] {
    let mut o = [0.0; 3];
    for i in 0..3 {
        o[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
    }
    o
}

fn feature_oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Regular grid on a randomly oriented plane: both in-plane variances equal.
    let tilt = random_rotation(&mut rng);
    let plane: Vec<[f64; 3]> = (0..50 * 50)
        .map(|i| transform([(i % 50) as f64 * 0.2, (i / 50) as f64 * 0.2, 0.0], &tilt, [3.0, -1.0, 2.0]))
        .collect();
    let line: Vec<[f64; 3]> = (0..2000)
        .map(|_| {
            let s = rng.random_range(-10.0..10.0);
            [1.0 + s, 2.0 - 0.5 * s, 0.25 * s]
        })
        .collect();
    let sigma = 0.7f64;
    let g = Normal::new(0.0, sigma).unwrap();
    let gauss: Vec<[f64; 3]> = (0..10_000).map(|_| [g.sample(&mut rng), g.sample(&mut rng), g.sample(&mut rng)]).collect();
    let planarity = eigen_from_points(&plane).planarity;
    let linearity = eigen_from_points(&line).linearity;
    let omni = eigen_from_points(&gauss).omnivariance;
    let omni_err = (omni - sigma * sigma).abs() / (sigma * sigma);

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let scale = [rng.random_range(0.2..3.0), rng.random_range(0.2..3.0), rng.random_range(0.2..3.0)];
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [scale[0] * g.sample(&mut rng), scale[1] * g.sample(&mut rng), scale[2] * g.sample(&mut rng)])
            .collect();
        let r = random_rotation(&mut rng);
        let shift = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(-50.0..50.0)];
        let moved: Vec<[f64; 3]> = pts.iter().map(|&p| transform(p, &r, shift)).collect();
        let (a, b) = (eigen_from_points(&pts), eigen_from_points(&moved));
        worst = worst
            .max((a.linearity - b.linearity).abs())
            .max((a.planarity - b.planarity).abs())
            .max((a.omnivariance - b.omnivariance).abs());
    }
    let elapsed = t.elapsed();
    ensure(
        planarity >= 0.99 && linearity >= 0.99 && omni_err <= 0.05 && worst <= 1e-6 && elapsed < Duration::from_secs(30),
        format!(
            "planarity {planarity:.4}, linearity {linearity:.4}, omnivariance off by {:.2}%, invariance error {worst:.1e}, {:.2}s",
            100.0 * omni_err,
            elapsed.as_secs_f64()
        ),
    )
}

// --------------------------------------------------------------- clustering

fn clustering_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = Normal::new(0.0, 1.0).unwrap();
    let (per, dim) = (500, 4);
    let mut data = Vec::with_capacity(2 * per * dim);
    let mut truth = Vec::with_capacity(2 * per);
    for blob in 0..2u32 {
        for _ in 0..per {
            let sign = if blob == 0 { -1.0 } else { 1.0 };
            for d in 0..dim {
                let center = sign * if d == 0 { 4.0 } else { 1.0 };
                data.push((center + n.sample(&mut rng)) as f32);
            }
            truth.push(blob);
        }
    }
    let x = Matrix::from_vec(2 * per, dim, data).map_err(|e| e.to_string())?;
    let model = minibatch_kmeans(&x, &KmeansParams::new(2), 5).map_err(|e| e.to_string())?;
    let blob_nmi = nmi(&model.assignments, &truth).map_err(|e| e.to_string())?;

    // Degenerate starts: most clusters empty, many duplicate rows.
    let mut split_failures = 0;
    for trial in 0..100u64 {
        let k = rng.random_range(2..12);
        let rows = rng.random_range(k..k + 40);
        let distinct = rng.random_range(1..=rows);
        let base: Vec<f32> = (0..distinct * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut data = Vec::with_capacity(rows * 3);
        for r in 0..rows {
            let s = r % distinct;
            data.extend_from_slice(&base[s * 3..s * 3 + 3]);
        }
        let x = Matrix::from_vec(rows, 3, data).unwrap();
        let used = rng.random_range(1..=k.min(3));
        let assignments: Vec<u32> = (0..rows).map(|_| rng.random_range(0..used) as u32).collect();
        let degenerate = ClusterModel {
            centroids: Matrix::zeros(k, 3),
            counts: dc3dcd_core::cluster::counts_of(&assignments, k),
            assignments,
        };
        match split_empty(&degenerate, &x, trial) {
            Ok(m) => {
                let recount = dc3dcd_core::cluster::counts_of(&m.assignments, k);
                if m.counts.iter().any(|&c| c == 0) || recount != m.counts {
                    split_failures += 1;
                }
            }
            Err(_) => split_failures += 1,
        }
    }

    let mut symmetric = true;
    for _ in 0..100 {
        let len = rng.random_range(1..200);
        let (ka, kb) = (rng.random_range(1..8u32), rng.random_range(1..8u32));
        let a: Vec<u32> = (0..len).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<u32> = (0..len).map(|_| rng.random_range(0..kb)).collect();
        let mut perm: Vec<u32> = (0..ka).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let a_perm: Vec<u32> = a.iter().map(|&v| perm[v as usize] + 100).collect();
        let ab = nmi(&a, &b).unwrap();
        symmetric &= ab.to_bits() == nmi(&b, &a).unwrap().to_bits();
        symmetric &= ab.to_bits() == nmi(&a_perm, &b).unwrap().to_bits();
    }
    ensure(
        blob_nmi >= 0.99 && split_failures == 0 && symmetric,
        format!(
            "two-blob NMI {blob_nmi:.4}, split_empty failures {split_failures}/100, NMI symmetry and relabeling exact: {symmetric}"
        ),
    )
}

// ------------------------------------------------------------------ spatial

fn spatial_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut mismatches = 0;
    let mut queries = 0;
    for cloud in 0..100 {
        let n = if cloud % 10 == 0 { 10_000 } else { rng.random_range(1..2000) };
        let dims = if cloud % 2 == 0 { Dims::Xyz } else { Dims::Xy };
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(0.0..10.0)])
            .collect();
        let index = SpatialIndex::new(&pts, dims);
        let d2 = |a: &[f64; 3], b: &[f64; 3]| {
            let mut s = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            if dims == Dims::Xyz {
                s += (a[2] - b[2]).powi(2);
            }
            s
        };
        for _ in 0..5 {
            let q = [rng.random_range(-5.0..55.0), rng.random_range(-5.0..55.0), rng.random_range(-2.0..12.0)];
            let k = rng.random_range(1..40);
            let mut brute: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (d2(p, &q), i)).collect();
            brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = brute.iter().take(k).map(|&(_, i)| i).collect();
            let got: Vec<usize> = index.knn(q, k).unwrap().into_iter().map(|nb| nb.id).collect();
            let r = rng.random_range(0.5..8.0);
            let mut ball: Vec<usize> = brute.iter().filter(|&&(d, _)| d <= r * r).map(|&(_, i)| i).collect();
            ball.sort_unstable();
            let got_ball = index.radius_query(q, r).unwrap();
            queries += 2;
            mismatches += (want != got) as usize + (ball != got_ball) as usize;
        }
    }
    ensure(
        mismatches == 0,
        format!("{queries} knn/radius queries over 100 clouds (up to 10^4 points), {mismatches} mismatches"),
    )
}

// ----------------------------------------------------------------- training

/// Lean backbone used by every training criterion; see the README for timings.
fn lean_backbone(variant: Variant, use_features: bool) -> BackboneConfig {
    BackboneConfig {
        variant,
        channels: vec![16, 32, 64],
        use_features,
        ..BackboneConfig::default()
    }
}

fn dataset(extent: f64, seed: u64, ysim: Option<SimilaritySource>) -> Dataset {
    let spec = urban_scene(&UrbanParams {
        extent: [extent, extent],
        seed,
        ..UrbanParams::default()
    });
    let scene = generate(&spec).expect("scene");
    Dataset::from_scene(
        &scene,
        &DatasetOptions {
            dl0: 1.0,
            features: true,
            ysim,
        },
    )
    .expect("dataset")
}

struct Trained {
    diagnostics: Vec<EpochDiagnostics>,
    report: MetricsReport,
    miou_ch: f64,
}

fn run(ds: &Dataset, bb: &BackboneConfig, cfg: &TrainConfig) -> Trained {
    let out = train(ds, bb, cfg, &RunFiles::default()).expect("training");
    let pred = infer(ds, bb, &out.params, cfg.radius).expect("inference");
    let (_, report) = score(ds, &pred, cfg.k).expect("scoring");
    Trained {
        diagnostics: out.diagnostics,
        miou_ch: report.miou_ch,
        report,
    }
}

struct LongRun {
    n2: usize,
    elapsed: Duration,
    diagnostics: Vec<EpochDiagnostics>,
}

fn long_run() -> LongRun {
    let ds = dataset(225.0, 1, None);
    let t = Instant::now();
    let cfg = TrainConfig {
        epochs: 30,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&ds, &lean_backbone(Variant::EncoderFusion, true), &cfg, &RunFiles::default()).expect("training");
    LongRun {
        n2: ds.n2(),
        elapsed: t.elapsed(),
        diagnostics: out.diagnostics,
    }
}

fn training_dynamics(r: &LongRun) -> Outcome {
    let d = &r.diagnostics;
    let first = d[0].nmi_gt.unwrap();
    let last = d[d.len() - 1].nmi_gt.unwrap();
    let second_reassign = d[1].nmi_prev.unwrap();
    let tail: Vec<f64> = d[d.len() - 5..].iter().map(|x| x.nmi_prev.unwrap()).collect();
    ensure(
        last - first >= 0.05 && tail.iter().all(|&v| v > second_reassign) && r.elapsed < Duration::from_secs(1800),
        format!(
            "{} pc2 points, {} epochs in {:.0}s; NMI(gt) {first:.3} -> {last:.3}; reassignment NMI epoch 2 {second_reassign:.3}, last five {:?}",
            r.n2,
            d.len(),
            r.elapsed.as_secs_f64(),
            tail.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn purity_trend(r: &LongRun) -> Outcome {
    let d = &r.diagnostics;
    let fifth = d[4].mean_entropy.unwrap();
    let last = d[d.len() - 1].mean_entropy.unwrap();
    ensure(last < fifth, format!("mean cluster entropy epoch 5 {fifth:.4}, final {last:.4}"))
}

/// mIoU_ch of every configuration compared by the ordering claims, per seed.
struct SeedScores {
    seed: u64,
    plain: f64,
    kmeans: f64,
    ef_no_features: f64,
    siamese_no_features: f64,
    contrastive_gt: f64,
    contrastive_c2c: f64,
}

fn ordering_runs() -> Vec<SeedScores> {
    let mut out = Vec::new();
    for seed in 1..=3u64 {
        let cfg = TrainConfig {
            epochs: 10,
            pairs_per_epoch: 150,
            seed,
            ..TrainConfig::default()
        };
        let contrastive = TrainConfig {
            loss: LossMode::PseudoNllPlusContrastive,
            ..cfg.clone()
        };
        let ds = dataset(100.0, seed, None);
        let ef = lean_backbone(Variant::EncoderFusion, true);
        let plain = run(&ds, &ef, &cfg).miou_ch;
        let base = kmeans_baseline(&ds, cfg.k, seed).expect("baseline");
        let kmeans = score(&ds, &base, cfg.k).expect("scoring").1.miou_ch;
        let ef_no_features = run(&ds, &lean_backbone(Variant::EncoderFusion, false), &cfg).miou_ch;
        let siamese_no_features = run(&ds, &lean_backbone(Variant::Siamese, false), &cfg).miou_ch;
        let contrastive_gt = run(&dataset(100.0, seed, Some(SimilaritySource::GroundTruth)), &ef, &contrastive).miou_ch;
        let contrastive_c2c = run(&dataset(100.0, seed, Some(SimilaritySource::C2cThreshold)), &ef, &contrastive).miou_ch;
        out.push(SeedScores {
            seed,
            plain,
            kmeans,
            ef_no_features,
            siamese_no_features,
            contrastive_gt,
            contrastive_c2c,
        });
    }
    out
}

fn majority_vote(scores: &[SeedScores], wins: impl Fn(&SeedScores) -> bool) -> (usize, bool) {
    let n = scores.iter().filter(|s| wins(s)).count();
    (n, 2 * n > scores.len())
}

fn per_seed(scores: &[SeedScores], f: impl Fn(&SeedScores) -> String) -> String {
    scores.iter().map(|s| format!("seed {}: {}", s.seed, f(s))).collect::<Vec<_>>().join("; ")
}

fn ordering_claim_1(s: &[SeedScores]) -> Outcome {
    let (n, ok) = majority_vote(s, |x| x.plain > x.kmeans);
    ensure(
        ok,
        format!(
            "encoder fusion + features beats k-means on {n}/3 seeds ({})",
            per_seed(s, |x| format!("{:.4} vs {:.4}", x.plain, x.kmeans))
        ),
    )
}

fn ordering_claim_2(s: &[SeedScores]) -> Outcome {
    let (n, ok) = majority_vote(s, |x| x.ef_no_features >= x.siamese_no_features);
    ensure(
        ok,
        format!(
            "encoder fusion >= siamese without features on {n}/3 seeds ({})",
            per_seed(s, |x| format!("{:.4} vs {:.4}", x.ef_no_features, x.siamese_no_features))
        ),
    )
}

fn ordering_claim_3(s: &[SeedScores]) -> Outcome {
    let (n_gt, gt_ok) = majority_vote(s, |x| x.contrastive_gt > x.plain);
    let (n_c2c, c2c_ok) = majority_vote(s, |x| x.contrastive_c2c <= x.contrastive_gt);
    ensure(
        gt_ok && c2c_ok,
        format!(
            "GT similarity beats plain on {n_gt}/3 seeds, C2C does not beat GT on {n_c2c}/3 seeds ({})",
            per_seed(s, |x| format!(
                "plain {:.4}, gt {:.4}, c2c {:.4}",
                x.plain, x.contrastive_gt, x.contrastive_c2c
            ))
        ),
    )
}

// ------------------------------------------------------------------ mapping

fn mapping_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut mismatches = 0;
    for _ in 0..50 {
        let k = rng.random_range(1..5usize);
        let c = rng.random_range(1..5usize);
        let n = rng.random_range(1..15);
        let assign: Vec<u32> = (0..n).map(|_| rng.random_range(0..k) as u32).collect();
        let truth: Vec<u32> = (0..n).map(|_| rng.random_range(0..c) as u32).collect();
        let m = majority_map(&assign, &truth, k, c).unwrap();
        let pred = apply_mapping(&assign, &m).unwrap();
        let got = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
        let mut best = 0;
        for code in 0..c.pow(k as u32) {
            let table: Vec<u32> = (0..k).map(|j| ((code / c.pow(j as u32)) % c) as u32).collect();
            let hits = assign.iter().zip(&truth).filter(|(&a, &t)| table[a as usize] == t).count();
            best = best.max(hits);
        }
        mismatches += (got != best) as usize;
    }
    ensure(
        mismatches == 0,
        format!("majority mapping matched the exhaustive optimum on {}/50 fixtures", 50 - mismatches),
    )
}

// -------------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let ds = dataset(80.0, 4, None);
    let bb = BackboneConfig {
        channels: vec![8, 16],
        k: vec![8, 8],
        ..lean_backbone(Variant::EncoderFusion, true)
    };
    let cfg = TrainConfig {
        epochs: 3,
        pairs_per_epoch: 20,
        k: 30,
        radius: 10.0,
        seed: 9,
        ..TrainConfig::default()
    };
    let bb = BackboneConfig { n_prototypes: 30, ..bb };
    let a = run(&ds, &bb, &cfg);
    let b = run(&ds, &bb, &cfg);
    let bits = |r: &Trained| r.diagnostics.iter().map(|d| d.loss.to_bits()).collect::<Vec<_>>();
    ensure(
        bits(&a) == bits(&b) && a.report == b.report && a.miou_ch.to_bits() == b.miou_ch.to_bits(),
        format!(
            "losses {:?}, final OA {:.6} and mIoU_ch {:.6} with identical confusion matrices on both runs",
            a.diagnostics.iter().map(|d| d.loss).collect::<Vec<_>>(),
            a.report.overall_accuracy,
            a.miou_ch
        ),
    )
}

// --------------------------------------------------------------------- main

fn report(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => {
            println!("PASS  {name}: {d} [{secs:.1}s]");
            true
        }
        Err(d) => {
            println!("FAIL  {name}: {d} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |name: &str| filter.as_deref().is_none_or(|f| name.contains(f));
    let mut ok = true;
    if wanted("gradient integrity") {
        ok &= report("gradient integrity", gradient_integrity);
    }
    if wanted("feature oracles") {
        ok &= report("geometric feature oracles", feature_oracles);
    }
    if wanted("clustering oracles") {
        ok &= report("clustering oracles", clustering_oracles);
    }
    if wanted("spatial correctness") {
        ok &= report("spatial correctness", spatial_correctness);
    }
    if wanted("mapping optimality") {
        ok &= report("mapping optimality", mapping_optimality);
    }
    if wanted("determinism") {
        ok &= report("determinism", determinism);
    }
    if wanted("training dynamics") || wanted("purity trend") {
        let long = catch_unwind(long_run).ok();
        let missing = || Err::<String, String>("the 30-epoch run failed".into());
        ok &= report("training dynamics", || long.as_ref().map_or_else(missing, training_dynamics));
        ok &= report("pseudo-cluster purity trend", || long.as_ref().map_or_else(missing, purity_trend));
    }
    if wanted("ordering claim") {
        let scores = catch_unwind(ordering_runs).ok();
        let missing = || Err::<String, String>("the ordering runs failed".into());
        ok &= report("ordering claim 1 (beats k-means)", || scores.as_deref().map_or_else(missing, ordering_claim_1));
        ok &= report("ordering claim 2 (encoder fusion >= siamese)", || {
            scores.as_deref().map_or_else(missing, ordering_claim_2)
        });
        ok &= report("ordering claim 3 (ground-truth similarity)", || {
            scores.as_deref().map_or_else(missing, ordering_claim_3)
        });
    }
    if !ok {
        std::process::exit(1);
    }
}
