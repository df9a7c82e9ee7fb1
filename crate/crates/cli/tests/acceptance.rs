//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Tolerances live in [`tol`].
//!
//! Set `CELLSCOPE_NIH_DIR` to an NIH cell-image download (`Parasitized/`,
//! `Uninfected/`) to run the classification criteria on real crops;
//! otherwise they use synthetic crops from `cells::write_synthetic_cells`.

#[path = "../../core/tests/common/mod.rs"]
mod oracles;
#[path = "../../service/tests/common/mod.rs"]
mod service_common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cellscope_cli::commands::load_classifier;
use cellscope_core::data::cells::write_synthetic_cells;
use cellscope_core::data::{split, DatasetLayout, DatasetSplit, LabeledImage, SplitRatios};
use cellscope_core::model::format::{decode, encode};
use cellscope_core::model::{default_classifier, spec_sidecar, ModelSpec, Scale};
use cellscope_core::nn::ops::{conv2d_forward, dense_forward, maxpool2d_forward};
use cellscope_core::nn::{Tensor, WeightStore};
use cellscope_core::pointcloud::synth::{pack_views, render_input, render_views, synth_samples, unpack_views};
use cellscope_core::pointcloud::{
    chamfer, fuse, generate, make_fixed_poses, pcd_to_obj, train_generator, write_obj, write_pcd, CellShape,
    GeneratorConfig, GeneratorSample, GeneratorSpec, Intrinsics, PointCloud,
};
use cellscope_core::training::{
    encode_sparse, evaluate, fine_tune, prune_magnitude, train, Metrics, PruneConfig, TrainConfig,
};
use cellscope_service::{diagnose_bytes, run, ServiceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod tol {
    pub const GRAD_MAX_REL: f64 = 1e-3;
    pub const GRAD_CASES: usize = 100;
    pub const GRAD_SECS: u64 = 120;
    pub const ORACLE_REL: f64 = 1e-5;
    pub const OVERFIT_SECS: u64 = 300;
    pub const DESK_ACCURACY: f64 = 0.85;
    pub const DESK_F1: f64 = 0.85;
    pub const DESK_SECS: u64 = 1800;
    pub const PRUNE_SPARSITY: f64 = 0.5;
    pub const PRUNE_MAX_DROP: f64 = 0.03;
    pub const SPARSITY_RANGE: (f64, f64) = (0.49, 0.51);
    pub const SPARSE_MAX_RATIO: f64 = 0.60;
    pub const WEIGHT_FUZZ_CASES: usize = 1000;
    pub const SPHERE_RADIUS_ERR: f64 = 1e-3;
    pub const SPHERE_CHAMFER: f64 = 0.02;
    pub const GEN_OVERFIT_STEPS: usize = 500;
    pub const GEN_OVERFIT_CHAMFER: f64 = 0.05;
    pub const GEN_TRAIN_SHAPES: usize = 200;
    pub const GEN_HELDOUT_CHAMFER: f64 = 0.15;
    pub const GEN_SECS: u64 = 1200;
    pub const P95_SECS: f64 = 2.0;
    pub const LATENCY_REQUESTS: usize = 50;
    pub const CONCURRENT: usize = 16;
}

const SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

#[derive(Default)]
struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if o.pass {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
    }
}

// gradient fidelity

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let r = oracles::gradient_suite(tol::GRAD_CASES, 17);
    let secs = start.elapsed();
    outcome(
        r.checked > 0 && r.max_rel < tol::GRAD_MAX_REL && secs < Duration::from_secs(tol::GRAD_SECS),
        format!(
            "{} cases, {} derivatives checked ({} at kinks skipped), max relative error {:.2e} (< {:.0e}), {:.1}s (< {}s); worst {}",
            tol::GRAD_CASES,
            r.checked,
            r.skipped,
            r.max_rel,
            tol::GRAD_MAX_REL,
            secs.as_secs_f64(),
            tol::GRAD_SECS,
            r.worst
        ),
    )
}

// oracle equivalence

fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Largest `|a - b| / max(|b|, 1)`.
fn max_scaled_err(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut kernel_err = 0.0f64;
    let mut argmax_mismatch = 0;
    for _ in 0..200 {
        let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (kh, kw) = (rng.random_range(1..4), rng.random_range(1..4));
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
        let h = rng.random_range(kh.max(2)..9);
        let w = rng.random_range(kw.max(2)..9);
        let x = values(&mut rng, n * c * h * w);
        let k = values(&mut rng, o * c * kh * kw);
        let b = values(&mut rng, o);
        let got = conv2d_forward(
            &Tensor::new(vec![n, c, h, w], x.clone()).unwrap(),
            &Tensor::new(vec![o, c, kh, kw], k.clone()).unwrap(),
            &Tensor::new(vec![o], b.clone()).unwrap(),
            stride,
            pad,
        )
        .unwrap();
        let (want, _) = oracles::naive_conv2d(&widen(&x), [n, c, h, w], &widen(&k), [o, kh, kw], &widen(&b), stride, pad);
        kernel_err = kernel_err.max(max_scaled_err(got.data(), &want));

        let (f, g) = (rng.random_range(1..40), rng.random_range(1..20));
        let x = values(&mut rng, n * f);
        let wt = values(&mut rng, f * g);
        let b = values(&mut rng, g);
        let got = dense_forward(
            &Tensor::new(vec![n, f], x.clone()).unwrap(),
            &Tensor::new(vec![f, g], wt.clone()).unwrap(),
            &Tensor::new(vec![g], b.clone()).unwrap(),
        )
        .unwrap();
        let want = oracles::naive_dense(&widen(&x), n, f, &widen(&wt), g, &widen(&b));
        kernel_err = kernel_err.max(max_scaled_err(got.data(), &want));

        let window = rng.random_range(1..4);
        let stride = rng.random_range(1..4);
        let x = values(&mut rng, n * c * h * w);
        if window <= h && window <= w {
            let (got, arg) = maxpool2d_forward(&Tensor::new(vec![n, c, h, w], x.clone()).unwrap(), window, stride).unwrap();
            let (want, want_arg) = oracles::naive_maxpool(&widen(&x), [n, c, h, w], window, stride);
            kernel_err = kernel_err.max(max_scaled_err(got.data(), &want));
            argmax_mismatch += usize::from(arg != want_arg);
        }
    }

    let mut chamfer_mismatch = 0;
    for _ in 0..100 {
        let (n, m) = (rng.random_range(1..=200), rng.random_range(1..=200));
        let mut cloud = |k: usize| {
            PointCloud::new(
                (0..k)
                    .map(|_| [rng.random_range(-2.0f32..2.0), rng.random_range(-2.0f32..2.0), rng.random_range(-2.0f32..2.0)])
                    .collect(),
            )
        };
        let (a, b) = (cloud(n), cloud(m));
        chamfer_mismatch += usize::from(chamfer(&a, &b).unwrap() != oracles::brute_chamfer(&a, &b));
    }

    let mut metric_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let bias = rng.random_range(0.0..1.0);
        let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(bias))).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let m = Metrics::from_predictions(&labels, &preds).unwrap();
        let (acc, _, _, f1) = oracles::metrics_oracle(&labels, &preds);
        metric_mismatch += usize::from(m.accuracy != acc || m.f1 != f1);
    }
    outcome(
        kernel_err <= tol::ORACLE_REL && argmax_mismatch == 0 && chamfer_mismatch == 0 && metric_mismatch == 0,
        format!(
            "conv/dense/maxpool max error {kernel_err:.2e} (<= {:.0e}), pool argmax mismatches {argmax_mismatch}; \
             chamfer vs brute force mismatches {chamfer_mismatch}/100; accuracy/F1 mismatches {metric_mismatch}/1000",
            tol::ORACLE_REL
        ),
    )
}

// classification

/// Loads `per_class` images of each class, real if `CELLSCOPE_NIH_DIR` is
/// set, synthetic otherwise.
fn cell_images(per_class: usize, scratch: &Path, input: &[usize]) -> (Vec<LabeledImage>, &'static str) {
    let (root, source) = match std::env::var_os("CELLSCOPE_NIH_DIR") {
        Some(dir) => (PathBuf::from(dir), "NIH"),
        None => {
            let dir = scratch.join(format!("cells_{per_class}"));
            write_synthetic_cells(&dir, per_class, 7).unwrap();
            (dir, "synthetic")
        }
    };
    let layout = DatasetLayout::scan(&root).unwrap().subsample(per_class, SEED);
    let (samples, _) = layout.load((input[1], input[2])).unwrap();
    (samples, source)
}

fn overfit_sanity(scratch: &Path) -> Outcome {
    let start = Instant::now();
    let spec = default_classifier(Scale::Mini).unwrap();
    let (samples, source) = cell_images(16, scratch, spec.input_shape());
    let split = DatasetSplit {
        train: (0..samples.len()).collect(),
        val: vec![],
        test: vec![],
        seed: SEED,
    };
    let cfg = TrainConfig {
        epochs: 100,
        augment: false,
        ..TrainConfig::default()
    };
    let w0 = spec.network.init_weights::<f32>(SEED).unwrap();
    let (w, _) = train(&spec, &w0, &samples, &split, &cfg).unwrap();
    let m = evaluate(&spec, &w, &samples).unwrap();
    let secs = start.elapsed();
    outcome(
        samples.len() == 32 && m.accuracy == 1.0 && secs < Duration::from_secs(tol::OVERFIT_SECS),
        format!(
            "{} {source} images, 100 epochs, augmentation off: train accuracy {:.4} (== 1), {:.1}s (< {}s)",
            samples.len(),
            m.accuracy,
            secs.as_secs_f64(),
            tol::OVERFIT_SECS
        ),
    )
}

struct DeskRun {
    spec: ModelSpec,
    weights: WeightStore<f32>,
    samples: Vec<LabeledImage>,
    split: DatasetSplit,
}

fn desk_scale(scratch: &Path, keep: &mut Option<DeskRun>) -> Outcome {
    let start = Instant::now();
    let spec = default_classifier(Scale::Mini).unwrap();
    let (samples, source) = cell_images(1000, scratch, spec.input_shape());
    let split = split(&samples, SplitRatios::default(), SEED).unwrap();
    let cfg = TrainConfig::default();
    let w0 = spec.network.init_weights::<f32>(SEED).unwrap();
    let (w, history) = train(&spec, &w0, &samples, &split, &cfg).unwrap();
    let test: Vec<LabeledImage> = split.test.iter().map(|&i| samples[i].clone()).collect();
    let m = evaluate(&spec, &w, &test).unwrap();
    let secs = start.elapsed();
    let pass = samples.len() == 2000
        && history.records.len() == 25
        && m.accuracy >= tol::DESK_ACCURACY
        && m.f1 >= tol::DESK_F1
        && secs < Duration::from_secs(tol::DESK_SECS);
    let detail = format!(
        "{} {source} images, default config ({} epochs, augmentation {}): test accuracy {:.4} (>= {}), F1 {:.4} (>= {}), {:.1}s (< {}s)",
        samples.len(),
        history.records.len(),
        if cfg.augment { "on" } else { "off" },
        m.accuracy,
        tol::DESK_ACCURACY,
        m.f1,
        tol::DESK_F1,
        secs.as_secs_f64(),
        tol::DESK_SECS
    );
    *keep = Some(DeskRun {
        spec,
        weights: w,
        samples,
        split,
    });
    outcome(pass, detail)
}

fn pruning(desk: Option<&DeskRun>) -> Outcome {
    let Some(d) = desk else {
        return outcome(false, "no desk-scale model to prune");
    };
    let val: Vec<LabeledImage> = d.split.val.iter().map(|&i| d.samples[i].clone()).collect();
    let before = evaluate(&d.spec, &d.weights, &val).unwrap().accuracy;
    let cfg = PruneConfig {
        sparsity: tol::PRUNE_SPARSITY,
        ..PruneConfig::default()
    };
    let (pruned, report) = prune_magnitude(&d.weights, &cfg).unwrap();
    let tcfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let (tuned, _) = fine_tune(&d.spec, &pruned, &d.samples, &d.split, &tcfg).unwrap();
    let after = evaluate(&d.spec, &tuned, &val).unwrap().accuracy;
    let achieved = cellscope_core::training::sparsity(&tuned);
    let dense = encode(&tuned).unwrap().len();
    let sparse = encode_sparse(&tuned).unwrap().len();
    let ratio = sparse as f64 / dense as f64;
    let drop = before - after;
    let (lo, hi) = tol::SPARSITY_RANGE;
    outcome(
        drop <= tol::PRUNE_MAX_DROP
            && (lo..=hi).contains(&report.sparsity)
            && (lo..=hi).contains(&achieved)
            && ratio < tol::SPARSE_MAX_RATIO,
        format!(
            "s={} + 3 fine-tune epochs: val accuracy {before:.4} -> {after:.4} (drop {:.1} points <= {}), \
             sparsity {:.4} after pruning, {achieved:.4} after fine-tuning (in [{lo}, {hi}]), sparse payload {sparse} / dense {dense} = {ratio:.3} (< {})",
            tol::PRUNE_SPARSITY,
            drop * 100.0,
            tol::PRUNE_MAX_DROP * 100.0,
            report.sparsity,
            tol::SPARSE_MAX_RATIO
        ),
    )
}

// weight format

fn random_store(rng: &mut ChaCha8Rng) -> WeightStore<f32> {
    let mut store = WeightStore::new();
    for _ in 0..rng.random_range(0..6) {
        let len = rng.random_range(1..12);
        let name: String = (0..len)
            .map(|_| {
                let c = rng.random_range(0..38u8);
                match c {
                    0..26 => (b'a' + c) as char,
                    26..36 => (b'0' + c - 26) as char,
                    36 => '/',
                    _ => 'µ',
                }
            })
            .collect();
        let shape: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(1..5)).collect();
        let n = shape.iter().product();
        let data = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        let _ = store.insert(name, Tensor::new(shape, data).unwrap());
    }
    store
}

fn bits(store: &WeightStore<f32>) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn fixture(name: &str) -> Vec<u8> {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn weight_format() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut bad = 0;
    for _ in 0..tol::WEIGHT_FUZZ_CASES {
        let store = random_store(&mut rng);
        let bytes = encode(&store).unwrap();
        let back = decode(&bytes).unwrap();
        bad += usize::from(bits(&back) != bits(&store) || encode(&back).unwrap() != bytes);
    }
    let mut single = WeightStore::new();
    single
        .insert("t", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
        .unwrap();
    let golden = encode(&single).unwrap() == fixture("single_tensor.e2ew");
    outcome(
        bad == 0 && golden,
        format!(
            "{} random stores, {bad} roundtrip mismatches; single-tensor golden {}",
            tol::WEIGHT_FUZZ_CASES,
            if golden { "byte-identical" } else { "differs" }
        ),
    )
}

// geometry

fn sphere_cloud(size: usize) -> PointCloud {
    let focal = size as f64 / 2.0 / 0.4;
    let poses = make_fixed_poses(8, 3.0, Intrinsics::centered(size, size, focal)).unwrap();
    fuse(&oracles::sphere_depth_maps(&poses, 1.0)).unwrap()
}

fn max_radius_err(pc: &PointCloud) -> f64 {
    pc.points
        .iter()
        .map(|p| {
            let r = (f64::from(p[0]).powi(2) + f64::from(p[1]).powi(2) + f64::from(p[2]).powi(2)).sqrt();
            (r - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

fn geometry() -> Outcome {
    let coarse = sphere_cloud(64);
    let dense = sphere_cloud(512);
    let radius_err = max_radius_err(&coarse).max(max_radius_err(&dense));
    let d = chamfer(&dense, &oracles::uniform_sphere(10_000, 7)).unwrap();
    let origin = write_pcd(&PointCloud::new(vec![[0.0, 0.0, 0.0]])) == fixture("origin.pcd");
    let mixed = PointCloud::new(vec![
        [0.1, -2.5, 1234567.0],
        [1.0 / 3.0, 1e-5, -0.0],
        [123456.0, 0.0001, -7.25e-8],
        [1.0, 2.0, 3.0],
    ]);
    let pcd = write_pcd(&mixed) == fixture("mixed.pcd");
    let obj = write_obj(&mixed) == fixture("mixed.obj") && pcd_to_obj(&fixture("mixed.pcd")).unwrap() == fixture("mixed.obj");
    outcome(
        radius_err < tol::SPHERE_RADIUS_ERR && d < tol::SPHERE_CHAMFER && origin && pcd && obj,
        format!(
            "fused sphere max |r - 1| {radius_err:.2e} (< {:.0e}), chamfer {d:.4} over {} points vs 10000 uniform (< {}); \
             PCD goldens {}, OBJ golden {}",
            tol::SPHERE_RADIUS_ERR,
            dense.len(),
            tol::SPHERE_CHAMFER,
            if origin && pcd { "byte-identical" } else { "differ" },
            if obj { "byte-identical" } else { "differs" }
        ),
    )
}

// generator

fn chamfer_to_truth(spec: &GeneratorSpec, w: &WeightStore<f32>, s: &GeneratorSample) -> f64 {
    let truth = fuse(&unpack_views(&s.target, &spec.poses()).unwrap()).unwrap();
    let pred = generate(spec, w, &s.image, 0.5).unwrap();
    if pred.is_empty() {
        return f64::INFINITY;
    }
    chamfer(&pred, &truth).unwrap()
}

fn generator() -> Outcome {
    let start = Instant::now();
    let spec = GeneratorSpec::desk_default();
    let poses = spec.poses();
    let input = cellscope_core::pointcloud::synth::default_input_pose(spec.camera_radius, spec.intrinsics);

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut shape = CellShape::random(&mut rng);
    shape.bumps.clear();
    let single = GeneratorSample {
        image: render_input(&shape, &input),
        target: pack_views(&render_views(&shape, &poses).unwrap()),
    };
    let cfg = GeneratorConfig {
        epochs: tol::GEN_OVERFIT_STEPS,
        batch_size: 1,
        ..GeneratorConfig::default()
    };
    let w0 = spec.init_weights(SEED).unwrap();
    let (w, h) = train_generator(&spec, &w0, std::slice::from_ref(&single), &[], &cfg).unwrap();
    let overfit = chamfer_to_truth(&spec, &w, &single);

    let train_set = synth_samples(tol::GEN_TRAIN_SHAPES, 1, &poses, &input).unwrap();
    let val = synth_samples(20, 2, &poses, &input).unwrap();
    let held = synth_samples(50, 3, &poses, &input).unwrap();
    let cfg = GeneratorConfig::default();
    let (w, _) = train_generator(&spec, &w0, &train_set, &val, &cfg).unwrap();
    let held_cd = held.iter().map(|s| chamfer_to_truth(&spec, &w, s)).sum::<f64>() / held.len() as f64;
    let secs = start.elapsed();
    outcome(
        h.steps == tol::GEN_OVERFIT_STEPS
            && overfit < tol::GEN_OVERFIT_CHAMFER
            && held_cd < tol::GEN_HELDOUT_CHAMFER
            && secs < Duration::from_secs(tol::GEN_SECS),
        format!(
            "single ellipsoid, {} steps: chamfer {overfit:.4} (< {}); {} training shapes, {} epochs: mean held-out chamfer {held_cd:.4} over {} shapes (< {}); {:.1}s (< {}s)",
            h.steps,
            tol::GEN_OVERFIT_CHAMFER,
            tol::GEN_TRAIN_SHAPES,
            cfg.epochs,
            held.len(),
            tol::GEN_HELDOUT_CHAMFER,
            secs.as_secs_f64(),
            tol::GEN_SECS
        ),
    )
}

// service

fn service(desk: Option<&DeskRun>, scratch: &Path) -> Outcome {
    let Some(d) = desk else {
        return outcome(false, "no desk-scale model to serve");
    };
    let weights = scratch.join("desk.e2ew");
    std::fs::write(&weights, encode(&d.weights).unwrap()).unwrap();
    d.spec.save(spec_sidecar(&weights)).unwrap();
    let offline = load_classifier(&weights, None).unwrap();
    let cfg = ServiceConfig {
        port: 0,
        classifier_weights: weights,
        ..ServiceConfig::default()
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap();
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(run(listener, cfg));
        let deadline = Instant::now() + Duration::from_secs(60);
        while service_common::http(addr, "GET", "/healthz", "text/plain", b"").await.status != 200 {
            assert!(Instant::now() < deadline, "service never became healthy");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }

        let mut latencies = Vec::new();
        let mut unequal = 0;
        for i in 0..tol::LATENCY_REQUESTS {
            let png = service_common::cell_png(1000 + i as u64, i % 2 == 0);
            let t = Instant::now();
            let r = service_common::http(addr, "POST", "/api/diagnose", "image/png", &png).await;
            latencies.push(t.elapsed().as_secs_f64());
            let want = serde_json::to_vec(&diagnose_bytes(&offline, &png).unwrap()).unwrap();
            unequal += usize::from(r.status != 200 || r.body != want);
        }
        latencies.sort_by(f64::total_cmp);
        let rank = (0.95 * latencies.len() as f64).ceil() as usize - 1;
        let p95 = latencies[rank];

        let png = service_common::cell_png(7, true);
        let tasks: Vec<_> = (0..tol::CONCURRENT)
            .map(|_| {
                let png = png.clone();
                tokio::spawn(async move { service_common::http(addr, "POST", "/api/diagnose", "image/png", &png).await })
            })
            .collect();
        let mut bodies = Vec::new();
        for t in tasks {
            let r = t.await.unwrap();
            bodies.push((r.status, r.body));
        }
        let identical = bodies.iter().all(|b| b.0 == 200 && b == &bodies[0]);
        outcome(
            p95 < tol::P95_SECS && unequal == 0 && identical,
            format!(
                "{} diagnoses with the desk-scale model: p95 latency {:.1} ms (< {} s), {unequal} bodies differ from offline predict; \
                 {} concurrent identical requests {}; no UI component involved",
                tol::LATENCY_REQUESTS,
                p95 * 1000.0,
                tol::P95_SECS,
                tol::CONCURRENT,
                if identical { "returned identical bodies" } else { "disagreed" }
            ),
        )
    })
}

fn main() {
    // cargo passes harness flags such as --nocapture; none apply here
    let scratch = tempfile::tempdir().unwrap();
    let mut report = Report::default();
    let mut desk = None;
    report.check("gradient fidelity", gradient_fidelity);
    report.check("oracle equivalence", oracle_equivalence);
    report.check("overfit sanity", || overfit_sanity(scratch.path()));
    report.check("desk-scale classification", || desk_scale(scratch.path(), &mut desk));
    report.check("pruning", || pruning(desk.as_ref()));
    report.check("weight format", weight_format);
    report.check("geometry", geometry);
    report.check("generator", generator);
    report.check("service", || service(desk.as_ref(), scratch.path()));
    println!("acceptance: {} passed, {} failed", report.passed, report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
