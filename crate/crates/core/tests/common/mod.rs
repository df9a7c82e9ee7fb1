//! Independent reference implementations shared by the integration and
//! acceptance tests. Nothing here calls into the engine's kernels.
#![allow(dead_code)]

use cellscope_core::nn::{LayerKind, Mode, Network, Tensor, WeightStore};
use cellscope_core::pointcloud::{DepthMapSet, DepthView, PointCloud, ViewPose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct 7-loop cross-correlation over NCHW input and OIKK kernel.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [o, kh, kw]: [usize; 3],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let y = (i * stride + di) as isize - pad as isize;
                                let xx = (j * stride + dj) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + y as usize) * w + xx as usize];
                                let kv = k[((oc * c + ic) * kh + di) * kw + dj];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// `y[b][j] = bias[j] + Σ_i x[b][i] · w[i][j]`.
pub fn naive_dense(x: &[f64], n: usize, f: usize, w: &[f64], g: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * g];
    for b in 0..n {
        for j in 0..g {
            let mut acc = bias[j];
            for i in 0..f {
                acc += x[b * f + i] * w[i * g + j];
            }
            out[b * g + j] = acc;
        }
    }
    out
}

/// Max pooling; the first maximum in row-major window order wins.
pub fn naive_maxpool(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = plane * h * w + (i * stride + di) * w + j * stride + dj;
                        if x[idx] > best {
                            best = x[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    (out, arg)
}

/// O(n·m) mean nearest-neighbor distance, same arithmetic as the metric's
/// definition: squared components summed in x, y, z order, then sqrt.
pub fn brute_mean_nearest(a: &PointCloud, b: &PointCloud) -> f64 {
    let mut sum = 0.0;
    for p in &a.points {
        let mut best = f64::INFINITY;
        for q in &b.points {
            let dx = f64::from(p[0]) - f64::from(q[0]);
            let dy = f64::from(p[1]) - f64::from(q[1]);
            let dz = f64::from(p[2]) - f64::from(q[2]);
            let d = dx * dx + dy * dy + dz * dz;
            if d < best {
                best = d;
            }
        }
        sum += best.sqrt();
    }
    sum / a.points.len() as f64
}

pub fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    brute_mean_nearest(a, b) + brute_mean_nearest(b, a)
}

/// Accuracy, precision, recall and F1 for positive class 0, computed
/// straight from the definitions as exact rationals and rounded once.
pub fn metrics_oracle(labels: &[usize], preds: &[usize]) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&a, &p) in labels.iter().zip(preds) {
        match (a == 0, p == 0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fneg);
    // 2PR/(P+R) = 2TP/(2TP+FP+FN) whenever TP > 0
    let f1 = if tp == 0 { 0.0 } else { div(2 * tp, 2 * tp + fp + fneg) };
    (div(tp + tn, tp + tn + fp + fneg), precision, recall, f1)
}

/// Adam on plain `f64` slices.
pub struct AdamRef {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl AdamRef {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.t += 1;
        for i in 0..w.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Depth maps of the sphere `|x| = radius` by analytic ray intersection.
pub fn sphere_depth_maps(poses: &[ViewPose], radius: f64) -> DepthMapSet {
    let views = poses
        .iter()
        .map(|pose| {
            let k = pose.intrinsics;
            let mut depth = vec![0f32; k.width * k.height];
            let mut mask = vec![false; k.width * k.height];
            // camera center in world coordinates: c = -Rᵀt
            let r = pose.rotation;
            let t = pose.translation;
            let mut c = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    c[i] -= r[(j, i)] * t[j];
                }
            }
            for v in 0..k.height {
                for u in 0..k.width {
                    let dc = [
                        (u as f64 + 0.5 - k.cx) / k.focal,
                        (v as f64 + 0.5 - k.cy) / k.focal,
                        1.0,
                    ];
                    let mut d = [0.0; 3];
                    for i in 0..3 {
                        for j in 0..3 {
                            d[i] += r[(j, i)] * dc[j];
                        }
                    }
                    // |c + s d|² = radius²
                    let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    let b = c[0] * d[0] + c[1] * d[1] + c[2] * d[2];
                    let cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2] - radius * radius;
                    let disc = b * b - a * cc;
                    if disc > 0.0 {
                        let s = (-b - disc.sqrt()) / a;
                        if s > 0.0 {
                            depth[v * k.width + u] = s as f32;
                            mask[v * k.width + u] = true;
                        }
                    }
                }
            }
            DepthView {
                pose: *pose,
                depth,
                mask,
            }
        })
        .collect();
    DepthMapSet::new(views).unwrap()
}

/// `n` points uniformly distributed on the unit sphere.
pub fn uniform_sphere(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let v: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if r2 > 1e-6 && r2 <= 1.0 {
            let r = r2.sqrt();
            pts.push([(v[0] / r) as f32, (v[1] / r) as f32, (v[2] / r) as f32]);
        }
    }
    PointCloud::new(pts)
}

/// Outcome of one finite-difference comparison run.
#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    fn absorb(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

const FD_EPS: f64 = 1e-5;

fn loss_of(net: &Network, w: &WeightStore<f64>, x: &Tensor<f64>, labels: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = net.forward(w, x, Mode::Train(&mut rng)).unwrap();
    // cross entropy with the same log clamp as the engine
    let c = p.shape()[1];
    let mut s = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        s -= p.data()[i * c + l].max(1e-12).ln();
    }
    s / labels.len() as f64
}

/// Compares one analytic derivative with central differences, skipping
/// coordinates where the one-sided slopes disagree (a ReLU or max-pool
/// switch inside the stencil).
fn compare(
    analytic: f64,
    f: &mut dyn FnMut(f64) -> f64,
    x0: f64,
    label: &str,
    report: &mut GradReport,
) {
    let f0 = f(x0);
    let fp = f(x0 + FD_EPS);
    let fm = f(x0 - FD_EPS);
    let fwd = (fp - f0) / FD_EPS;
    let bwd = (f0 - fm) / FD_EPS;
    let num = (fp - fm) / (2.0 * FD_EPS);
    if (fwd - bwd).abs() > 1e-4 + 1e-3 * num.abs() {
        report.skipped += 1;
        return;
    }
    report.checked += 1;
    let e = rel_err(analytic, num);
    if e > report.max_rel {
        report.max_rel = e;
        report.worst = format!("{label}: analytic {analytic:e} numeric {num:e}");
    }
}

/// Full check of one network ending in Softmax: every parameter and every
/// input element, loss = mean cross-entropy in train mode with a fixed
/// dropout stream.
pub fn check_network(net: &Network, seed: u64, batch: usize) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: WeightStore<f64> = net.init_weights(seed).unwrap();
    // non-zero biases so that every path is exercised
    for (_, t) in w.iter_mut() {
        if t.ndim() == 1 {
            for b in t.data_mut() {
                *b = rng.random_range(-0.2..0.2);
            }
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(&net.input_shape);
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let classes = *net.output_shape().unwrap().last().unwrap();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let drop_seed = rng.random::<u64>();

    let mut report = GradReport::default();
    // parameter gradients through the engine's fused softmax/cross-entropy path
    let mut drng = ChaCha8Rng::seed_from_u64(drop_seed);
    let (_, grads) = net.backprop(&w, &x, &labels, &mut drng).unwrap();
    let names: Vec<String> = w.names().map(str::to_string).collect();
    for name in &names {
        let Some(g) = grads.get(name) else { continue };
        for i in 0..g.len() {
            let a = g.data()[i];
            let x0 = w.get(name).unwrap().data()[i];
            let mut f = |v: f64| {
                let mut w2 = w.clone();
                w2.get_mut(name).unwrap().data_mut()[i] = v;
                loss_of(net, &w2, &x, &labels, drop_seed)
            };
            compare(a, &mut f, x0, &format!("{name}[{i}]"), &mut report);
        }
    }

    // input gradient through explicit backward of the pre-softmax stack
    let last = net.layers.len() - 1;
    let head = Network {
        input_shape: net.input_shape.clone(),
        layers: net.layers[..last].to_vec(),
    };
    let mut drng = ChaCha8Rng::seed_from_u64(drop_seed);
    let (logits, trace) = head.forward_traced(&w, &x, Mode::Train(&mut drng), true).unwrap();
    let probs = cellscope_core::nn::softmax(&logits).unwrap();
    let c = probs.shape()[1];
    let mut g = probs.data().to_vec();
    for (i, &l) in labels.iter().enumerate() {
        g[i * c + l] -= 1.0;
    }
    for v in &mut g {
        *v /= batch as f64;
    }
    let grads = head
        .backward(&w, trace, Tensor::new(probs.shape().to_vec(), g).unwrap())
        .unwrap();
    let gx = grads.input.expect("input gradient requested");
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let mut f = |v: f64| {
            let mut x2 = x.clone();
            x2.data_mut()[i] = v;
            loss_of(net, &w, &x2, &labels, drop_seed)
        };
        compare(gx.data()[i], &mut f, x0, &format!("input[{i}]"), &mut report);
    }
    report
}

/// The layer kinds covered by the gradient suite.
pub const GRAD_KINDS: [&str; 10] = [
    "conv2d", "maxpool2d", "relu", "flatten", "dense", "dropout", "softmax", "reshape", "upsample2d",
    "standardize",
];

/// Random small network exercising `kind` (every network ends in
/// Flatten/Dense/Softmax so a scalar loss exists).
pub fn random_case(kind: &str, rng: &mut ChaCha8Rng) -> (Network, usize) {
    let c = rng.random_range(1..=3);
    let h = rng.random_range(4..=7);
    let w = rng.random_range(4..=7);
    let mut net = Network::new(vec![c, h, w]);
    let classes = rng.random_range(2..=4);
    match kind {
        "conv2d" => {
            let k = rng.random_range(1..=3);
            let kw = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            net.push(
                "conv",
                LayerKind::Conv2D {
                    out_channels: rng.random_range(1..=3),
                    kernel: [k, kw],
                    stride,
                    padding,
                },
            );
        }
        "maxpool2d" => {
            net.push("conv", LayerKind::conv3x3(2));
            let window = rng.random_range(2..=3);
            let stride = rng.random_range(1..=window);
            net.push("pool", LayerKind::MaxPool2D { window, stride });
        }
        "relu" => {
            net.push("conv", LayerKind::conv3x3(2)).push("relu", LayerKind::ReLU);
        }
        "flatten" => {
            net.push("flat", LayerKind::Flatten);
        }
        "dense" => {
            net.push("flat", LayerKind::Flatten)
                .push("fc_a", LayerKind::Dense { out_features: rng.random_range(2..=6) })
                .push("relu", LayerKind::ReLU);
        }
        "dropout" => {
            net.push("flat", LayerKind::Flatten)
                .push("fc_a", LayerKind::Dense { out_features: 6 })
                .push("drop", LayerKind::Dropout { rate: rng.random_range(0.1..0.7) });
        }
        "softmax" => {}
        "reshape" => {
            let flat = c * h * w;
            net.push("flat", LayerKind::Flatten)
                .push("fc_a", LayerKind::Dense { out_features: flat })
                .push("reshape", LayerKind::Reshape { shape: vec![c, w, h] })
                .push("conv", LayerKind::conv3x3(1));
        }
        "upsample2d" => {
            net.push("up", LayerKind::Upsample2D { factor: rng.random_range(2..=3) })
                .push("conv", LayerKind::conv3x3(1));
        }
        "standardize" => {
            net.push("flat", LayerKind::Flatten)
                .push("norm", LayerKind::Standardize)
                .push("fc_a", LayerKind::Dense { out_features: 4 });
        }
        other => panic!("unknown kind {other}"),
    }
    net.push("flatten_out", LayerKind::Flatten)
        .push("fc_out", LayerKind::Dense { out_features: classes })
        .push("softmax", LayerKind::Softmax);
    (net, rng.random_range(1..=3))
}

/// `cases` random networks cycling through every layer kind.
pub fn gradient_suite(cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradReport::default();
    for i in 0..cases {
        let kind = GRAD_KINDS[i % GRAD_KINDS.len()];
        let (net, batch) = random_case(kind, &mut rng);
        let mut r = check_network(&net, rng.random(), batch);
        r.worst = format!("case {i} ({kind}) {}", r.worst);
        total.absorb(r);
    }
    total
}
