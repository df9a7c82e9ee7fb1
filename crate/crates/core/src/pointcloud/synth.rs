//! Procedural cell-like solids and their multi-view depth renders, used as
//! generator training data.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::npy::{parse_npy, write_npy_f32};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::pointcloud::camera::{Intrinsics, ViewPose};
use crate::pointcloud::fuse::{DepthMapSet, DepthView};

#[derive(Clone, Debug, PartialEq)]
pub struct Bump {
    pub dir: Vector3<f64>,
    pub amplitude: f64,
    /// Angular width in radians.
    pub width: f64,
}

/// Star-shaped solid: a rotated ellipsoid whose radius is modulated by
/// Gaussian bumps, `r(u) = r_ellipsoid(u) · (1 + Σ a·exp(-θ²/w²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellShape {
    pub axes: [f64; 3],
    pub rotation: Rotation3<f64>,
    pub bumps: Vec<Bump>,
}

impl CellShape {
    pub fn sphere(radius: f64) -> Self {
        Self {
            axes: [radius; 3],
            rotation: Rotation3::identity(),
            bumps: Vec::new(),
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let axes = [
            rng.random_range(0.7..0.95),
            rng.random_range(0.55..0.85),
            rng.random_range(0.4..0.7),
        ];
        let rotation = Rotation3::from_euler_angles(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
            rng.random_range(0.0..std::f64::consts::PI),
        );
        let n = rng.random_range(0..=3);
        let bumps = (0..n)
            .map(|_| Bump {
                dir: random_unit(rng),
                amplitude: rng.random_range(0.05..0.12),
                width: rng.random_range(0.3..0.6),
            })
            .collect();
        Self {
            axes,
            rotation,
            bumps,
        }
    }

    /// Surface radius along the unit direction `u`.
    pub fn radius(&self, u: &Vector3<f64>) -> f64 {
        let local = self.rotation.inverse() * u;
        let q = (local.x / self.axes[0]).powi(2)
            + (local.y / self.axes[1]).powi(2)
            + (local.z / self.axes[2]).powi(2);
        let mut r = 1.0 / q.sqrt();
        let mut m = 1.0;
        for b in &self.bumps {
            let theta = u.dot(&b.dir).clamp(-1.0, 1.0).acos();
            m += b.amplitude * (-(theta / b.width).powi(2)).exp();
        }
        r *= m;
        r
    }

    pub fn max_radius(&self) -> f64 {
        let a = self.axes.iter().cloned().fold(0.0, f64::max);
        a * (1.0 + self.bumps.iter().map(|b| b.amplitude).sum::<f64>())
    }

    /// Negative inside, positive outside.
    fn field(&self, p: &Vector3<f64>) -> f64 {
        let n = p.norm();
        if n < 1e-12 {
            return -1.0;
        }
        n - self.radius(&(p / n))
    }

    /// Distance along `dir` from `origin` to the first surface crossing.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let bound = self.max_radius() * 1.01;
        // clip the ray against the bounding sphere
        let b = origin.dot(dir);
        let c = origin.norm_squared() - bound * bound;
        let a = dir.norm_squared();
        let disc = b * b - a * c;
        if disc <= 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t0 = ((-b - sq) / a).max(0.0);
        let t1 = (-b + sq) / a;
        if t1 <= t0 {
            return None;
        }
        let steps = 192;
        let dt = (t1 - t0) / steps as f64;
        let mut prev_t = t0;
        if self.field(&(origin + dir * t0)) <= 0.0 {
            return Some(t0);
        }
        for i in 1..=steps {
            let t = t0 + dt * i as f64;
            let f = self.field(&(origin + dir * t));
            if f <= 0.0 {
                let (mut lo, mut hi) = (prev_t, t);
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    if self.field(&(origin + dir * mid)) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            prev_t = t;
        }
        None
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Camera-frame depth and mask of `shape` as seen from `pose`.
pub fn render_view(shape: &CellShape, pose: &ViewPose) -> DepthView {
    let k = pose.intrinsics;
    let center = pose.center();
    let rt = pose.rotation.transpose();
    let mut depth = vec![0f32; k.pixels()];
    let mut mask = vec![false; k.pixels()];
    for v in 0..k.height {
        for u in 0..k.width {
            // ray in camera frame has z = 1, so the hit parameter is the depth
            let dir = rt * pose.pixel_ray(u, v);
            if let Some(t) = shape.intersect(&center, &dir) {
                depth[v * k.width + u] = t as f32;
                mask[v * k.width + u] = true;
            }
        }
    }
    DepthView {
        pose: *pose,
        depth,
        mask,
    }
}

pub fn render_views(shape: &CellShape, poses: &[ViewPose]) -> Result<DepthMapSet> {
    DepthMapSet::new(poses.iter().map(|p| render_view(shape, p)).collect())
}

/// Encoder input: the shape seen from `pose`, shaded by depth (near is
/// bright), background black, replicated over three channels.
pub fn render_input(shape: &CellShape, pose: &ViewPose) -> Tensor<f32> {
    let view = render_view(shape, pose);
    let k = pose.intrinsics;
    let near = pose.translation.norm() - shape.max_radius();
    let span = 2.0 * shape.max_radius();
    let plane: Vec<f32> = view
        .depth
        .iter()
        .zip(&view.mask)
        .map(|(&d, &m)| {
            if m {
                (1.0 - 0.75 * ((f64::from(d) - near) / span)).clamp(0.1, 1.0) as f32
            } else {
                0.0
            }
        })
        .collect();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new(vec![3, k.height, k.width], data).expect("3 planes")
}

/// Flattens a depth map set into `(V, 2, H, W)` order: per view, the depth
/// plane (zero where unmasked) then the 0/1 mask plane.
pub fn pack_views(set: &DepthMapSet) -> Vec<f32> {
    let mut out = Vec::new();
    for v in &set.views {
        out.extend(v.depth.iter().zip(&v.mask).map(|(&d, &m)| if m { d } else { 0.0 }));
        out.extend(v.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    }
    out
}

/// Inverse of [`pack_views`]; mask entries above 0.5 count as set.
pub fn unpack_views(packed: &[f32], poses: &[ViewPose]) -> Result<DepthMapSet> {
    let mut views = Vec::with_capacity(poses.len());
    let mut off = 0;
    for p in poses {
        let n = p.intrinsics.pixels();
        if packed.len() < off + 2 * n {
            return Err(Error::Data(format!(
                "packed views hold {} values, need at least {}",
                packed.len(),
                off + 2 * n
            )));
        }
        let depth = packed[off..off + n].to_vec();
        let mask = packed[off + n..off + 2 * n].iter().map(|&m| m > 0.5).collect();
        off += 2 * n;
        views.push(DepthView {
            pose: *p,
            depth,
            mask,
        });
    }
    if off != packed.len() {
        return Err(Error::Data(format!(
            "packed views hold {} values, expected {off}",
            packed.len()
        )));
    }
    DepthMapSet::new(views)
}

/// One training pair: encoder input image and packed target views.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSample {
    pub image: Tensor<f32>,
    pub target: Vec<f32>,
}

/// Renders `count` random shapes seeded by `seed`. Sample `i` depends only
/// on `(seed, i)`.
pub fn synth_samples(
    count: usize,
    seed: u64,
    poses: &[ViewPose],
    input_pose: &ViewPose,
) -> Result<Vec<GeneratorSample>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let shape = CellShape::random(&mut rng);
            Ok(GeneratorSample {
                image: render_input(&shape, input_pose),
                target: pack_views(&render_views(&shape, poses)?),
            })
        })
        .collect()
}

/// Path of the image array written next to a view array:
/// `D.npy` → `D.images.npy`.
pub fn images_path(views_path: &std::path::Path) -> std::path::PathBuf {
    let stem = views_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    views_path.with_file_name(format!("{stem}.images.npy"))
}

/// Writes `(samples, V, 2, H, W)` views to `path` and `(samples, 3, H, W)`
/// images to [`images_path`].
pub fn write_dataset(
    path: &std::path::Path,
    samples: &[GeneratorSample],
    views: usize,
    size: (usize, usize),
) -> Result<()> {
    let (h, w) = size;
    let mut targets = Vec::with_capacity(samples.len() * views * 2 * h * w);
    let mut images = Vec::new();
    let mut img_shape = vec![samples.len()];
    for (i, s) in samples.iter().enumerate() {
        if s.target.len() != views * 2 * h * w {
            return Err(Error::Data(format!("sample {i} target has {} values", s.target.len())));
        }
        targets.extend_from_slice(&s.target);
        images.extend_from_slice(s.image.data());
        if i == 0 {
            img_shape.extend_from_slice(s.image.shape());
        }
    }
    if samples.is_empty() {
        img_shape.extend_from_slice(&[3, h, w]);
    }
    let vb = write_npy_f32(&[samples.len(), views, 2, h, w], &targets);
    std::fs::write(path, vb).map_err(|e| Error::io(path, e))?;
    let ip = images_path(path);
    std::fs::write(&ip, write_npy_f32(&img_shape, &images)).map_err(|e| Error::io(&ip, e))?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], checking the view array
/// against `(views, 2, h, w)` and the image array against `image_shape`.
pub fn read_dataset(
    path: &std::path::Path,
    views: usize,
    size: (usize, usize),
    image_shape: &[usize],
) -> Result<Vec<GeneratorSample>> {
    let (h, w) = size;
    let vb = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let va = parse_npy(&vb)?;
    let want = [views, 2, h, w];
    if va.shape.len() != 5 || va.shape[1..] != want {
        return Err(Error::Data(format!(
            "{}: expected shape (samples, {views}, 2, {h}, {w}), found {:?}",
            path.display(),
            va.shape
        )));
    }
    let n = va.shape[0];
    let ip = images_path(path);
    let ib = std::fs::read(&ip).map_err(|e| Error::io(&ip, e))?;
    let ia = parse_npy(&ib)?;
    if ia.shape.first() != Some(&n) || ia.shape[1..] != *image_shape {
        return Err(Error::Data(format!(
            "{}: expected shape ({n}, {}), found {:?}",
            ip.display(),
            image_shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", "),
            ia.shape
        )));
    }
    let targets = va.to_f32();
    let images = ia.to_f32();
    let per_t = views * 2 * h * w;
    let per_i: usize = image_shape.iter().product();
    (0..n)
        .map(|i| {
            let target = targets[i * per_t..(i + 1) * per_t].to_vec();
            if let Some(j) = target.iter().position(|x| !x.is_finite()) {
                return Err(Error::Data(format!("sample {i}: non-finite value at {j}")));
            }
            Ok(GeneratorSample {
                image: Tensor::new(image_shape.to_vec(), images[i * per_i..(i + 1) * per_i].to_vec())?,
                target,
            })
        })
        .collect()
}

pub fn default_input_pose(radius: f64, intrinsics: Intrinsics) -> ViewPose {
    ViewPose::look_at_origin(Vector3::new(0.0, 0.0, -radius), intrinsics)
}
