//! Procedural stand-ins for thin-smear cell crops, written in the NIH
//! `cell_images` directory layout. Used when the real download is not
//! available (tests, demos).
//!
//! Every crop is a stained red cell on a black background with uneven
//! illumination and sensor noise. Parasitized cells carry one to three
//! dark ring-form parasites; uninfected cells sometimes carry faint
//! pale artefacts.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::CLASS_DIRS;
use crate::error::{Error, Result};

struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    thickness: f64,
    color: [f64; 3],
    alpha: f64,
    /// Solid dot of this radius at the ring's edge.
    dot: f64,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Renders one crop. `parasitized` selects the class.
pub fn render_cell<R: Rng + ?Sized>(rng: &mut R, parasitized: bool) -> RgbImage {
    let size = rng.random_range(96..=160u32);
    let s = f64::from(size);
    let cx = s / 2.0 + rng.random_range(-0.04..0.04) * s;
    let cy = s / 2.0 + rng.random_range(-0.04..0.04) * s;
    let rx = rng.random_range(0.34..0.46) * s;
    let ry = rx * rng.random_range(0.8..1.0);
    let tilt: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ts, tc) = tilt.sin_cos();

    let tint = rng.random_range(-0.08..0.08);
    let base = [
        0.86 + tint + rng.random_range(-0.04..0.04),
        0.56 + tint + rng.random_range(-0.06..0.06),
        0.62 + tint + rng.random_range(-0.06..0.06),
    ];
    let pallor = rng.random_range(0.0..0.14);
    let shade_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let shade = rng.random_range(0.0..0.12);
    let noise = rng.random_range(0.01..0.035);

    let mut blobs = Vec::new();
    let n = if parasitized {
        rng.random_range(1..=3)
    } else if rng.random::<f64>() < 0.35 {
        rng.random_range(1..=2)
    } else {
        0
    };
    for _ in 0..n {
        let r = rng.random::<f64>().sqrt() * 0.65;
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (x, y) = (a.cos() * r * rx, a.sin() * r * ry);
        let blob = if parasitized {
            Blob {
                x,
                y,
                radius: rng.random_range(0.05..0.09) * s,
                thickness: rng.random_range(0.025..0.04) * s,
                color: [
                    rng.random_range(0.25..0.40),
                    rng.random_range(0.05..0.15),
                    rng.random_range(0.35..0.50),
                ],
                alpha: rng.random_range(0.85..1.0),
                dot: rng.random_range(0.03..0.05) * s,
            }
        } else {
            Blob {
                x,
                y,
                radius: rng.random_range(0.02..0.05) * s,
                thickness: rng.random_range(0.02..0.04) * s,
                color: [
                    base[0] - 0.15,
                    base[1] - 0.12,
                    base[2] - 0.05,
                ],
                alpha: rng.random_range(0.10..0.25),
                dot: 0.0,
            }
        };
        blobs.push(blob);
    }

    let mut img = RgbImage::new(size, size);
    for (px, py, out) in img.enumerate_pixels_mut() {
        let dx = f64::from(px) + 0.5 - cx;
        let dy = f64::from(py) + 0.5 - cy;
        // cell frame
        let u = tc * dx + ts * dy;
        let v = -ts * dx + tc * dy;
        let rho = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
        let coverage = ((1.0 - rho) * rx / 1.5 + 0.5).clamp(0.0, 1.0);
        let mut rgb = [0.0f64; 3];
        if coverage > 0.0 {
            let pale = pallor * (1.0 - (rho / 0.55).powi(2)).max(0.0);
            let light = 1.0 + shade * (u * shade_dir.cos() + v * shade_dir.sin()) / rx;
            for c in 0..3 {
                rgb[c] = (base[c] + pale) * light;
            }
            for b in &blobs {
                let d = ((u - b.x).powi(2) + (v - b.y).powi(2)).sqrt();
                let ring = (1.0 - ((d - b.radius).abs() / b.thickness)).clamp(0.0, 1.0);
                let dd = ((u - b.x - b.radius).powi(2) + (v - b.y).powi(2)).sqrt();
                let dot = if b.dot > 0.0 {
                    (1.0 - dd / b.dot).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let a = b.alpha * ring.max(dot);
                for c in 0..3 {
                    rgb[c] = lerp(rgb[c], b.color[c], a);
                }
            }
            for v in &mut rgb {
                *v = (*v + noise * gaussian(rng)) * coverage;
            }
        }
        *out = Rgb(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    img
}

/// Writes `per_class` crops per class under `root/Parasitized` and
/// `root/Uninfected`.
pub fn write_synthetic_cells(root: impl AsRef<Path>, per_class: usize, seed: u64) -> Result<()> {
    let root = root.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (label, dir) in CLASS_DIRS.iter().enumerate() {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for i in 0..per_class {
            let img = render_cell(&mut rng, label == 0);
            let path = d.join(format!("cell_{i:05}.png"));
            img.save(&path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}
