use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::sample_zero;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Random geometric transforms applied to training images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Horizontal shift drawn from `±width_shift * W`.
    pub width_shift: f64,
    /// Vertical shift drawn from `±height_shift * H`.
    pub height_shift: f64,
    /// Scale factor drawn from `1 ± zoom`.
    pub zoom: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 20.0,
            width_shift: 0.1,
            height_shift: 0.1,
            zoom: 0.1,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
            zoom: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.rotation_deg,
            self.width_shift,
            self.height_shift,
            self.zoom,
            self.flip_prob,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) || self.flip_prob > 1.0 || self.zoom >= 1.0
        {
            return Err(Error::Config(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

/// RNG stream for one sample in one epoch; independent of processing order.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | (index as u64 & 0xffff_ffff));
    rng
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * half_width
}

/// A flip followed by rotation, translation and zoom about the image centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip: bool,
    pub angle_rad: f64,
    pub shift: (f64, f64),
    pub scale: f64,
}

impl Transform {
    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let angle_rad = symmetric(rng, cfg.rotation_deg).to_radians();
        let dx = symmetric(rng, cfg.width_shift * w as f64);
        let dy = symmetric(rng, cfg.height_shift * h as f64);
        let scale = 1.0 + symmetric(rng, cfg.zoom);
        Self {
            flip,
            angle_rad,
            shift: (dx, dy),
            scale,
        }
    }

    fn is_rigid_identity(&self) -> bool {
        self.angle_rad == 0.0 && self.shift == (0.0, 0.0) && self.scale == 1.0
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let [c, h, w] = match *img.shape() {
            [c, h, w] => [c, h, w],
            _ => panic!("augment expects C x H x W"),
        };
        let mut data = img.data().to_vec();
        if self.flip {
            for row in data.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if !self.is_rigid_identity() {
            let src = data.clone();
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let (sin, cos) = self.angle_rad.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    // invert zoom, then shift, then rotation
                    let px = cx + (x as f64 + 0.5 - cx) / self.scale - self.shift.0;
                    let py = cy + (y as f64 + 0.5 - cy) / self.scale - self.shift.1;
                    let (rx, ry) = (px - cx, py - cy);
                    let qx = cx + cos * rx + sin * ry;
                    let qy = cy - sin * rx + cos * ry;
                    for ch in 0..c {
                        let plane = &src[ch * h * w..(ch + 1) * h * w];
                        data[(ch * h + y) * w + x] = sample_zero(plane, h, w, qx - 0.5, qy - 0.5);
                    }
                }
            }
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(img.shape().to_vec(), data).expect("same shape")
    }
}

/// Random flip, rotation, translation and zoom, in that order, with
/// bilinear resampling and zero fill. The label is left untouched.
pub fn augment<R: Rng + ?Sized>(image: &LabeledImage, cfg: &AugmentConfig, rng: &mut R) -> LabeledImage {
    let [_, h, w] = match *image.pixels.shape() {
        [c, h, w] => [c, h, w],
        _ => panic!("augment expects C x H x W"),
    };
    let t = Transform::draw(cfg, h, w, rng);
    LabeledImage {
        pixels: t.apply(&image.pixels),
        label: image.label,
        path: image.path.clone(),
    }
}

/// Rotation about the centre by `degrees`, bilinear with zero fill.
pub fn rotate(img: &Tensor<f32>, degrees: f64) -> Tensor<f32> {
    Transform {
        flip: false,
        angle_rad: degrees.to_radians(),
        shift: (0.0, 0.0),
        scale: 1.0,
    }
    .apply(img)
}
