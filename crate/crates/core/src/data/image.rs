//! PNG decoding and bilinear resampling of CHW float images.

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Decodes PNG bytes into a 3 x H x W tensor scaled to [0, 1].
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape matches pixel count")
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let [c, h, w] = match *t.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::Dimension(format!("expected 3 x H x W, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = d[(ch * h + y as usize) * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn encode_png(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let img = tensor_to_rgb(t)?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Bilinear sample at continuous index coordinates (pixel `i` has its centre
/// at `i`). Neighbours outside the plane contribute zero.
#[inline]
pub fn sample_zero(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            f64::from(plane[yi as usize * w + xi as usize])
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = match *img.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::Dimension(format!("expected C x H x W, got {s:?}"))),
    };
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Dimension("cannot resize an empty image".into()));
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coords = |i: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coords(x, sx, w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let (y0, y1, fy) = coords(y, sy, h);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &xs {
                let top = f64::from(r0[x0]) * (1.0 - fx) + f64::from(r0[x1]) * fx;
                let bot = f64::from(r1[x0]) * (1.0 - fx) + f64::from(r1[x1]) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// The single preprocessing path shared by training, the CLI, and the
/// service: decode PNG, resize to `size` (H, W), values in [0, 1].
pub fn preprocess_png(bytes: &[u8], size: (usize, usize)) -> Result<Tensor<f32>> {
    let img = decode_png(bytes)?;
    resize_bilinear(&img, size.0, size.1)
}
