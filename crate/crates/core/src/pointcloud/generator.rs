//! Single-image structure generator: an encoder to a latent code and a
//! decoder to per-view depth and mask-logit planes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, LayerKind, Mode, Network, Tensor, WeightStore};
use crate::pointcloud::camera::{make_fixed_poses, Intrinsics, ViewPose};
use crate::pointcloud::fuse::{fuse, DepthMapSet, DepthView, PointCloud};
use crate::pointcloud::synth::GeneratorSample;
use crate::scalar::Scalar;

pub const DEFAULT_VIEWS: usize = 8;
pub const DEFAULT_SIZE: usize = 32;
pub const DEFAULT_LATENT: usize = 128;
pub const DEFAULT_CAMERA_RADIUS: f64 = 3.0;
pub const DEFAULT_FOCAL: f64 = 30.0;

const OUTPUT_LAYER: &str = "dec_out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub encoder: Network,
    pub decoder: Network,
    pub views: usize,
    pub camera_radius: f64,
    pub intrinsics: Intrinsics,
}

impl GeneratorSpec {
    /// Encoder: three conv/ReLU/pool stages and a dense projection to
    /// `latent`. Decoder: dense to a `32 × H/4 × W/4` grid, two upsampling
    /// stages, and a final conv to `2·views` planes.
    pub fn new(views: usize, size: (usize, usize), latent: usize, camera_radius: f64, focal: f64) -> Result<Self> {
        let (h, w) = size;
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("generator image size {h}x{w} must be a multiple of 8")));
        }
        if latent == 0 || views == 0 {
            return Err(Error::Config("latent size and view count must be >= 1".into()));
        }
        let mut enc = Network::new(vec![3, h, w]);
        for (i, c) in [16, 32, 64].into_iter().enumerate() {
            enc.push(format!("enc_conv{}", i + 1), LayerKind::conv3x3(c))
                .push(format!("enc_relu{}", i + 1), LayerKind::ReLU)
                .push(format!("enc_pool{}", i + 1), LayerKind::MaxPool2D { window: 2, stride: 2 });
        }
        enc.push("enc_flatten", LayerKind::Flatten)
            .push("enc_latent", LayerKind::Dense { out_features: latent });

        let (bh, bw) = (h / 4, w / 4);
        let mut dec = Network::new(vec![latent]);
        dec.push("dec_fc", LayerKind::Dense { out_features: 32 * bh * bw })
            .push("dec_fc_relu", LayerKind::ReLU)
            .push("dec_reshape", LayerKind::Reshape { shape: vec![32, bh, bw] })
            .push("dec_up1", LayerKind::Upsample2D { factor: 2 })
            .push("dec_conv1", LayerKind::conv3x3(32))
            .push("dec_relu1", LayerKind::ReLU)
            .push("dec_up2", LayerKind::Upsample2D { factor: 2 })
            .push(OUTPUT_LAYER, LayerKind::conv3x3(2 * views));
        let spec = Self {
            encoder: enc,
            decoder: dec,
            views,
            camera_radius,
            intrinsics: Intrinsics::centered(w, h, focal),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn desk_default() -> Self {
        Self::new(
            DEFAULT_VIEWS,
            (DEFAULT_SIZE, DEFAULT_SIZE),
            DEFAULT_LATENT,
            DEFAULT_CAMERA_RADIUS,
            DEFAULT_FOCAL,
        )
        .expect("default generator is valid")
    }

    pub fn size(&self) -> (usize, usize) {
        (self.intrinsics.height, self.intrinsics.width)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.encoder.input_shape
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let z = self.encoder.output_shape()?;
        if z != self.decoder.input_shape {
            return Err(Error::Config(format!(
                "encoder output {z:?} does not feed decoder input {:?}",
                self.decoder.input_shape
            )));
        }
        let (h, w) = self.size();
        let want = vec![2 * self.views, h, w];
        let out = self.decoder.output_shape()?;
        if out != want {
            return Err(Error::Config(format!("decoder output {out:?}, expected {want:?}")));
        }
        self.combined().validate()?;
        make_fixed_poses(self.views, self.camera_radius, self.intrinsics)?;
        Ok(())
    }

    /// Encoder and decoder as one stack.
    pub fn combined(&self) -> Network {
        let mut net = Network::new(self.encoder.input_shape.clone());
        net.layers.extend(self.encoder.layers.iter().cloned());
        net.layers.extend(self.decoder.layers.iter().cloned());
        net
    }

    pub fn poses(&self) -> Vec<ViewPose> {
        make_fixed_poses(self.views, self.camera_radius, self.intrinsics).expect("validated poses")
    }

    /// He-uniform init with depth-plane biases at the camera radius, so the
    /// untrained decoder already predicts depths around the scene center.
    pub fn init_weights(&self, seed: u64) -> Result<WeightStore<f32>> {
        let mut w = self.combined().init_weights::<f32>(seed)?;
        let bias = w
            .get_mut(&format!("{OUTPUT_LAYER}/bias"))
            .ok_or_else(|| Error::Consistency("decoder output bias missing".into()))?;
        for (c, b) in bias.data_mut().iter_mut().enumerate() {
            if c % 2 == 0 {
                *b = self.camera_radius as f32;
            }
        }
        Ok(w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub depth: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { depth: 1.0, mask: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            seed: 42,
            adam: AdamConfig::with_lr(1e-3),
            loss: LossWeights::default(),
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss terms for a batch of decoder outputs `(B, 2V, H, W)` against packed
/// targets `(V, 2, H, W)` per sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    /// Mean absolute depth error over pixels masked in the target.
    pub depth_l1: f64,
    /// Mean binary cross-entropy of the mask logits over all pixels.
    pub mask_bce: f64,
    pub total: f64,
}

/// Masked L1 on depth plus BCE on mask logits, and the gradient with
/// respect to `pred`.
pub fn generator_loss<T: Scalar>(
    pred: &Tensor<T>,
    targets: &[&[f32]],
    weights: LossWeights,
) -> Result<(LossParts, Tensor<T>)> {
    let shape = pred.shape();
    if shape.len() != 4 || shape[0] != targets.len() || shape[1] % 2 != 0 {
        return Err(Error::Dimension(format!(
            "decoder output {shape:?} does not match {} targets",
            targets.len()
        )));
    }
    let per = pred.row_len();
    let plane = shape[2] * shape[3];
    if let Some(t) = targets.iter().find(|t| t.len() != per) {
        return Err(Error::Dimension(format!("target holds {} values, expected {per}", t.len())));
    }
    let p = pred.data();
    let masked: usize = targets
        .iter()
        .map(|t| {
            t.chunks(plane)
                .skip(1)
                .step_by(2)
                .flatten()
                .filter(|&&m| m > 0.5)
                .count()
        })
        .sum();
    let pixels = targets.len() * per / 2;
    let mut grad = vec![T::zero(); p.len()];
    let (mut l1, mut bce) = (0.0f64, 0.0f64);
    let l1_scale = weights.depth / masked.max(1) as f64;
    let bce_scale = weights.mask / pixels.max(1) as f64;
    for (b, t) in targets.iter().enumerate() {
        for view in 0..shape[1] / 2 {
            let d_off = b * per + 2 * view * plane;
            let m_off = d_off + plane;
            let t_off = 2 * view * plane;
            for i in 0..plane {
                let m = f64::from(t[t_off + plane + i]);
                let z = p[m_off + i].as_f64();
                bce += softplus(z) - m * z;
                grad[m_off + i] = T::of(bce_scale * (sigmoid(z) - m));
                if m > 0.5 {
                    let r = p[d_off + i].as_f64() - f64::from(t[t_off + i]);
                    l1 += r.abs();
                    let s = if r > 0.0 {
                        1.0
                    } else if r < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    grad[d_off + i] = T::of(l1_scale * s);
                }
            }
        }
    }
    let depth_l1 = l1 / masked.max(1) as f64;
    let mask_bce = bce / pixels.max(1) as f64;
    Ok((
        LossParts {
            depth_l1,
            mask_bce,
            total: weights.depth * depth_l1 + weights.mask * mask_bce,
        },
        Tensor::new(shape.to_vec(), grad)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorHistory {
    pub records: Vec<GeneratorEpoch>,
    pub best_epoch: usize,
    pub steps: usize,
}

fn batch_of<'a>(samples: &[&'a GeneratorSample]) -> Result<(Tensor<f32>, Vec<&'a [f32]>)> {
    let imgs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    Ok((Tensor::stack(&imgs)?, samples.iter().map(|s| s.target.as_slice()).collect()))
}

/// Mean loss over `samples` in inference mode.
pub fn evaluate_loss(
    spec: &GeneratorSpec,
    weights: &WeightStore<f32>,
    samples: &[GeneratorSample],
    loss: LossWeights,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let net = spec.combined();
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let refs: Vec<&GeneratorSample> = chunk.iter().collect();
        let (x, t) = batch_of(&refs)?;
        let y = net.forward(weights, &x, Mode::Inference)?;
        total += generator_loss(&y, &t, loss)?.0.total * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Adam on the generator loss. Returns the weights with the lowest
/// validation loss (the last epoch when `val` is empty).
pub fn train_generator(
    spec: &GeneratorSpec,
    weights: &WeightStore<f32>,
    train: &[GeneratorSample],
    val: &[GeneratorSample],
    cfg: &GeneratorConfig,
) -> Result<(WeightStore<f32>, GeneratorHistory)> {
    spec.validate()?;
    cfg.adam.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be >= 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("generator training set is empty".into()));
    }
    let net = spec.combined();
    net.check_weights(weights)?;
    let (h, w) = spec.size();
    let per = spec.views * 2 * h * w;
    for (i, s) in train.iter().chain(val).enumerate() {
        if s.image.shape() != spec.input_shape() || s.target.len() != per {
            return Err(Error::Data(format!(
                "sample {i}: image {:?} / {} target values do not match the generator ({:?} / {per})",
                s.image.shape(),
                s.target.len(),
                spec.input_shape()
            )));
        }
    }
    let mut weights = weights.clone();
    let trainable = net.trainable_params()?;
    let mut adam = AdamState::new(&weights, trainable.iter().map(String::as_str))?;
    let mut history = GeneratorHistory::default();
    let mut best: Option<(f64, WeightStore<f32>)> = None;
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&GeneratorSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, t) = batch_of(&refs)?;
            let (y, trace) = net.forward_traced(&weights, &x, Mode::Inference, false)?;
            let (parts, g) = generator_loss(&y, &t, cfg.loss)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss: parts.total,
                });
            }
            let grads = net.backward(&weights, trace, g)?;
            adam.step(&mut weights, &grads.params, &cfg.adam)?;
            sum += parts.total * chunk.len() as f64;
            history.steps += 1;
        }
        let loss = sum / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(spec, &weights, val, cfg.loss)?)
        };
        log::info!("generator epoch {}/{}: loss {loss:.5} val {val_loss:?}", epoch + 1, cfg.epochs);
        history.records.push(GeneratorEpoch {
            epoch: epoch + 1,
            loss,
            val_loss,
        });
        let better = match (&best, val_loss) {
            (None, _) | (_, None) => true,
            (Some((b, _)), Some(v)) => v < *b,
        };
        if better {
            best = Some((val_loss.unwrap_or(f64::NAN), weights.clone()));
            history.best_epoch = epoch + 1;
        }
    }
    Ok((best.expect("at least one epoch").1, history))
}

/// Decoder output for one image as a depth map set. A pixel is kept when
/// `sigmoid(logit) > threshold`.
pub fn predict_views(
    spec: &GeneratorSpec,
    weights: &WeightStore<f32>,
    image: &Tensor<f32>,
    threshold: f64,
) -> Result<DepthMapSet> {
    if image.shape() != spec.input_shape() {
        return Err(Error::Dimension(format!(
            "image shape {:?} does not match generator input {:?}",
            image.shape(),
            spec.input_shape()
        )));
    }
    let x = Tensor::new(
        [&[1][..], image.shape()].concat(),
        image.data().to_vec(),
    )?;
    let y = spec.combined().forward(weights, &x, Mode::Inference)?;
    decode_views(spec, y.data(), threshold)
}

/// Splits one `(2V, H, W)` decoder output into views.
pub fn decode_views(spec: &GeneratorSpec, out: &[f32], threshold: f64) -> Result<DepthMapSet> {
    let plane = spec.intrinsics.pixels();
    if out.len() != 2 * spec.views * plane {
        return Err(Error::Dimension(format!("decoder output holds {} values", out.len())));
    }
    let views = spec
        .poses()
        .into_iter()
        .enumerate()
        .map(|(v, pose)| {
            let d = &out[2 * v * plane..(2 * v + 1) * plane];
            let m = &out[(2 * v + 1) * plane..(2 * v + 2) * plane];
            DepthView {
                pose,
                depth: d.to_vec(),
                mask: m.iter().map(|&z| sigmoid(f64::from(z)) > threshold).collect(),
            }
        })
        .collect();
    DepthMapSet::new(views)
}

/// Image to point cloud: predict views, threshold masks, fuse.
pub fn generate(
    spec: &GeneratorSpec,
    weights: &WeightStore<f32>,
    image: &Tensor<f32>,
    threshold: f64,
) -> Result<PointCloud> {
    fuse(&predict_views(spec, weights, image, threshold)?)
}
