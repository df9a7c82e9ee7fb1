//! Data-dependent head initialization.
//!
//! Random, untrained convolutional features share a large common offset,
//! so every head unit sees almost the same pre-activation for every image
//! and training collapses to a constant prediction. Calibration fixes the
//! standardization statistics on the training images, then rescales each
//! dense layer of the head so its pre-activations start centered with unit
//! variance over a calibration batch.

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::nn::{Layer, LayerKind, Mode, Network, Tensor, WeightStore};

/// Variance floor for the standardization scale.
pub const STD_EPS: f64 = 1e-5;
/// Samples used for the dense-layer rescaling.
pub const CALIBRATION_BATCH: usize = 256;
/// Extra factor on the output layer so training starts near uniform
/// class probabilities.
pub const OUTPUT_GAIN: f64 = 0.1;

const CHUNK: usize = 64;

fn forward_chunks(
    net: &Network,
    weights: &WeightStore<f32>,
    samples: &[&LabeledImage],
) -> Result<Vec<Tensor<f32>>> {
    samples
        .chunks(CHUNK)
        .map(|c| {
            let imgs: Vec<&Tensor<f32>> = c.iter().map(|s| &s.pixels).collect();
            net.forward(weights, &Tensor::stack(&imgs)?, Mode::Inference)
        })
        .collect()
}

/// Per-column mean and population variance of row-major blocks.
fn column_stats<'a>(blocks: impl Iterator<Item = &'a Tensor<f32>>, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut sum = vec![0.0f64; cols];
    let mut sq = vec![0.0f64; cols];
    for t in blocks {
        for row in t.data().chunks(cols) {
            n += 1;
            for (j, &v) in row.iter().enumerate() {
                let v = f64::from(v);
                sum[j] += v;
                sq[j] += v * v;
            }
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0))
        .collect();
    (mean, var)
}

fn prefix(net: &Network, end: usize) -> Network {
    Network {
        input_shape: net.input_shape.clone(),
        layers: net.layers[..end].to_vec(),
    }
}

/// Calibrates `weights` on `samples` (normally the training split).
///
/// Sets every `Standardize` layer to the feature mean and inverse standard
/// deviation, then rescales each `Dense` layer after the last one. Without
/// a `Standardize` layer the dense layers after the last `Flatten` are
/// rescaled. Deterministic: the batch is the first
/// [`CALIBRATION_BATCH`] samples in order.
pub fn calibrate_head(
    spec: &ModelSpec,
    weights: &WeightStore<f32>,
    samples: &[&LabeledImage],
) -> Result<WeightStore<f32>> {
    spec.network.check_weights(weights)?;
    if samples.is_empty() {
        return Err(Error::Data("calibration needs at least one sample".into()));
    }
    let net = &spec.network;
    let mut w = weights.clone();
    let layers = &net.layers;

    let norm = layers.iter().rposition(|l| matches!(l.kind, LayerKind::Standardize));
    for (i, layer) in layers.iter().enumerate() {
        if !matches!(layer.kind, LayerKind::Standardize) {
            continue;
        }
        let feats = forward_chunks(&prefix(net, i), &w, samples)?;
        let cols = feats[0].row_len();
        let (mean, var) = column_stats(feats.iter(), cols);
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + STD_EPS).sqrt()).collect();
        set(&mut w, &format!("{}/mean", layer.name), &mean)?;
        set(&mut w, &format!("{}/scale", layer.name), &scale)?;
    }

    let head_start = match norm {
        Some(i) => i + 1,
        None => layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Flatten))
            .map_or(0, |i| i + 1),
    };
    let last_dense = layers.iter().rposition(|l| matches!(l.kind, LayerKind::Dense { .. }));
    let batch = &samples[..samples.len().min(CALIBRATION_BATCH)];
    let mut h = forward_chunks(&prefix(net, head_start), &w, batch)?;
    for (i, layer) in layers.iter().enumerate().skip(head_start) {
        if let LayerKind::Dense { .. } = layer.kind {
            let single = single_layer(layer, h[0].shape()[1..].to_vec());
            let z: Vec<Tensor<f32>> = h
                .iter()
                .map(|x| single.forward(&w, x, Mode::Inference))
                .collect::<Result<_>>()?;
            let cols = z[0].row_len();
            let (mean, var) = column_stats(z.iter(), cols);
            let gain = if Some(i) == last_dense { OUTPUT_GAIN } else { 1.0 };
            rescale_dense(&mut w, layer, &mean, &var, gain)?;
        }
        let single = single_layer(layer, h[0].shape()[1..].to_vec());
        h = h
            .iter()
            .map(|x| single.forward(&w, x, Mode::Inference))
            .collect::<Result<_>>()?;
    }
    Ok(w)
}

fn single_layer(layer: &Layer, input_shape: Vec<usize>) -> Network {
    Network {
        input_shape,
        layers: vec![layer.clone()],
    }
}

fn set(w: &mut WeightStore<f32>, name: &str, values: &[f64]) -> Result<()> {
    let t = w.require_mut(name)?;
    for (d, &v) in t.data_mut().iter_mut().zip(values) {
        *d = v as f32;
    }
    Ok(())
}

/// Column `k` of the `[in, out]` matrix and bias `k` are mapped so unit `k`
/// outputs `gain * (z - mean) / std`.
fn rescale_dense(
    w: &mut WeightStore<f32>,
    layer: &Layer,
    mean: &[f64],
    var: &[f64],
    gain: f64,
) -> Result<()> {
    let factor: Vec<f64> = var.iter().map(|v| gain / (v + STD_EPS).sqrt()).collect();
    let out = factor.len();
    for row in w.require_mut(&layer.kernel_name())?.data_mut().chunks_mut(out) {
        for (x, f) in row.iter_mut().zip(&factor) {
            *x = (f64::from(*x) * f) as f32;
        }
    }
    let b = w.require_mut(&layer.bias_name())?;
    for (k, x) in b.data_mut().iter_mut().enumerate() {
        *x = ((f64::from(*x) - mean[k]) * factor[k]) as f32;
    }
    Ok(())
}
