//! VGG-style classifier construction, the five-layer dense transfer head,
//! inference, and the weight file format.

pub mod format;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{LayerKind, Mode, Network, Tensor, WeightStore};
use crate::scalar::Scalar;

pub use format::{load_weights, save_weights};

/// Class table used throughout: index 0 is the positive class.
pub const CLASS_NAMES: [&str; 2] = ["parasitized", "uninfected"];
pub const PARASITIZED: usize = 0;
pub const UNINFECTED: usize = 1;

/// Architecture file stored next to a weight file: `W.e2ew` -> `W.e2ew.spec.json`.
pub fn spec_sidecar(weights: impl AsRef<std::path::Path>) -> std::path::PathBuf {
    let mut s = weights.as_ref().as_os_str().to_owned();
    s.push(".spec.json");
    s.into()
}

pub const DEFAULT_HEAD_WIDTHS: [usize; 5] = [512, 256, 128, 64, 2];
pub const HEAD_DROPOUT: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Canonical 16-conv VGG-19 feature stack.
    Full,
    /// Three-block reduction for CPU-sized runs.
    Mini,
}

impl Scale {
    fn blocks(self) -> &'static [(usize, usize)] {
        // (convs per block, channels)
        match self {
            Scale::Full => &[(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)],
            Scale::Mini => &[(1, 16), (1, 32), (2, 64)],
        }
    }

    pub fn default_input(self) -> [usize; 3] {
        match self {
            Scale::Full => [3, 224, 224],
            Scale::Mini => [3, 64, 64],
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "mini" => Ok(Scale::Mini),
            other => Err(Error::Config(format!("unknown scale {other:?}"))),
        }
    }
}

/// A classifier architecture: layer stack plus class table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub network: Network,
    pub classes: Vec<String>,
}

impl ModelSpec {
    pub fn input_shape(&self) -> &[usize] {
        &self.network.input_shape
    }

    fn has_head(&self) -> bool {
        self.network.layers.iter().any(|l| {
            matches!(
                l.kind,
                LayerKind::Flatten | LayerKind::Dense { .. } | LayerKind::Softmax
            )
        })
    }

    /// Shape composition plus the classifier invariants: a single terminal
    /// softmax over at least two classes.
    pub fn validate(&self) -> Result<()> {
        let out = self.network.output_shape()?;
        if self.classes.len() < 2 {
            return Err(Error::Config("class table needs at least 2 entries".into()));
        }
        let softmaxes = self
            .network
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Softmax))
            .count();
        let terminal = self
            .network
            .layers
            .last()
            .is_some_and(|l| matches!(l.kind, LayerKind::Softmax));
        if softmaxes != 1 || !terminal {
            return Err(Error::Config("classifier must end in exactly one Softmax".into()));
        }
        if out != [self.classes.len()] {
            return Err(Error::Config(format!(
                "output shape {out:?} does not match {} classes",
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn frozen_params(&self) -> Result<Vec<String>> {
        Ok(self
            .network
            .params()?
            .into_iter()
            .filter(|p| !p.trainable)
            .map(|p| p.name)
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
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

/// Builds the convolutional feature stack: 3x3 same-padded convs, each
/// followed by ReLU, and a 2x2/2 max-pool closing every block.
pub fn build_vgg19(input: [usize; 3], scale: Scale) -> Result<ModelSpec> {
    let blocks = scale.blocks();
    let div = 1usize << blocks.len();
    let [c, h, w] = input;
    if c == 0 || h == 0 || w == 0 || h % div != 0 || w % div != 0 {
        return Err(Error::Config(format!(
            "{scale:?} input {h}x{w} must have spatial dims divisible by {div}"
        )));
    }
    let mut net = Network::new(input.to_vec());
    for (b, &(convs, channels)) in blocks.iter().enumerate() {
        for i in 1..=convs {
            net.push(format!("conv{}_{i}", b + 1), LayerKind::conv3x3(channels))
                .push(format!("relu{}_{i}", b + 1), LayerKind::ReLU);
        }
        net.push(
            format!("pool{}", b + 1),
            LayerKind::MaxPool2D { window: 2, stride: 2 },
        );
    }
    Ok(ModelSpec {
        network: net,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Appends Flatten, a fixed feature standardization, five Dense layers
/// (ReLU + dropout after the first four), and a Softmax. With `freeze_features` every existing layer is frozen.
pub fn append_transfer_head(
    mut spec: ModelSpec,
    widths: &[usize],
    freeze_features: bool,
) -> Result<ModelSpec> {
    if spec.has_head() {
        return Err(Error::Config("spec already has a classification head".into()));
    }
    if widths.len() != 5 {
        return Err(Error::Config(format!(
            "transfer head needs exactly 5 dense widths, got {}",
            widths.len()
        )));
    }
    if widths[4] != spec.classes.len() {
        return Err(Error::Config(format!(
            "final head width {} does not match {} classes",
            widths[4],
            spec.classes.len()
        )));
    }
    if freeze_features {
        for l in &mut spec.network.layers {
            l.frozen = true;
        }
    }
    let net = &mut spec.network;
    net.push("flatten", LayerKind::Flatten)
        .push("feature_norm", LayerKind::Standardize);
    for (i, &width) in widths.iter().enumerate() {
        let n = i + 1;
        net.push(format!("fc{n}"), LayerKind::Dense { out_features: width });
        if n < 5 {
            net.push(format!("fc{n}_relu"), LayerKind::ReLU).push(
                format!("fc{n}_dropout"),
                LayerKind::Dropout { rate: HEAD_DROPOUT },
            );
        }
    }
    net.push("softmax", LayerKind::Softmax);
    spec.validate()?;
    Ok(spec)
}

/// The default desk-scale classifier: mini features, frozen, default head.
pub fn default_classifier(scale: Scale) -> Result<ModelSpec> {
    append_transfer_head(
        build_vgg19(scale.default_input(), scale)?,
        &DEFAULT_HEAD_WIDTHS,
        true,
    )
}

/// Softmax cross-entropy loss and gradients of the trainable parameters.
pub fn backprop<T: Scalar>(
    spec: &ModelSpec,
    weights: &WeightStore<T>,
    inputs: &Tensor<T>,
    labels: &[usize],
    rng: &mut dyn RngCore,
) -> Result<(T, WeightStore<T>)> {
    spec.network.backprop(weights, inputs, labels, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub label: String,
    pub confidence: f32,
    pub model_version: String,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// A loaded, immutable classifier.
#[derive(Clone, Debug)]
pub struct Classifier {
    spec: ModelSpec,
    weights: WeightStore<f32>,
    version: String,
}

impl Classifier {
    pub fn new(spec: ModelSpec, weights: WeightStore<f32>, version: impl Into<String>) -> Result<Self> {
        spec.validate()?;
        spec.network.check_weights(&weights)?;
        Ok(Self {
            spec,
            weights,
            version: version.into(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &WeightStore<f32> {
        &self.weights
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Class probabilities for a batch N x C x H x W.
    pub fn probabilities(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.spec.network.forward(&self.weights, batch, Mode::Inference)
    }

    /// `(class index, probability)` per sample.
    pub fn classify_batch(&self, batch: &Tensor<f32>) -> Result<Vec<(usize, f32)>> {
        let probs = self.probabilities(batch)?;
        Ok((0..probs.shape()[0])
            .map(|i| {
                let row = probs.row(i);
                let k = argmax(row);
                (k, row[k])
            })
            .collect())
    }

    pub fn predict(&self, image: &Tensor<f32>) -> Result<Diagnosis> {
        if image.shape() != self.spec.input_shape() {
            return Err(dim_err!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                self.spec.input_shape()
            ));
        }
        let batch = Tensor::stack(&[image])?;
        let (k, p) = self.classify_batch(&batch)?[0];
        Ok(Diagnosis {
            label: self.spec.classes[k].clone(),
            confidence: p,
            model_version: self.version.clone(),
        })
    }
}

/// One-shot inference without building a [`Classifier`].
pub fn predict(
    spec: &ModelSpec,
    weights: &WeightStore<f32>,
    image: &Tensor<f32>,
    model_version: &str,
) -> Result<Diagnosis> {
    Classifier::new(spec.clone(), weights.clone(), model_version)?.predict(image)
}
