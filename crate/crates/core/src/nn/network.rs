use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::ops;
use crate::nn::{Tensor, WeightStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LayerKind {
    Conv2D {
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    },
    MaxPool2D {
        window: usize,
        stride: usize,
    },
    ReLU,
    Flatten,
    Dense {
        out_features: usize,
    },
    Dropout {
        rate: f32,
    },
    Softmax,
    /// Reinterprets the per-sample shape; used by decoders going from a
    /// dense code back to feature maps.
    Reshape {
        shape: Vec<usize>,
    },
    /// Nearest-neighbour upsampling by an integer factor.
    Upsample2D {
        factor: usize,
    },
    /// Fixed per-feature affine map `(x - mean) * scale`. Its two vectors
    /// are statistics set from data, never trained.
    Standardize,
}

impl LayerKind {
    pub fn conv3x3(out_channels: usize) -> Self {
        LayerKind::Conv2D {
            out_channels,
            kernel: [3, 3],
            stride: 1,
            padding: 1,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2D { .. } | LayerKind::Dense { .. } | LayerKind::Standardize
        )
    }

    /// Whether the parameters, if any, are updated by training.
    pub fn learns(&self) -> bool {
        matches!(self, LayerKind::Conv2D { .. } | LayerKind::Dense { .. })
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerKind::Conv2D {
                out_channels,
                kernel,
                stride,
                ..
            } => *out_channels >= 1 && kernel[0] >= 1 && kernel[1] >= 1 && *stride >= 1,
            LayerKind::MaxPool2D { window, stride } => *window >= 1 && *stride >= 1,
            LayerKind::Dense { out_features } => *out_features >= 1,
            LayerKind::Dropout { rate } => (0.0..1.0).contains(rate),
            LayerKind::Reshape { shape } => shape.iter().all(|&d| d >= 1),
            LayerKind::Upsample2D { factor } => *factor >= 1,
            LayerKind::ReLU | LayerKind::Flatten | LayerKind::Softmax | LayerKind::Standardize => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid layer parameters: {self:?}")))
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let spatial = |what: &str| -> Result<[usize; 3]> {
            match *input {
                [c, h, w] => Ok([c, h, w]),
                _ => Err(dim_err!("{what} expects C x H x W input, got {input:?}")),
            }
        };
        Ok(match self {
            LayerKind::Conv2D {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [_, h, w] = spatial("conv2d")?;
                let oh = ops::window_out(h, kernel[0], *stride, *padding)
                    .ok_or_else(|| dim_err!("conv2d height axis: {h} too small for kernel"))?;
                let ow = ops::window_out(w, kernel[1], *stride, *padding)
                    .ok_or_else(|| dim_err!("conv2d width axis: {w} too small for kernel"))?;
                vec![*out_channels, oh, ow]
            }
            LayerKind::MaxPool2D { window, stride } => {
                let [c, h, w] = spatial("maxpool")?;
                let oh = ops::window_out(h, *window, *stride, 0)
                    .ok_or_else(|| dim_err!("maxpool height axis: window {window} exceeds {h}"))?;
                let ow = ops::window_out(w, *window, *stride, 0)
                    .ok_or_else(|| dim_err!("maxpool width axis: window {window} exceeds {w}"))?;
                vec![c, oh, ow]
            }
            LayerKind::Upsample2D { factor } => {
                let [c, h, w] = spatial("upsample")?;
                vec![c, h * factor, w * factor]
            }
            LayerKind::ReLU | LayerKind::Dropout { .. } | LayerKind::Standardize => input.to_vec(),
            LayerKind::Flatten => vec![input.iter().product()],
            LayerKind::Dense { out_features } => match *input {
                [_] => vec![*out_features],
                _ => return Err(dim_err!("dense expects a flat input, got {input:?}")),
            },
            LayerKind::Softmax => match *input {
                [c] if c >= 2 => vec![c],
                _ => return Err(dim_err!("softmax expects a flat input of >= 2 classes, got {input:?}")),
            },
            LayerKind::Reshape { shape } => {
                let from: usize = input.iter().product();
                let to: usize = shape.iter().product();
                if from != to {
                    return Err(dim_err!("reshape {input:?} -> {shape:?} changes element count"));
                }
                shape.clone()
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub frozen: bool,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            frozen: false,
        }
    }

    pub fn trainable(&self) -> bool {
        self.kind.learns() && !self.frozen
    }

    /// Names and shapes of this layer's parameters given its input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Result<Vec<(String, Vec<usize>)>> {
        Ok(match &self.kind {
            LayerKind::Conv2D {
                out_channels,
                kernel,
                ..
            } => {
                let c = *input
                    .first()
                    .ok_or_else(|| dim_err!("conv2d {} has no input channels", self.name))?;
                vec![
                    (self.kernel_name(), vec![*out_channels, c, kernel[0], kernel[1]]),
                    (self.bias_name(), vec![*out_channels]),
                ]
            }
            LayerKind::Dense { out_features } => {
                let f: usize = input.iter().product();
                vec![
                    (self.kernel_name(), vec![f, *out_features]),
                    (self.bias_name(), vec![*out_features]),
                ]
            }
            LayerKind::Standardize => {
                let f: usize = input.iter().product();
                vec![
                    (format!("{}/mean", self.name), vec![f]),
                    (format!("{}/scale", self.name), vec![f]),
                ]
            }
            _ => Vec::new(),
        })
    }

    pub fn kernel_name(&self) -> String {
        match self.kind {
            LayerKind::Conv2D { .. } => format!("{}/kernel", self.name),
            _ => format!("{}/weights", self.name),
        }
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }
}

/// Parameter names ending in one of these are weight matrices or kernels
/// rather than biases.
pub fn is_weight_param(name: &str) -> bool {
    name.ends_with("/kernel") || name.ends_with("/weights")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub fan_in: usize,
}

/// Execution mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Inference,
    Train(&'a mut dyn RngCore),
}

enum Cached<T> {
    None,
    Input(Tensor<T>),
    Shape(Vec<usize>),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Mask(Vec<T>),
    Output(Tensor<T>),
}

/// Intermediate values recorded by [`Network::forward_traced`].
pub struct Trace<T> {
    start: usize,
    cached: Vec<Cached<T>>,
    track_input_grad: bool,
}

pub struct Gradients<T> {
    pub params: WeightStore<T>,
    pub input: Option<Tensor<T>>,
}

/// An ordered stack of layers over a fixed per-sample input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(input_shape: impl Into<Vec<usize>>) -> Self {
        Self {
            input_shape: input_shape.into(),
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind) -> &mut Self {
        self.layers.push(Layer::new(name, kind));
        self
    }

    /// Output shape of every layer, checking that consecutive shapes compose.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(dim_err!("invalid input shape {:?}", self.input_shape));
        }
        let mut names = std::collections::HashSet::new();
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if layer.kind.has_params() && !names.insert(layer.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name {:?}", layer.name)));
            }
            cur = layer
                .kind
                .output_shape(&cur)
                .map_err(|e| match e {
                    Error::Dimension(m) => dim_err!("layer {}: {m}", layer.name),
                    other => other,
                })?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .shapes()?
            .pop()
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn params(&self) -> Result<Vec<ParamInfo>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { &self.input_shape } else { &shapes[i - 1] };
            let fan_in = match layer.kind {
                LayerKind::Conv2D { kernel, .. } => input[0] * kernel[0] * kernel[1],
                _ => input.iter().product(),
            };
            for (name, shape) in layer.param_shapes(input)? {
                out.push(ParamInfo {
                    name,
                    shape,
                    trainable: layer.trainable(),
                    fan_in,
                });
            }
        }
        Ok(out)
    }

    pub fn trainable_params(&self) -> Result<Vec<String>> {
        Ok(self
            .params()?
            .into_iter()
            .filter(|p| p.trainable)
            .map(|p| p.name)
            .collect())
    }

    /// Every parameter present with the right shape, and nothing extra.
    pub fn check_weights<T: Scalar>(&self, weights: &WeightStore<T>) -> Result<()> {
        let params = self.params()?;
        for p in &params {
            let t = weights.require(&p.name)?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Consistency(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                )));
            }
        }
        if weights.len() != params.len() {
            let extra: Vec<_> = weights
                .names()
                .filter(|n| !params.iter().any(|p| p.name == *n))
                .collect();
            return Err(Error::Consistency(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    /// He-uniform kernels (`U(±sqrt(6 / fan_in))`), zero biases, identity
    /// standardization.
    pub fn init_weights<T: Scalar>(&self, seed: u64) -> Result<WeightStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for p in self.params()? {
            let n: usize = p.shape.iter().product();
            let data = if is_weight_param(&p.name) {
                let bound = (6.0 / p.fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::of(rng.random_range(-bound..bound)))
                    .collect()
            } else if p.name.ends_with("/scale") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            store.insert(p.name, Tensor::new(p.shape, data)?)?;
        }
        Ok(store)
    }

    fn first_trainable(&self) -> Option<usize> {
        self.layers.iter().position(Layer::trainable)
    }

    fn check_input<T: Scalar>(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().len() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..]
        {
            return Err(dim_err!(
                "input batch shape {:?} does not match N x {:?}",
                input.shape(),
                self.input_shape
            ));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        weights: &WeightStore<T>,
        input: &Tensor<T>,
        mode: Mode<'_>,
    ) -> Result<Tensor<T>> {
        let (out, _) = self.run(weights, input, mode, None)?;
        Ok(out)
    }

    /// Forward pass that records what [`Network::backward`] needs. With
    /// `track_input_grad` the backward pass also returns the input gradient;
    /// otherwise it stops at the first trainable layer.
    pub fn forward_traced<T: Scalar>(
        &self,
        weights: &WeightStore<T>,
        input: &Tensor<T>,
        mode: Mode<'_>,
        track_input_grad: bool,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        let start = if track_input_grad {
            0
        } else {
            self.first_trainable().unwrap_or(self.layers.len())
        };
        let (out, cached) = self.run(weights, input, mode, Some(start))?;
        Ok((
            out,
            Trace {
                start,
                cached: cached.expect("tracing requested"),
                track_input_grad,
            },
        ))
    }

    fn run<T: Scalar>(
        &self,
        weights: &WeightStore<T>,
        input: &Tensor<T>,
        mut mode: Mode<'_>,
        trace_from: Option<usize>,
    ) -> Result<(Tensor<T>, Option<Vec<Cached<T>>>)> {
        self.check_input(input)?;
        let mut cache: Option<Vec<Cached<T>>> = trace_from.map(|_| Vec::new());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let keep = trace_from.is_some_and(|s| i >= s);
            let n = x.shape()[0];
            let (y, c) = match &layer.kind {
                LayerKind::Conv2D {
                    stride, padding, ..
                } => {
                    let k = weights.require(&layer.kernel_name())?;
                    let b = weights.require(&layer.bias_name())?;
                    let y = ops::conv2d_forward(&x, k, b, *stride, *padding)?;
                    (y, if keep { Cached::Input(x) } else { Cached::None })
                }
                LayerKind::Dense { .. } => {
                    let w = weights.require(&layer.kernel_name())?;
                    let b = weights.require(&layer.bias_name())?;
                    let y = ops::dense_forward(&x, w, b)?;
                    (y, if keep { Cached::Input(x) } else { Cached::None })
                }
                LayerKind::MaxPool2D { window, stride } => {
                    let (y, argmax) = ops::maxpool2d_forward(&x, *window, *stride)?;
                    let c = if keep {
                        Cached::Pool {
                            input_shape: x.shape().to_vec(),
                            argmax,
                        }
                    } else {
                        Cached::None
                    };
                    (y, c)
                }
                LayerKind::ReLU => {
                    let y = ops::relu_forward(&x);
                    (y, if keep { Cached::Input(x) } else { Cached::None })
                }
                LayerKind::Dropout { rate } => match &mut mode {
                    Mode::Train(rng) if *rate > 0.0 => {
                        let (y, mask) = ops::dropout_forward(&x, *rate, &mut **rng);
                        (y, if keep { Cached::Mask(mask) } else { Cached::None })
                    }
                    _ => (x, Cached::None),
                },
                LayerKind::Softmax => {
                    let y = ops::softmax(&x)?;
                    let c = if keep { Cached::Output(y.clone()) } else { Cached::None };
                    (y, c)
                }
                LayerKind::Flatten | LayerKind::Reshape { .. } => {
                    let mut shape = vec![n];
                    shape.extend(layer.kind.output_shape(&x.shape()[1..])?);
                    let in_shape = x.shape().to_vec();
                    let y = x.reshape(shape)?;
                    (y, if keep { Cached::Shape(in_shape) } else { Cached::None })
                }
                LayerKind::Standardize => {
                    let mean = weights.require(&format!("{}/mean", layer.name))?;
                    let scale = weights.require(&format!("{}/scale", layer.name))?;
                    let y = ops::standardize_forward(&x, mean, scale)?;
                    (y, Cached::None)
                }
                LayerKind::Upsample2D { factor } => {
                    let y = ops::upsample2d_forward(&x, *factor)?;
                    (y, if keep { Cached::Shape(x.shape().to_vec()) } else { Cached::None })
                }
            };
            if let Some(cache) = cache.as_mut() {
                cache.push(c);
            }
            x = y;
        }
        Ok((x, cache))
    }

    /// Backpropagates `grad_out` (gradient of the loss with respect to the
    /// network output). Frozen layers receive no gradient entry.
    pub fn backward<T: Scalar>(
        &self,
        weights: &WeightStore<T>,
        trace: Trace<T>,
        grad_out: Tensor<T>,
    ) -> Result<Gradients<T>> {
        let mut params = WeightStore::new();
        let Trace {
            start,
            mut cached,
            track_input_grad,
        } = trace;
        let first_trainable = self.first_trainable();
        let mut g = grad_out;
        for i in (start..self.layers.len()).rev() {
            let layer = &self.layers[i];
            // Input gradient is needed if anything upstream still wants it.
            let need_dx =
                track_input_grad || first_trainable.is_some_and(|f| f < i);
            let entry = std::mem::replace(&mut cached[i], Cached::None);
            g = match (&layer.kind, entry) {
                (LayerKind::Conv2D { stride, padding, .. }, Cached::Input(x)) => {
                    let k = weights.require(&layer.kernel_name())?;
                    let (dx, dk, db) =
                        ops::conv2d_backward(&x, k, &g, *stride, *padding, need_dx)?;
                    if !layer.frozen {
                        params.insert(layer.kernel_name(), dk)?;
                        params.insert(layer.bias_name(), db)?;
                    }
                    match dx {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (LayerKind::Dense { .. }, Cached::Input(x)) => {
                    let w = weights.require(&layer.kernel_name())?;
                    let (dx, dw, db) = ops::dense_backward(&x, w, &g, need_dx)?;
                    if !layer.frozen {
                        params.insert(layer.kernel_name(), dw)?;
                        params.insert(layer.bias_name(), db)?;
                    }
                    match dx {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (LayerKind::MaxPool2D { .. }, Cached::Pool { input_shape, argmax }) => {
                    ops::maxpool2d_backward(&input_shape, &argmax, &g)?
                }
                (LayerKind::ReLU, Cached::Input(x)) => ops::relu_backward(&x, &g),
                (LayerKind::Dropout { .. }, Cached::Mask(mask)) => {
                    let d = g.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                    Tensor::new(g.shape().to_vec(), d)?
                }
                (LayerKind::Dropout { .. }, Cached::None) => g,
                (LayerKind::Softmax, Cached::Output(y)) => ops::softmax_backward(&y, &g)?,
                (LayerKind::Flatten | LayerKind::Reshape { .. }, Cached::Shape(s)) => g.reshape(s)?,
                (LayerKind::Upsample2D { factor }, Cached::Shape(s)) => {
                    ops::upsample2d_backward(&s, *factor, &g)?
                }
                (LayerKind::Standardize, _) => {
                    let scale = weights.require(&format!("{}/scale", layer.name))?;
                    ops::standardize_backward(scale, &g)?
                }
                (kind, _) => {
                    return Err(Error::Consistency(format!(
                        "trace for layer {} ({kind:?}) is missing",
                        layer.name
                    )))
                }
            };
            if i == start && !track_input_grad {
                break;
            }
        }
        Ok(Gradients {
            params,
            input: if track_input_grad && start == 0 { Some(g) } else { None },
        })
    }

    /// Softmax cross-entropy training step: forward in train mode, loss,
    /// and parameter gradients. The network must end in `Softmax`; its
    /// gradient is fused with the loss as `(p - onehot) / N`.
    pub fn backprop<T: Scalar>(
        &self,
        weights: &WeightStore<T>,
        inputs: &Tensor<T>,
        labels: &[usize],
        rng: &mut dyn RngCore,
    ) -> Result<(T, WeightStore<T>)> {
        let last = self.layers.len().checked_sub(1).filter(|&i| {
            matches!(self.layers[i].kind, LayerKind::Softmax)
        });
        let Some(last) = last else {
            return Err(Error::Config("backprop needs a network ending in Softmax".into()));
        };
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(dim_err!(
                "{} labels for an input batch of shape {:?}",
                labels.len(),
                inputs.shape()
            ));
        }
        let (probs, mut trace) = self.forward_traced(weights, inputs, Mode::Train(rng), false)?;
        let loss = ops::cross_entropy_loss(&probs, labels)?;
        if trace.start > last {
            return Ok((loss, WeightStore::new()));
        }
        let grad_logits = ops::softmax_cross_entropy_grad(&probs, labels)?;
        // Skip the softmax layer itself: its gradient is already folded in.
        let head = Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers[..last].to_vec(),
        };
        trace.cached.truncate(last);
        let grads = head.backward(weights, trace, grad_logits)?;
        Ok((loss, grads.params))
    }
}
