//! Forward and backward kernels for the fixed layer set.
//!
//! All image tensors are NCHW. Convolution is cross-correlation with
//! symmetric zero padding, lowered onto `gemm` through an im2col buffer.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Floor applied to probabilities before taking a log.
pub const LOG_CLAMP: f64 = 1e-12;

fn nchw(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(dim_err!("{what} must be NCHW, got shape {s:?}")),
    }
}

fn matrix(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 2]> {
    match *t.shape() {
        [r, c] => Ok([r, c]),
        ref s => Err(dim_err!("{what} must be 2-D, got shape {s:?}")),
    }
}

/// Output extent of a sliding window, or `None` when the window does not fit.
pub fn window_out(size: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if window == 0 || stride == 0 || padded < window {
        None
    } else {
        Some((padded - window) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols_len(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.cols_len();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.padding as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.padding as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.cols_len();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + j) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let [n, c, h, w] = nchw(input, "conv2d input")?;
    let [o, ki, kh, kw] = match *kernel.shape() {
        [o, i, kh, kw] => [o, i, kh, kw],
        ref s => return Err(dim_err!("conv2d kernel must be OIKK, got shape {s:?}")),
    };
    if ki != c {
        return Err(dim_err!(
            "conv2d channel axis: input has {c} channels but kernel expects {ki}"
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    let oh = window_out(h, kh, stride, padding).ok_or_else(|| {
        dim_err!("conv2d height axis: {h} + 2*{padding} padding is smaller than kernel {kh}")
    })?;
    let ow = window_out(w, kw, stride, padding).ok_or_else(|| {
        dim_err!("conv2d width axis: {w} + 2*{padding} padding is smaller than kernel {kw}")
    })?;
    Ok((
        n,
        o,
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        },
    ))
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, o, g) = conv_geom(input, kernel, stride, padding)?;
    if bias.shape() != [o] {
        return Err(dim_err!(
            "conv2d bias must have shape [{o}], got {:?}",
            bias.shape()
        ));
    }
    let k = g.cols_rows();
    let p = g.cols_len();
    let mut out = vec![T::zero(); n * o * p];
    let mut cols = vec![T::zero(); k * p];
    let in_len = g.c * g.h * g.w;
    for b in 0..n {
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        let y = &mut out[b * o * p..(b + 1) * o * p];
        for (oc, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[oc]);
        }
        g.im2col(x, &mut cols);
        T::gemm(o, k, p, T::one(), kernel.data(), (k, 1), &cols, (p, 1), T::one(), y, (p, 1));
    }
    Tensor::new(vec![n, o, g.oh, g.ow], out)
}

/// Gradients of a convolution. Returns `(d_input, d_kernel, d_bias)`; the
/// input gradient is skipped unless requested.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    want_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, o, g) = conv_geom(input, kernel, stride, padding)?;
    if grad_out.shape() != [n, o, g.oh, g.ow] {
        return Err(dim_err!(
            "conv2d output gradient shape {:?} does not match {:?}",
            grad_out.shape(),
            [n, o, g.oh, g.ow]
        ));
    }
    let k = g.cols_rows();
    let p = g.cols_len();
    let in_len = g.c * g.h * g.w;
    let mut dk = vec![T::zero(); o * k];
    let mut db = vec![T::zero(); o];
    let mut dx = want_input_grad.then(|| vec![T::zero(); n * in_len]);
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];
    for b in 0..n {
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        let dy = &grad_out.data()[b * o * p..(b + 1) * o * p];
        for (oc, row) in dy.chunks_exact(p).enumerate() {
            db[oc] += row.iter().copied().sum::<T>();
        }
        g.im2col(x, &mut cols);
        // dK[o, k] += dY[o, p] * cols[k, p]^T
        T::gemm(o, p, k, T::one(), dy, (p, 1), &cols, (1, p), T::one(), &mut dk, (k, 1));
        if let Some(dx) = dx.as_mut() {
            // dcols[k, p] = K[o, k]^T * dY[o, p]
            T::gemm(k, o, p, T::one(), kernel.data(), (1, k), dy, (p, 1), T::zero(), &mut dcols, (p, 1));
            g.col2im(&dcols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    let dx = dx
        .map(|d| Tensor::new(input.shape().to_vec(), d))
        .transpose()?;
    Ok((
        dx,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![o], db)?,
    ))
}

/// Max pooling without padding. Returns the pooled tensor and, for every
/// output cell, the flat index into the input of the winning element.
/// Ties go to the first element in row-major scan order.
pub fn maxpool2d_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = nchw(input, "maxpool input")?;
    if stride == 0 {
        return Err(Error::Config("maxpool stride must be >= 1".into()));
    }
    let oh = window_out(h, window, stride, 0)
        .ok_or_else(|| dim_err!("maxpool height axis: window {window} exceeds {h}"))?;
    let ow = window_out(w, window, stride, 0)
        .ok_or_else(|| dim_err!("maxpool width axis: window {window} exceeds {w}"))?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut best_v = x[best];
                for i in 0..window {
                    let row = base + (oy * stride + i) * w + ox * stride;
                    for (j, &v) in x[row..row + window].iter().enumerate() {
                        if v > best_v {
                            best_v = v;
                            best = row + j;
                        }
                    }
                }
                out.push(best_v);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, idx))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(dim_err!(
            "maxpool gradient has {} cells but the index map has {}",
            grad_out.len(),
            argmax.len()
        ));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, f] = matrix(input, "dense input")?;
    let [wf, g] = matrix(weights, "dense weights")?;
    if wf != f {
        return Err(dim_err!(
            "dense inner axis: input has {f} features but weights expect {wf}"
        ));
    }
    if bias.shape() != [g] {
        return Err(dim_err!(
            "dense bias must have shape [{g}], got {:?}",
            bias.shape()
        ));
    }
    let mut out = Vec::with_capacity(n * g);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(n, f, g, T::one(), input.data(), (f, 1), weights.data(), (g, 1), T::one(), &mut out, (g, 1));
    Tensor::new(vec![n, g], out)
}

/// Returns `(d_input, d_weights, d_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let [n, f] = matrix(input, "dense input")?;
    let [_, g] = matrix(weights, "dense weights")?;
    if grad_out.shape() != [n, g] {
        return Err(dim_err!(
            "dense output gradient shape {:?} does not match [{n}, {g}]",
            grad_out.shape()
        ));
    }
    let dy = grad_out.data();
    let mut dw = vec![T::zero(); f * g];
    T::gemm(f, n, g, T::one(), input.data(), (1, f), dy, (g, 1), T::zero(), &mut dw, (g, 1));
    let mut db = vec![T::zero(); g];
    for row in dy.chunks_exact(g) {
        for (b, &v) in db.iter_mut().zip(row) {
            *b += v;
        }
    }
    let dx = if want_input_grad {
        let mut dx = vec![T::zero(); n * f];
        T::gemm(n, g, f, T::one(), dy, (g, 1), weights.data(), (1, g), T::zero(), &mut dx, (f, 1));
        Some(Tensor::new(vec![n, f], dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(vec![f, g], dw)?, Tensor::new(vec![g], db)?))
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu shapes agree")
}

/// Row-wise softmax over the last axis of an N x C tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c] = matrix(logits, "softmax input")?;
    if c < 2 {
        return Err(dim_err!("softmax needs at least 2 classes, got {c}"));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c] = matrix(probs, "softmax output")?;
    let mut dx = Vec::with_capacity(probs.len());
    for (y, dy) in probs.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
        dx.extend(y.iter().zip(dy).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(probs.shape().to_vec(), dx)
}

/// Mean negative log-likelihood of the true classes.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let [n, c] = matrix(probs, "cross-entropy probabilities")?;
    if labels.len() != n {
        return Err(dim_err!("{} labels for a batch of {n}", labels.len()));
    }
    let floor = T::of(LOG_CLAMP);
    let mut total = T::zero();
    for (row, &label) in probs.data().chunks_exact(c).zip(labels) {
        if label >= c {
            return Err(Error::Index(format!("label {label} outside [0, {c})")));
        }
        total -= row[label].max(floor).ln();
    }
    Ok(total / T::of(n as f64))
}

/// Gradient of mean cross-entropy with respect to the logits that produced
/// `probs` through a softmax: `(p - onehot) / N`.
pub fn softmax_cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let [n, c] = matrix(probs, "cross-entropy probabilities")?;
    if labels.len() != n {
        return Err(dim_err!("{} labels for a batch of {n}", labels.len()));
    }
    let scale = T::one() / T::of(n as f64);
    let mut g = probs.data().to_vec();
    for (row, &label) in g.chunks_exact_mut(c).zip(labels) {
        if label >= c {
            return Err(Error::Index(format!("label {label} outside [0, {c})")));
        }
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::new(probs.shape().to_vec(), g)
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
/// Returns the output together with the per-element multiplier.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f32,
    rng: &mut R,
) -> (Tensor<T>, Vec<T>) {
    if rate <= 0.0 {
        return (input.clone(), vec![T::one(); input.len()]);
    }
    let keep = 1.0 - f64::from(rate);
    let scale = T::of(1.0 / keep);
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
        .collect();
    let out = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    (
        Tensor::new(input.shape().to_vec(), out).expect("dropout shapes agree"),
        mask,
    )
}

pub fn upsample2d_forward<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw(input, "upsample input")?;
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..][..w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample2d_backward<T: Scalar>(
    input_shape: &[usize],
    factor: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = match *input_shape {
        [n, c, h, w] => [n, c, h, w],
        ref s => return Err(dim_err!("upsample input must be NCHW, got {s:?}")),
    };
    let ow = w * factor;
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &dy[plane * h * w * factor * factor..];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..h * factor {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

fn check_features<T: Scalar>(x: &Tensor<T>, stats: &Tensor<T>, what: &str) -> Result<usize> {
    let f = x.row_len();
    if stats.len() != f {
        return Err(dim_err!("{what} has {} entries for {f} features", stats.len()));
    }
    Ok(f)
}

/// `(x - mean) * scale` per feature of each sample.
pub fn standardize_forward<T: Scalar>(x: &Tensor<T>, mean: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let f = check_features(x, mean, "standardize mean")?;
    check_features(x, scale, "standardize scale")?;
    let (m, s) = (mean.data(), scale.data());
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - m[i % f]) * s[i % f])
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn standardize_backward<T: Scalar>(scale: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let f = check_features(grad_out, scale, "standardize scale")?;
    let s = scale.data();
    let data = grad_out
        .data()
        .iter()
        .enumerate()
        .map(|(i, &g)| g * s[i % f])
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}
