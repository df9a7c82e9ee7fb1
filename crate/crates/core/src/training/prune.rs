//! One-shot magnitude pruning and a bitmap sparse encoding used to measure
//! the storage it saves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::format::{self, WeightFormatError};
use crate::nn::{is_weight_param, Tensor, WeightStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    /// One magnitude threshold across every in-scope tensor.
    Global,
    /// Each tensor pruned to the target sparsity on its own.
    PerTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub sparsity: f64,
    pub scope: PruneScope,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.5,
            scope: PruneScope::Global,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub target_sparsity: f64,
    /// Zero fraction over the pruned scope after pruning.
    pub sparsity: f64,
    pub scope_elements: usize,
    pub zeroed: usize,
    pub dense_bytes: usize,
    pub sparse_bytes: usize,
    pub bytes_saved: isize,
}

/// Only kernels and dense weight matrices are pruned; biases are exempt.
pub fn in_scope(name: &str) -> bool {
    is_weight_param(name)
}

/// Zeroes the `floor(s * n)` smallest-magnitude in-scope weights. Ties are
/// broken by tensor name, then flat index.
pub fn prune_magnitude(
    weights: &WeightStore<f32>,
    cfg: &PruneConfig,
) -> Result<(WeightStore<f32>, PruneReport)> {
    let s = cfg.sparsity;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Config(format!("sparsity {s} outside [0, 1]")));
    }
    let mut pruned = weights.clone();
    let names: Vec<String> = weights
        .names()
        .filter(|n| in_scope(n))
        .map(str::to_string)
        .collect();

    let mut groups: Vec<Vec<usize>> = match cfg.scope {
        PruneScope::Global => vec![(0..names.len()).collect()],
        PruneScope::PerTensor => (0..names.len()).map(|i| vec![i]).collect(),
    };
    let mut zeroed = 0;
    for group in groups.drain(..) {
        let mut entries: Vec<(f32, u32, u32)> = Vec::new();
        for &ti in &group {
            let t = weights.get(&names[ti]).expect("name from store");
            entries.extend(
                t.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| (w.abs(), ti as u32, i as u32)),
            );
        }
        let k = ((s * entries.len() as f64) + 1e-9).floor() as usize;
        let k = k.min(entries.len());
        if k == 0 {
            continue;
        }
        let cmp = |a: &(f32, u32, u32), b: &(f32, u32, u32)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if k < entries.len() {
            entries.select_nth_unstable_by(k - 1, cmp);
        }
        for &(_, ti, i) in &entries[..k] {
            pruned.get_mut(&names[ti as usize]).expect("name from store").data_mut()[i as usize] = 0.0;
        }
        zeroed += k;
    }

    let (zeros, total) = scope_zeros(&pruned);
    let dense_bytes = format::encode(&pruned)?.len();
    let sparse_bytes = encode_sparse(&pruned)?.len();
    Ok((
        pruned,
        PruneReport {
            target_sparsity: s,
            sparsity: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
            scope_elements: total,
            zeroed,
            dense_bytes,
            sparse_bytes,
            bytes_saved: dense_bytes as isize - sparse_bytes as isize,
        },
    ))
}

/// `(zero count, element count)` over in-scope tensors.
pub fn scope_zeros(weights: &WeightStore<f32>) -> (usize, usize) {
    weights
        .iter()
        .filter(|(n, _)| in_scope(n))
        .fold((0, 0), |(z, n), (_, t)| (z + t.count_zeros(), n + t.len()))
}

/// Zero fraction over in-scope tensors.
pub fn sparsity(weights: &WeightStore<f32>) -> f64 {
    let (z, n) = scope_zeros(weights);
    if n == 0 {
        0.0
    } else {
        z as f64 / n as f64
    }
}

/// Positions that must stay zero during fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    masks: BTreeMap<String, Vec<bool>>,
}

impl PruneMask {
    /// Marks every zero element of every in-scope tensor.
    pub fn from_zeros(weights: &WeightStore<f32>) -> Self {
        Self {
            masks: weights
                .iter()
                .filter(|(n, _)| in_scope(n))
                .map(|(n, t)| (n.to_string(), t.data().iter().map(|&w| w == 0.0).collect()))
                .collect(),
        }
    }

    pub fn pruned_count(&self) -> usize {
        self.masks.values().flatten().filter(|&&m| m).count()
    }

    /// Discards gradient entries at pruned positions.
    pub fn apply_to_grads<T: crate::scalar::Scalar>(&self, grads: &mut WeightStore<T>) {
        for (name, g) in grads.iter_mut() {
            if let Some(mask) = self.masks.get(name) {
                for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                    if m {
                        *v = T::zero();
                    }
                }
            }
        }
    }

    /// True when every masked position of `weights` is zero.
    pub fn holds(&self, weights: &WeightStore<f32>) -> bool {
        self.masks.iter().all(|(name, mask)| {
            weights.get(name).is_some_and(|t| {
                t.data().iter().zip(mask).all(|(&w, &m)| !m || w == 0.0)
            })
        })
    }
}

pub const SPARSE_MAGIC: &[u8; 4] = b"E2ES";
const ENC_DENSE: u8 = 0;
const ENC_BITMAP: u8 = 1;

/// Like the dense weight format, but each tensor may be stored as a
/// non-zero bitmap (LSB first) followed by the non-zero values, whichever is
/// smaller.
pub fn encode_sparse(store: &WeightStore<f32>) -> Result<Vec<u8>, WeightFormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(SPARSE_MAGIC);
    out.extend_from_slice(&format::VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(format::DTYPE_F32);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let n = t.len();
        let nnz = n - t.count_zeros();
        if n.div_ceil(8) + 4 * nnz < 4 * n {
            out.push(ENC_BITMAP);
            let mut bits = vec![0u8; n.div_ceil(8)];
            for (i, &w) in t.data().iter().enumerate() {
                if w != 0.0 {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bits);
            for &w in t.data().iter().filter(|&&w| w != 0.0) {
                out.extend_from_slice(&w.to_le_bytes());
            }
        } else {
            out.push(ENC_DENSE);
            for &w in t.data() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_sparse(bytes: &[u8]) -> Result<WeightStore<f32>, WeightFormatError> {
    use WeightFormatError as E;
    let mut pos = 0usize;
    let mut take = |n: usize, what: &'static str| -> Result<&[u8], E> {
        if bytes.len() - pos < n {
            return Err(E::Truncated(what));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    let magic: [u8; 4] = take(4, "magic")?.try_into().unwrap();
    if &magic != SPARSE_MAGIC {
        return Err(E::BadMagic(magic));
    }
    let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
    if version != format::VERSION {
        return Err(E::UnsupportedVersion(version));
    }
    take(2, "header")?;
    let count = u32::from_le_bytes(take(4, "tensor count")?.try_into().unwrap());
    take(4, "header")?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len, "name")?)
            .map_err(|_| E::BadName)?
            .to_string();
        let dtype = take(1, "dtype")?[0];
        if dtype != format::DTYPE_F32 {
            return Err(E::UnsupportedDtype { name, dtype });
        }
        let ndims = take(1, "ndims")?[0] as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(u32::from_le_bytes(take(4, "dims")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let read_f32 = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let data = match take(1, "encoding")?[0] {
            ENC_DENSE => read_f32(take(4 * n, "tensor data")?),
            ENC_BITMAP => {
                let bits = take(n.div_ceil(8), "bitmap")?.to_vec();
                let nnz = (0..n).filter(|&i| bits[i / 8] & (1 << (i % 8)) != 0).count();
                let mut vals = read_f32(take(4 * nnz, "tensor data")?).into_iter();
                (0..n)
                    .map(|i| {
                        if bits[i / 8] & (1 << (i % 8)) != 0 {
                            vals.next().unwrap()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
            other => return Err(E::UnsupportedDtype { name, dtype: other }),
        };
        let t = Tensor::new(shape, data).map_err(|_| E::BadShape(name.clone()))?;
        store
            .insert(name.clone(), t)
            .map_err(|_| E::DuplicateName(name))?;
    }
    if pos != bytes.len() {
        return Err(E::TrailingBytes(bytes.len() - pos));
    }
    Ok(store)
}
