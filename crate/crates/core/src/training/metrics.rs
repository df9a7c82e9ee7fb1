use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelSpec, PARASITIZED};
use crate::nn::{Tensor, WeightStore};

/// Binary classification metrics with "parasitized" (class 0) as positive.
/// `confusion[actual][predicted]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: [[u64; 2]; 2],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_confusion(confusion: [[u64; 2]; 2]) -> Self {
        let p = PARASITIZED;
        let n = 1 - p;
        let tp = confusion[p][p];
        let fn_ = confusion[p][n];
        let fp = confusion[n][p];
        let tn = confusion[n][n];
        let total = tp + fn_ + fp + tn;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // 2PR/(P+R) written in counts, so it is rounded once
        let f1 = if tp == 0 { 0.0 } else { ratio(2 * tp, 2 * tp + fp + fn_) };
        Self {
            accuracy: ratio(tp + tn, total),
            precision,
            recall,
            f1,
            confusion,
        }
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Dimension(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = [[0u64; 2]; 2];
        for (&a, &p) in labels.iter().zip(predictions) {
            if a > 1 || p > 1 {
                return Err(Error::Index(format!("class pair ({a}, {p}) is not binary")));
            }
            confusion[a][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

const EVAL_BATCH: usize = 64;

fn predict_chunk(clf: &Classifier, chunk: &[&LabeledImage]) -> Result<Vec<usize>> {
    let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.pixels).collect();
    let batch = Tensor::stack(&imgs)?;
    Ok(clf.classify_batch(&batch)?.into_iter().map(|(k, _)| k).collect())
}

/// Inference-mode predictions for every sample, in order.
pub fn predict_all(clf: &Classifier, samples: &[&LabeledImage], parallel: bool) -> Result<Vec<usize>> {
    let chunks: Vec<&[&LabeledImage]> = samples.chunks(EVAL_BATCH).collect();
    let per_chunk: Vec<Vec<usize>> = if parallel {
        chunks
            .par_iter()
            .map(|c| predict_chunk(clf, c))
            .collect::<Result<_>>()?
    } else {
        chunks
            .iter()
            .map(|c| predict_chunk(clf, c))
            .collect::<Result<_>>()?
    };
    Ok(per_chunk.concat())
}

pub(crate) fn evaluate_refs(clf: &Classifier, samples: &[&LabeledImage], parallel: bool) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty sample set".into()));
    }
    let preds = predict_all(clf, samples, parallel)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Metrics::from_predictions(&labels, &preds)
}

/// Accuracy, precision, recall and F1 over `samples`, batched and run in
/// parallel over read-only weights.
pub fn evaluate(spec: &ModelSpec, weights: &WeightStore<f32>, samples: &[LabeledImage]) -> Result<Metrics> {
    let clf = Classifier::new(spec.clone(), weights.clone(), "eval")?;
    let refs: Vec<&LabeledImage> = samples.iter().collect();
    evaluate_refs(&clf, &refs, true)
}

/// Single-threaded reference path of [`evaluate`].
pub fn evaluate_serial(
    spec: &ModelSpec,
    weights: &WeightStore<f32>,
    samples: &[LabeledImage],
) -> Result<Metrics> {
    let clf = Classifier::new(spec.clone(), weights.clone(), "eval")?;
    let refs: Vec<&LabeledImage> = samples.iter().collect();
    evaluate_refs(&clf, &refs, false)
}
