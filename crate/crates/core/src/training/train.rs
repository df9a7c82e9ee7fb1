use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, sample_rng, AugmentConfig, DatasetSplit, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelSpec};
use crate::nn::{AdamConfig, AdamState, Tensor, WeightStore};
use crate::training::calibrate::calibrate_head;
use crate::training::metrics::evaluate_refs;
use crate::training::prune::PruneMask;

pub const DEFAULT_EPOCHS: usize = 25;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_SEED: u64 = 42;

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const DROPOUT_SALT: u64 = 0x4452_4f50_4f55_5431;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub augment: bool,
    pub augment_cfg: AugmentConfig,
    /// Run [`calibrate_head`] on the training split before the first epoch.
    #[serde(default = "yes")]
    pub calibrate: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH,
            seed: DEFAULT_SEED,
            adam: AdamConfig::default(),
            augment: true,
            augment_cfg: AugmentConfig::default(),
            calibrate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        self.adam.validate()?;
        self.augment_cfg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
}

impl History {
    /// One JSON object per line.
    pub fn write_log<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn read_log<R: BufRead>(input: R) -> Result<Vec<EpochRecord>> {
        input
            .lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|l| {
                let l = l.map_err(|e| Error::io("<history>", e))?;
                Ok(serde_json::from_str(&l)?)
            })
            .collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

fn salted_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

fn gather<'a>(samples: &'a [LabeledImage], idx: &[usize]) -> Result<Vec<&'a LabeledImage>> {
    idx.iter()
        .map(|&i| {
            samples
                .get(i)
                .ok_or_else(|| Error::Index(format!("split index {i} out of {}", samples.len())))
        })
        .collect()
}

pub(crate) fn train_masked(
    spec: &ModelSpec,
    weights: &WeightStore<f32>,
    samples: &[LabeledImage],
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mask: Option<&PruneMask>,
) -> Result<(WeightStore<f32>, History)> {
    cfg.validate()?;
    spec.validate()?;
    spec.network.check_weights(weights)?;
    let train = gather(samples, &split.train)?;
    let val = gather(samples, &split.val)?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let trainable = spec.network.trainable_params()?;
    let mut weights = if cfg.calibrate {
        calibrate_head(spec, weights, &train)?
    } else {
        weights.clone()
    };
    let mut adam = AdamState::new(&weights, trainable.iter().map(String::as_str))?;
    let mut history = History::default();
    let mut best: Option<(f64, WeightStore<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut salted_rng(cfg.seed, SHUFFLE_SALT, epoch as u64));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<LabeledImage> = chunk
                .iter()
                .map(|&i| {
                    let s = train[i];
                    if cfg.augment {
                        // stream keyed by the sample's index in the full table
                        let global = split.train[i];
                        augment(s, &cfg.augment_cfg, &mut sample_rng(cfg.seed, epoch, global))
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let imgs: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.pixels).collect();
            let x = Tensor::stack(&imgs)?;
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut rng = salted_rng(cfg.seed, DROPOUT_SALT, ((epoch as u64) << 32) | b as u64);
            let (loss, mut grads) = spec.network.backprop(&weights, &x, &labels, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: b + 1,
                    loss: f64::from(loss),
                });
            }
            if let Some(mask) = mask {
                mask.apply_to_grads(&mut grads);
            }
            adam.step(&mut weights, &grads, &cfg.adam)?;
            loss_sum += f64::from(loss) * chunk.len() as f64;
        }
        let loss = loss_sum / train.len() as f64;

        let (val_accuracy, val_f1) = if val.is_empty() {
            (None, None)
        } else {
            let clf = Classifier::new(spec.clone(), weights.clone(), "train")?;
            let m = evaluate_refs(&clf, &val, false)?;
            (Some(m.accuracy), Some(m.f1))
        };
        log::info!(
            "epoch {}/{}: loss {loss:.5} val_accuracy {val_accuracy:?} val_f1 {val_f1:?}",
            epoch + 1,
            cfg.epochs
        );
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            val_accuracy,
            val_f1,
        });
        // best by validation accuracy, ties keep the earlier epoch; without a
        // validation split the last epoch wins
        let score = val_accuracy.unwrap_or(f64::INFINITY);
        let better = match &best {
            None => true,
            Some((s, _)) => score > *s || (val_accuracy.is_none()),
        };
        if better {
            best = Some((score, weights.clone()));
            history.best_epoch = epoch + 1;
        }
    }
    let (_, best_weights) = best.expect("at least one epoch");
    Ok((best_weights, history))
}

/// Mini-batch training with augmentation, dropout, and Adam. Returns the
/// weights of the epoch with the best validation accuracy.
pub fn train(
    spec: &ModelSpec,
    weights: &WeightStore<f32>,
    samples: &[LabeledImage],
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(WeightStore<f32>, History)> {
    train_masked(spec, weights, samples, split, cfg, None)
}

/// Continues training a pruned model with its zero pattern frozen: gradients
/// at pruned positions are discarded every step. Never recalibrates.
pub fn fine_tune(
    spec: &ModelSpec,
    pruned: &WeightStore<f32>,
    samples: &[LabeledImage],
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(WeightStore<f32>, History)> {
    if cfg.epochs == 0 {
        return Ok((pruned.clone(), History::default()));
    }
    let mask = PruneMask::from_zeros(pruned);
    let cfg = TrainConfig {
        calibrate: false,
        ..cfg.clone()
    };
    let (w, h) = train_masked(spec, pruned, samples, split, &cfg, Some(&mask))?;
    debug_assert!(mask.holds(&w));
    Ok((w, h))
}
