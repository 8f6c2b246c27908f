//! Training harness: CIFAR-10 ingestion and augmentation, SGD with Nesterov
//! momentum, a step learning-rate schedule and per-epoch history.

mod data;
mod sgd;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Network};
use crate::tensor::{softmax_cross_entropy_value, Tensor};

pub use data::{
    augment, augment_image, load_cifar10, Augmentation, Dataset, AUGMENT_PAD, CIFAR_CLASSES,
    CIFAR_FILE_BYTES, CIFAR_PIXELS, CIFAR_RECORD, CIFAR_RECORDS_PER_FILE, CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
};
pub use sgd::{is_bn_param, Sgd};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("dataset: {0}")]
    Data(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step} (epoch {epoch}): {reason}")]
    Diverged {
        step: u64,
        epoch: usize,
        reason: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimization protocol. `milestones` are 0-based epochs at whose start the
/// learning rate is divided by `lr_divisor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub lr_divisor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Apply weight decay to batch-norm parameters.
    pub decay_bn: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_epochs(300)
    }
}

impl TrainConfig {
    /// Defaults with the schedule placed at 50% and 75% of `epochs`
    /// (epochs 150 and 225 of 300).
    pub fn for_epochs(epochs: usize) -> Self {
        TrainConfig {
            base_lr: 0.1,
            milestones: scaled_milestones(epochs),
            lr_divisor: 10.0,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            decay_bn: true,
            batch_size: 64,
            epochs,
            seed: 0,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!(
                "learning rate {} must be finite and non-negative",
                self.base_lr
            ));
        }
        if self.epochs == 0 {
            return bad("at least one epoch is required".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "milestones {:?} are not strictly increasing",
                self.milestones
            ));
        }
        if !(self.lr_divisor.is_finite() && self.lr_divisor > 0.0) {
            return bad(format!("lr divisor {} must be positive", self.lr_divisor));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay be non-negative".into());
        }
        Ok(())
    }

    /// Learning rate used throughout 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr / self.lr_divisor.powi(drops as i32)
    }
}

/// `round(epochs / 2)` and `round(3 * epochs / 4)`, dropping duplicates and
/// boundaries outside `1..epochs`.
pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [0.5, 0.75]
        .iter()
        .map(|f| (f * epochs as f64).round() as usize)
        .filter(|&m| m >= 1 && m < epochs)
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_err: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,lr,train_loss,train_acc,test_err,seconds`; a missing test error
    /// is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,test_err,seconds\n");
        for r in &self.epochs {
            let test = r.test_err.map(|e| e.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.epoch, r.lr, r.train_loss, r.train_acc, test, r.seconds
            ));
        }
        out
    }

    /// Equality ignoring wall time.
    pub fn same_metrics(&self, other: &History) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.lr.to_bits() == b.lr.to_bits()
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.train_acc.to_bits() == b.train_acc.to_bits()
                    && a.test_err.map(f64::to_bits) == b.test_err.map(f64::to_bits)
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_error: f64,
    pub loss: f64,
}

fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            // first maximal index
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                );
            best.0 == label
        })
        .count()
}

/// Top-1 error and mean cross-entropy of `(N, K)` logits.
pub fn score_logits(logits: &Tensor<f32>, labels: &[usize]) -> Result<EvalReport, TrainError> {
    let loss = softmax_cross_entropy_value(logits, labels).map_err(ModelError::from)? as f64;
    let n = labels.len();
    Ok(EvalReport {
        top1_error: 1.0 - correct(logits, labels) as f64 / n as f64,
        loss,
    })
}

/// Eval-mode top-1 error and mean loss over `data`, in fixed order.
pub fn evaluate(
    net: &Network<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Data("cannot evaluate an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut wrong, mut loss_sum) = (0usize, 0f64);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk, None);
        let logits = net.predict(&x)?;
        let s = score_logits(&logits, &labels)?;
        loss_sum += s.loss * chunk.len() as f64;
        wrong += chunk.len() - correct(&logits, &labels);
    }
    Ok(EvalReport {
        top1_error: wrong as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}

/// Trains `net` for `cfg.epochs` epochs. Batches are drawn in a seeded
/// shuffled order (a final partial batch of at least two images is kept);
/// with `cfg.augment` each image is flipped and shifted at random.
pub fn train_model(
    net: &mut Network<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<History, TrainError> {
    train_model_with(net, train, test, cfg, |_| {})
}

/// [`train_model`] with a callback after every epoch.
pub fn train_model_with(
    net: &mut Network<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.nesterov, cfg.weight_decay, cfg.decay_bn);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut right, mut seen) = (0f64, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 && seen > 0 {
                continue;
            }
            let (x, labels) = train.batch(chunk, cfg.augment.then_some(&mut rng));
            let diverged = |reason: String| TrainError::Diverged {
                step,
                epoch: epoch + 1,
                reason,
            };
            let out = match net.compute_gradients(&x, &labels) {
                Ok(out) => out,
                Err(e @ ModelError::NonFinite { .. }) => return Err(diverged(e.to_string())),
                Err(e) => return Err(e.into()),
            };
            let loss = out.loss as f64;
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            sgd.step(net, &out.grads, lr);
            loss_sum += loss * chunk.len() as f64;
            right += correct(&out.logits, &labels);
            seen += chunk.len();
            step += 1;
        }
        let test_err = match test {
            Some(t) => Some(evaluate(net, t, cfg.batch_size.max(100))?.top1_error),
            None => None,
        };
        net.epoch += 1;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: right as f64 / seen as f64,
            test_err,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} lr {} loss {:.4} acc {:.4} test_err {:?} ({:.1}s)",
            record.epoch,
            record.lr,
            record.train_loss,
            record.train_acc,
            record.test_err,
            record.seconds
        );
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}
