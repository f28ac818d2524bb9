use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, metrics_from_predictions, Metrics};
use super::network::{Network, Sample, WeightedSample};
use crate::error::{AdamError, Result};
use crate::fingerprint::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation-accuracy improvement.
    #[serde(default)]
    pub patience: Option<usize>,
}

fn default_batch_size() -> usize {
    32
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            patience: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AdamError::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(AdamError::InvalidArgument(
                "batch size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Model inputs already projected to a network's feature subset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreparedSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .map(|(input, &label)| Sample { input, label })
            .collect()
    }

    pub fn push(&mut self, input: Vec<f64>, label: Label) {
        self.inputs.push(input);
        self.labels.push(label);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Running metrics over the epoch's minibatches (pre-step predictions).
    pub train: Metrics,
    pub validation: Metrics,
    /// Steps skipped because of a non-finite gradient.
    pub skipped_steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Network,
    /// 1-based epoch of the best snapshot.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_validation_accuracy(&self) -> f64 {
        self.history[self.best_epoch - 1].validation.accuracy
    }
}

/// 1-based index of the first maximum; NaN never wins.
pub fn best_epoch(val_accuracy: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &a) in val_accuracy.iter().enumerate() {
        match best {
            None => best = Some((i, a)),
            Some((_, b)) if a > b || (b.is_nan() && !a.is_nan()) => best = Some((i, a)),
            _ => {}
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Minibatch SGD keeping the snapshot with the best validation accuracy.
pub fn train(
    mut net: Network,
    train_set: &PreparedSet,
    val_set: &PreparedSet,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(AdamError::Empty("training split".into()));
    }
    if val_set.is_empty() {
        return Err(AdamError::Empty("validation split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let val_samples = val_set.samples();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Network)> = None;
    let mut best_ep = 1;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut probs = Vec::with_capacity(order.len());
        let mut labels = Vec::with_capacity(order.len());
        let mut skipped = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let w = 1.0 / chunk.len() as f64;
            let batch: Vec<WeightedSample> = chunk
                .iter()
                .map(|&i| WeightedSample {
                    input: &train_set.inputs[i],
                    label: train_set.labels[i],
                    weight: w,
                })
                .collect();
            match net.step_with_probs(&batch, cfg.learning_rate) {
                Ok((loss, p)) => {
                    loss_sum += loss * chunk.len() as f64;
                    probs.extend(p);
                }
                Err(AdamError::NonFinite(_)) => {
                    skipped += 1;
                    loss_sum = f64::NAN;
                    probs.extend(std::iter::repeat_n([f64::NAN, f64::NAN], chunk.len()));
                }
                Err(e) => return Err(e),
            }
            labels.extend(chunk.iter().map(|&i| train_set.labels[i]));
        }
        let train_metrics =
            metrics_from_predictions(&probs, &labels, loss_sum / order.len() as f64);
        let val_metrics = evaluate(&net, &val_samples)?;
        let improved = match &best {
            None => true,
            Some((acc, _)) => {
                val_metrics.accuracy > *acc || (acc.is_nan() && !val_metrics.accuracy.is_nan())
            }
        };
        if improved {
            best = Some((val_metrics.accuracy, net.clone()));
            best_ep = epoch;
        }
        history.push(EpochRecord {
            epoch,
            train: train_metrics,
            validation: val_metrics,
            skipped_steps: skipped,
        });
        if cfg.patience.is_some_and(|p| epoch - best_ep >= p) {
            break;
        }
    }
    let (_, best_net) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_net,
        best_epoch: best_ep,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub learning_rate: f64,
    pub best_validation_accuracy: f64,
    /// Training loss per epoch.
    pub losses: Vec<f64>,
    /// Loss never decreased below its first value, or went non-finite.
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub best_learning_rate: f64,
}

/// One short training run per learning rate; picks the best validation
/// accuracy (first on ties).
pub fn lr_sweep<F>(
    mut build: F,
    train_set: &PreparedSet,
    val_set: &PreparedSet,
    grid: &[f64],
    cfg: &TrainingConfig,
) -> Result<SweepResult>
where
    F: FnMut() -> Result<Network>,
{
    if grid.is_empty() {
        return Err(AdamError::Empty("learning-rate grid".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lr in grid {
        let run_cfg = TrainingConfig {
            learning_rate: lr,
            ..cfg.clone()
        };
        let out = train(build()?, train_set, val_set, &run_cfg)?;
        let losses: Vec<f64> = out.history.iter().map(|h| h.train.loss).collect();
        let first = losses[0];
        let diverged = losses.iter().any(|l| !l.is_finite())
            || losses.iter().skip(1).all(|&l| l >= first) && losses.len() > 1;
        rows.push(SweepRow {
            learning_rate: lr,
            best_validation_accuracy: out.best_validation_accuracy(),
            losses,
            diverged,
        });
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.best_validation_accuracy).collect();
    let best = best_epoch(&accs).expect("nonempty") - 1;
    Ok(SweepResult {
        best_learning_rate: rows[best].learning_rate,
        rows,
    })
}

pub const HISTORY_CSV_HEADER: &str = "epoch,loss,val_loss,accuracy,val_accuracy,f1,val_f1";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            h.epoch,
            h.train.loss,
            h.validation.loss,
            h.train.accuracy,
            h.validation.accuracy,
            h.train.f1,
            h.validation.f1
        );
    }
    out
}
