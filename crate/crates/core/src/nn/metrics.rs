use serde::{Deserialize, Serialize};

use super::network::{Network, Sample};
use crate::consensus::decide;
use crate::error::{AdamError, Result};
use crate::fingerprint::Label;

/// Classification metrics; the positive class is malware.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: Label, actual: Label) {
        match (predicted, actual) {
            (Label::Malware, Label::Malware) => self.tp += 1,
            (Label::Malware, Label::Benign) => self.fp += 1,
            (Label::Benign, Label::Malware) => self.fn_ += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self, loss: f64) -> Metrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            loss,
            accuracy: ratio(self.tp + self.tn, self.total()),
            f1,
            recall,
            precision,
        }
    }
}

/// Metrics from predicted probabilities against labels.
pub fn metrics_from_predictions(probs: &[[f64; 2]], labels: &[Label], loss: f64) -> Metrics {
    let mut c = Confusion::default();
    for (p, &l) in probs.iter().zip(labels) {
        c.record(decide(*p), l);
    }
    c.metrics(loss)
}

pub fn evaluate(net: &Network, samples: &[Sample<'_>]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(AdamError::Empty("evaluation set".into()));
    }
    let loss = net.mean_loss(samples)?;
    let mut c = Confusion::default();
    for s in samples {
        c.record(decide(net.forward(s.input)?), s.label);
    }
    Ok(c.metrics(loss))
}
