//! Classification metrics for the three task types.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
    Mcc,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Mcc => "mcc",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Binary confusion counts with class 1 as positive.
    pub fn from_predictions(predictions: &[usize], labels: &[usize]) -> Result<Self> {
        check_lengths(predictions, labels)?;
        let mut c = Confusion::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => {
                    return Err(Error::Metric(format!(
                        "binary metric got prediction {p} / label {l}"
                    )))
                }
            }
        }
        Ok(c)
    }

    /// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// Matthews correlation, 0 when any marginal is 0.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / den.sqrt()
        }
    }
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("no examples".into()));
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(Confusion::from_predictions(predictions, labels)?.f1())
}

pub fn mcc(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(Confusion::from_predictions(predictions, labels)?.mcc())
}

impl Metric {
    pub fn evaluate(self, predictions: &[usize], labels: &[usize]) -> Result<f64> {
        match self {
            Metric::Accuracy => accuracy(predictions, labels),
            Metric::F1 => f1(predictions, labels),
            Metric::Mcc => mcc(predictions, labels),
        }
    }

    /// Score of the constant predictor that always outputs `majority`:
    /// its accuracy, its F1 (0 when the majority is the negative class), or
    /// its MCC (always 0).
    pub fn majority_baseline(self, majority: usize, labels: &[usize]) -> Result<f64> {
        let preds = vec![majority; labels.len()];
        self.evaluate(&preds, labels)
    }
}
