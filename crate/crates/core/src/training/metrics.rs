use serde::Serialize;

use crate::encoding::Polarity;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Classification metrics derived from a confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: [ClassScores; 3],
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; 3]; 3],
    /// Mean cross-entropy over the examples.
    pub loss: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: [[usize; 3]; 3], loss: f64) -> Result<Self> {
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Data("metrics over an empty dataset".into()));
        }
        let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
        let per_class = std::array::from_fn(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: usize = (0..3).map(|g| confusion[g][c]).sum();
            let gold: usize = confusion[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if gold == 0 { 0.0 } else { tp / gold as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores { precision, recall, f1 }
        });
        let macro_f1 = per_class.iter().map(|c: &ClassScores| c.f1).sum::<f64>() / 3.0;
        Ok(Metrics {
            accuracy: correct as f64 / total as f64,
            macro_f1,
            per_class,
            confusion,
            loss,
        })
    }

    pub fn from_predictions(gold: &[Polarity], predicted: &[Polarity], loss: f64) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::Contract(format!(
                "{} gold labels vs {} predictions",
                gold.len(),
                predicted.len()
            )));
        }
        let mut confusion = [[0usize; 3]; 3];
        for (g, p) in gold.iter().zip(predicted) {
            confusion[g.id()][p.id()] += 1;
        }
        Self::from_confusion(confusion, loss)
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}
