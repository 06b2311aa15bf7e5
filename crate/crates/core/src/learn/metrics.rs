//! Dice, Jaccard and pixel accuracy from a 3×3 confusion matrix.
//!
//! Per class: Dice = 2TP / (2TP + FP + FN), Jaccard = TP / (TP + FP + FN).
//! Both are macro-averaged over the classes that occur in the prediction or
//! the ground truth; a class absent from both is left out of the average.

use super::{LearnError, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub acc: f64,
}

/// `counts[truth][pred]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Confusion {
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<(), LearnError> {
        if pred.len() != truth.len() {
            return Err(LearnError::ShapeMismatch(format!(
                "prediction has {} pixels, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p as usize >= NUM_CLASSES {
                return Err(LearnError::LabelOutOfRange(p));
            }
            if t as usize >= NUM_CLASSES {
                return Err(LearnError::LabelOutOfRange(t));
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn metrics(&self) -> Result<SegMetrics, LearnError> {
        let total = self.total();
        if total == 0 {
            return Err(LearnError::InvalidArgument("no pixels to score".into()));
        }
        let correct: u64 = (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum();
        let (mut dice, mut jaccard, mut present) = (0.0, 0.0, 0usize);
        for k in 0..NUM_CLASSES {
            let tp = self.counts[k][k];
            let fn_ = self.counts[k].iter().sum::<u64>() - tp;
            let fp = (0..NUM_CLASSES).map(|t| self.counts[t][k]).sum::<u64>() - tp;
            if tp + fp + fn_ == 0 {
                continue;
            }
            present += 1;
            dice += (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
            jaccard += tp as f64 / (tp + fp + fn_) as f64;
        }
        Ok(SegMetrics {
            dice: dice / present as f64,
            jaccard: jaccard / present as f64,
            acc: correct as f64 / total as f64,
        })
    }
}

pub fn seg_metrics(pred: &[u8], truth: &[u8]) -> Result<SegMetrics, LearnError> {
    let mut c = Confusion::default();
    c.add(pred, truth)?;
    c.metrics()
}
