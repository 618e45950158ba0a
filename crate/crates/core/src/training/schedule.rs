use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_epochs(epochs: impl Iterator<Item = usize>, what: &str) -> Result<()> {
    let mut prev = 0;
    for (i, e) in epochs.enumerate() {
        if i == 0 && e != 1 {
            return Err(Error::Config(format!("{what}: first anchor must be epoch 1, got {e}")));
        }
        if e <= prev {
            return Err(Error::Config(format!("{what}: anchor epochs must increase strictly")));
        }
        prev = e;
    }
    if prev == 0 {
        return Err(Error::Config(format!("{what}: at least one anchor is required")));
    }
    Ok(())
}

/// Index of the latest anchor at or before `epoch` (epochs are 1-based;
/// epoch 0 is treated as 1).
fn lookup(epochs: impl Iterator<Item = usize>, epoch: usize) -> usize {
    epochs.take_while(|&e| e <= epoch.max(1)).count().saturating_sub(1)
}

/// Piecewise-constant per-level loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeightSchedule {
    anchors: Vec<(usize, Vec<f64>)>,
}

impl LossWeightSchedule {
    pub fn new(anchors: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        check_epochs(anchors.iter().map(|a| a.0), "loss weight schedule")?;
        let k = anchors[0].1.len();
        for (epoch, w) in &anchors {
            if w.len() != k || k == 0 {
                return Err(Error::Config(format!(
                    "loss weights at epoch {epoch} have {} levels, expected {k}",
                    w.len()
                )));
            }
            if w.iter().any(|&v| !(v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "loss weights at epoch {epoch} must be non-negative and sum to 1, got {w:?}"
                )));
            }
        }
        Ok(LossWeightSchedule { anchors })
    }

    /// Coarse-heavy at first, shifting to the fine level by epoch 15.
    pub fn default_two_level() -> Self {
        LossWeightSchedule::new(vec![
            (1, vec![0.98, 0.02]),
            (5, vec![0.30, 0.70]),
            (10, vec![0.10, 0.90]),
            (15, vec![0.00, 1.00]),
        ])
        .expect("valid default")
    }

    /// The degenerate schedule used for single-head networks.
    pub fn single_level() -> Self {
        LossWeightSchedule::new(vec![(1, vec![1.0])]).expect("valid")
    }

    pub fn levels(&self) -> usize {
        self.anchors[0].1.len()
    }

    pub fn anchors(&self) -> &[(usize, Vec<f64>)] {
        &self.anchors
    }

    pub fn weights_at(&self, epoch: usize) -> &[f64] {
        &self.anchors[lookup(self.anchors.iter().map(|a| a.0), epoch)].1
    }
}

impl Default for LossWeightSchedule {
    fn default() -> Self {
        Self::default_two_level()
    }
}

/// Piecewise-constant learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    anchors: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(anchors: Vec<(usize, f64)>) -> Result<Self> {
        check_epochs(anchors.iter().map(|a| a.0), "learning-rate schedule")?;
        if let Some((e, r)) = anchors.iter().find(|a| !(a.1 > 0.0) || !a.1.is_finite()) {
            return Err(Error::Config(format!("learning rate at epoch {e} must be positive, got {r}")));
        }
        Ok(LrSchedule { anchors })
    }

    pub fn anchors(&self) -> &[(usize, f64)] {
        &self.anchors
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.anchors[lookup(self.anchors.iter().map(|a| a.0), epoch)].1
    }
}

impl Default for LrSchedule {
    /// 1e-3, then 5e-4 after epoch 10 and 1e-4 after epoch 15.
    fn default() -> Self {
        LrSchedule::new(vec![(1, 1e-3), (11, 5e-4), (16, 1e-4)]).expect("valid default")
    }
}
