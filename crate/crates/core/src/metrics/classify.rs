use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassHierarchy;

/// Test-set predictions of one model in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub fine_probs: Vec<Vec<f64>>,
    /// Coarse head output, or lifted fine probabilities for flat models.
    pub coarse_probs: Vec<Vec<f64>>,
    pub fine_truth: Vec<usize>,
    pub coarse_truth: Vec<usize>,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl PredictionBundle {
    pub fn new(
        fine_probs: Vec<Vec<f64>>,
        coarse_probs: Vec<Vec<f64>>,
        fine_truth: Vec<usize>,
        hierarchy: &ClassHierarchy,
    ) -> Result<Self> {
        let n = fine_truth.len();
        if n == 0 {
            return Err(Error::InvalidArgument("prediction bundle is empty".into()));
        }
        if fine_probs.len() != n || coarse_probs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{n} labels but {} fine and {} coarse probability rows",
                fine_probs.len(),
                coarse_probs.len()
            )));
        }
        for (rows, k, what) in [(&fine_probs, hierarchy.num_fine(), "fine"), (&coarse_probs, hierarchy.num_coarse(), "coarse")] {
            for (i, r) in rows.iter().enumerate() {
                let s: f64 = r.iter().sum();
                // Loose enough for probabilities computed in 32-bit floats.
                if r.len() != k || (s - 1.0).abs() > 1e-4 || r.iter().any(|p| !(0.0..=1.0 + 1e-4).contains(p)) {
                    return Err(Error::InvalidArgument(format!(
                        "{what} probabilities of example {i} are not a distribution over {k} classes (sum {s})"
                    )));
                }
            }
        }
        let coarse_truth = fine_truth
            .iter()
            .map(|&f| hierarchy.lift_index(f))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionBundle {
            fine_probs,
            coarse_probs,
            fine_truth,
            coarse_truth,
        })
    }

    pub fn len(&self) -> usize {
        self.fine_truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_truth.is_empty()
    }

    pub fn fine_predictions(&self) -> Vec<usize> {
        self.fine_probs.iter().map(|r| argmax(r)).collect()
    }

    pub fn coarse_predictions(&self) -> Vec<usize> {
        self.coarse_probs.iter().map(|r| argmax(r)).collect()
    }
}

/// Fraction of examples on which `pred == c` agrees with `truth == c`.
pub fn per_class_accuracy(pred: &[usize], truth: &[usize], c: usize) -> f64 {
    let agree = pred.iter().zip(truth).filter(|(&p, &t)| (p == c) == (t == c)).count();
    agree as f64 / truth.len().max(1) as f64
}

/// Multi-class accuracy.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len().max(1) as f64
}

/// Area under the ROC curve via midranks; `None` unless both classes occur.
pub fn auc_ovr(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum keeps midranks integral.
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank2_sum += mid2 * order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    // 2 * (#pos>neg + 0.5 #ties) = rank2_sum - np(np+1)
    let twice_u = rank2_sum - np * (np + 1);
    Some(twice_u as f64 / (2 * np * nn) as f64)
}

/// ROC operating points `(fpr, tpr)` from the strictest threshold down,
/// starting at `(0, 0)`.
pub fn roc_points(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = positive.iter().filter(|&&p| p).count().max(1) as f64;
    let n_neg = (positive.len() - positive.iter().filter(|&&p| p).count()).max(1) as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if positive[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if k + 1 == order.len() || scores[order[k + 1]] != scores[i] {
            pts.push((fp / n_neg, tp / n_pos));
        }
    }
    pts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No example was predicted as the class; precision reported as 0.
    pub precision_undefined: bool,
    /// The class never occurs; recall reported as 0.
    pub recall_undefined: bool,
}

pub fn precision_recall_f1(pred: &[usize], truth: &[usize], c: usize) -> Prf {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == c, t == c) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        precision,
        recall,
        f1,
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`
    pub counts: Vec<Vec<u64>>,
    /// Rows divided by their sums; rows without examples stay zero.
    pub normalized: Vec<Vec<f64>>,
    pub empty_rows: Vec<usize>,
}

pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::InvalidArgument(format!("label {} out of range for {classes} classes", p.max(t))));
        }
        counts[t][p] += 1;
    }
    let mut empty_rows = Vec::new();
    let normalized = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                empty_rows.push(i);
                vec![0.0; classes]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    Ok(ConfusionMatrix {
        counts,
        normalized,
        empty_rows,
    })
}

/// Per row, the normalized mass in columns whose coarse parent differs from
/// the row's.
pub fn cross_coarse_rows(normalized: &[Vec<f64>], hierarchy: &ClassHierarchy) -> Vec<f64> {
    normalized
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let p = hierarchy.parent_of(i);
            row.iter()
                .enumerate()
                .filter(|&(j, _)| hierarchy.parent_of(j) != p)
                .map(|(_, v)| v)
                .sum()
        })
        .collect()
}

/// Mean cross-coarse mass over rows that hold any mass.
pub fn cross_coarse_mass(normalized: &[Vec<f64>], hierarchy: &ClassHierarchy) -> f64 {
    let rows: Vec<f64> = cross_coarse_rows(normalized, hierarchy)
        .into_iter()
        .zip(normalized)
        .filter(|(_, r)| r.iter().sum::<f64>() > 0.0)
        .map(|(m, _)| m)
        .collect();
    rows.iter().sum::<f64>() / rows.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Everything computed from one model's predictions in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub fine_accuracy: f64,
    pub coarse_accuracy: f64,
    pub cross_coarse_mass: f64,
}

pub fn evaluate_bundle(bundle: &PredictionBundle, hierarchy: &ClassHierarchy) -> Result<RunMetrics> {
    let k = hierarchy.num_fine();
    let pred = bundle.fine_predictions();
    let truth = &bundle.fine_truth;
    let per_class = (0..k)
        .map(|c| {
            let scores: Vec<f64> = bundle.fine_probs.iter().map(|r| r[c]).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            let prf = precision_recall_f1(&pred, truth, c);
            ClassMetrics {
                accuracy: per_class_accuracy(&pred, truth, c),
                auc: auc_ovr(&scores, &positive),
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
            }
        })
        .collect();
    let confusion = confusion(&pred, truth, k)?;
    let cross = cross_coarse_mass(&confusion.normalized, hierarchy);
    Ok(RunMetrics {
        per_class,
        fine_accuracy: accuracy(&pred, truth),
        coarse_accuracy: accuracy(&bundle.coarse_predictions(), &bundle.coarse_truth),
        cross_coarse_mass: cross,
        confusion,
    })
}
