use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate_ci, CiMethod, Interval};
use super::classify::{ClassMetrics, RunMetrics};
use crate::error::{Error, Result};
use crate::model::ClassHierarchy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Auc,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Accuracy, Metric::Auc, Metric::Precision, Metric::Recall, Metric::F1];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Accuracy => "Accuracy",
            Metric::Auc => "AUC",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::F1 => "F1 score",
        }
    }

    fn of(self, m: &ClassMetrics) -> Option<f64> {
        match self {
            Metric::Accuracy => Some(m.accuracy),
            Metric::Auc => m.auc,
            Metric::Precision => Some(m.precision),
            Metric::Recall => Some(m.recall),
            Metric::F1 => Some(m.f1),
        }
    }
}

/// One metric across fine classes; a cell is absent when no run defined it
/// (AUC for a class missing from the test set).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: Metric,
    pub cells: Vec<Option<Interval>>,
}

/// One model family aggregated over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    /// Short name used in file names, e.g. `flat`.
    pub key: String,
    pub label: String,
    pub classes: Vec<String>,
    pub runs: usize,
    pub rows: Vec<MetricRow>,
    /// Normalized confusion `[true][predicted]`, aggregated over runs.
    pub confusion: Vec<Vec<Interval>>,
    pub fine_accuracy: Interval,
    pub coarse_accuracy: Interval,
    pub cross_coarse_mass: Interval,
    pub per_run_cross_coarse_mass: Vec<f64>,
}

pub fn summarize(
    key: &str,
    label: &str,
    runs: &[RunMetrics],
    hierarchy: &ClassHierarchy,
    method: CiMethod,
) -> Result<ModelSummary> {
    let k = hierarchy.num_fine();
    if runs.is_empty() {
        return Err(Error::InvalidArgument(format!("no runs to summarize for {label}")));
    }
    if let Some(r) = runs.iter().find(|r| r.per_class.len() != k || r.confusion.normalized.len() != k) {
        return Err(Error::InvalidArgument(format!(
            "{label}: run has {} classes, hierarchy has {k}",
            r.per_class.len()
        )));
    }
    let rows = Metric::ALL
        .iter()
        .map(|&metric| {
            let cells = (0..k)
                .map(|c| {
                    let vals: Vec<f64> = runs.iter().filter_map(|r| metric.of(&r.per_class[c])).collect();
                    if vals.is_empty() { Ok(None) } else { aggregate_ci(&vals, method).map(Some) }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricRow { metric, cells })
        })
        .collect::<Result<Vec<_>>>()?;
    let confusion = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| aggregate_ci(&runs.iter().map(|r| r.confusion.normalized[i][j]).collect::<Vec<_>>(), method))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let per_run_cross: Vec<f64> = runs.iter().map(|r| r.cross_coarse_mass).collect();
    let over = |f: fn(&RunMetrics) -> f64| aggregate_ci(&runs.iter().map(f).collect::<Vec<_>>(), method);
    Ok(ModelSummary {
        key: key.to_string(),
        label: label.to_string(),
        classes: hierarchy.fine_names.clone(),
        runs: runs.len(),
        rows,
        confusion,
        fine_accuracy: over(|r| r.fine_accuracy)?,
        coarse_accuracy: over(|r| r.coarse_accuracy)?,
        cross_coarse_mass: aggregate_ci(&per_run_cross, method)?,
        per_run_cross_coarse_mass: per_run_cross,
    })
}

/// Side-by-side comparison of model families on the same classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    /// Coarse parent name of each class, for grouped column headers.
    pub class_groups: Vec<String>,
    pub ci: CiMethod,
    pub config_hash: Option<String>,
    pub models: Vec<ModelSummary>,
}

fn cell(v: Option<&Interval>) -> String {
    v.map_or_else(|| "NA".to_string(), Interval::cell)
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<memory>", e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

impl MetricsReport {
    pub fn new(
        hierarchy: &ClassHierarchy,
        ci: CiMethod,
        config_hash: Option<String>,
        models: Vec<ModelSummary>,
    ) -> Result<Self> {
        if let Some(m) = models.iter().find(|m| m.classes != hierarchy.fine_names) {
            return Err(Error::InvalidArgument(format!(
                "model {} reports classes {:?}, expected {:?}",
                m.label, m.classes, hierarchy.fine_names
            )));
        }
        Ok(MetricsReport {
            classes: hierarchy.fine_names.clone(),
            class_groups: hierarchy.parent.iter().map(|&p| hierarchy.coarse_names[p].clone()).collect(),
            ci,
            config_hash,
            models,
        })
    }

    pub fn model(&self, key: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.key == key)
    }

    /// Rows `metric x model`, one column per fine class.
    pub fn metrics_csv(&self) -> Result<String> {
        let mut header = vec!["metric".to_string(), "model".to_string()];
        header.extend(self.classes.iter().cloned());
        let mut rows = vec![header];
        for metric in Metric::ALL {
            for m in &self.models {
                let row = m
                    .rows
                    .iter()
                    .find(|r| r.metric == metric)
                    .ok_or_else(|| Error::Data(format!("{} lacks {}", m.label, metric.label())))?;
                let mut line = vec![metric.label().to_string(), m.label.clone()];
                line.extend(row.cells.iter().map(|c| cell(c.as_ref())));
                rows.push(line);
            }
        }
        csv_string(rows)
    }

    /// Normalized confusion of one model: true classes down, predictions
    /// across.
    pub fn confusion_csv(&self, key: &str) -> Result<String> {
        let m = self
            .model(key)
            .ok_or_else(|| Error::InvalidArgument(format!("no model '{key}' in report")))?;
        let mut header = vec!["true_label".to_string()];
        header.extend(self.classes.iter().cloned());
        let mut rows = vec![header];
        for (name, r) in self.classes.iter().zip(&m.confusion) {
            let mut line = vec![name.clone()];
            line.extend(r.iter().map(|c| cell(Some(c))));
            rows.push(line);
        }
        csv_string(rows)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Writes `metrics.csv`, `metrics.json` and `confusion_{key}.csv`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![
            (dir.join("metrics.csv"), self.metrics_csv()?),
            (dir.join("metrics.json"), self.to_json()?),
        ];
        for m in &self.models {
            files.push((dir.join(format!("confusion_{}.csv", m.key)), self.confusion_csv(&m.key)?));
        }
        for (path, body) in &files {
            std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(files.into_iter().map(|f| f.0).collect())
    }
}
