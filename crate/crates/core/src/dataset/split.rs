use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Development,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Development, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Development => "development",
            Split::Test => "test",
        }
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.5, 0.2, 0.3];

/// Patient to split. Keyed by patient, so no patient can sit in two splits.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub patients: BTreeMap<String, Split>,
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    patient_id: String,
    split: Split,
}

impl SplitAssignment {
    pub fn of(&self, patient: &str) -> Option<Split> {
        self.patients.get(patient).copied()
    }

    /// Split of every manifest row; errors on unassigned patients.
    pub fn row_splits(&self, manifest: &Manifest) -> Result<Vec<Split>> {
        manifest
            .rows()
            .iter()
            .map(|r| {
                self.of(&r.patient_id)
                    .ok_or_else(|| Error::Data(format!("patient '{}' has no split", r.patient_id)))
            })
            .collect()
    }

    /// Slide counts per split.
    pub fn wsi_counts(&self, manifest: &Manifest) -> Result<[usize; 3]> {
        let mut counts = [0; 3];
        for s in self.row_splits(manifest)? {
            counts[s.index()] += 1;
        }
        Ok(counts)
    }

    pub fn wsi_fractions(&self, manifest: &Manifest) -> Result<[f64; 3]> {
        let c = self.wsi_counts(manifest)?;
        let n = manifest.len() as f64;
        Ok(c.map(|v| v as f64 / n))
    }

    /// Slide counts `[fine class][split]`.
    pub fn class_counts(&self, manifest: &Manifest, classes: usize) -> Result<Vec<[usize; 3]>> {
        let mut out = vec![[0; 3]; classes];
        for (i, s) in self.row_splits(manifest)?.into_iter().enumerate() {
            out[manifest.fine_of(i)][s.index()] += 1;
        }
        Ok(out)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for (p, &s) in &self.patients {
            wtr.serialize(SplitRow {
                patient_id: p.clone(),
                split: s,
            })?;
        }
        wtr.flush().map_err(|e| Error::io("<split>", e))?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut patients = BTreeMap::new();
        for (i, row) in csv::Reader::from_reader(r).deserialize::<SplitRow>().enumerate() {
            let row = row.map_err(|e| Error::Data(format!("split line {}: {e}", i + 2)))?;
            if patients.insert(row.patient_id.clone(), row.split).is_some() {
                return Err(Error::Data(format!("split line {}: patient '{}' listed twice", i + 2, row.patient_id)));
            }
        }
        Ok(SplitAssignment { patients })
    }
}

/// Seeded greedy split: patients are shuffled, then each goes to the split
/// whose slide count falls furthest short of its target share.
pub fn split_by_patient<R: Rng + ?Sized>(manifest: &Manifest, ratios: [f64; 3], rng: &mut R) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let sizes = manifest.patient_sizes();
    if sizes.len() < 3 {
        return Err(Error::Data(format!("need at least 3 patients to split, found {}", sizes.len())));
    }
    let mut patients: Vec<(&str, usize)> = sizes.into_iter().collect();
    patients.shuffle(rng);
    let total = manifest.len() as f64;
    let mut counts = [0usize; 3];
    let mut out = BTreeMap::new();
    for (p, n) in patients {
        let deficit = |i: usize| ratios[i] * total - counts[i] as f64;
        let best = (0..3).fold(0, |b, i| if deficit(i) > deficit(b) { i } else { b });
        counts[best] += n;
        out.insert(p.to_string(), Split::ALL[best]);
    }
    Ok(SplitAssignment { patients: out })
}
