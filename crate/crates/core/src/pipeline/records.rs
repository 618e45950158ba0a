use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::model::ClassHierarchy;

const HASH_PREFIX: &str = "# config_hash: ";

/// Serializes `rows` as CSV under a `# config_hash: ...` comment line.
pub fn write_csv<S: Serialize>(path: &Path, hash: &str, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    let mut out = format!("{HASH_PREFIX}{hash}\n").into_bytes();
    out.extend(body);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Prefixes an already rendered CSV body with the hash line.
pub fn write_csv_text(path: &Path, hash: &str, body: &str) -> Result<()> {
    std::fs::write(path, format!("{HASH_PREFIX}{hash}\n{body}")).map_err(|e| Error::io(path, e))
}

/// Rows and the embedded config hash, if any.
pub fn read_csv<D: DeserializeOwned>(path: &Path) -> Result<(Option<String>, Vec<D>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (hash, body) = match text.strip_prefix(HASH_PREFIX) {
        Some(rest) => {
            let (h, body) = rest.split_once('\n').unwrap_or((rest, ""));
            (Some(h.trim().to_string()), body)
        }
        None => (None, text.as_str()),
    };
    let rows = csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 3))))
        .collect::<Result<Vec<D>>>()?;
    Ok((hash, rows))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One patch. `path` is relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRow {
    pub patch_id: String,
    pub wsi_id: String,
    pub patient_id: String,
    pub coarse_label: String,
    pub fine_label: String,
    pub split: Split,
    pub x: u32,
    pub y: u32,
    pub path: String,
    /// Set by the filter stage; every freshly cut patch starts kept.
    pub kept: bool,
}

/// Slides and patches per class and split, in the layout of the dataset
/// distribution table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub coarse: String,
    pub fine: String,
    pub train_wsis: usize,
    pub train_patches: usize,
    pub development_wsis: usize,
    pub development_patches: usize,
    pub test_wsis: usize,
    pub test_patches: usize,
}

impl CountRow {
    pub fn wsis(&self) -> [usize; 3] {
        [self.train_wsis, self.development_wsis, self.test_wsis]
    }

    pub fn patches(&self) -> [usize; 3] {
        [self.train_patches, self.development_patches, self.test_patches]
    }
}

/// Counts of the given patches, grouped by fine class. Slides are counted
/// when they contribute at least one patch.
pub fn count_table(rows: &[PatchRow], hierarchy: &ClassHierarchy) -> Vec<CountRow> {
    let k = hierarchy.num_fine();
    let mut patches = vec![[0usize; 3]; k];
    let mut wsis = vec![[std::collections::BTreeSet::new(), Default::default(), Default::default()]; k];
    for r in rows {
        if let Some(f) = hierarchy.fine_index(&r.fine_label) {
            patches[f][r.split.index()] += 1;
            wsis[f][r.split.index()].insert(r.wsi_id.as_str());
        }
    }
    (0..k)
        .map(|f| CountRow {
            coarse: hierarchy.coarse_names[hierarchy.parent_of(f)].clone(),
            fine: hierarchy.fine_names[f].clone(),
            train_wsis: wsis[f][0].len(),
            train_patches: patches[f][0],
            development_wsis: wsis[f][1].len(),
            development_patches: patches[f][1],
            test_wsis: wsis[f][2].len(),
            test_patches: patches[f][2],
        })
        .collect()
}

/// Fixed-width text rendering for the terminal.
pub fn render_table(rows: &[CountRow]) -> String {
    let mut out = format!(
        "{:<12} {:<18} {:>6} {:>8} {:>6} {:>8} {:>6} {:>8}\n",
        "coarse", "fine", "train", "", "dev", "", "test", ""
    );
    let _ = writeln!(
        out,
        "{:<12} {:<18} {:>6} {:>8} {:>6} {:>8} {:>6} {:>8}",
        "", "", "WSIs", "patches", "WSIs", "patches", "WSIs", "patches"
    );
    let mut last = "";
    for r in rows {
        let coarse = if r.coarse == last { "" } else { r.coarse.as_str() };
        last = &r.coarse;
        let _ = writeln!(
            out,
            "{coarse:<12} {:<18} {:>6} {:>8} {:>6} {:>8} {:>6} {:>8}",
            r.fine, r.train_wsis, r.train_patches, r.development_wsis, r.development_patches, r.test_wsis, r.test_patches
        );
    }
    out
}
