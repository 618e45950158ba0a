use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassHierarchy;

pub const MANIFEST_HEADER: [&str; 5] = ["patient_id", "wsi_id", "image_path", "coarse_label", "fine_label"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub wsi_id: String,
    pub image_path: String,
    pub coarse_label: String,
    pub fine_label: String,
}

/// Validated slide list: unique slide ids, labels consistent with the
/// hierarchy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
    fine: Vec<usize>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, hierarchy: &ClassHierarchy) -> Result<Self> {
        // Row i is line i + 2 of the file (after the header).
        let line = |i: usize| i + 2;
        if rows.is_empty() {
            return Err(Error::Data("manifest has no rows".into()));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut fine = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            for (name, v) in [("patient_id", &r.patient_id), ("wsi_id", &r.wsi_id), ("image_path", &r.image_path)] {
                if v.trim().is_empty() {
                    return Err(Error::Data(format!("manifest line {}: empty {name}", line(i))));
                }
            }
            if let Some(first) = seen.insert(&r.wsi_id, i) {
                return Err(Error::Data(format!(
                    "manifest line {}: wsi_id '{}' already used on line {}",
                    line(i),
                    r.wsi_id,
                    line(first)
                )));
            }
            let f = hierarchy.fine_index(&r.fine_label).ok_or_else(|| {
                Error::Data(format!("manifest line {}: unknown fine label '{}'", line(i), r.fine_label))
            })?;
            let c = hierarchy.coarse_index(&r.coarse_label).ok_or_else(|| {
                Error::Data(format!("manifest line {}: unknown coarse label '{}'", line(i), r.coarse_label))
            })?;
            if hierarchy.parent_of(f) != c {
                return Err(Error::Data(format!(
                    "manifest line {}: fine label '{}' belongs to '{}', not '{}'",
                    line(i),
                    r.fine_label,
                    hierarchy.coarse_names[hierarchy.parent_of(f)],
                    r.coarse_label
                )));
            }
            fine.push(f);
        }
        Ok(Manifest { rows, fine })
    }

    pub fn from_reader<R: Read>(reader: R, hierarchy: &ClassHierarchy) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Data(format!(
                "manifest header must be {}, found {}",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<ManifestRow>().enumerate() {
            rows.push(rec.map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 2)))?);
        }
        Manifest::new(rows, hierarchy)
    }

    pub fn load(path: &Path, hierarchy: &ClassHierarchy) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Manifest::from_reader(f, hierarchy).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io("<manifest>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Fine class index of row `i`.
    pub fn fine_of(&self, i: usize) -> usize {
        self.fine[i]
    }

    /// Number of slides per patient, ordered by patient id.
    pub fn patient_sizes(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            *out.entry(r.patient_id.as_str()).or_insert(0) += 1;
        }
        out
    }
}
