use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::hierarchy::ClassHierarchy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// VGG16 at 224x224.
    Full,
    /// Three thin blocks at 32x32, small enough to train on a laptop CPU.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?} (full|desk)"))),
        }
    }
}

/// `convs` 3x3 convolutions with `filters` output channels, then a 2x2 pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub convs: usize,
    pub filters: usize,
}

/// Declarative description of a (possibly branched) VGG-style network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub blocks: Vec<BlockSpec>,
    /// 1-based block after whose pool the coarse branch taps the trunk.
    pub branch_attach: usize,
    pub branch_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub dropout: f64,
    pub hierarchy: ClassHierarchy,
    pub preset: Preset,
}

fn blocks(pairs: &[(usize, usize)]) -> Vec<BlockSpec> {
    pairs
        .iter()
        .map(|&(convs, filters)| BlockSpec { convs, filters })
        .collect()
}

impl ModelSpec {
    /// VGG16 on single-channel 224x224 input with the coarse branch after
    /// block 3.
    pub fn full() -> Self {
        ModelSpec {
            input_shape: [1, 224, 224],
            blocks: blocks(&[(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]),
            branch_attach: 3,
            branch_widths: vec![256, 256],
            head_widths: vec![4096, 4096],
            dropout: 0.5,
            hierarchy: ClassHierarchy::default(),
            preset: Preset::Full,
        }
    }

    pub fn desk() -> Self {
        ModelSpec {
            input_shape: [1, 32, 32],
            blocks: blocks(&[(1, 8), (1, 16), (1, 32)]),
            branch_attach: 2,
            branch_widths: vec![32],
            head_widths: vec![64],
            dropout: 0.5,
            hierarchy: ClassHierarchy::default(),
            preset: Preset::Desk,
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::full(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hierarchy.validate()?;
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidSpec(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidSpec("at least one conv block is required".into()));
        }
        if let Some(b) = self.blocks.iter().find(|b| b.convs == 0 || b.filters == 0) {
            return Err(Error::InvalidSpec(format!(
                "block {b:?} needs at least one conv and one filter"
            )));
        }
        let div = 1usize << self.blocks.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::InvalidSpec(format!(
                "input {h}x{w} must be divisible by {div} to halve cleanly through {} blocks",
                self.blocks.len()
            )));
        }
        if self.branch_attach < 1 || self.branch_attach > self.blocks.len() - 1 {
            return Err(Error::InvalidSpec(format!(
                "branch_attach {} outside 1..={}",
                self.branch_attach,
                self.blocks.len().saturating_sub(1)
            )));
        }
        if self.head_widths.contains(&0) || self.branch_widths.contains(&0) {
            return Err(Error::InvalidSpec("fully-connected widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidSpec(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Spatial extent `(h, w)` after `n` blocks.
    pub fn extent_after(&self, n: usize) -> (usize, usize) {
        (self.input_shape[1] >> n, self.input_shape[2] >> n)
    }

    /// Flattened feature count entering the fine head.
    pub fn trunk_features(&self) -> usize {
        let (h, w) = self.extent_after(self.blocks.len());
        h * w * self.blocks.last().map_or(0, |b| b.filters)
    }

    /// Flattened feature count entering the coarse branch.
    pub fn branch_features(&self) -> usize {
        let (h, w) = self.extent_after(self.branch_attach);
        h * w * self.blocks[self.branch_attach - 1].filters
    }

    /// Stable content hash, embedded in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}
