//! Manifests, patient-grouped splits, batching and the synthetic corpus.

mod batch;
mod manifest;
mod split;
mod synthetic;

pub use batch::{batch_indices, make_batches, ImageSet, LabeledBatch};
pub use manifest::{Manifest, ManifestRow, MANIFEST_HEADER};
pub use split::{split_by_patient, Split, SplitAssignment, DEFAULT_RATIOS};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
