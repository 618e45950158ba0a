//! Network construction: the class hierarchy, declarative specs, the flat
//! and branched builders, and checkpoints.

mod checkpoint;
mod hierarchy;
mod network;
mod spec;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Meta};
pub use hierarchy::ClassHierarchy;
pub use network::{
    Architecture, ForwardOutput, Heads, LayerKind, Network, Prediction, RunningStats, TrainableLayer,
};
pub use spec::{BlockSpec, ModelSpec, Preset};
