//! Stage commands wiring the library into reproducible runs driven by a
//! plain-text config. Each stage reads the previous stage's directory under
//! the output root and writes its own.

mod config;
mod records;
mod stages;

pub use config::RunConfig;
pub use records::{count_table, read_csv, render_table, write_csv, CountRow, PatchRow};
pub use stages::{
    audit_leakage, cmd_evaluate, cmd_filter, cmd_normalize, cmd_patch, cmd_synth, cmd_train, family_key, family_label,
    read_cross_coarse, CrossCoarse, EvaluateSummary, FilterCount, FilterSummary, LogLine, NormalizeSummary,
    PatchSummary, SynthSummary, TrainSummary, FAMILIES,
};
