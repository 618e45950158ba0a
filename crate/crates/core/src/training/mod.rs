//! The weighted multi-level loss, its epoch schedules, RMSprop and the
//! training loop.

mod loss;
mod rmsprop;
mod schedule;
mod trainer;

pub use loss::hierarchical_loss;
pub use rmsprop::{rmsprop_step, RmsPropState, RMSPROP_DECAY, RMSPROP_EPSILON};
pub use schedule::{LossWeightSchedule, LrSchedule};
pub use trainer::{accuracy, multi_run, predict_set, run_one, train, EpochLog, LevelProbs, RunOutcome, Splits, TrainConfig};
