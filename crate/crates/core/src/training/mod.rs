//! Partial-label training: task-keyed image pools, augmentation, SGD and
//! validation-driven checkpoint selection.

mod augment;
mod checkpoint;
mod pool;
mod sgd;
mod trainer;

pub use augment::{augment, AugOp, AugmentPlan, AugmentRanges, Rect};
pub use checkpoint::{Checkpoint, StoredArray, CHECKPOINT_FORMAT};
pub use pool::{ImagePool, PoolSet, PoolStats, Tasked, TaskedIndex, DEFAULT_POOL_CAPACITY};
pub use sgd::{sgd_step, LrSchedule};
pub use trainer::{mean_dsc, train, EpochEvent, EpochRecord, SampleSource, TrainConfig, TrainOutcome};
pub(crate) use trainer::mix_seed;
