//! Model assembly, optimization, evaluation and reporting.

pub mod adam;
pub mod checkpoint;
pub mod eval;
pub mod model;
pub mod stats;
pub mod trainer;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use eval::{evaluate, run_protocol, Confusion, Evaluation, Metrics, ProtocolRun, SplitRun};
pub use model::{apply_msafeb_kv, assemble_model, msafeb_from_kv, parse_size, Model, ModelConfig};
pub use stats::{welch_t_test, WelchResult};
pub use trainer::{train, EarlyStopping, EpochRecord, TrainConfig, TrainOutcome};
