//! End-to-end assembly: backbone, PolyMamba, matching, refinement,
//! upsampling, loss, toy training and weight files.

pub mod backbone;
pub mod config;
pub mod loss;
pub mod model;
pub mod train;
pub mod weights;

pub use config::{ConfigError, ModelConfig};
pub use loss::{sequence_loss, DEFAULT_GAMMA};
pub use model::{count_parameters, upsample_flow, FlowModel, ModelError, ModelOutput, StageTimings};
pub use train::{
    evaluate, log_csv, train_toy, write_log, EvalReport, LogRow, TrainConfig, TrainError, TrainOutcome, LOG_HEADER,
};
pub use weights::{check_config, instantiate, load_weights, save_weights, WeightError};
