//! Configuration, training, evaluation orchestration and sweeps.

pub mod config;
pub mod optim;
pub mod run;
pub mod train;

pub use config::{parse_config, parse_config_str, ExperimentConfig};
pub use run::{run_eval, run_gen_data, run_sweep, run_train_and_eval, SweepAxis};
pub use train::{prepare_data, run_training, MetricsRecord, Splits, TrainOutput};
