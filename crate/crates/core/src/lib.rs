pub mod ann;
pub mod config;
pub mod encoding;
pub mod error;
pub mod network;
pub mod topology;
pub mod event;
pub mod verification;
pub mod metrics;
pub mod data;

pub use ann::train::{evaluate, train, Engine, EpochRecord, Evaluation, TrainLimits, Trainer};
pub use config::{DatasetKind, EngineParams, InputMode, NetworkConfig, RoundingMode};
pub use data::{load_checkpoint, load_dataset, save_checkpoint, Dataset, Split};
pub use error::{Error, Result};
pub use event::{run_example, EventOptions, ExampleResult, RunMode};
pub use network::Network;
pub use topology::Topology;
