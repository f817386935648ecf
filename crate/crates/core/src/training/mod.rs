//! Joint single-stage optimization of both generator streams against the
//! patch discriminator.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod run;
pub mod state;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, load_inference, save_checkpoint, InferenceModel};
pub use config::{AdamConfig, DataConfig, ExtractorConfig, Sampling, TrainConfig};
pub use run::{checkpoint_path, train_loop, LossLog, LATEST, LOG_FILE};
pub use state::{StepOutcome, TrainState};
