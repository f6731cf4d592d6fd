//! Online tracking sessions, training, checkpoints and profiling.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;
pub mod profile;
pub mod session;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::Config;
pub use model::{FrameForward, FrameInput, TrackerModel};
pub use profile::{profile, window_peak, ProfileReport, WindowBuffer};
pub use session::{SessionOptions, StepStats, TrackerSession};
pub use train::{unroll_clip, DataSource, StepReport, Trainer};
