//! Modality-incremental learning: a shared transformer backbone that learns
//! one modality per phase, with feature modulation, gated low-rank bridging
//! and hybrid alignment against the frozen previous-phase model.

pub mod alignment;
pub mod baselines;
pub mod bridging;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod modulation;
pub mod optim;
pub mod params;
pub mod tape;
pub mod trainer;

pub use config::{ContrastiveForm, FusionMode, MergeMode, ModelConfig};
pub use error::{MilError, Result};
pub use model::{forward, init_model, FeatureSequence, ModelState};
pub use params::Parameters;
pub use trainer::Method;
