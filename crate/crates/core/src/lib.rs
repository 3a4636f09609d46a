//! Respiration waveform reconstruction from PPG with a conditional
//! diffusion model.
//!
//! The pipeline runs [`dsp`] preprocessing over recordings loaded by
//! [`signal_io`], stores segments in a [`store::SegmentStore`], trains the
//! [`nn`] noise predictor with [`training::train`], samples with
//! [`diffusion::sample`] and scores the result with [`evaluation`].

pub mod diffusion;
pub mod dsp;
pub mod evaluation;
pub mod nn;
pub mod signal_io;
pub mod store;
pub mod training;

pub use diffusion::{NoiseSchedule, Sampler, ScheduleConfig};
pub use dsp::{PreprocessConfig, SegmentPair};
pub use evaluation::{EvalReport, WindowSpec};
pub use nn::{ModelConfig, ModelParams};
pub use store::SegmentStore;
pub use training::{TrainConfig, TrainRecord};
