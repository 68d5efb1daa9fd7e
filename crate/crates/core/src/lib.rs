//! Dual-subspace re-projection surface anomaly detection.
//!
//! An image is encoded into two vector-quantized latent grids (input / 4
//! and input / 8). A general decoder reconstructs appearance from the
//! codes, an object-specific decoder re-projects them onto the normal
//! subspace learned for one object, and a detector segments anomalies from
//! the disagreement between the two reconstructions. Training anomalies are
//! synthesized directly in the quantized latent space.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nets;
pub mod synth;
pub mod train;
pub mod types;
pub mod vq;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainProgress};
pub use config::{load_config, DsrConfig, EvalConfig, ModelConfig, PixelPooling, Profile, Stage, StageConfig, SynthConfig};
pub use error::{DsrError, Result};
pub use eval::{evaluate_dataset, EvalReport};
pub use nets::DsrModel;
pub use train::{train_stage1, train_stage2, train_stage3, StageReport, SupervisedSample};
pub use types::{AnomalyMask, ImageTensor, Level, MapResolution, SegmentationMap};
pub use vq::{Codebook, FeatureGrid, QuantizedGrid};

/// The compute device used throughout; only the CPU backend is built.
pub fn default_device() -> candle_core::Device {
    candle_core::Device::Cpu
}
