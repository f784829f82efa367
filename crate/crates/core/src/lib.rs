//! Post-processing and evaluation engine for whole-slide-image instance
//! segmentation of renal compartments (glomeruli, arterioles, arteries).

pub mod config;
pub mod dct;
pub mod error;
pub mod io;
pub mod mask;
pub mod merge;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tiling;
pub mod tissue;

pub use config::{InstanceClass, PipelineConfig, FORMAT_VERSION};
pub use error::{Error, ErrorFamily, Result};
