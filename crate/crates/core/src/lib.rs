//! Classification-guided promptable segmentation.
//!
//! An auxiliary convolutional classifier produces class-activation maps
//! (CAMs); the CAMs are thresholded into bounding-box prompts that steer a
//! small promptable segmenter whose frozen transformer encoder is adapted
//! with low-rank (LoRA) updates. Both branches are optimized jointly under
//! a semi-supervised label budget.
//!
//! Module map:
//! - [`dataio`]: dataset container format, CT-style preprocessing,
//!   supervision partitioning and a synthetic phantom generator.
//! - [`classifier`]: conv encoder + GAP head, focal loss, CAM.
//! - [`promptgen`]: CAM thresholding, connected regions, box prompts.
//! - [`segnet`]: LoRA-adapted image encoder, box prompt encoder, mask decoder.
//! - [`trainer`]: joint end-to-end and two-stage training, prediction.
//! - [`metrics`]: Dice, Hausdorff, run aggregation, report export, overlays.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataio;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod promptgen;
pub mod segnet;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{BinaryMask, CamGrid, ImageGrid};
