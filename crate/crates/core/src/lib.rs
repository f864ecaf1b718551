//! Cascaded 2.5D mitosis detection in 4D (x, y, z, t) microscopy volumes.
//!
//! Stage 1 detects candidate boxes on slice triplets and fuses each slice
//! with its z neighbours; stage 2 rescores the survivors from a three-frame
//! temporal window. Around the two detectors sit a synthetic data
//! generator, training-time augmentation, the trainer and an evaluation
//! harness with slice- and event-level metrics.

pub mod anchors;
pub mod augment;
pub mod benchmark;
pub mod dataset_io;
pub mod detections;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loo;
pub mod pipeline;
pub mod stage1;
pub mod stage2;
pub mod synth;
pub mod train;
pub mod volume;
