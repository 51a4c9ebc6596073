//! Motion-focused self-supervision for video masked autoencoders.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! 1. [`flow`] estimates dense TV-L1 optical flow between consecutive frames.
//! 2. [`motionmap`] turns flow into motion-boundary magnitude maps, which are
//!    blind to uniform (camera-induced) flow, and smooths them.
//! 3. [`boxdetect`] thresholds the maps, traces contours and reduces the two
//!    most significant ones to a per-clip motion box.
//! 4. [`masker`] tokenizes a clip into tubes and samples tube masks that keep
//!    a fixed share of the in-box tubes masked.
//! 5. [`tinynet`] is a small reference masked autoencoder with a multi-head
//!    cross-attention classification head and reverse-mode gradients.
//!
//! [`evalsynth`] renders synthetic scenes with known ground truth and hosts
//! the evaluation harnesses.

pub mod boxdetect;
pub mod clip;
pub mod error;
pub mod evalsynth;
pub mod flow;
pub mod frames;
pub mod masker;
pub mod motionmap;
pub mod rng;
pub mod tinynet;

pub use boxdetect::{iou, BitMask, Contour, MotionBox};
pub use clip::{ClipDims, ClipTensor, TubeDims};
pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowField, Frame};
pub use masker::{MaskPlan, TubeGrid};
pub use motionmap::{MotionMap, SmoothConfig};
