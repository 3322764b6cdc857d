//! Multimodal mmWave beam prediction at desk scale.
//!
//! The crate covers the whole pipeline: a geometric multipath channel with
//! exhaustive beam search, synthetic scenes with LiDAR and camera proxies,
//! LiDAR weather impairment, a small reverse-mode tensor engine, the
//! multimodal attention model and its evaluation.

pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod phy;
pub mod scene;
pub mod tensor;
pub mod weather;

pub use error::{Error, Result};
pub use geometry::{BeamMask, BevGridSpec};
pub use phy::{ArrayConfig, BeamLayout, ChannelMatrix, Codebook, Path, SubcarrierGrid, C64};
pub use tensor::{ParamStore, Tape, Tensor, Var};
