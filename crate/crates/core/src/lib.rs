//! Desk-scale multimodal fake news detection lab.
//!
//! The pipeline pairs a momentum-contrastive image encoder with a
//! learnable-query fusion block that injects visual features into a small
//! decoder-only language model; a two-layer classifier head reads the fused
//! sequence and the whole stack trains jointly under an uncertainty-weighted
//! two-task loss. Everything runs on a minimal f64 reverse-mode autodiff
//! tensor core, so every gradient is checkable against finite differences.

pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod vision;

pub use tensor::{Graph, NodeId, Tensor, TensorError};
