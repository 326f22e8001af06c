//! Desk-scale multimodal fusion toolkit for volumetric + planar imaging.
//!
//! The crate trains small residual / dense convolutional backbones on
//! tri-modal retinal-style acquisitions (structural volume, flow volume,
//! planar scanning-laser image) and compares three fusion strategies —
//! early, intermediate, hierarchical — against single-modality baselines,
//! reporting AUC / sensitivity / specificity per configuration.
//!
//! Everything runs on CPU with a tape-based reverse-mode autodiff engine
//! (`tape`), naive direct convolutions (`conv`), and deterministic seeded
//! pipelines end to end: same seed, same bytes out.

pub mod archive;
pub mod backbones;
pub mod conv;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod ften;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod experiment;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod train;
