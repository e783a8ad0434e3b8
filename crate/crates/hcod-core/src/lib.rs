//! Hyperspectral camouflaged-object detection, desk scale.
//!
//! A framework-free implementation of a spectral-aware segmentation
//! pipeline: a hyperspectral cube is decomposed into a CIE-XYZ spatial
//! image and a pyramid-SAD spectral saliency prompt, encoded by a small
//! deterministic transformer with saliency-guided token dropout and
//! spectral-spatial prompt fusion, and decoded into a probability map.
//! Detail enhancement, composite losses with analytic gradients, the four
//! standard COD metrics, and dataset statistics round out the pipeline.
//!
//! Everything is seeded and bit-reproducible; no GPU, no learned
//! checkpoints, no external dataset required.

// index-heavy numeric loops read better with explicit indices
#![allow(clippy::needless_range_loop)]
#![allow(clippy::manual_is_multiple_of)]

pub mod cmf;
pub mod datastats;
pub mod error;
pub mod fde;
pub mod hsicube;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod ssdm;
pub mod synth;
pub mod tokenops;

pub use error::{Error, Result};
pub use hsicube::{GroundTruthMask, HsiCube, SaliencyMap};
