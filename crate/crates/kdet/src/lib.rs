//! Tiny grid-detector distillation lab.
//!
//! A student detector is first trained purely on a teacher's pseudo labels
//! (feature matching under an imitation mask plus box/confidence/class
//! prediction matching), then fine-tuned on ground-truth labels. The crate
//! ships everything needed to run that pipeline end to end on synthetic
//! shape scenes: a small f64 tensor engine with reverse-mode autodiff, box
//! algebra, dataset generation and serialization, the detector models, the
//! loss terms, PASCAL-style mAP@50 evaluation, and experiment harnesses for
//! multi-teacher merging, label-fraction sweeps, and day/night domain shift.

pub mod audit;
pub mod cli;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod numcore;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
