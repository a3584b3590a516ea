//! Iterative crowd-assisted bounding-box labeling.
//!
//! A small seed set trains a detector; its predictions go to crowd workers in
//! ten-box HITs with one hidden gold box; auto-approval and a consecutive
//! agreement rule turn answers into labels; the detector is retrained on the
//! half-labeled images and the loop repeats until the dataset is complete.
//!
//! Modules, bottom up:
//!
//! - [`geometry`]: boxes, IoU, dot seeding and box-delta encoding.
//! - [`labelstore`]: event-sourced store of images and annotations.
//! - [`crowdgate`]: HIT assembly, leasing, auto-approval and consensus.
//! - [`trainer`]: anchor sampling with the ignore rule and background labels,
//!   the four-part loss and its gradient.
//! - [`detector`]: detector contract and a simulated detector.
//! - [`workersim`]: simulated crowd workers.
//! - [`orchestrator`]: the loop driver, metrics and reports.

pub mod crowdgate;
pub mod detector;
pub mod geometry;
pub mod labelstore;
pub mod orchestrator;
pub mod rng;
pub mod trainer;
pub mod workersim;
