//! Speech quality estimation against non-matching references.
//!
//! A twin-input network compares a test excerpt with a reference excerpt and
//! predicts which one is cleaner and by how many MOS points they differ.
//! Averaging the predicted difference over many clean references yields an
//! absolute MOS estimate.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod infer;
pub mod manifest;
pub mod model;
pub mod predictions;
pub mod synth;
pub mod train;
