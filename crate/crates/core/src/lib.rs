//! Slice-aware skill routing.
//!
//! A backbone scores each routing hypothesis for a query; the slice-aware
//! extension adds per-slice membership indicators, per-slice experts with a
//! shared head, and attention over slices that re-weights the expert
//! representations before the final hypothesis prediction. The [`harness`]
//! trains and compares the baseline, an upsampled baseline, and their
//! slice-aware extensions on synthetic long-tail traffic from [`datagen`].

pub mod backbone;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod slice_aware;
pub mod slicing;

pub use error::{Error, Result};
