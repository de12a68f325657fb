//! IO, file formats, and gate runners for the detection toolkit.
//!
//! The algorithmic library lives in `detkit-core`; this crate adds
//! COCO-like JSON ingestion, CSV/report export, toy-detector checkpoints,
//! and the finite-difference gates behind the `grad-check` CLI command.

pub mod checkpoint;
pub mod gates;
pub mod persist;
pub mod report;
