//! Memory-retention analysis and multi-offset decoding of sequential
//! brain-signal recordings.
//!
//! The crate covers the whole pipeline:
//!
//! * [`dataset`] / [`mdst`]: the recording data model, sliding windows, the
//!   contamination-free split and the binary dataset format;
//! * [`synthgen`]: synthetic recordings with a known memory-decay profile;
//! * [`analysis`]: offset ridge regression and trial-wise RSA;
//! * [`model`]: the straightforward and disentangled decoders, trained with
//!   hand-derived gradients and AdamW;
//! * [`decode`]: caption retrieval from predicted embeddings;
//! * [`eval`]: CIDEr, METEOR-lite and the per-offset report.

pub mod analysis;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod eval;
pub mod fmt;
pub mod mdst;
pub mod model;
pub mod rng;
pub mod synthgen;

pub use dataset::{
    build_windows, split_contamination_free, Dataset, ImageRecord, Split, SplitConfig, Trial,
    TrialRef, WindowSample,
};
pub use error::{Error, ErrorClass, Result};
pub use synthgen::GenConfig;
