//! Second-order attention and second-order similarity for image
//! descriptors.
//!
//! The crate implements a complete desk-scale descriptor pipeline:
//!
//! * [`pooling`] — generalized-mean pooling, feature clipping, learned
//!   whitening and l2 normalization (the first-order descriptor head);
//! * [`soa`] — the second-order attention block that re-weights feature
//!   maps by their spatial correlations;
//! * [`loss`] — triplet loss and second-order similarity loss;
//! * [`mining`] — epoch-level anchor sampling and hard-negative mining;
//! * [`backbone`] — a small fully-convolutional image backbone and an
//!   L2-Net-shaped patch backbone with configurable attention insertion
//!   points, plus the full image-to-descriptor pipeline;
//! * [`train`] — epoch-based training with descriptor refresh, mining,
//!   two-group Adam and checkpointing;
//! * [`eval`] — retrieval and patch-verification metrics (mAP, mP@10,
//!   FPR@95) under the easy/medium/hard junk conventions, and the
//!   exponent-sweep ablation runner;
//! * [`store`], [`checkpoint`], [`imageio`], [`synth`], [`heatmap`],
//!   [`cli`] — the binary descriptor store, model checkpoints, pixmap
//!   ingestion, synthetic benchmark generation, attention-map export and
//!   the command-line surface.
//!
//! The `examples/` directory holds one runnable example per capability;
//! `cargo run --bin solar -- --help` lists the CLI subcommands.

pub mod backbone;
pub mod checkpoint;
// pub mod cli;
// pub mod config_file;
pub mod conv;
pub mod error;
pub mod eval;
// pub mod heatmap;
pub mod imageio;
pub mod loss;
pub mod mining;
pub mod numcheck;
pub mod pooling;
pub mod soa;
pub mod store;
pub mod synth;
pub mod train;
// pub mod verify;

pub use error::{Error, Result};
pub use pooling::{Descriptor, FeatureMap, GemParam, WhiteningLayer};
