//! Associative domain adaptation for unequal class distributions and
//! sequential adaptation over drifting data streams.
//!
//! Modules, bottom-up:
//!
//! * [`numgrad`]: dense matrices and a reverse-mode tape.
//! * [`backbone`]: MLP embedder/classifier, cross-entropy, Adam, checkpoints.
//! * [`assoc`]: affinities, transition matrices, walker and visit losses.
//! * [`estimate`]: agglomerative clustering and visit weights γ.
//! * [`sampling`]: balanced source batches, KL-controlled target batches.
//! * [`datagen`]: synthetic shifted domains, drifting streams, image loader.
//! * [`stream`]: pretraining, adaptation rounds, lag evaluation.
//! * [`gradcheck`]: finite-difference suites over every loss.
//! * [`cli`]: configuration and subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assoc;
pub mod backbone;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod estimate;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod numgrad;
pub mod sampling;
pub mod seed;
pub mod stream;

pub use error::{Error, ParseError, Result};
pub use numgrad::{Graph, Matrix, NodeId};
