//! Text-based speaker change detection.
//!
//! The crate predicts, for each boundary between two utterances in a
//! transcript, whether the speaker changes there, using only the text. It
//! contains a small reverse-mode autodiff core, corpus handling, a family of
//! recurrent models with optional sentence-level attention, simpler
//! baselines, training with Adam and early stopping, checkpointing, and
//! evaluation utilities. A synthetic transcript generator supports
//! controlled experiments.

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod rngs;
pub mod synthgen;
pub mod training;
