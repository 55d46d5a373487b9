//! Latent construct discovery and classification with chat-completion models.
//!
//! The pipeline segments a corpus into units, detects which units carry the
//! construct of interest, summarizes them, proposes candidate classes from
//! overlapping batches of summaries, lets a reviewer settle the class set,
//! then rates every unit against every class on a 7-point scale and picks
//! one or two labels. Results are scored against human gold labels.

pub mod classgen;
pub mod classify;
pub mod config;
pub mod corpus;
pub mod detect;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod review;
pub mod stage;
pub mod store;
pub mod summarize;
