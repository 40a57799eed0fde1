//! Ensemble annotation pipeline and evaluation harness for cervical
//! cytology image-description models.
//!
//! The library covers the full data path: fan-out captioning across several
//! vision-language endpoints, consensus fusion of the structured captions,
//! expert refinement of dimensions the ensemble could not settle, sharded
//! dataset persistence with checkpoint/resume, instruction-tuning
//! transforms, and benchmark scoring for morphological perception and
//! Bethesda-category classification.

pub mod bench;
pub mod cli;
pub mod config;
pub mod endpoints;
pub mod fusion;
pub mod pipeline;
pub mod prompts;
pub mod refine;
pub mod schema;
pub mod simulate;
pub mod transforms;

#[cfg(feature = "testkit")]
pub mod testkit;
