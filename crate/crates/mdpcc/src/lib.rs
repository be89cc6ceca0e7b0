//! Batteries-included companion to [`mdpcc_core`]: disk caching, backend
//! adapters (HTTP, subprocess, mock fixtures), corpus and config file
//! formats, the parallel augmentation pipeline, and the train/eval harness
//! behind the `mdpcc` command-line tool.
//!
//! The core crate owns every algorithm; this crate owns every file handle.
//! Anything here that touches determinism (cache keys, record hashing,
//! parallel ordering) is written so that two runs over the same inputs
//! produce byte-identical outputs.

pub mod backends;
pub mod cache;
pub mod cli;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod harness;
pub mod pipeline;
