//! Core engine for commonsense-conflict text augmentation.
//!
//! The pipeline turns an article into an augmented article in four stages:
//!
//! 1. [`extraction`] — prompt a generative extractor with in-context examples
//!    and parse one commonsense triplet `(subject, relation, object)` per
//!    relation, dropping low-confidence generations via a perplexity filter.
//! 2. [`reasoning`] — ask a commonsense reasoner for the *golden* object of
//!    each `(subject, relation)` pair and measure how strongly the article's
//!    own object conflicts with it (force-decoded likelihood).
//! 3. [`expression`] — pick the triplet with the highest conflict score and
//!    render a one-sentence commonsense expression ("However, ... instead
//!    of ..." / "And, ..."), then append it to the article.
//! 4. [`detector`] — train and evaluate a binary misinformation classifier on
//!    the (augmented) articles with the reference optimizer settings.
//!
//! Everything here is `no_std` + `alloc`: model backends are abstract traits
//! ([`backends`]), and all stage logic is pure given a backend. File IO, the
//! CLI, HTTP/subprocess backends, and caching live in the companion `mdpcc`
//! crate.
#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod backends;
pub mod corpus;
pub mod detector;
pub mod expression;
pub mod extraction;
pub mod metrics;
pub mod reasoning;
pub mod relations;
pub mod text;
