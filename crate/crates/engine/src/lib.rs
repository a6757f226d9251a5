//! Backend-agnostic engine for detecting out-of-context use of news images.
//!
//! Given an image-text pair, the pipeline retrieves candidate captions from
//! the web, selects the most relevant one with a listwise model prompt
//! (with cosine and seeded-random baselines), rewrites it into a single
//! alignment sentence, and renders an authenticity judgment with an optional
//! rationale. On top of that sit an instruction-dataset builder with a
//! verify-and-retry loop, and an evaluation harness: per-class accuracy,
//! an ablation matrix over stage flags, a strategy-by-top-k sweep, and
//! embedding-distance reports.
//!
//! Every model call goes through the [`backend`] traits, so the whole
//! pipeline runs deterministically against the in-process mock backend.

pub mod backend;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod instruct;
pub mod pipeline;
pub mod rerank;
pub mod retrieval;
pub mod rewrite;
pub mod templates;
pub mod util;
