//! Speculative decoding and speculative-speculative decoding over synthetic
//! categorical language models.

pub mod cache;
pub mod dist;
pub mod hitmodel;
pub mod lm;
pub mod perf;
pub mod sim;
pub mod specdec;
pub mod stats;
