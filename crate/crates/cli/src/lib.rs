//! Experiment runner for the `ssd-core` simulator.

pub mod config;
pub mod construction1;
pub mod simulate;
pub mod sweep;
pub mod verify;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

pub const THREADS_ENV: &str = "SSD_LAB_THREADS";

/// What a subcommand produced: the artifact text, human-readable notes for
/// stderr, and whether every in-run check held.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub body: String,
    pub notes: Vec<String>,
    pub pass: bool,
}

impl CommandOutput {
    pub fn new(body: String) -> Self {
        Self {
            body,
            notes: Vec::new(),
            pass: true,
        }
    }
}

/// Run `f` over `0..n`, in parallel when allowed, returning results in index
/// order.
pub fn par_map<T, F>(n: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .with_context(|| format!("{THREADS_ENV} must be an integer, got {v:?}"))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building thread pool")?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
