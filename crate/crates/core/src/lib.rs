//! CPU-side laboratory for head-wise query-similarity caching of offloaded KV
//! caches during top-k attention decoding.

pub mod attention;
pub mod baseline_caches;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod head_profile;
pub mod pipeline;
pub mod policy;
pub mod retrieval;
pub mod rng;
pub mod similarity_cache;
pub mod stats;
pub mod synthetic;
pub mod trace;
pub mod workload;

pub use error::{Error, Result};
