//! Mixed-precision KV cache compression with paged storage.

pub mod attn;
pub mod config;
pub mod engine;
pub mod layout;
pub mod memstore;
pub mod policy;
pub mod quant;
pub mod report;
pub mod run;
pub mod sim;
pub mod workload;
