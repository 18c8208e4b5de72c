//! Synthetic attention workloads and the line-delimited JSON trace format.
//!
//! Every key carries `-ln(rank)` in feature 0, where `rank` is the token's
//! place in a seeded permutation, and every query carries `sqrt(d) * s` in
//! feature 0. Remaining key noise lives in the first half of the features and
//! query noise in the second half, so the logit of token `j` is exactly
//! `-s * ln(rank_j)` and attention follows a Zipf law with exponent `s`.
//! Each (layer, head) draws its own `s`, which makes sparsity differ per head.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attn::Matrix;
use crate::config::SimConfig;

pub const TRACE_FORMAT: &str = "kvmix-trace";
pub const TRACE_VERSION: u32 = 1;

/// Derives an independent stream seed from a base seed and a path of labels.
pub fn stream_seed(base: u64, path: &[u64]) -> u64 {
    // splitmix64 folded over the path
    let mut x = base;
    for &p in path {
        x = x.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(base, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: u64,
    pub arrival_tick: u64,
    pub prompt_len: usize,
    pub gen_len: usize,
}

/// Requests with Poisson arrivals (exponential gaps, floored to ticks).
pub fn request_specs(cfg: &SimConfig) -> Vec<RequestSpec> {
    let mut rng = rng_for(cfg.seed, &[1]);
    let gap = Exp::new(cfg.arrival_rate).expect("validated rate");
    let mut t = 0.0f64;
    (0..cfg.num_requests as u64)
        .map(|id| {
            if id > 0 {
                t += gap.sample(&mut rng);
            }
            RequestSpec {
                id,
                arrival_tick: t.floor() as u64,
                prompt_len: rng.gen_range(cfg.prompt_len_min..=cfg.prompt_len_max),
                gen_len: rng.gen_range(cfg.gen_len_min..=cfg.gen_len_max),
            }
        })
        .collect()
}

/// Zipf exponent of each (layer, head), indexed `[layer][head]`.
pub fn head_exponents(cfg: &SimConfig) -> Vec<Vec<f64>> {
    let mut rng = rng_for(cfg.seed, &[2]);
    (0..cfg.layers)
        .map(|_| {
            (0..cfg.kv_heads)
                .map(
                    |_| {
                        if cfg.zipf_max > cfg.zipf_min {
                            rng.gen_range(cfg.zipf_min..cfg.zipf_max)
                        } else {
                            cfg.zipf_min
                        }
                    },
                )
                .collect()
        })
        .collect()
}

/// All tokens of one (request, layer, head): prompt followed by generation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadData {
    pub keys: Matrix,
    pub values: Matrix,
    /// One matrix per query head in the group.
    pub queries: Vec<Matrix>,
}

pub fn head_data(cfg: &SimConfig, exponent: f64, request: u64, layer: usize, head: usize, len: usize) -> HeadData {
    let d = cfg.dim;
    let half = d / 2;
    let mut rng = rng_for(cfg.seed, &[3, request, layer as u64, head as u64]);
    let mut ranks: Vec<usize> = (1..=len).collect();
    ranks.shuffle(&mut rng);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let keys: Vec<Vec<f64>> = ranks
        .iter()
        .map(|&r| {
            let mut k = vec![0.0; d];
            k[0] = -(r as f64).ln();
            for x in &mut k[1..half] {
                *x = normal();
            }
            k
        })
        .collect();
    let values: Vec<Vec<f64>> = (0..len).map(|_| (0..d).map(|_| normal()).collect()).collect();
    let lead = (d as f64).sqrt() * exponent;
    let queries: Vec<Matrix> = (0..cfg.queries_per_kv)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..len)
                .map(|_| {
                    let mut q = vec![0.0; d];
                    q[0] = lead;
                    for x in &mut q[half..] {
                        *x = normal();
                    }
                    q
                })
                .collect();
            Matrix::from_rows(&rows).expect("rectangular")
        })
        .collect();
    HeadData {
        keys: Matrix::from_rows(&keys).expect("rectangular"),
        values: Matrix::from_rows(&values).expect("rectangular"),
        queries,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub config: SimConfig,
    pub requests: Vec<RequestSpec>,
    pub exponents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Prompt,
    Gen,
}

/// Tokens of one (request, layer, head) for one step. The prompt is step 0;
/// generation step `s` carries the single token produced at that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub request_id: String,
    pub layer: usize,
    pub kv_head: usize,
    pub kind: RecordKind,
    pub step: usize,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// `queries[query_head][token]`.
    pub queries: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_err(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Parse { line, msg: msg.into() }
}

/// A fully validated trace, grouped per (request, layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    /// Keyed by (request id, layer, head); records in step order.
    pub heads: BTreeMap<(String, usize, usize), Vec<TraceRecord>>,
}

impl Trace {
    pub fn request_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.heads.keys().map(|k| k.0.clone()).collect();
        ids.dedup();
        ids
    }
}

pub fn request_label(id: u64) -> String {
    format!("r{id}")
}

/// Writes the whole synthetic workload as a trace.
pub fn write_trace<W: Write>(cfg: &SimConfig, mut out: W) -> Result<(), TraceError> {
    let requests = request_specs(cfg);
    let exponents = head_exponents(cfg);
    let header = TraceHeader {
        format: TRACE_FORMAT.into(),
        version: TRACE_VERSION,
        config: cfg.clone(),
        requests: requests.clone(),
        exponents: exponents.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for r in &requests {
        for (layer, row) in exponents.iter().enumerate() {
            for (head, &exponent) in row.iter().enumerate() {
                let len = r.prompt_len + r.gen_len;
                let data = head_data(cfg, exponent, r.id, layer, head, len);
                let slice = |lo: usize, hi: usize| TraceRecord {
                    request_id: request_label(r.id),
                    layer,
                    kv_head: head,
                    kind: if lo == 0 { RecordKind::Prompt } else { RecordKind::Gen },
                    step: if lo == 0 { 0 } else { lo - r.prompt_len + 1 },
                    keys: (lo..hi).map(|i| data.keys.row(i).to_vec()).collect(),
                    values: (lo..hi).map(|i| data.values.row(i).to_vec()).collect(),
                    queries: data.queries.iter().map(|q| (lo..hi).map(|i| q.row(i).to_vec()).collect()).collect(),
                    scores: None,
                };
                let mut put = |rec: TraceRecord| -> Result<(), TraceError> {
                    serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
                    out.write_all(b"\n")?;
                    Ok(())
                };
                put(slice(0, r.prompt_len))?;
                for i in r.prompt_len..len {
                    put(slice(i, i + 1))?;
                }
            }
        }
    }
    Ok(())
}

/// Parses and validates a trace. Errors name the offending line.
pub fn read_trace<R: BufRead>(input: R) -> Result<Trace, TraceError> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty trace"))?;
    let header: TraceHeader = serde_json::from_str(&first?).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.format != TRACE_FORMAT {
        return Err(parse_err(1, format!("unknown format {:?}", header.format)));
    }
    if header.version != TRACE_VERSION {
        return Err(parse_err(1, format!("unsupported trace version {}", header.version)));
    }
    header.config.validate().map_err(|e| parse_err(1, e.to_string()))?;
    let cfg = &header.config;
    let mut heads: BTreeMap<(String, usize, usize), Vec<TraceRecord>> = BTreeMap::new();
    for (i, line) in lines {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        if rec.layer >= cfg.layers || rec.kv_head >= cfg.kv_heads {
            return Err(parse_err(n, "layer or head out of range"));
        }
        let tokens = rec.keys.len();
        if tokens == 0 || rec.values.len() != tokens {
            return Err(parse_err(n, "keys and values must hold the same nonzero token count"));
        }
        if rec.queries.len() != cfg.queries_per_kv || rec.queries.iter().any(|q| q.len() != tokens) {
            return Err(parse_err(n, "queries do not match the group size and token count"));
        }
        let rows = rec.keys.iter().chain(&rec.values).chain(rec.queries.iter().flatten());
        for row in rows {
            if row.len() != cfg.dim || row.iter().any(|x| !x.is_finite()) {
                return Err(parse_err(n, format!("vector is not {} finite numbers", cfg.dim)));
            }
        }
        let list = heads.entry((rec.request_id.clone(), rec.layer, rec.kv_head)).or_default();
        let expect = list.len();
        match rec.kind {
            RecordKind::Prompt if rec.step != 0 || expect != 0 => {
                return Err(parse_err(n, "prompt must be the first record of its head, at step 0"));
            }
            RecordKind::Gen if rec.step != expect || expect == 0 || tokens != 1 => {
                return Err(parse_err(n, format!("expected generation step {expect} with one token")));
            }
            _ => {}
        }
        list.push(rec);
    }
    // Every head of a request must agree on prompt length and step count.
    let mut shape: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for ((req, _, _), recs) in &heads {
        let s = (recs[0].keys.len(), recs.len());
        if *shape.entry(req).or_insert(s) != s {
            return Err(parse_err(0, format!("heads of request {req} disagree on length")));
        }
    }
    Ok(Trace { header, heads })
}
