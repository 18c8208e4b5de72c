//! Browser bindings for three small explorers: per-vector quantization,
//! token placement by the compression policy, and page movement through the
//! circular free list. Every entry point takes and returns JSON text.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use kvmix::attn::Matrix;
use kvmix::config::SimConfig;
use kvmix::engine::{Engine, EngineConfig, HeadPrompt, StepInput};
use kvmix::memstore::{HeadKey, PageGeometry, PageId, StoreConfig};
use kvmix::policy::{PolicyParams, Section};
use kvmix::quant::{dequantize, packed_len, quantize, Precision};
use kvmix::workload::head_data;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeView {
    pub bits: u8,
    pub input: Vec<f64>,
    pub codes: Vec<u8>,
    pub scale: f64,
    pub zero: f64,
    pub dequantized: Vec<f64>,
    pub max_error: f64,
    /// Half a quantization step.
    pub bound: f64,
    pub packed_bytes: usize,
}

pub fn quantize_view(values: &[f64], bits: u8) -> Result<QuantizeView, String> {
    let p = Precision::new(bits).map_err(|e| e.to_string())?;
    let q = quantize(values, p).map_err(|e| e.to_string())?;
    let dequantized = dequantize(&q);
    let max_error = values.iter().zip(&dequantized).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(QuantizeView {
        bits,
        input: values.to_vec(),
        packed_bytes: packed_len(values.len(), p),
        codes: q.codes,
        scale: q.scale,
        zero: q.zero,
        dequantized,
        max_error,
        bound: q.scale / 2.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyRequest {
    pub seed: u64,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub dim: usize,
    pub window: usize,
    pub alpha_high: f64,
    pub alpha_low: f64,
    /// Zipf exponent of the synthetic attention.
    pub exponent: f64,
}

impl Default for PolicyRequest {
    fn default() -> Self {
        Self {
            seed: 1,
            prompt_len: 96,
            gen_len: 32,
            dim: 16,
            window: 8,
            alpha_high: 1.0,
            alpha_low: 0.02,
            exponent: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyView {
    /// "high", "low", "pruned" or "window" for every position.
    pub classes: Vec<String>,
    pub high: u64,
    pub low: u64,
    pub pruned: u64,
    pub window: u64,
    pub payload_fraction: f64,
    pub full_fraction: f64,
    pub pages: u64,
}

fn store_config(dim: usize, page_bytes: usize, pages: usize, max_seq: usize) -> Result<StoreConfig, String> {
    Ok(StoreConfig::new(PageGeometry::new(page_bytes, dim).map_err(|e| e.to_string())?, pages, max_seq))
}

fn prompt_of(key: HeadKey, keys: &Matrix, values: &Matrix, queries: &[Matrix], n: usize) -> HeadPrompt {
    HeadPrompt {
        head: key,
        keys: keys.head_rows(n),
        values: values.head_rows(n),
        queries: queries.iter().map(|q| q.head_rows(n)).collect(),
    }
}

fn step_of(key: HeadKey, keys: &Matrix, values: &Matrix, queries: &[Matrix], pos: usize) -> StepInput {
    StepInput {
        head: key,
        key: keys.row(pos).to_vec(),
        value: values.row(pos).to_vec(),
        queries: queries.iter().map(|q| q.row(pos).to_vec()).collect(),
    }
}

fn sim_config(seed: u64, dim: usize) -> SimConfig {
    SimConfig { seed, dim, queries_per_kv: 1, ..SimConfig::default() }
}

pub fn policy_view(req: &PolicyRequest) -> Result<PolicyView, String> {
    let n = req.prompt_len + req.gen_len;
    if req.prompt_len == 0 || n > 4096 || req.dim == 0 || req.dim > 256 {
        return Err("need 1 <= prompt_len, prompt_len + gen_len <= 4096 and 1 <= dim <= 256".into());
    }
    let policy = PolicyParams {
        alpha_high: req.alpha_high,
        alpha_low: req.alpha_low,
        window: req.window,
        ..PolicyParams::default()
    };
    let cfg = store_config(req.dim, PageGeometry::DEFAULT_PAGE_BYTES, 4 * n + 8, n)?;
    let mut engine = Engine::new(cfg, EngineConfig { policy, quantize_window: false }).map_err(|e| e.to_string())?;
    let data = head_data(&sim_config(req.seed, req.dim), req.exponent, 0, 0, 0, n);
    let key = HeadKey::new(0, 0, 0);
    engine
        .prefill_batch(vec![prompt_of(key, &data.keys, &data.values, &data.queries, req.prompt_len)])
        .map_err(|e| e.to_string())?;
    for pos in req.prompt_len..n {
        engine.step(step_of(key, &data.keys, &data.values, &data.queries, pos)).map_err(|e| e.to_string())?;
    }
    let st = engine.head(&key).ok_or("head missing")?;
    let window: Vec<usize> = st.window().map(|w| w.position).collect();
    let classes = (0..n)
        .map(|p| match st.slot_of(p) {
            Some(s) if s.section == Section::High => "high",
            Some(_) => "low",
            None if window.contains(&p) => "window",
            None => "pruned",
        })
        .map(String::from)
        .collect();
    let c = st.counts();
    let t = engine.head_tally(st);
    Ok(PolicyView {
        classes,
        high: c.high,
        low: c.low,
        pruned: c.pruned,
        window: window.len() as u64,
        payload_fraction: t.payload_fraction(),
        full_fraction: t.full_fraction(),
        pages: t.held_pages,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PagingRequest {
    pub seed: u64,
    pub total_pages: usize,
    pub requests: usize,
    pub heads: usize,
    pub prompt_len: usize,
    pub gen_steps: usize,
    pub window: usize,
    pub alpha_high: f64,
    pub alpha_low: f64,
    pub exponent: f64,
}

impl Default for PagingRequest {
    fn default() -> Self {
        Self {
            seed: 1,
            total_pages: 48,
            requests: 3,
            heads: 2,
            prompt_len: 24,
            gen_steps: 12,
            window: 4,
            alpha_high: 1.0,
            alpha_low: 0.1,
            exponent: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageView {
    pub id: u32,
    /// "free", "high", "low" or "window".
    pub class: String,
    pub request: Option<u64>,
    pub head: Option<u32>,
    pub occupancy: usize,
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub label: String,
    pub start: usize,
    pub end: usize,
    pub free_count: usize,
    /// Ring of page ids; the free region runs from `start` for `free_count` slots.
    pub slots: Vec<u32>,
    pub pages: Vec<PageView>,
}

const DEMO_DIM: usize = 8;
const DEMO_PAGE_BYTES: usize = 256;

fn frame(engine: &Engine, label: String) -> Frame {
    let store = engine.store();
    let mut pages: Vec<PageView> = (0..store.total_pages() as u32)
        .map(|id| {
            let p = store.page(PageId(id));
            PageView {
                id,
                class: "free".into(),
                request: None,
                head: None,
                occupancy: p.occupancy(),
                capacity: p.capacity(),
            }
        })
        .collect();
    for (key, t) in store.heads() {
        let tagged = t
            .bidir
            .high_pages()
            .map(|p| (p, "high"))
            .chain(t.bidir.low_pages().map(|p| (p, "low")))
            .chain(t.window.iter().map(|&p| (p, "window")));
        for (p, class) in tagged {
            let v = &mut pages[p.0 as usize];
            v.class = class.into();
            v.request = Some(key.request);
            v.head = Some(key.head);
        }
    }
    let free = store.free_list();
    Frame {
        label,
        start: free.start(),
        end: free.end(),
        free_count: free.free_count(),
        slots: free.slots().iter().map(|p| p.0).collect(),
        pages,
    }
}

/// Admits requests one by one, generates in lockstep, then releases them,
/// recording the store after every stage.
pub fn paging_frames(req: &PagingRequest) -> Result<Vec<Frame>, String> {
    if req.requests == 0 || req.requests > 16 || req.heads == 0 || req.heads > 8 || req.total_pages > 1024 {
        return Err("need 1..=16 requests, 1..=8 heads and at most 1024 pages".into());
    }
    let n = req.prompt_len + req.gen_steps;
    let policy = PolicyParams {
        alpha_high: req.alpha_high,
        alpha_low: req.alpha_low,
        window: req.window,
        ..PolicyParams::default()
    };
    let cfg = store_config(DEMO_DIM, DEMO_PAGE_BYTES, req.total_pages, n.max(1))?;
    let mut engine = Engine::new(cfg, EngineConfig { policy, quantize_window: false }).map_err(|e| e.to_string())?;
    let sim = sim_config(req.seed, DEMO_DIM);
    let data: Vec<Vec<(HeadKey, kvmix::workload::HeadData)>> = (0..req.requests as u64)
        .map(|r| {
            (0..req.heads as u32)
                .map(|h| (HeadKey::new(r, 0, h), head_data(&sim, req.exponent, r, 0, h as usize, n)))
                .collect()
        })
        .collect();
    let mut frames = vec![frame(&engine, "empty store".into())];
    for (r, heads) in data.iter().enumerate() {
        let prompts =
            heads.iter().map(|(k, d)| prompt_of(*k, &d.keys, &d.values, &d.queries, req.prompt_len)).collect();
        match engine.prefill_batch(prompts) {
            Ok(_) => frames.push(frame(&engine, format!("prefill request {r}"))),
            Err(e) => {
                frames.push(frame(&engine, format!("request {r} rejected: {e}")));
                return Ok(frames);
            }
        }
    }
    for s in 0..req.gen_steps {
        let pos = req.prompt_len + s;
        let inputs = data.iter().flatten().map(|(k, d)| step_of(*k, &d.keys, &d.values, &d.queries, pos)).collect();
        if let Err(e) = engine.step_batch(inputs) {
            frames.push(frame(&engine, format!("step {} stalled: {e}", s + 1)));
            break;
        }
        frames.push(frame(&engine, format!("generation step {}", s + 1)));
    }
    for r in 0..req.requests as u64 {
        engine.release(r).map_err(|e| e.to_string())?;
        frames.push(frame(&engine, format!("release request {r}")));
    }
    Ok(frames)
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

/// `values` is a JSON array of numbers.
#[wasm_bindgen]
pub fn quantize_json(values: &str, bits: u8) -> String {
    to_json(serde_json::from_str::<Vec<f64>>(values).map_err(|e| e.to_string()).and_then(|v| quantize_view(&v, bits)))
}

/// `request` is a JSON object with any subset of the `PolicyRequest` fields.
#[wasm_bindgen]
pub fn policy_json(request: &str) -> String {
    to_json(serde_json::from_str::<PolicyRequest>(request).map_err(|e| e.to_string()).and_then(|r| policy_view(&r)))
}

/// `request` is a JSON object with any subset of the `PagingRequest` fields.
#[wasm_bindgen]
pub fn paging_json(request: &str) -> String {
    to_json(serde_json::from_str::<PagingRequest>(request).map_err(|e| e.to_string()).and_then(|r| paging_frames(&r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_view_reports_the_step_bound() {
        let v = quantize_view(&[0.0, 0.3, 1.0, -0.7], 4).unwrap();
        assert!(v.max_error <= v.bound + 1e-12);
        assert_eq!(v.packed_bytes, 2);
        assert!(quantize_view(&[1.0], 3).is_err());
    }

    #[test]
    fn json_errors_are_objects() {
        let out: serde_json::Value = serde_json::from_str(&quantize_json("not json", 8)).unwrap();
        assert!(out["error"].is_string());
    }
}
