//! Compressed inference path: drives the policy, quantizer and page store for
//! every KV head, one batched step at a time.
//!
//! Each step runs in three phases. Planning is parallel per head and reads
//! only. Coordination is a single [`KvStore::compact`] call for the whole
//! batch. Application writes pages head by head in canonical order, and the
//! attention that follows is again parallel per head.

mod accounting;
mod attention;
mod state;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attn::{
    aggregate_gqa, aggregate_rows, causal_attention_fast, prompt_significance, update_significance_generation,
    AttentionInputs, AttnError, Matrix, TokenStats,
};
use crate::memstore::{HeadKey, HeadPlan, KvStore, PageClass, PageId, StoreConfig, StoreError};
use crate::policy::{classify_prompt, in_window, GenerationDecision, PolicyError, PolicyParams, Section, TokenClass};
use crate::quant::{dequantize, quantize, QuantError};

pub use accounting::MemoryTally;
pub use attention::{attend, partial_attention, split_attention, CachedToken, Origin, Partial, TokenView};
pub use state::{ClassCounts, Effects, HeadCacheState, Slot, StepPlan, WindowToken};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("unknown head {0:?}")]
    UnknownHead(HeadKey),
    #[error("head {0:?} appears twice")]
    DuplicateHead(HeadKey),
    #[error("no live tokens to attend to")]
    EmptyCache,
}

impl EngineError {
    pub fn is_oom(&self) -> bool {
        matches!(self, EngineError::Store(StoreError::OutOfMemory { .. }))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub policy: PolicyParams,
    /// Hold window tokens at the high precision instead of full precision.
    pub quantize_window: bool,
}

/// Prompt of one KV head: its keys and values plus one query matrix per
/// query head sharing it.
#[derive(Debug, Clone)]
pub struct HeadPrompt {
    pub head: HeadKey,
    pub keys: Matrix,
    pub values: Matrix,
    pub queries: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub head: HeadKey,
    pub outputs: Vec<Matrix>,
    pub classes: Vec<TokenClass>,
}

/// One generated token for one KV head.
#[derive(Debug, Clone)]
pub struct StepInput {
    pub head: HeadKey,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub queries: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub head: HeadKey,
    pub outputs: Vec<Vec<f64>>,
    pub decision: Option<GenerationDecision>,
    pub allocated: Option<(PageClass, PageId)>,
    /// Bytes the kernel reads for this head: codes, metadata, scores and positions.
    pub bytes_touched: u64,
}

/// Per-head attention result: outputs per query head, aggregated scores,
/// token positions in kernel order, and bytes read.
type Attended = (Vec<Vec<f64>>, Vec<f64>, Vec<usize>, u64);

/// Attention output and (position, score) pairs.
pub type ScoredOutput = (Vec<f64>, Vec<(usize, f64)>);

#[derive(Debug, Clone, PartialEq)]
pub struct Engine {
    store: KvStore,
    config: EngineConfig,
    heads: BTreeMap<HeadKey, HeadCacheState>,
}

fn sorted_unique<T, F: Fn(&T) -> HeadKey>(items: &mut [T], key: F) -> Result<(), EngineError> {
    items.sort_by_key(&key);
    for w in items.windows(2) {
        if key(&w[0]) == key(&w[1]) {
            return Err(EngineError::DuplicateHead(key(&w[0])));
        }
    }
    Ok(())
}

impl Engine {
    pub fn new(store: StoreConfig, config: EngineConfig) -> Result<Self, EngineError> {
        config.policy.validate()?;
        if config.policy.window < 2 {
            return Err(EngineError::InvalidInput("the engine needs a window of at least 2 tokens".into()));
        }
        let store = KvStore::new(StoreConfig { high: config.policy.high, low: config.policy.low, ..store })?;
        Ok(Self { store, config, heads: BTreeMap::new() })
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.store.config().geometry.dim
    }

    pub fn head(&self, key: &HeadKey) -> Option<&HeadCacheState> {
        self.heads.get(key)
    }

    pub fn heads(&self) -> impl Iterator<Item = &HeadCacheState> {
        self.heads.values()
    }

    fn check_vec(&self, v: &[f64], what: &str) -> Result<(), EngineError> {
        if v.len() != self.dim() {
            return Err(EngineError::InvalidInput(format!(
                "{what} has dimension {}, expected {}",
                v.len(),
                self.dim()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EngineError::InvalidInput(format!("{what} has a non-finite entry")));
        }
        Ok(())
    }

    fn window_value(&self, v: Vec<f64>, bits: crate::quant::Precision) -> Result<Vec<f64>, EngineError> {
        if self.config.quantize_window {
            Ok(dequantize(&quantize(&v, bits)?))
        } else {
            Ok(v)
        }
    }

    /// Prompt phase for a batch of new heads.
    pub fn prefill_batch(&mut self, mut prompts: Vec<HeadPrompt>) -> Result<Vec<PrefillOutput>, EngineError> {
        sorted_unique(&mut prompts, |p| p.head)?;
        let max_seq = self.store.config().max_seq_len;
        for p in &prompts {
            if self.heads.contains_key(&p.head) {
                return Err(EngineError::DuplicateHead(p.head));
            }
            let n = p.keys.rows();
            if n == 0 || n > max_seq {
                return Err(EngineError::InvalidInput(format!("prompt length {n} outside 1..={max_seq}")));
            }
            if p.keys.cols() != self.dim() || p.queries.is_empty() {
                return Err(EngineError::InvalidInput(format!("malformed prompt for {:?}", p.head)));
            }
        }
        let params = self.config.policy.clone();
        let analysed: Vec<(Vec<Matrix>, Vec<TokenStats>, Vec<TokenClass>)> = prompts
            .par_iter()
            .map(|p| {
                let mut outputs = Vec::with_capacity(p.queries.len());
                let mut scores = Vec::with_capacity(p.queries.len());
                for q in &p.queries {
                    let inputs = AttentionInputs::new(q.clone(), p.keys.clone(), p.values.clone())?;
                    let (o, s) = causal_attention_fast(&inputs)?;
                    outputs.push(o);
                    scores.push(s);
                }
                let stats = prompt_significance(&aggregate_gqa(&scores)?);
                let classes = classify_prompt(&stats, p.keys.rows(), &params)?;
                Ok((outputs, stats, classes))
            })
            .collect::<Result<_, EngineError>>()?;

        let t_h = self.store.tokens_per_page(PageClass::High);
        let t_l = self.store.tokens_per_page(PageClass::Low);
        let t_w = self.store.tokens_per_page(PageClass::Window);
        let w = params.window;
        let conservative = prompts
            .iter()
            .map(|p| {
                let n = p.keys.rows();
                let in_win = n.min(w);
                HeadPlan {
                    alloc_high: (n - in_win).div_ceil(t_h),
                    alloc_window: in_win.div_ceil(t_w),
                    ..HeadPlan::new(p.head)
                }
            })
            .collect();
        let grants = self.store.compact(conservative)?;

        let refine: Vec<HeadPlan> = grants
            .iter()
            .zip(&analysed)
            .map(|(g, (_, _, classes))| {
                let n = classes.len();
                let stored = |c: TokenClass| (0..n).filter(|&p| !in_window(p, n, w) && classes[p] == c).count();
                let h = stored(TokenClass::High).div_ceil(t_h);
                let l = stored(TokenClass::Low).div_ceil(t_l);
                let c = g.high.len();
                let mut plan = HeadPlan::new(g.key);
                if h + l <= c {
                    plan.free = g.high[h..c - l].to_vec();
                    plan.relabel_low = g.high[c - l..].to_vec();
                } else {
                    plan.relabel_low = g.high[h..].to_vec();
                    plan.alloc_low = l - (c - h);
                }
                plan
            })
            .collect();
        if let Err(e) = self.store.compact(refine) {
            let keys: Vec<HeadKey> = prompts.iter().map(|p| p.head).collect();
            self.store.drop_heads(&keys)?;
            return Err(e.into());
        }

        let mut out = Vec::with_capacity(prompts.len());
        for (p, (outputs, stats, classes)) in prompts.into_iter().zip(analysed) {
            let n = classes.len();
            let mut st = HeadCacheState::new(p.head);
            for (pos, &class) in classes.iter().enumerate() {
                let key = p.keys.row(pos).to_vec();
                let value = p.values.row(pos).to_vec();
                let stat = stats.get(pos).copied().unwrap_or_else(|| TokenStats::new(pos));
                if in_window(pos, n, w) {
                    let key = self.window_value(key, params.high.key)?;
                    let value = self.window_value(value, params.high.value)?;
                    st.window.push_back(WindowToken { position: pos, key, value });
                    st.stats.insert(pos, stat);
                    continue;
                }
                match class {
                    TokenClass::Pruned => st.pruned += 1,
                    class => {
                        st.stats.insert(pos, stat);
                        let (section, pair) = if class == TokenClass::High {
                            (Section::High, params.high)
                        } else {
                            (Section::Low, params.low)
                        };
                        st.store_token(&mut self.store, section, pair, pos, &key, &value)?;
                    }
                }
            }
            st.produced = n;
            self.heads.insert(p.head, st);
            out.push(PrefillOutput { head: p.head, outputs, classes });
        }
        Ok(out)
    }

    /// One generation step for a batch of heads. On out-of-memory nothing changes.
    pub fn step_batch(&mut self, mut inputs: Vec<StepInput>) -> Result<Vec<StepOutput>, EngineError> {
        sorted_unique(&mut inputs, |i| i.head)?;
        let max_seq = self.store.config().max_seq_len;
        for i in &inputs {
            let st = self.heads.get(&i.head).ok_or(EngineError::UnknownHead(i.head))?;
            if st.produced >= max_seq {
                return Err(EngineError::InvalidInput(format!("{:?} reached the maximum length {max_seq}", i.head)));
            }
            self.check_vec(&i.key, "key")?;
            self.check_vec(&i.value, "value")?;
            if i.queries.is_empty() {
                return Err(EngineError::InvalidInput("step needs at least one query".into()));
            }
            for q in &i.queries {
                self.check_vec(q, "query")?;
            }
        }
        let params = self.config.policy.clone();
        let plans: Vec<StepPlan> = {
            let (heads, store) = (&self.heads, &self.store);
            inputs.par_iter().map(|i| heads[&i.head].plan_step(store, &params)).collect::<Result<_, _>>()?
        };
        let needs: Vec<(HeadKey, PageClass)> =
            inputs.iter().zip(&plans).filter_map(|(i, p)| p.need.map(|c| (i.head, c))).collect();
        let granted: BTreeMap<HeadKey, PageId> = self.store.generation_alloc(&needs)?.into_iter().collect();

        for (i, plan) in inputs.iter_mut().zip(&plans) {
            let key = self.window_value(std::mem::take(&mut i.key), params.high.key)?;
            let value = self.window_value(std::mem::take(&mut i.value), params.high.value)?;
            let st = self.heads.get_mut(&i.head).expect("checked above");
            st.apply_step(&mut self.store, &params, plan, key, value)?;
        }

        let geometry = self.store.config().geometry;
        let bits = [geometry.token_bits(params.high), geometry.token_bits(params.low), geometry.dim as u64 * 32];
        let attended: Vec<Attended> = {
            let (heads, store) = (&self.heads, &self.store);
            inputs
                .par_iter()
                .map(|i| {
                    let st = &heads[&i.head];
                    let tokens = st.cached_tokens(store);
                    let mut outputs = Vec::with_capacity(i.queries.len());
                    let mut rows = Vec::with_capacity(i.queries.len());
                    for q in &i.queries {
                        let (o, s) = attend(q, &tokens)?;
                        outputs.push(o);
                        rows.push(s);
                    }
                    let agg = aggregate_rows(&rows)?;
                    let touched: u64 = tokens
                        .iter()
                        .map(|t| match t.origin {
                            Origin::High => bits[0],
                            Origin::Low => bits[1],
                            Origin::Window => bits[2],
                        })
                        .sum();
                    Ok((outputs, agg, tokens.iter().map(|t| t.position).collect(), touched.div_ceil(8)))
                })
                .collect::<Result<_, EngineError>>()?
        };

        let mut out = Vec::with_capacity(inputs.len());
        for ((i, plan), (outputs, agg, positions, bytes_touched)) in inputs.iter().zip(&plans).zip(attended) {
            let st = self.heads.get_mut(&i.head).expect("checked above");
            let me = st.produced - 1;
            let (pos, scores): (Vec<usize>, Vec<f64>) =
                positions.into_iter().zip(agg).filter(|(p, _)| *p != me).unzip();
            update_significance_generation(&mut st.stats, &scores, &pos)?;
            st.sync_scores(&mut self.store)?;
            out.push(StepOutput {
                head: i.head,
                outputs,
                decision: plan.decision,
                allocated: plan.need.map(|c| (c, granted[&i.head])),
                bytes_touched,
            });
        }
        Ok(out)
    }

    /// Single-head form of [`step_batch`](Self::step_batch).
    pub fn step(&mut self, input: StepInput) -> Result<StepOutput, EngineError> {
        Ok(self.step_batch(vec![input])?.remove(0))
    }

    /// Appends tokens with fixed classes, bypassing the window and the policy.
    pub fn ingest_forced(
        &mut self,
        head: HeadKey,
        tokens: &[(Vec<f64>, Vec<f64>, TokenClass)],
    ) -> Result<(), EngineError> {
        for (k, v, _) in tokens {
            self.check_vec(k, "key")?;
            self.check_vec(v, "value")?;
        }
        let params = self.config.policy.clone();
        let mut st = self.heads.remove(&head).unwrap_or_else(|| HeadCacheState::new(head));
        let result = (|| {
            for (k, v, class) in tokens {
                let pos = st.produced;
                let (section, pair) = match class {
                    TokenClass::High => (Section::High, params.high),
                    TokenClass::Low => (Section::Low, params.low),
                    TokenClass::Pruned => {
                        st.pruned += 1;
                        st.produced += 1;
                        continue;
                    }
                };
                let slot_free = self
                    .store
                    .tables(&head)
                    .map(|t| {
                        let pages: Vec<PageId> = match section {
                            Section::High => t.bidir.high_pages().collect(),
                            Section::Low => t.bidir.low_pages().collect(),
                        };
                        pages.iter().any(|p| self.store.page(*p).first_free_slot().is_some())
                    })
                    .unwrap_or(false);
                if !slot_free {
                    self.store.generation_alloc(&[(head, section.into())])?;
                }
                st.stats.insert(pos, TokenStats::new(pos));
                st.store_token(&mut self.store, section, pair, pos, k, v)?;
                st.produced += 1;
            }
            Ok(())
        })();
        self.heads.insert(head, st);
        result
    }

    /// Frees every page of a request and forgets its heads.
    pub fn release(&mut self, request: u64) -> Result<usize, EngineError> {
        let freed = self.store.release_request(request)?;
        self.heads.retain(|k, _| k.request != request);
        Ok(freed.len())
    }

    /// Attention of `query` over one head's cache, decoded from page bytes.
    /// Returns the output and (position, score) pairs in kernel order.
    pub fn compressed_attention(&self, head: &HeadKey, query: &[f64]) -> Result<ScoredOutput, EngineError> {
        let st = self.heads.get(head).ok_or(EngineError::UnknownHead(*head))?;
        let tokens = st.read_tokens(&self.store)?;
        let views: Vec<TokenView> = tokens.iter().map(CachedToken::view).collect();
        let (out, scores) = attend(query, &views)?;
        Ok((out, tokens.iter().map(|t| t.position).zip(scores).collect()))
    }

    pub fn head_tally(&self, st: &HeadCacheState) -> MemoryTally {
        let d = self.dim() as u64;
        let p = &self.config.policy;
        let c = st.counts();
        let win = st.window.len() as u64;
        let (wk, wv) =
            if self.config.quantize_window { (p.high.key.bits() as u64, p.high.value.bits() as u64) } else { (16, 16) };
        let held_pages = self.store.tables(&st.key).map_or(0, |t| t.page_count()) as u64;
        MemoryTally {
            tokens: st.produced as u64,
            key_bits: d * (c.high * p.high.key.bits() as u64 + c.low * p.low.key.bits() as u64 + win * wk),
            value_bits: d * (c.high * p.high.value.bits() as u64 + c.low * p.low.value.bits() as u64 + win * wv),
            baseline_side_bits: st.produced as u64 * 16 * d,
            held_pages,
            held_bytes: held_pages * self.store.config().geometry.page_bytes as u64,
        }
    }

    /// Tally over all heads, or the heads of one request.
    pub fn tally(&self, request: Option<u64>) -> MemoryTally {
        let mut t = MemoryTally::default();
        for st in self.heads.values().filter(|s| request.is_none_or(|r| s.key.request == r)) {
            t.add(&self.head_tally(st));
        }
        t
    }

    pub fn counts(&self, request: Option<u64>) -> ClassCounts {
        let mut c = ClassCounts::default();
        for st in self.heads.values().filter(|s| request.is_none_or(|r| s.key.request == r)) {
            c.add(&st.counts());
        }
        c
    }
}
