//! Serving simulation in logical ticks with Poisson arrivals.
//!
//! Each tick admits queued requests in arrival order while their prompts fit,
//! then advances every running request by one generated token. When a step
//! runs out of pages the newest running request is preempted: its pages are
//! freed and it returns to the head of the queue to restart later. The same
//! arrivals drive an uncompressed FP16 baseline whose page demand is counted
//! exactly from sequence lengths.

use std::collections::VecDeque;

use crate::config::SimConfig;
use crate::engine::{ClassCounts, Engine, EngineError, HeadPrompt, MemoryTally, StepInput};
use crate::memstore::HeadKey;
use crate::report::{BatchRow, Breakdown, CapacityMode, CapacityRow, MemorySection, Report, ReportKind, StepRow};
use crate::run::RunError;
use crate::workload::{head_data, head_exponents, request_specs, HeadData, RequestSpec};

struct Running {
    spec: RequestSpec,
    data: Vec<(HeadKey, HeadData)>,
    generated: usize,
}

/// Per-tick batch sizes and summary of one serving mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTrace {
    pub batch: Vec<u64>,
    pub capacity: CapacityRow,
}

fn summarize(
    mode: CapacityMode,
    batch: &[u64],
    saturated: &[bool],
    peaks: &[u64],
    preemptions: u64,
    free: u64,
    total: u64,
) -> CapacityRow {
    let mean = |it: &mut dyn Iterator<Item = u64>| {
        let (s, n) = it.fold((0u64, 0u64), |(s, n), b| (s + b, n + 1));
        (n > 0).then(|| s as f64 / n as f64)
    };
    let steady = mean(&mut batch.iter().zip(saturated).filter(|(_, &s)| s).map(|(&b, _)| b))
        .or_else(|| mean(&mut batch.iter().copied().filter(|&b| b > 0)))
        .unwrap_or(0.0);
    let mean_peak = if peaks.is_empty() { 0.0 } else { peaks.iter().sum::<u64>() as f64 / peaks.len() as f64 };
    CapacityRow {
        mode,
        steady_batch: steady,
        peak_batch: batch.iter().copied().max().unwrap_or(0),
        static_capacity: if mean_peak > 0.0 { (total as f64 / mean_peak).floor() as u64 } else { 0 },
        mean_peak_pages: mean_peak,
        completed: peaks.len() as u64,
        preemptions,
        ticks: batch.len() as u64,
        terminal_free_pages: free,
        total_pages: total,
    }
}

fn pending(specs: &[RequestSpec]) -> VecDeque<RequestSpec> {
    let mut v: Vec<RequestSpec> = specs.to_vec();
    v.sort_by_key(|s| (s.arrival_tick, s.id));
    v.into()
}

/// FP16 baseline: every head holds ceil(len / tokens_per_page) pages.
pub fn simulate_fp16(cfg: &SimConfig, specs: &[RequestSpec]) -> Result<ModeTrace, RunError> {
    let tpp = cfg.geometry().map_err(RunError::Config)?.fp16_tokens_per_page() as u64;
    let heads = (cfg.layers * cfg.kv_heads) as u64;
    let pages = |len: u64| heads * len.div_ceil(tpp);
    let total = cfg.total_pages as u64;
    let mut arrivals = pending(specs);
    let mut queue: VecDeque<RequestSpec> = VecDeque::new();
    let mut running: Vec<(RequestSpec, u64)> = Vec::new();
    let (mut used, mut preemptions) = (0u64, 0u64);
    let (mut batch, mut saturated, mut peaks) = (Vec::new(), Vec::new(), Vec::new());
    let mut tick = 0u64;
    while !(arrivals.is_empty() && queue.is_empty() && running.is_empty()) {
        if tick >= cfg.max_ticks {
            return Err(RunError::Config(format!("simulation did not finish within {} ticks", cfg.max_ticks)));
        }
        while arrivals.front().is_some_and(|s| s.arrival_tick <= tick) {
            queue.push_back(arrivals.pop_front().expect("front"));
        }
        while let Some(&s) = queue.front() {
            let need = pages(s.prompt_len as u64);
            if used + need > total {
                break;
            }
            used += need;
            running.push((queue.pop_front().expect("front"), s.prompt_len as u64));
        }
        if running.is_empty() && !queue.is_empty() {
            return Err(RunError::Config("a prompt does not fit in the page budget".into()));
        }
        saturated.push(!queue.is_empty());
        // Grow every running request by one token, preempting the newest on shortage.
        loop {
            let extra: u64 = running.iter().map(|(_, len)| pages(len + 1) - pages(*len)).sum();
            if used + extra <= total {
                used += extra;
                running.iter_mut().for_each(|(_, len)| *len += 1);
                break;
            }
            if running.len() <= 1 {
                return Err(RunError::Config("a single request does not fit in the page budget".into()));
            }
            let (s, len) = running.pop().expect("nonempty");
            used -= pages(len);
            queue.push_front(s);
            preemptions += 1;
        }
        batch.push(running.len() as u64);
        running.retain(|(s, len)| {
            let done = *len == (s.prompt_len + s.gen_len) as u64;
            if done {
                used -= pages(*len);
                peaks.push(pages(*len));
            }
            !done
        });
        tick += 1;
    }
    let capacity = summarize(CapacityMode::Fp16, &batch, &saturated, &peaks, preemptions, total - used, total);
    Ok(ModeTrace { batch, capacity })
}

/// Compressed serving with the full engine on synthetic attention data.
pub struct CompressedOutcome {
    pub trace: ModeTrace,
    pub tally: MemoryTally,
    pub counts: ClassCounts,
    pub steps: Vec<StepRow>,
}

fn head_inputs(r: &Running) -> Vec<StepInput> {
    let pos = r.spec.prompt_len + r.generated;
    r.data
        .iter()
        .map(|(key, d)| StepInput {
            head: *key,
            key: d.keys.row(pos).to_vec(),
            value: d.values.row(pos).to_vec(),
            queries: d.queries.iter().map(|q| q.row(pos).to_vec()).collect(),
        })
        .collect()
}

fn prompt_inputs(r: &Running) -> Vec<HeadPrompt> {
    let n = r.spec.prompt_len;
    r.data
        .iter()
        .map(|(key, d)| HeadPrompt {
            head: *key,
            keys: d.keys.head_rows(n),
            values: d.values.head_rows(n),
            queries: d.queries.iter().map(|q| q.head_rows(n)).collect(),
        })
        .collect()
}

pub fn simulate_compressed(cfg: &SimConfig, specs: &[RequestSpec]) -> Result<CompressedOutcome, RunError> {
    let exponents = head_exponents(cfg);
    let mut engine = Engine::new(cfg.store_config().map_err(RunError::Config)?, cfg.engine_config())?;
    let total = engine.store().total_pages() as u64;
    let start = |spec: RequestSpec| {
        let len = spec.prompt_len + spec.gen_len;
        let mut data = Vec::with_capacity(cfg.layers * cfg.kv_heads);
        for (layer, row) in exponents.iter().enumerate() {
            for (head, &exponent) in row.iter().enumerate() {
                let key = HeadKey::new(spec.id, layer as u32, head as u32);
                data.push((key, head_data(cfg, exponent, spec.id, layer, head, len)));
            }
        }
        Running { spec, data, generated: 0 }
    };
    let mut arrivals = pending(specs);
    let mut queue: VecDeque<RequestSpec> = VecDeque::new();
    let mut running: Vec<Running> = Vec::new();
    let mut preemptions = 0u64;
    let mut blocked: Option<(u64, usize)> = None;
    let (mut batch, mut saturated, mut peaks, mut steps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut tally, mut counts) = (MemoryTally::default(), ClassCounts::default());
    let mut tick = 0u64;
    while !(arrivals.is_empty() && queue.is_empty() && running.is_empty()) {
        if tick >= cfg.max_ticks {
            return Err(RunError::Config(format!("simulation did not finish within {} ticks", cfg.max_ticks)));
        }
        while arrivals.front().is_some_and(|s| s.arrival_tick <= tick) {
            queue.push_back(arrivals.pop_front().expect("front"));
        }
        while let Some(&spec) = queue.front() {
            // A prompt that did not fit cannot fit until more pages are free.
            if blocked.is_some_and(|(id, free)| id == spec.id && engine.store().free_count() <= free) {
                break;
            }
            let r = start(spec);
            match engine.prefill_batch(prompt_inputs(&r)) {
                Ok(_) => {
                    queue.pop_front();
                    running.push(r);
                }
                Err(e) if e.is_oom() => {
                    blocked = Some((spec.id, engine.store().free_count()));
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if running.is_empty() && !queue.is_empty() {
            return Err(RunError::Config("a prompt does not fit in the page budget".into()));
        }
        saturated.push(!queue.is_empty());
        let outs = loop {
            let inputs: Vec<StepInput> = running.iter().flat_map(head_inputs).collect();
            match engine.step_batch(inputs) {
                Ok(o) => break o,
                Err(e) if e.is_oom() && running.len() > 1 => {
                    let r = running.pop().expect("nonempty");
                    engine.release(r.spec.id)?;
                    queue.push_front(r.spec);
                    preemptions += 1;
                }
                Err(e) if e.is_oom() => {
                    return Err(RunError::Config(format!("a single request does not fit in the page budget: {e}")))
                }
                Err(e) => return Err(e.into()),
            }
        };
        running.iter_mut().for_each(|r| r.generated += 1);
        batch.push(running.len() as u64);
        steps.push(StepRow {
            step: tick,
            heads: outs.len() as u64,
            bytes_touched: outs.iter().map(|o| o.bytes_touched).sum(),
            pages_in_use: total - engine.store().free_count() as u64,
        });
        let mut kept = Vec::with_capacity(running.len());
        for r in running.drain(..) {
            if r.generated < r.spec.gen_len {
                kept.push(r);
                continue;
            }
            let t = engine.tally(Some(r.spec.id));
            tally.add(&t);
            counts.add(&engine.counts(Some(r.spec.id)));
            peaks.push(t.held_pages);
            engine.release(r.spec.id)?;
        }
        running = kept;
        tick += 1;
    }
    let free = engine.store().free_count() as u64;
    if free != total {
        return Err(RunError::Engine(EngineError::InvalidState(format!(
            "{} pages still held after the run",
            total - free
        ))));
    }
    let capacity = summarize(CapacityMode::Compressed, &batch, &saturated, &peaks, preemptions, free, total);
    Ok(CompressedOutcome { trace: ModeTrace { batch, capacity }, tally, counts, steps })
}

/// Runs both modes under identical arrivals and assembles the report.
pub fn simulate(cfg: &SimConfig) -> Result<Report, RunError> {
    cfg.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let specs = request_specs(cfg);
    let comp = simulate_compressed(cfg, &specs)?;
    let base = simulate_fp16(cfg, &specs)?;
    let mut report = Report::new(ReportKind::Simulate, cfg.seed);
    report.memory = MemorySection::of(&comp.tally);
    report.breakdown = Breakdown::of(&comp.counts);
    report.steps = comp.steps;
    let ticks = comp.trace.batch.len().max(base.batch.len());
    let at = |v: &[u64], i: usize| v.get(i).copied().unwrap_or(0);
    report.batch = (0..ticks)
        .map(|i| BatchRow { tick: i as u64, compressed: at(&comp.trace.batch, i), baseline: at(&base.batch, i) })
        .collect();
    report.capacity = vec![comp.trace.capacity, base.capacity];
    Ok(report)
}
