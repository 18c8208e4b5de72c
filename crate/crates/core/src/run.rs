//! Runs the engine over a trace with every request batched, and calibration sweeps.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attn::Matrix;
use crate::config::SimConfig;
use crate::engine::{attend, Engine, EngineError, HeadPrompt, Origin, StepInput, TokenView};
use crate::memstore::HeadKey;
use crate::report::{mark_frontier, Breakdown, FrontierRow, HeadRow, MemorySection, Report, ReportKind, StepRow};
use crate::workload::{Trace, TraceRecord};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error("{0}")]
    OutOfMemory(EngineError),
    #[error(transparent)]
    Engine(EngineError),
}

impl From<EngineError> for RunError {
    fn from(e: EngineError) -> Self {
        if e.is_oom() {
            RunError::OutOfMemory(e)
        } else {
            RunError::Engine(e)
        }
    }
}

/// Result of one pass over a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: Report,
    /// Mean relative L2 error of generation outputs against full-precision
    /// attention, when requested.
    pub quality_error: Option<f64>,
    /// Store snapshot taken after the last step, when requested.
    pub snapshot: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub measure_quality: bool,
    pub snapshot: bool,
}

type Rows = Vec<Vec<f64>>;

/// Checks that `cfg` describes the same model shape as the trace header.
pub fn check_shape(trace: &Trace, cfg: &SimConfig) -> Result<(), RunError> {
    let h = &trace.header.config;
    if (h.layers, h.kv_heads, h.queries_per_kv, h.dim) != (cfg.layers, cfg.kv_heads, cfg.queries_per_kv, cfg.dim) {
        return Err(RunError::Config("model shape differs from the trace header".into()));
    }
    Ok(())
}

fn relative_error(out: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = out.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

fn full_precision(query: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Vec<f64>, EngineError> {
    let views: Vec<TokenView> = keys
        .iter()
        .zip(values)
        .enumerate()
        .map(|(position, (key, value))| TokenView { position, key, value, origin: Origin::Window })
        .collect();
    Ok(attend(query, &views)?.0)
}

/// Executes the engine over every head of the trace and reports memory use.
pub fn run_trace(trace: &Trace, cfg: &SimConfig, opts: RunOptions) -> Result<RunOutcome, RunError> {
    let measure_quality = opts.measure_quality;
    check_shape(trace, cfg)?;
    cfg.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let store = cfg.store_config().map_err(RunError::Config)?;
    let mut engine = Engine::new(store, cfg.engine_config())?;
    let ids = trace.request_ids();
    let index: BTreeMap<&str, u64> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i as u64)).collect();
    let heads: Vec<(HeadKey, &Vec<TraceRecord>)> = trace
        .heads
        .iter()
        .map(|((req, layer, head), recs)| (HeadKey::new(index[req.as_str()], *layer as u32, *head as u32), recs))
        .collect();

    let matrix = |rows: &[Vec<f64>]| Matrix::from_rows(rows).map_err(|e| RunError::Trace(e.to_string()));
    let mut prompts = Vec::with_capacity(heads.len());
    for (key, recs) in &heads {
        let p = &recs[0];
        prompts.push(HeadPrompt {
            head: *key,
            keys: matrix(&p.keys)?,
            values: matrix(&p.values)?,
            queries: p.queries.iter().map(|q| matrix(q)).collect::<Result<_, _>>()?,
        });
    }
    engine.prefill_batch(prompts)?;

    // Full-precision history per head for the quality reference.
    let mut history: BTreeMap<HeadKey, (Rows, Rows)> = BTreeMap::new();
    if measure_quality {
        for (key, recs) in &heads {
            history.insert(*key, (recs[0].keys.clone(), recs[0].values.clone()));
        }
    }
    let (mut err_sum, mut err_count) = (0.0f64, 0u64);
    let mut report = Report::new(ReportKind::Run, cfg.seed);
    let total = engine.store().total_pages() as u64;
    let max_steps = heads.iter().map(|(_, r)| r.len() - 1).max().unwrap_or(0);
    for step in 1..=max_steps {
        let active: Vec<&(HeadKey, &Vec<TraceRecord>)> = heads.iter().filter(|(_, r)| r.len() > step).collect();
        let inputs: Vec<StepInput> = active
            .iter()
            .map(|(key, recs)| {
                let r = &recs[step];
                StepInput {
                    head: *key,
                    key: r.keys[0].clone(),
                    value: r.values[0].clone(),
                    queries: r.queries.iter().map(|q| q[0].clone()).collect(),
                }
            })
            .collect();
        let outs = engine.step_batch(inputs)?;
        if measure_quality {
            for ((key, recs), out) in active.iter().zip(&outs) {
                let (keys, values) = history.get_mut(key).expect("history");
                keys.push(recs[step].keys[0].clone());
                values.push(recs[step].values[0].clone());
                for (q, o) in recs[step].queries.iter().zip(&out.outputs) {
                    err_sum += relative_error(o, &full_precision(&q[0], keys, values)?);
                    err_count += 1;
                }
            }
        }
        report.steps.push(StepRow {
            step: step as u64,
            heads: outs.len() as u64,
            bytes_touched: outs.iter().map(|o| o.bytes_touched).sum(),
            pages_in_use: total - engine.store().free_count() as u64,
        });
    }

    report.memory = MemorySection::of(&engine.tally(None));
    report.breakdown = Breakdown::of(&engine.counts(None));
    for st in engine.heads() {
        let c = st.counts();
        let key = st.key();
        report.heads.push(HeadRow {
            request: ids[key.request as usize].clone(),
            layer: key.layer,
            head: key.head,
            high: c.high,
            low: c.low,
            pruned: c.pruned,
            window: st.window_len() as u64,
            payload_fraction: engine.head_tally(st).payload_fraction(),
        });
    }
    let snapshot = if opts.snapshot {
        let mut buf = Vec::new();
        engine.store().write_snapshot(&mut buf).map_err(|e| RunError::Engine(e.into()))?;
        Some(buf)
    } else {
        None
    };
    for r in 0..ids.len() as u64 {
        engine.release(r)?;
    }
    if engine.store().free_count() as u64 != total {
        return Err(RunError::Engine(EngineError::InvalidState("pages leaked after release".into())));
    }
    let quality_error = measure_quality.then(|| if err_count == 0 { 0.0 } else { err_sum / err_count as f64 });
    Ok(RunOutcome { report, quality_error, snapshot })
}

/// Sweeps (alpha_high, alpha_low) with alpha_low <= alpha_high and marks the
/// Pareto frontier of payload memory against attention error.
pub fn calibrate(trace: &Trace, cfg: &SimConfig) -> Result<Report, RunError> {
    let mut report = Report::new(ReportKind::Calibrate, cfg.seed);
    for &ah in &cfg.calibrate_alpha_high {
        for &al in cfg.calibrate_alpha_low.iter().filter(|&&al| al <= ah) {
            let mut point = cfg.clone();
            point.policy.alpha_high = ah;
            point.policy.alpha_low = al;
            let out = run_trace(trace, &point, RunOptions { measure_quality: true, snapshot: false })?;
            report.frontier.push(FrontierRow {
                alpha_high: ah,
                alpha_low: al,
                memory_fraction: out.report.memory.payload_fraction,
                quality_error: out.quality_error.unwrap_or(0.0),
                on_frontier: false,
            });
        }
    }
    mark_frontier(&mut report.frontier);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{read_trace, write_trace};

    fn cfg() -> SimConfig {
        let mut c = SimConfig {
            num_requests: 2,
            prompt_len_min: 24,
            prompt_len_max: 30,
            gen_len_min: 10,
            gen_len_max: 16,
            dim: 16,
            total_pages: 512,
            ..SimConfig::default()
        };
        c.policy.window = 4;
        c
    }

    fn trace(c: &SimConfig) -> Trace {
        let mut buf = Vec::new();
        write_trace(c, &mut buf).unwrap();
        read_trace(&buf[..]).unwrap()
    }

    #[test]
    fn zero_thresholds_prune_nothing() {
        let mut c = cfg();
        c.policy.alpha_high = 0.0;
        c.policy.alpha_low = 0.0;
        let out = run_trace(&trace(&c), &c, RunOptions::default()).unwrap();
        assert_eq!(out.report.breakdown.pruned_tokens, 0);
        assert_eq!(out.report.breakdown.pruned, 0.0);
        let b = out.report.breakdown;
        assert!((b.pruned + b.low + b.high - 1.0).abs() <= 1e-9);
        let m = out.report.memory.payload_fraction;
        assert!(m > 0.0 && m <= 1.0);
    }

    #[test]
    fn steps_and_heads_are_reported() {
        let c = cfg();
        let t = trace(&c);
        let out = run_trace(&t, &c, RunOptions { measure_quality: true, snapshot: true }).unwrap();
        let longest = t.header.requests.iter().map(|r| r.gen_len).max().unwrap();
        assert_eq!(out.report.steps.len(), longest);
        assert_eq!(out.report.heads.len(), t.heads.len());
        assert!(out.quality_error.unwrap() >= 0.0);
        let store = crate::memstore::KvStore::read_snapshot(&out.snapshot.unwrap()[..]).unwrap();
        assert_eq!(store.heads().count(), t.heads.len());
    }

    #[test]
    fn oom_is_reported() {
        let mut c = cfg();
        c.total_pages = 3;
        assert!(matches!(run_trace(&trace(&c), &c, RunOptions::default()), Err(RunError::OutOfMemory(_))));
    }

    #[test]
    fn calibration_respects_grid_order() {
        let mut c = cfg();
        c.calibrate_alpha_high = vec![0.0, 1.0, 3.0];
        c.calibrate_alpha_low = vec![0.0, 0.5];
        let r = calibrate(&trace(&c), &c).unwrap();
        assert_eq!(r.frontier.len(), 5);
        assert!(r.frontier.iter().all(|p| p.alpha_low <= p.alpha_high));
        assert!(r.frontier.iter().any(|p| p.on_frontier));
    }
}
