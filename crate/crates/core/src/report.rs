//! Versioned run, simulation and calibration reports with JSON and CSV rendering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ClassCounts, MemoryTally};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const CSV_HEADER: &str = "# kvmix-report schema_version=1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report schema version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("report has no schema_version field")]
    MissingVersion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Run,
    Simulate,
    Calibrate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MemorySection {
    pub payload_fraction: f64,
    pub full_fraction: f64,
    pub key_fraction: f64,
    pub value_fraction: f64,
    pub tally: MemoryTally,
}

impl MemorySection {
    pub fn of(tally: &MemoryTally) -> Self {
        Self {
            payload_fraction: tally.payload_fraction(),
            full_fraction: tally.full_fraction(),
            key_fraction: tally.key_fraction(),
            value_fraction: tally.value_fraction(),
            tally: *tally,
        }
    }
}

/// Partition of tokens that left the window. All zero when none did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub pruned: f64,
    pub low: f64,
    pub high: f64,
    pub pruned_tokens: u64,
    pub low_tokens: u64,
    pub high_tokens: u64,
}

impl Breakdown {
    pub fn of(c: &ClassCounts) -> Self {
        let n = c.total();
        if n == 0 {
            return Self::default();
        }
        let f = |x: u64| x as f64 / n as f64;
        // Derive the last share by subtraction so the parts sum to one.
        let (pruned, low) = (f(c.pruned), f(c.low));
        Self { pruned, low, high: 1.0 - pruned - low, pruned_tokens: c.pruned, low_tokens: c.low, high_tokens: c.high }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRow {
    pub request: String,
    pub layer: u32,
    pub head: u32,
    pub high: u64,
    pub low: u64,
    pub pruned: u64,
    pub window: u64,
    pub payload_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub heads: u64,
    pub bytes_touched: u64,
    pub pages_in_use: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub tick: u64,
    pub compressed: u64,
    pub baseline: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub alpha_high: f64,
    pub alpha_low: f64,
    pub memory_fraction: f64,
    pub quality_error: f64,
    pub on_frontier: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub mode: CapacityMode,
    /// Mean running batch over ticks with a non-empty queue.
    pub steady_batch: f64,
    pub peak_batch: u64,
    /// Total pages over the mean peak pages per completed request.
    pub static_capacity: u64,
    pub mean_peak_pages: f64,
    pub completed: u64,
    pub preemptions: u64,
    pub ticks: u64,
    pub terminal_free_pages: u64,
    pub total_pages: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityMode {
    Compressed,
    Fp16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub kind: ReportKind,
    pub seed: u64,
    pub memory: MemorySection,
    pub breakdown: Breakdown,
    pub heads: Vec<HeadRow>,
    pub steps: Vec<StepRow>,
    pub batch: Vec<BatchRow>,
    pub frontier: Vec<FrontierRow>,
    pub capacity: Vec<CapacityRow>,
}

impl Report {
    pub fn new(kind: ReportKind, seed: u64) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            kind,
            seed,
            memory: MemorySection::default(),
            breakdown: Breakdown::default(),
            heads: Vec::new(),
            steps: Vec::new(),
            batch: Vec::new(),
            frontier: Vec::new(),
            capacity: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Parses a report, rejecting any schema version other than the current one.
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("schema_version").and_then(|x| x.as_u64()).ok_or(ReportError::MissingVersion)?;
        if found != REPORT_SCHEMA_VERSION as u64 {
            return Err(ReportError::Version { found, expected: REPORT_SCHEMA_VERSION });
        }
        Ok(serde_json::from_value(v)?)
    }

    /// One CSV file per section as (file stem, contents).
    pub fn to_csv(&self) -> Vec<(&'static str, String)> {
        let m = &self.memory;
        let b = &self.breakdown;
        let t = &m.tally;
        let kind = serde_json::to_value(self.kind).expect("kind serializes");
        let summary: Vec<(&str, String)> = vec![
            ("kind", kind.as_str().unwrap_or_default().to_string()),
            ("seed", self.seed.to_string()),
            ("payload_fraction", m.payload_fraction.to_string()),
            ("full_fraction", m.full_fraction.to_string()),
            ("key_fraction", m.key_fraction.to_string()),
            ("value_fraction", m.value_fraction.to_string()),
            ("tokens", t.tokens.to_string()),
            ("key_bits", t.key_bits.to_string()),
            ("value_bits", t.value_bits.to_string()),
            ("baseline_side_bits", t.baseline_side_bits.to_string()),
            ("held_pages", t.held_pages.to_string()),
            ("held_bytes", t.held_bytes.to_string()),
            ("pruned", b.pruned.to_string()),
            ("low", b.low.to_string()),
            ("high", b.high.to_string()),
            ("pruned_tokens", b.pruned_tokens.to_string()),
            ("low_tokens", b.low_tokens.to_string()),
            ("high_tokens", b.high_tokens.to_string()),
        ];
        let table = |cols: &str, rows: Vec<String>| {
            let mut s = format!("{CSV_HEADER}\n{cols}\n");
            for r in rows {
                s.push_str(&r);
                s.push('\n');
            }
            s
        };
        vec![
            ("summary", table("field,value", summary.into_iter().map(|(k, v)| format!("{k},{v}")).collect())),
            (
                "heads",
                table(
                    "request,layer,head,high,low,pruned,window,payload_fraction",
                    self.heads
                        .iter()
                        .map(|h| {
                            format!(
                                "{},{},{},{},{},{},{},{}",
                                h.request, h.layer, h.head, h.high, h.low, h.pruned, h.window, h.payload_fraction
                            )
                        })
                        .collect(),
                ),
            ),
            (
                "steps",
                table(
                    "step,heads,bytes_touched,pages_in_use",
                    self.steps.iter().map(|s| format!("{},{},{},{}", s.step, s.heads, s.bytes_touched, s.pages_in_use)).collect(),
                ),
            ),
            (
                "batch",
                table(
                    "tick,compressed,baseline",
                    self.batch.iter().map(|r| format!("{},{},{}", r.tick, r.compressed, r.baseline)).collect(),
                ),
            ),
            (
                "frontier",
                table(
                    "alpha_high,alpha_low,memory_fraction,quality_error,on_frontier",
                    self.frontier
                        .iter()
                        .map(|f| {
                            format!("{},{},{},{},{}", f.alpha_high, f.alpha_low, f.memory_fraction, f.quality_error, f.on_frontier)
                        })
                        .collect(),
                ),
            ),
            (
                "capacity",
                table(
                    "mode,steady_batch,peak_batch,static_capacity,mean_peak_pages,completed,preemptions,ticks,terminal_free_pages,total_pages",
                    self.capacity
                        .iter()
                        .map(|c| {
                            let mode = if c.mode == CapacityMode::Compressed { "compressed" } else { "fp16" };
                            format!(
                                "{mode},{},{},{},{},{},{},{},{},{}",
                                c.steady_batch,
                                c.peak_batch,
                                c.static_capacity,
                                c.mean_peak_pages,
                                c.completed,
                                c.preemptions,
                                c.ticks,
                                c.terminal_free_pages,
                                c.total_pages
                            )
                        })
                        .collect(),
                ),
            ),
        ]
    }
}

/// Marks points not dominated in (memory, error); lower is better in both.
pub fn mark_frontier(points: &mut [FrontierRow]) {
    for i in 0..points.len() {
        let p = points[i];
        points[i].on_frontier = !points.iter().any(|q| {
            q.memory_fraction <= p.memory_fraction
                && q.quality_error <= p.quality_error
                && (q.memory_fraction < p.memory_fraction || q.quality_error < p.quality_error)
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sections_are_arrays() {
        let r = Report::new(ReportKind::Run, 3);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["heads", "steps", "batch", "frontier", "capacity"] {
            assert_eq!(v[key], serde_json::json!([]), "{key}");
        }
        assert_eq!(Report::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn round_trip_with_content() {
        let mut r = Report::new(ReportKind::Calibrate, 9);
        let tally = MemoryTally {
            tokens: 7,
            key_bits: 1234,
            value_bits: 567,
            baseline_side_bits: 7 * 16 * 32,
            held_pages: 2,
            held_bytes: 2048,
        };
        r.memory = MemorySection::of(&tally);
        r.breakdown = Breakdown::of(&ClassCounts { high: 3, low: 5, pruned: 11 });
        r.steps.push(StepRow { step: 1, heads: 4, bytes_touched: 999, pages_in_use: 12 });
        r.frontier.push(FrontierRow {
            alpha_high: 0.1,
            alpha_low: 0.02,
            memory_fraction: 0.3,
            quality_error: 1e-3,
            on_frontier: true,
        });
        assert_eq!(Report::from_json(&r.to_json()).unwrap(), r);
        let csv = r.to_csv();
        assert!(csv.iter().all(|(_, s)| s.starts_with(CSV_HEADER)));
        assert_eq!(csv[3].1.lines().count(), 2);
    }

    #[test]
    fn other_versions_are_rejected() {
        let mut v = serde_json::to_value(Report::new(ReportKind::Run, 0)).unwrap();
        v["schema_version"] = 2.into();
        assert!(matches!(Report::from_json(&v.to_string()), Err(ReportError::Version { found: 2, .. })));
        v.as_object_mut().unwrap().remove("schema_version");
        assert!(matches!(Report::from_json(&v.to_string()), Err(ReportError::MissingVersion)));
    }

    #[test]
    fn breakdown_partitions() {
        for (h, l, p) in [(1, 1, 1), (0, 0, 7), (3, 0, 0), (17, 29, 31)] {
            let b = Breakdown::of(&ClassCounts { high: h, low: l, pruned: p });
            assert!((b.pruned + b.low + b.high - 1.0).abs() <= 1e-9);
        }
        assert_eq!(Breakdown::of(&ClassCounts::default()), Breakdown::default());
    }

    #[test]
    fn frontier_drops_dominated_points() {
        let pt = |m, e| FrontierRow {
            alpha_high: 0.0,
            alpha_low: 0.0,
            memory_fraction: m,
            quality_error: e,
            on_frontier: false,
        };
        let mut v = vec![pt(0.5, 0.1), pt(0.3, 0.2), pt(0.6, 0.2), pt(0.3, 0.2), pt(0.2, 0.5)];
        mark_frontier(&mut v);
        let flags: Vec<bool> = v.iter().map(|p| p.on_frontier).collect();
        assert_eq!(flags, vec![true, true, false, true, true]);
    }
}
