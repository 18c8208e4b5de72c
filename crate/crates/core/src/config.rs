//! Flat `key = value` configuration shared by every subcommand.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear once.
//! `preset` is applied before the other keys, whatever its position.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineConfig;
use crate::memstore::{PageGeometry, StoreConfig};
use crate::policy::{PolicyParams, PromptDenominator};
use crate::quant::PrecisionPair;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub num_requests: usize,
    /// Mean arrivals per tick of the Poisson process.
    pub arrival_rate: f64,
    pub prompt_len_min: usize,
    pub prompt_len_max: usize,
    pub gen_len_min: usize,
    pub gen_len_max: usize,
    pub layers: usize,
    pub kv_heads: usize,
    pub queries_per_kv: usize,
    pub dim: usize,
    pub total_pages: usize,
    pub page_bytes: usize,
    pub max_seq_len: usize,
    pub policy: PolicyParams,
    pub quantize_window: bool,
    /// Per-head attention concentration is drawn uniformly from this range.
    pub zipf_min: f64,
    pub zipf_max: f64,
    pub calibrate_alpha_high: Vec<f64>,
    pub calibrate_alpha_low: Vec<f64>,
    /// Simulation stops after this many ticks even if requests remain.
    pub max_ticks: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_requests: 8,
            arrival_rate: 0.5,
            prompt_len_min: 192,
            prompt_len_max: 320,
            gen_len_min: 64,
            gen_len_max: 128,
            layers: 2,
            kv_heads: 2,
            queries_per_kv: 2,
            dim: 32,
            total_pages: 8192,
            page_bytes: PageGeometry::DEFAULT_PAGE_BYTES,
            max_seq_len: 512,
            policy: PolicyParams::default(),
            quantize_window: false,
            zipf_min: 0.5,
            zipf_max: 2.5,
            calibrate_alpha_high: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            calibrate_alpha_low: vec![0.0, 0.02, 0.04, 0.06, 0.08, 0.1],
            max_ticks: 100_000,
        }
    }
}

fn parse_num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Syntax { line, msg: format!("bad value {v:?} for {key}") })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Syntax { line, msg: format!("bad boolean {v:?} for {key}") }),
    }
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',').map(|x| parse_num(line, key, x.trim())).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl SimConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("expected key = value, got {t:?}") })?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (line, v.trim().to_string())).is_some() {
                return Err(ConfigError::Syntax { line, msg: format!("duplicate key {k}") });
            }
        }
        let mut c = SimConfig::default();
        if let Some((line, name)) = entries.remove("preset") {
            c.policy = PolicyParams {
                window: c.policy.window,
                ..PolicyParams::preset(&name)
                    .ok_or_else(|| ConfigError::Syntax { line, msg: format!("unknown preset {name:?}") })?
            };
        }
        for (key, (line, v)) in entries {
            let v = v.as_str();
            let k = key.as_str();
            match k {
                "seed" => c.seed = parse_num(line, k, v)?,
                "num_requests" => c.num_requests = parse_num(line, k, v)?,
                "arrival_rate" => c.arrival_rate = parse_num(line, k, v)?,
                "prompt_len_min" => c.prompt_len_min = parse_num(line, k, v)?,
                "prompt_len_max" => c.prompt_len_max = parse_num(line, k, v)?,
                "gen_len_min" => c.gen_len_min = parse_num(line, k, v)?,
                "gen_len_max" => c.gen_len_max = parse_num(line, k, v)?,
                "layers" => c.layers = parse_num(line, k, v)?,
                "kv_heads" => c.kv_heads = parse_num(line, k, v)?,
                "queries_per_kv" => c.queries_per_kv = parse_num(line, k, v)?,
                "dim" => c.dim = parse_num(line, k, v)?,
                "total_pages" => c.total_pages = parse_num(line, k, v)?,
                "page_bytes" => c.page_bytes = parse_num(line, k, v)?,
                "max_seq_len" => c.max_seq_len = parse_num(line, k, v)?,
                "alpha_high" => c.policy.alpha_high = parse_num(line, k, v)?,
                "alpha_low" => c.policy.alpha_low = parse_num(line, k, v)?,
                "window" => c.policy.window = parse_num(line, k, v)?,
                "high_precision" => c.policy.high = parse_pair(line, v)?,
                "low_precision" => c.policy.low = parse_pair(line, v)?,
                "low_precision_enabled" => c.policy.low_precision_enabled = parse_bool(line, k, v)?,
                "prompt_denominator" => {
                    c.policy.prompt_denominator = match v {
                        "position" => PromptDenominator::Position,
                        "received_count" => PromptDenominator::ReceivedCount,
                        _ => return Err(ConfigError::Syntax { line, msg: format!("bad prompt_denominator {v:?}") }),
                    }
                }
                "quantize_window" => c.quantize_window = parse_bool(line, k, v)?,
                "zipf_min" => c.zipf_min = parse_num(line, k, v)?,
                "zipf_max" => c.zipf_max = parse_num(line, k, v)?,
                "calibrate_alpha_high" => c.calibrate_alpha_high = parse_list(line, k, v)?,
                "calibrate_alpha_low" => c.calibrate_alpha_low = parse_list(line, k, v)?,
                "max_ticks" => c.max_ticks = parse_num(line, k, v)?,
                _ => return Err(ConfigError::Syntax { line, msg: format!("unknown key {k}") }),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let positive = [
            ("num_requests", self.num_requests),
            ("prompt_len_min", self.prompt_len_min),
            ("gen_len_min", self.gen_len_min),
            ("layers", self.layers),
            ("kv_heads", self.kv_heads),
            ("queries_per_kv", self.queries_per_kv),
            ("total_pages", self.total_pages),
            ("page_bytes", self.page_bytes),
            ("max_ticks", self.max_ticks as usize),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{k} must be positive"));
        }
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return bad("dim must be even and at least 2".into());
        }
        if self.prompt_len_min > self.prompt_len_max || self.gen_len_min > self.gen_len_max {
            return bad("length ranges must have min <= max".into());
        }
        if self.prompt_len_max + self.gen_len_max > self.max_seq_len {
            return bad("max_seq_len must cover the longest prompt plus generation".into());
        }
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return bad("arrival_rate must be positive".into());
        }
        if !(self.zipf_min >= 0.0 && self.zipf_min <= self.zipf_max && self.zipf_max.is_finite()) {
            return bad("zipf range must satisfy 0 <= zipf_min <= zipf_max".into());
        }
        if self.calibrate_alpha_high.is_empty() || self.calibrate_alpha_low.is_empty() {
            return bad("calibration grids must be nonempty".into());
        }
        self.policy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.policy.window < 2 {
            return bad("window must be at least 2".into());
        }
        self.store_config().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<PageGeometry, String> {
        PageGeometry::new(self.page_bytes, self.dim).map_err(|e| e.to_string())
    }

    pub fn store_config(&self) -> Result<StoreConfig, String> {
        let g = self.geometry()?;
        let mut s = StoreConfig::new(g, self.total_pages, self.max_seq_len);
        s.high = self.policy.high;
        s.low = self.policy.low;
        crate::memstore::KvStore::new(s).map_err(|e| e.to_string())?;
        Ok(s)
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig { policy: self.policy.clone(), quantize_window: self.quantize_window }
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        let p = &self.policy;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a string");
        put("seed", self.seed.to_string());
        put("num_requests", self.num_requests.to_string());
        put("arrival_rate", self.arrival_rate.to_string());
        put("prompt_len_min", self.prompt_len_min.to_string());
        put("prompt_len_max", self.prompt_len_max.to_string());
        put("gen_len_min", self.gen_len_min.to_string());
        put("gen_len_max", self.gen_len_max.to_string());
        put("layers", self.layers.to_string());
        put("kv_heads", self.kv_heads.to_string());
        put("queries_per_kv", self.queries_per_kv.to_string());
        put("dim", self.dim.to_string());
        put("total_pages", self.total_pages.to_string());
        put("page_bytes", self.page_bytes.to_string());
        put("max_seq_len", self.max_seq_len.to_string());
        put("alpha_high", p.alpha_high.to_string());
        put("alpha_low", p.alpha_low.to_string());
        put("window", p.window.to_string());
        put("high_precision", p.high.to_string());
        put("low_precision", p.low.to_string());
        put("low_precision_enabled", p.low_precision_enabled.to_string());
        put(
            "prompt_denominator",
            match p.prompt_denominator {
                PromptDenominator::Position => "position",
                PromptDenominator::ReceivedCount => "received_count",
            }
            .into(),
        );
        put("quantize_window", self.quantize_window.to_string());
        put("zipf_min", self.zipf_min.to_string());
        put("zipf_max", self.zipf_max.to_string());
        put("calibrate_alpha_high", fmt_list(&self.calibrate_alpha_high));
        put("calibrate_alpha_low", fmt_list(&self.calibrate_alpha_low));
        put("max_ticks", self.max_ticks.to_string());
        s
    }
}

fn parse_pair(line: usize, v: &str) -> Result<PrecisionPair, ConfigError> {
    v.parse().map_err(|e| ConfigError::Syntax { line, msg: format!("{e}") })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let c = SimConfig::default();
        c.validate().unwrap();
        assert_eq!(SimConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parses_keys_comments_and_presets() {
        let text = "# comment\nseed = 7\n\nalpha_low=0.05\npreset = qwen2.5-32b\nhigh_precision = K8V8\n";
        let c = SimConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.policy.alpha_high, 3.0);
        assert_eq!(c.policy.alpha_low, 0.05);
        assert_eq!(c.policy.high.to_string(), "K8V8");
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            SimConfig::parse("seed = 1\nbogus = 2\n"),
            Err(ConfigError::Syntax { line: 2, msg: "unknown key bogus".into() })
        );
        assert!(matches!(SimConfig::parse("seed = x"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(SimConfig::parse("seed = 1\nseed = 2"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(SimConfig::parse("noequals"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(SimConfig::parse("dim = 3"), Err(ConfigError::Invalid(_))));
        assert!(matches!(SimConfig::parse("alpha_high = 0.01\nalpha_low = 0.5"), Err(ConfigError::Invalid(_))));
    }
}
