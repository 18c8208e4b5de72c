//! Three-level compression policy: each token outside the recent window is
//! kept at high precision, kept at low precision, or pruned, based on how its
//! significance compares with `alpha / n`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attn::TokenStats;
use crate::quant::PrecisionPair;

/// Prompt-phase high test is strict (`sig > alpha_h / i`).
pub const PROMPT_HIGH_STRICT: bool = true;
/// Generation-phase high test is non-strict (`sig >= alpha_h / n`).
pub const GENERATION_HIGH_STRICT: bool = false;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid policy parameters: {0}")]
    InvalidParams(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
}

/// Which count divides `alpha` when classifying prompt token `i` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptDenominator {
    /// The token's own position `i`.
    #[default]
    Position,
    /// The number of scores the token received, `N - i`.
    ReceivedCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub alpha_high: f64,
    pub alpha_low: f64,
    pub window: usize,
    pub high: PrecisionPair,
    pub low: PrecisionPair,
    pub low_precision_enabled: bool,
    pub prompt_denominator: PromptDenominator,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            alpha_high: 1.0,
            alpha_low: 0.02,
            window: 64,
            high: PrecisionPair::K8V4,
            low: PrecisionPair::K4V2,
            low_precision_enabled: true,
            prompt_denominator: PromptDenominator::Position,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidParams(m.into()));
        if !(self.alpha_high >= 0.0 && self.alpha_low >= 0.0) {
            return bad("alphas must be >= 0");
        }
        if self.alpha_low > self.alpha_high {
            return bad("alpha_low must not exceed alpha_high");
        }
        if self.window == 0 {
            return bad("window must be positive");
        }
        if self.high.is_passthrough() || self.low.is_passthrough() {
            return bad("policy precisions must be integer formats");
        }
        Ok(())
    }

    /// Calibrated presets, keyed by model name.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::default();
        let (alpha_high, alpha_low, low_precision_enabled) = match name {
            "llama3-8b" => (1.0, 0.02, true),
            "llama3-70b" => (1.0, 0.0, true),
            "qwen2.5-32b" | "qwq-32b" => (3.0, 0.0, true),
            "qwen2.5-7b" => (1.0, 0.04, false),
            _ => return None,
        };
        Some(Self { alpha_high, alpha_low, low_precision_enabled, ..base })
    }

    /// High-precision alpha actually applied; with low precision disabled every
    /// token that clears the prune threshold is kept high.
    pub fn effective_alpha_high(&self) -> f64 {
        if self.low_precision_enabled {
            self.alpha_high
        } else {
            self.alpha_low
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    High,
    Low,
    Pruned,
}

/// Is 0-based `position` inside the last `window` tokens of an `n`-token sequence?
pub fn in_window(position: usize, n: usize, window: usize) -> bool {
    position + window >= n
}

/// Classifies every prompt token. Window tokens come back `High`.
///
/// `stats[p]` must describe 0-based position `p`; with GQA the scores behind
/// them are max-aggregated, so significance can exceed `1 / i`.
pub fn classify_prompt(stats: &[TokenStats], n: usize, params: &PolicyParams) -> Result<Vec<TokenClass>, PolicyError> {
    params.validate()?;
    if n == 0 {
        return Err(PolicyError::InvalidParams("prompt length must be positive".into()));
    }
    if stats.len() < n.saturating_sub(params.window) {
        return Err(PolicyError::InvalidState(format!("{} stats for a {n}-token prompt", stats.len())));
    }
    let alpha_h = params.effective_alpha_high();
    (0..n)
        .map(|p| {
            if in_window(p, n, params.window) {
                return Ok(TokenClass::High);
            }
            let st = &stats[p];
            if st.position != p {
                return Err(PolicyError::InvalidState(format!("stats out of order at {p}")));
            }
            let sig =
                st.significance().ok_or_else(|| PolicyError::InvalidState(format!("token {p} received no scores")))?;
            let denom = match params.prompt_denominator {
                PromptDenominator::Position => (p + 1) as f64,
                PromptDenominator::ReceivedCount => st.received_count as f64,
            };
            Ok(if sig > alpha_h / denom {
                TokenClass::High
            } else if sig >= params.alpha_low / denom {
                TokenClass::Low
            } else {
                TokenClass::Pruned
            })
        })
        .collect()
}

/// Significance of one stored token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub position: usize,
    pub significance: f64,
}

/// Section of the compressed cache a token lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimAction {
    Retain,
    Downgrade,
    Prune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Victim {
    pub position: usize,
    pub section: Section,
    pub action: VictimAction,
}

/// Outcome of compressing one candidate token leaving the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationDecision {
    pub candidate: usize,
    pub placement: TokenClass,
    pub victim: Option<Victim>,
}

/// Minimum-significance token; ties go to the oldest position.
pub fn select_victim(section: &[Scored]) -> Option<usize> {
    section
        .iter()
        .min_by(|a, b| a.significance.total_cmp(&b.significance).then(a.position.cmp(&b.position)))
        .map(|s| s.position)
}

/// One generation step of the policy for candidate `t_c`.
///
/// `high` and `low` are the sections before the candidate is inserted; the
/// victim search runs after insertion, so the candidate can be its own victim.
pub fn generation_step(
    candidate: &TokenStats,
    high: &[Scored],
    low: &[Scored],
    n: usize,
    params: &PolicyParams,
) -> Result<GenerationDecision, PolicyError> {
    if n == 0 {
        return Err(PolicyError::InvalidParams("sequence length must be positive".into()));
    }
    let sig = candidate
        .significance()
        .ok_or_else(|| PolicyError::InvalidState(format!("candidate {} has no statistics", candidate.position)))?;
    let n = n as f64;
    let hi_t = params.effective_alpha_high() / n;
    let lo_t = params.alpha_low / n;
    let me = Scored { position: candidate.position, significance: sig };
    let with_me = |section: &[Scored]| {
        let mut v = section.to_vec();
        v.push(me);
        v
    };
    let argmin = |section: &[Scored]| {
        let pos = select_victim(section).expect("section holds the candidate");
        let s = section.iter().find(|s| s.position == pos).expect("victim present").significance;
        (pos, s)
    };

    if sig >= hi_t {
        let (pos, s) = argmin(&with_me(high));
        let action = if s >= hi_t {
            VictimAction::Retain
        } else if s >= lo_t {
            VictimAction::Downgrade
        } else {
            VictimAction::Prune
        };
        Ok(GenerationDecision {
            candidate: me.position,
            placement: TokenClass::High,
            victim: Some(Victim { position: pos, section: Section::High, action }),
        })
    } else if sig >= lo_t {
        let (pos, s) = argmin(&with_me(low));
        let action = if s < lo_t { VictimAction::Prune } else { VictimAction::Retain };
        Ok(GenerationDecision {
            candidate: me.position,
            placement: TokenClass::Low,
            victim: Some(Victim { position: pos, section: Section::Low, action }),
        })
    } else {
        Ok(GenerationDecision { candidate: me.position, placement: TokenClass::Pruned, victim: None })
    }
}

/// Positions held in each section, updated by applying decisions. Engines keep
/// physical storage alongside; this is the logical view.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SectionSets {
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    pub pruned: Vec<usize>,
}

impl SectionSets {
    /// Applies a decision. The candidate must not already be stored.
    pub fn apply(&mut self, d: &GenerationDecision) {
        match d.placement {
            TokenClass::High => self.high.push(d.candidate),
            TokenClass::Low => self.low.push(d.candidate),
            TokenClass::Pruned => self.pruned.push(d.candidate),
        }
        if let Some(v) = d.victim {
            let from = match v.section {
                Section::High => &mut self.high,
                Section::Low => &mut self.low,
            };
            match v.action {
                VictimAction::Retain => {}
                VictimAction::Downgrade => {
                    from.retain(|&p| p != v.position);
                    self.low.push(v.position);
                }
                VictimAction::Prune => {
                    from.retain(|&p| p != v.position);
                    self.pruned.push(v.position);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::{prompt_significance, ScoreMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize) -> Vec<TokenStats> {
        let rows = (0..n).map(|i| vec![1.0 / (i + 1) as f64; i + 1]).collect();
        prompt_significance(&ScoreMatrix::from_rows(rows).unwrap())
    }

    fn params(alpha_high: f64, alpha_low: f64, window: usize) -> PolicyParams {
        PolicyParams { alpha_high, alpha_low, window, ..PolicyParams::default() }
    }

    #[test]
    fn window_covers_short_prompt() {
        let st = uniform(5);
        let c = classify_prompt(&st, 5, &params(1e9, 1e9, 64)).unwrap();
        assert!(c.iter().all(|&c| c == TokenClass::High));
    }

    #[test]
    fn uniform_prompt_matches_scan() {
        let n = 100;
        let st = uniform(n);
        let c = classify_prompt(&st, n, &params(1.0, 0.0, 4)).unwrap();
        for i in 1..=n {
            let expect = if i > n - 4 {
                TokenClass::High
            } else {
                // sig_i = (1/(N-i)) * sum_{j>i} 1/j
                let sig: f64 = (i + 1..=n).map(|j| 1.0 / j as f64).sum::<f64>() / (n - i) as f64;
                if sig > 1.0 / i as f64 {
                    TokenClass::High
                } else {
                    TokenClass::Low
                }
            };
            assert_eq!(c[i - 1], expect, "token {i}");
        }
        // Early tokens fall below 1/i under uniform attention, late ones stay above.
        assert_eq!(c[0], TokenClass::Low);
    }

    #[test]
    fn zero_thresholds() {
        let mut rows: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0 / (i + 1) as f64; i + 1]).collect();
        // token 1 (0-based) never receives mass
        for r in rows.iter_mut().skip(2) {
            let share = r[1];
            r[1] = 0.0;
            r[0] += share;
        }
        let st = prompt_significance(&ScoreMatrix::from_rows(rows).unwrap());
        let c = classify_prompt(&st, 6, &params(0.0, 0.0, 1)).unwrap();
        assert_eq!(c[0], TokenClass::High);
        assert_eq!(c[1], TokenClass::Low);
        assert!(c[2..].iter().all(|&x| x == TokenClass::High));
    }

    #[test]
    fn prompt_boundary_is_low() {
        let st = vec![TokenStats { position: 0, received_sum: 0.5, received_count: 1 }, TokenStats::new(1)];
        // sig = 0.5 == alpha_h / 1
        let c = classify_prompt(&st, 2, &params(0.5, 0.1, 1)).unwrap();
        assert_eq!(c[0], TokenClass::Low);
        assert!(classify_prompt(&st, 0, &params(0.5, 0.1, 1)).is_err());
    }

    #[test]
    fn received_count_denominator() {
        let st = uniform(10);
        let mut p = params(1.0, 0.0, 1);
        p.prompt_denominator = PromptDenominator::ReceivedCount;
        let c = classify_prompt(&st, 10, &p).unwrap();
        // token 1: sig = mean_{j=2..10} 1/j ≈ 0.2 > 1/9
        assert_eq!(c[0], TokenClass::High);
    }

    #[test]
    fn low_disabled_never_low() {
        let st = uniform(50);
        let mut p = params(5.0, 0.5, 2);
        p.low_precision_enabled = false;
        let c = classify_prompt(&st, 50, &p).unwrap();
        assert!(!c.contains(&TokenClass::Low));
        assert!(c.contains(&TokenClass::Pruned) && c.contains(&TokenClass::High));
    }

    #[test]
    fn params_validation() {
        assert!(params(0.1, 0.2, 4).validate().is_err());
        assert!(params(1.0, 0.0, 0).validate().is_err());
        assert!(params(-1.0, -2.0, 1).validate().is_err());
        assert_eq!(PolicyParams::preset("llama3-8b").unwrap().alpha_low, 0.02);
        assert_eq!(PolicyParams::preset("qwq-32b").unwrap().alpha_high, 3.0);
        assert!(!PolicyParams::preset("qwen2.5-7b").unwrap().low_precision_enabled);
        assert!(PolicyParams::preset("gpt-2").is_none());
    }

    fn stats(position: usize, sig: f64) -> TokenStats {
        TokenStats { position, received_sum: sig, received_count: 1 }
    }

    #[test]
    fn candidate_alone_in_high() {
        // alpha_h / N = 0.5 with N = 2
        let d = generation_step(&stats(4, 0.9), &[], &[], 2, &params(1.0, 0.0, 1)).unwrap();
        assert_eq!(d.placement, TokenClass::High);
        assert_eq!(d.victim, Some(Victim { position: 4, section: Section::High, action: VictimAction::Retain }));
    }

    #[test]
    fn candidate_pruned() {
        let d = generation_step(&stats(4, 0.001), &[], &[], 10, &params(1.0, 0.02, 1)).unwrap();
        assert_eq!(d, GenerationDecision { candidate: 4, placement: TokenClass::Pruned, victim: None });
        let missing = generation_step(&TokenStats::new(4), &[], &[], 10, &params(1.0, 0.02, 1));
        assert!(matches!(missing, Err(PolicyError::InvalidState(_))));
    }

    #[test]
    fn generation_high_boundary_inclusive() {
        // sig == alpha_h / N goes high in generation
        let d = generation_step(&stats(0, 0.25), &[], &[], 4, &params(1.0, 0.0, 1)).unwrap();
        assert_eq!(d.placement, TokenClass::High);
    }

    #[test]
    fn victim_downgrade_and_prune() {
        let high = [Scored { position: 1, significance: 0.05 }];
        let d = generation_step(&stats(9, 0.5), &high, &[], 10, &params(1.0, 0.2, 1)).unwrap();
        assert_eq!(d.victim.unwrap().action, VictimAction::Downgrade);
        let high = [Scored { position: 1, significance: 0.001 }];
        let d = generation_step(&stats(9, 0.5), &high, &[], 10, &params(1.0, 0.2, 1)).unwrap();
        assert_eq!(d.victim.unwrap().action, VictimAction::Prune);
        let low = [Scored { position: 2, significance: 0.001 }];
        let d = generation_step(&stats(9, 0.05), &[], &low, 10, &params(1.0, 0.2, 1)).unwrap();
        assert_eq!(d.placement, TokenClass::Low);
        assert_eq!(d.victim, Some(Victim { position: 2, section: Section::Low, action: VictimAction::Prune }));
    }

    #[test]
    fn victim_ties_oldest() {
        let s = [Scored { position: 7, significance: 0.1 }, Scored { position: 3, significance: 0.1 }];
        assert_eq!(select_victim(&s), Some(3));
        assert_eq!(select_victim(&s[..1]), Some(7));
        assert_eq!(select_victim(&[]), None);
    }

    #[test]
    fn victim_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let s: Vec<Scored> = (0..n)
                .map(|i| Scored {
                    position: i * 3 + rng.gen_range(0..3),
                    significance: rng.gen_range(0..5) as f64 / 4.0,
                })
                .collect();
            let mut best = 0;
            for i in 1..s.len() {
                if s[i].significance < s[best].significance
                    || (s[i].significance == s[best].significance && s[i].position < s[best].position)
                {
                    best = i;
                }
            }
            assert_eq!(select_victim(&s), Some(s[best].position));
        }
    }

    #[test]
    fn raising_alpha_high_never_promotes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = 60;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let raw: Vec<f64> = (0..=i).map(|_| rng.gen::<f64>().powi(4)).collect();
                    let z: f64 = raw.iter().sum();
                    raw.into_iter().map(|r| r / z).collect()
                })
                .collect();
            let st = prompt_significance(&ScoreMatrix::from_rows(rows).unwrap());
            let mut prev = classify_prompt(&st, n, &params(0.5, 0.1, 8)).unwrap();
            for ah in [1.0, 1.5, 2.0, 4.0] {
                let next = classify_prompt(&st, n, &params(ah, 0.1, 8)).unwrap();
                for (a, b) in prev.iter().zip(&next) {
                    if *a != TokenClass::High {
                        assert_ne!(*b, TokenClass::High);
                    }
                }
                prev = next;
            }
        }
    }

    #[test]
    fn section_sets_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = params(1.0, 0.05, 4);
        let mut sets = SectionSets::default();
        let mut sig = std::collections::BTreeMap::new();
        for pos in 0..300usize {
            let n = pos + 1 + p.window;
            sig.insert(pos, rng.gen::<f64>() * 3.0 / n as f64);
            let view =
                |v: &[usize]| v.iter().map(|&q| Scored { position: q, significance: sig[&q] }).collect::<Vec<_>>();
            let (h0, l0) = (sets.high.len(), sets.low.len());
            let d = generation_step(&stats(pos, sig[&pos]), &view(&sets.high), &view(&sets.low), n, &p).unwrap();
            sets.apply(&d);
            assert_eq!(sets.high.len() + sets.low.len() + sets.pruned.len(), pos + 1);
            assert!(sets.high.len() <= h0 + 1 && sets.low.len() <= l0 + 1);
            // Neither section ever shrinks within a step.
            assert!(sets.high.len() >= h0 && sets.low.len() >= l0);
        }
    }
}
