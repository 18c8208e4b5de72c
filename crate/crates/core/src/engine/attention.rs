//! Single-query attention over a decoded cache, whole or in segments.

use crate::attn::{dot, softmax};

use super::EngineError;

/// Where a live token currently sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    High,
    Low,
    Window,
}

/// A live token as the attention kernel sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedToken {
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub origin: Origin,
}

/// Borrowed form of [`CachedToken`] consumed by the kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenView<'a> {
    pub position: usize,
    pub key: &'a [f64],
    pub value: &'a [f64],
    pub origin: Origin,
}

impl CachedToken {
    pub fn view(&self) -> TokenView<'_> {
        TokenView { position: self.position, key: &self.key, value: &self.value, origin: self.origin }
    }
}

/// Streaming-softmax partial over one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Partial {
    pub max_logit: f64,
    /// Sum of `exp(logit - max_logit) * value`.
    pub weighted: Vec<f64>,
    /// Sum of `exp(logit - max_logit)`.
    pub norm: f64,
}

impl Partial {
    pub fn empty(dim: usize) -> Self {
        Self { max_logit: f64::NEG_INFINITY, weighted: vec![0.0; dim], norm: 0.0 }
    }

    pub fn merge(&self, other: &Partial) -> Partial {
        if other.norm == 0.0 {
            return self.clone();
        }
        if self.norm == 0.0 {
            return other.clone();
        }
        let m = self.max_logit.max(other.max_logit);
        let (a, b) = ((self.max_logit - m).exp(), (other.max_logit - m).exp());
        Partial {
            max_logit: m,
            weighted: self.weighted.iter().zip(&other.weighted).map(|(x, y)| x * a + y * b).collect(),
            norm: self.norm * a + other.norm * b,
        }
    }

    pub fn finish(&self) -> Vec<f64> {
        self.weighted.iter().map(|w| w / self.norm).collect()
    }
}

fn logit(query: &[f64], key: &[f64]) -> f64 {
    dot(query, key) / (query.len() as f64).sqrt()
}

fn check(query: &[f64], tokens: &[TokenView]) -> Result<(), EngineError> {
    if tokens.is_empty() {
        return Err(EngineError::EmptyCache);
    }
    if tokens.iter().any(|t| t.key.len() != query.len() || t.value.len() != query.len()) {
        return Err(EngineError::InvalidInput("token dimension differs from query".into()));
    }
    Ok(())
}

/// Softmax attention of `query` over `tokens`; returns the output and the
/// score of each token in input order.
pub fn attend(query: &[f64], tokens: &[TokenView]) -> Result<(Vec<f64>, Vec<f64>), EngineError> {
    check(query, tokens)?;
    let logits: Vec<f64> = tokens.iter().map(|t| logit(query, t.key)).collect();
    let scores = softmax(&logits);
    let mut out = vec![0.0; query.len()];
    for (t, p) in tokens.iter().zip(&scores) {
        for (o, v) in out.iter_mut().zip(t.value.iter()) {
            *o += p * v;
        }
    }
    Ok((out, scores))
}

pub fn partial_attention(query: &[f64], tokens: &[TokenView]) -> Result<Partial, EngineError> {
    check(query, tokens)?;
    let logits: Vec<f64> = tokens.iter().map(|t| logit(query, t.key)).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = Partial { max_logit: m, ..Partial::empty(query.len()) };
    for (t, l) in tokens.iter().zip(&logits) {
        let e = (l - m).exp();
        p.norm += e;
        for (w, v) in p.weighted.iter_mut().zip(t.value.iter()) {
            *w += e * v;
        }
    }
    Ok(p)
}

/// Attention computed per segment of positions and merged. Segments must
/// partition the positions of `tokens`.
pub fn split_attention(
    query: &[f64],
    tokens: &[CachedToken],
    segments: &[Vec<usize>],
) -> Result<Vec<f64>, EngineError> {
    let mut seen = std::collections::BTreeSet::new();
    for &p in segments.iter().flatten() {
        if !seen.insert(p) {
            return Err(EngineError::InvalidInput(format!("position {p} is in more than one segment")));
        }
    }
    let live: std::collections::BTreeSet<usize> = tokens.iter().map(|t| t.position).collect();
    if seen != live {
        return Err(EngineError::InvalidInput("segments do not cover the live tokens".into()));
    }
    let by_pos: std::collections::BTreeMap<usize, TokenView> = tokens.iter().map(|t| (t.position, t.view())).collect();
    let mut acc = Partial::empty(query.len());
    for seg in segments.iter().filter(|s| !s.is_empty()) {
        let members: Vec<TokenView> = seg.iter().map(|p| by_pos[p]).collect();
        acc = acc.merge(&partial_attention(query, &members)?);
    }
    if acc.norm == 0.0 {
        return Err(EngineError::EmptyCache);
    }
    Ok(acc.finish())
}
