//! Reference causal attention and token-significance statistics.
//!
//! Everything here runs in `f64` and serves as the oracle that compressed
//! paths are checked against.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttnError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("position {0} is not tracked")]
    UntrackedPosition(usize),
    #[error("total mass must be positive")]
    ZeroMass,
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AttnError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AttnError::InvalidInput("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    /// The first `n` rows.
    pub fn head_rows(&self, n: usize) -> Self {
        let n = n.min(self.rows);
        Self { rows: n, cols: self.cols, data: self.data[..n * self.cols].to_vec() }
    }
}

/// Queries, keys and values for one head, all `seq_len x dim`.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
}

impl AttentionInputs {
    pub fn new(queries: Matrix, keys: Matrix, values: Matrix) -> Result<Self, AttnError> {
        let shape = (queries.rows, queries.cols);
        if (keys.rows, keys.cols) != shape || (values.rows, values.cols) != shape {
            return Err(AttnError::InvalidInput("Q, K and V shapes differ".into()));
        }
        if shape.0 == 0 || shape.1 == 0 {
            return Err(AttnError::InvalidInput("empty attention input".into()));
        }
        Ok(Self { queries, keys, values })
    }

    pub fn seq_len(&self) -> usize {
        self.queries.rows
    }

    pub fn dim(&self) -> usize {
        self.queries.cols
    }

    fn check_finite(&self) -> Result<(), AttnError> {
        for (name, m) in [("queries", &self.queries), ("keys", &self.keys), ("values", &self.values)] {
            if m.data.iter().any(|x| !x.is_finite()) {
                return Err(AttnError::InvalidInput(format!("non-finite entry in {name}")));
            }
        }
        Ok(())
    }
}

/// Causal softmax weights; row `i` holds `i + 1` probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    /// Wraps precomputed rows, checking the lower-triangular shape.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, AttnError> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(AttnError::InvalidInput(format!("score row {i} has {} entries", r.len())));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product summed in sorted order of the products, so any shared
/// permutation of the two operands gives a bit-identical result.
pub(crate) fn dot_canonical(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut buf = [0.0f64; 256];
    let mut heap = Vec::new();
    let prods: &mut [f64] = if n <= buf.len() {
        &mut buf[..n]
    } else {
        heap.resize(n, 0.0);
        &mut heap
    };
    for (p, (x, y)) in prods.iter_mut().zip(a.iter().zip(b)) {
        *p = x * y;
    }
    prods.sort_unstable_by(f64::total_cmp);
    prods.iter().sum()
}

/// Softmax with max subtraction.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Standard causal attention: row `i` attends to tokens `0..=i`.
pub fn causal_attention(inputs: &AttentionInputs) -> Result<(Matrix, ScoreMatrix), AttnError> {
    causal_attention_with(inputs, dot_canonical)
}

/// Causal attention with plain left-to-right dot products.
pub(crate) fn causal_attention_fast(inputs: &AttentionInputs) -> Result<(Matrix, ScoreMatrix), AttnError> {
    causal_attention_with(inputs, dot)
}

fn causal_attention_with(
    inputs: &AttentionInputs,
    dot_fn: fn(&[f64], &[f64]) -> f64,
) -> Result<(Matrix, ScoreMatrix), AttnError> {
    inputs.check_finite()?;
    let (l, d) = (inputs.seq_len(), inputs.dim());
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(l, d);
    let mut rows = Vec::with_capacity(l);
    for i in 0..l {
        let q = inputs.queries.row(i);
        let logits: Vec<f64> = (0..=i).map(|j| dot_fn(q, inputs.keys.row(j)) * inv_sqrt_d).collect();
        let probs = softmax(&logits);
        let o = out.row_mut(i);
        for (j, p) in probs.iter().enumerate() {
            for (acc, v) in o.iter_mut().zip(inputs.values.row(j)) {
                *acc += p * v;
            }
        }
        rows.push(probs);
    }
    Ok((out, ScoreMatrix { rows }))
}

/// One token's share of an attention output, split into magnitude and direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub position: usize,
    pub coefficient: f64,
    pub unit_vector: Vec<f64>,
}

/// Writes attention output `row` as `sum_j coefficient_j * unit_vector_j` where the
/// coefficient is the score times the value norm.
pub fn coefficient_decomposition(inputs: &AttentionInputs, row: usize) -> Result<Vec<Contribution>, AttnError> {
    if row >= inputs.seq_len() {
        return Err(AttnError::InvalidInput(format!("row {row} beyond sequence length")));
    }
    let (_, scores) = causal_attention(inputs)?;
    Ok(scores
        .row(row)
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let v = inputs.values.row(j);
            let norm = dot(v, v).sqrt();
            if norm == 0.0 {
                Contribution { position: j, coefficient: 0.0, unit_vector: vec![0.0; v.len()] }
            } else {
                Contribution { position: j, coefficient: p * norm, unit_vector: v.iter().map(|x| x / norm).collect() }
            }
        })
        .collect())
}

/// Running record of the attention a token has received.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenStats {
    pub position: usize,
    pub received_sum: f64,
    pub received_count: u32,
}

impl TokenStats {
    pub fn new(position: usize) -> Self {
        Self { position, received_sum: 0.0, received_count: 0 }
    }

    /// Average received score; `None` before any score has arrived.
    pub fn significance(&self) -> Option<f64> {
        (self.received_count > 0).then(|| self.received_sum / self.received_count as f64)
    }
}

/// Per-token statistics after a prompt: token `i` (0-based) averages the scores
/// it receives from tokens `i+1..N`. The last token receives none.
pub fn prompt_significance(scores: &ScoreMatrix) -> Vec<TokenStats> {
    let n = scores.len();
    if n < 2 {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let received_sum = (i + 1..n).map(|j| scores.row(j)[i]).sum();
            TokenStats { position: i, received_sum, received_count: (n - 1 - i) as u32 }
        })
        .collect()
}

/// Element-wise maximum over the query heads that share one KV head.
pub fn aggregate_gqa(per_query_head: &[ScoreMatrix]) -> Result<ScoreMatrix, AttnError> {
    let (first, rest) = per_query_head.split_first().ok_or_else(|| AttnError::InvalidInput("no query heads".into()))?;
    let mut acc = first.clone();
    for m in rest {
        if m.len() != acc.len() {
            return Err(AttnError::InvalidInput("score matrices differ in length".into()));
        }
        for (a, b) in acc.rows.iter_mut().zip(&m.rows) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = x.max(*y);
            }
        }
    }
    Ok(acc)
}

/// Element-wise maximum of single score rows (generation-phase GQA aggregation).
pub fn aggregate_rows(rows: &[Vec<f64>]) -> Result<Vec<f64>, AttnError> {
    let (first, rest) = rows.split_first().ok_or_else(|| AttnError::InvalidInput("no query heads".into()))?;
    let mut acc = first.clone();
    for r in rest {
        if r.len() != acc.len() {
            return Err(AttnError::InvalidInput("score rows differ in length".into()));
        }
        for (x, y) in acc.iter_mut().zip(r) {
            *x = x.max(*y);
        }
    }
    Ok(acc)
}

/// Folds one generation step's scores into the running statistics.
pub fn update_significance_generation(
    stats: &mut BTreeMap<usize, TokenStats>,
    new_scores: &[f64],
    live_positions: &[usize],
) -> Result<(), AttnError> {
    if new_scores.len() != live_positions.len() {
        return Err(AttnError::InvalidInput("scores and positions differ in length".into()));
    }
    if let Some(&p) = live_positions.iter().find(|p| !stats.contains_key(p)) {
        return Err(AttnError::UntrackedPosition(p));
    }
    for (&p, &s) in live_positions.iter().zip(new_scores) {
        let st = stats.get_mut(&p).expect("checked above");
        st.received_sum += s;
        st.received_count += 1;
    }
    Ok(())
}

/// Relative slack on the coverage test; absorbs summation-order rounding.
const COVERAGE_SLACK: f64 = 1e-12;

/// Smallest number of largest entries whose sum reaches `target` of the total.
pub fn critical_token_count(mass: &[f64], target: f64) -> Result<usize, AttnError> {
    if mass.is_empty() {
        return Err(AttnError::InvalidInput("empty mass vector".into()));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(AttnError::InvalidInput(format!("target {target} outside (0, 1]")));
    }
    if mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(AttnError::InvalidInput("mass entries must be finite and >= 0".into()));
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(AttnError::ZeroMass);
    }
    let mut sorted = mass.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let goal = target * total * (1.0 - COVERAGE_SLACK);
    let mut acc = 0.0;
    for (k, m) in sorted.iter().enumerate() {
        acc += m;
        if acc >= goal {
            return Ok(k + 1);
        }
    }
    Ok(sorted.len())
}
