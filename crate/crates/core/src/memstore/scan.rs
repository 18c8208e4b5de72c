//! Work-parallel exclusive prefix sum.

use rayon::prelude::*;

use super::StoreError;

/// Below this many elements the scan runs sequentially.
const PARALLEL_THRESHOLD: usize = 4096;

/// Exclusive scan of `demands`; also returns the grand total.
///
/// Three phases: per-block totals in parallel, a sequential scan over the
/// block totals, then per-block local scans in parallel seeded with the
/// block offsets. Integer addition is associative, so the result equals
/// the sequential scan exactly.
pub fn exclusive_scan(demands: &[usize]) -> (Vec<usize>, usize) {
    if demands.len() < PARALLEL_THRESHOLD {
        return sequential_scan(demands);
    }
    let block = demands.len().div_ceil(rayon::current_num_threads().max(1) * 4).max(1024);
    let totals: Vec<usize> = demands.par_chunks(block).map(|c| c.iter().sum()).collect();
    let (block_offsets, total) = sequential_scan(&totals);
    let mut out = vec![0usize; demands.len()];
    out.par_chunks_mut(block).zip(demands.par_chunks(block)).zip(block_offsets.par_iter()).for_each(
        |((dst, src), &base)| {
            let mut acc = base;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = acc;
                acc += s;
            }
        },
    );
    (out, total)
}

fn sequential_scan(demands: &[usize]) -> (Vec<usize>, usize) {
    let mut acc = 0;
    let out = demands
        .iter()
        .map(|&d| {
            let o = acc;
            acc += d;
            o
        })
        .collect();
    (out, acc)
}

/// Checked form over signed demands: negative entries are rejected.
pub fn prefix_sum_exclusive(demands: &[i64]) -> Result<Vec<u64>, StoreError> {
    if let Some(i) = demands.iter().position(|&d| d < 0) {
        return Err(StoreError::NegativeDemand { index: i, value: demands[i] });
    }
    let as_usize: Vec<usize> = demands.iter().map(|&d| d as usize).collect();
    Ok(exclusive_scan(&as_usize).0.into_iter().map(|o| o as u64).collect())
}
