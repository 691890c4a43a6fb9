//! Deterministic parallel reduction.
//!
//! Work is split into fixed-size chunks (boundaries depend only on the item
//! count), each chunk is accumulated sequentially, and the chunk results are
//! combined along a fixed pairwise tree. The float result is therefore
//! bit-identical for every thread count, including sequential execution.

use rayon::prelude::*;

pub const CHUNK: usize = 4096;

/// Sum of `dim`-vector contributions over `0..n`. `fill(range, acc)` must add
/// the contributions of `range` into `acc` sequentially.
pub fn chunked_sum_vec<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    if n == 0 {
        return vec![0.0; dim];
    }
    let nchunks = n.div_ceil(CHUNK);
    let parts: Vec<Vec<f64>> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut acc = vec![0.0; dim];
            f(lo..hi, &mut acc);
            acc
        })
        .collect();
    pairwise_combine(parts)
}

/// Scalar variant of [`chunked_sum_vec`].
pub fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(std::ops::Range<usize>) -> f64 + Sync,
{
    chunked_sum_vec(n, 1, |range, acc| acc[0] += f(range))[0]
}

fn pairwise_combine(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    debug_assert!(!parts.is_empty());
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}
