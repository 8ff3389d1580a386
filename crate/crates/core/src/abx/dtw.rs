//! Dynamic time warping with path-length normalization.
//!
//! The score of a monotone alignment path from `(0, 0)` to `(m-1, n-1)`
//! using steps down, right and diagonal is the mean of the local distances
//! along it; DTW returns the minimum score over all such paths. Because the
//! mean is not additive, the recursion keeps one running minimum per path
//! length.

use std::cell::RefCell;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::distance::{frame_distance, Distance, PreparedFrames};

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// DTW over an `m x n` grid whose local distances come from `local(i, j)`.
pub fn dtw_with<F: FnMut(usize, usize) -> f64>(m: usize, n: usize, mut local: F) -> Result<f64> {
    if m == 0 || n == 0 {
        return Err(Error::contract("dtw: empty sequence"));
    }
    // best[(i * n + j) * lmax + (l - 1)]: min summed cost of paths of length l ending at (i, j)
    let lmax = m + n - 1;
    SCRATCH.with(|cell| {
        let mut best = cell.borrow_mut();
        best.clear();
        best.resize(m * n * lmax, f64::INFINITY);
        for i in 0..m {
            for j in 0..n {
                let d = local(i, j);
                let at = (i * n + j) * lmax;
                if i == 0 && j == 0 {
                    best[at] = d;
                    continue;
                }
                // shortest path to (i, j) has max(i, j) + 1 cells, longest i + j + 1
                for l in (i.max(j) + 1)..=(i + j + 1) {
                    let mut prev = f64::INFINITY;
                    if i > 0 {
                        prev = prev.min(best[((i - 1) * n + j) * lmax + l - 2]);
                    }
                    if j > 0 {
                        prev = prev.min(best[(i * n + j - 1) * lmax + l - 2]);
                    }
                    if i > 0 && j > 0 {
                        prev = prev.min(best[((i - 1) * n + j - 1) * lmax + l - 2]);
                    }
                    best[at + l - 1] = prev + d;
                }
            }
        }
        let at = ((m - 1) * n + (n - 1)) * lmax;
        let score = (m.max(n)..=lmax)
            .map(|l| best[at + l - 1] / l as f64)
            .fold(f64::INFINITY, f64::min);
        Ok(score)
    })
}

/// DTW between two frame matrices under `dist`.
pub fn dtw(seq_a: &Tensor, seq_b: &Tensor, dist: Distance) -> Result<f64> {
    if seq_a.rows() == 0 || seq_b.rows() == 0 {
        return Err(Error::contract("dtw: empty sequence"));
    }
    if seq_a.cols() != seq_b.cols() {
        return Err(Error::contract("dtw: frame dimensions differ"));
    }
    let mut local = Vec::with_capacity(seq_a.rows() * seq_b.rows());
    for i in 0..seq_a.rows() {
        for j in 0..seq_b.rows() {
            local.push(frame_distance(dist, seq_a.row(i), seq_b.row(j))?);
        }
    }
    let n = seq_b.rows();
    dtw_with(seq_a.rows(), n, |i, j| local[i * n + j])
}

/// DTW between frame ranges of two prepared sequences.
pub fn dtw_prepared(
    a: &PreparedFrames,
    a_range: std::ops::Range<usize>,
    b: &PreparedFrames,
    b_range: std::ops::Range<usize>,
) -> Result<f64> {
    let (a0, b0) = (a_range.start, b_range.start);
    dtw_with(a_range.len(), b_range.len(), |i, j| {
        a.between(a0 + i, b, b0 + j)
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Minimum path-mean by explicit enumeration of every monotone path.
    pub fn brute_force_dtw(m: usize, n: usize, local: &dyn Fn(usize, usize) -> f64) -> f64 {
        fn walk(
            i: usize,
            j: usize,
            m: usize,
            n: usize,
            sum: f64,
            len: usize,
            local: &dyn Fn(usize, usize) -> f64,
            best: &mut f64,
        ) {
            let sum = sum + local(i, j);
            let len = len + 1;
            if i == m - 1 && j == n - 1 {
                *best = best.min(sum / len as f64);
                return;
            }
            if i + 1 < m {
                walk(i + 1, j, m, n, sum, len, local, best);
            }
            if j + 1 < n {
                walk(i, j + 1, m, n, sum, len, local, best);
            }
            if i + 1 < m && j + 1 < n {
                walk(i + 1, j + 1, m, n, sum, len, local, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(0, 0, m, n, 0.0, 0, local, &mut best);
        best
    }
}
