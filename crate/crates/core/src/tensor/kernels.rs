//! Matrix product kernels used by the graph's matmul forward and backward.
//!
//! Every output row is produced by a single closure invocation with a fixed
//! accumulation order, so results are bitwise identical between the
//! sequential and parallel paths.

use crate::par::{self, Execution};

/// Below this many multiply-adds the sequential loop is used.
const PAR_THRESHOLD: usize = 1 << 18;

fn exec_for(work: usize) -> Execution {
    if work >= PAR_THRESHOLD {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_row(exec_for(m * k * n), &mut out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    });
    out
}

/// `aᵀ · g` for `a[m×k]`, `g[m×n]`, giving `k×n`.
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    par::for_each_row(exec_for(m * k * n), &mut out, n, |p, row| {
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    });
    out
}

/// `g · bᵀ` for `g[m×n]`, `b[k×n]`, giving `m×k`.
pub fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    par::for_each_row(exec_for(m * k * n), &mut out, k, |i, row| {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
    out
}
