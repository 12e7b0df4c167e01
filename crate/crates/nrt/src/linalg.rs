//! Block lower-triangular Toeplitz algebra in time.
//!
//! A causal space-time operator is stored as one spatial block per time lag.
//! Block `l` maps the density in cell `k - l` to the target at time `k`.

use crate::error::{NrtError, Result};
use crate::par::{map_range, Exec};
use nalgebra::DMatrix;

/// Apply lag blocks to a history stored column-wise (`x[:, k]` is cell k).
pub fn toeplitz_apply(blocks: &[DMatrix<f64>], x: &DMatrix<f64>) -> DMatrix<f64> {
    let nt = x.ncols();
    let rows = blocks[0].nrows();
    let mut out = DMatrix::zeros(rows, nt);
    for (l, b) in blocks.iter().enumerate().take(nt) {
        let src = x.columns(0, nt - l);
        let mut dst = out.columns_mut(l, nt - l);
        dst.gemm(1.0, b, &src, 1.0);
    }
    out
}

/// Solve sum_l V_l sigma_{k-l} = g_k by forward substitution in time.
pub fn toeplitz_march(blocks: &[DMatrix<f64>], g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let nt = g.ncols();
    let n = g.nrows();
    let lu = blocks[0].clone().lu();
    let mut sig = DMatrix::zeros(n, nt);
    for k in 0..nt {
        let mut rhs = g.column(k).clone_owned();
        for l in 1..=k {
            rhs.gemv(-1.0, &blocks[l], &sig.column(k - l), 1.0);
        }
        let sol = lu.solve(&rhs).ok_or_else(|| NrtError::Numerical("singular current-cell block".into()))?;
        sig.set_column(k, &sol);
    }
    Ok(sig)
}

/// Lag blocks of the inverse operator: Z_0 = V_0^{-1}, Z_l = -Z_0 sum_{j=1..l} V_j Z_{l-j}.
pub fn toeplitz_inverse(blocks: &[DMatrix<f64>], exec: Exec) -> Result<Vec<DMatrix<f64>>> {
    let n = blocks[0].nrows();
    let z0 =
        blocks[0].clone().try_inverse().ok_or_else(|| NrtError::Numerical("singular current-cell block".into()))?;
    let mut z: Vec<DMatrix<f64>> = vec![z0.clone()];
    for l in 1..blocks.len() {
        // parallel over the partial sums, then reduce in order
        let parts = map_range(exec, l, |j| &blocks[j + 1] * &z[l - 1 - j]);
        let mut acc = DMatrix::zeros(n, n);
        for p in parts {
            acc += p;
        }
        z.push(-(&z0 * acc));
    }
    Ok(z)
}

/// Lag blocks of the composition A * B (both causal Toeplitz).
pub fn toeplitz_compose(a: &[DMatrix<f64>], b: &[DMatrix<f64>], exec: Exec) -> Vec<DMatrix<f64>> {
    let nl = a.len().min(b.len());
    map_range(exec, nl, |l| {
        let mut acc = DMatrix::zeros(a[0].nrows(), b[0].ncols());
        for j in 0..=l {
            acc.gemm(1.0, &a[j], &b[l - j], 1.0);
        }
        acc
    })
}
