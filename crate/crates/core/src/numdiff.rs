//! Central-difference derivatives of black-box maps.

use crate::error::Result;

/// Jacobian of `f` at `x` by central differences with step `h`.
/// Returned row-major with shape (output_dim, input_dim).
pub fn jacobian<F>(mut f: F, x: &[f64], h: f64) -> Result<(Vec<f64>, usize)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut xp = x.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for a in 0..n {
        xp[a] = x[a] + h;
        let fp = f(&xp)?;
        xp[a] = x[a] - h;
        let fm = f(&xp)?;
        xp[a] = x[a];
        cols.push(fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * h)).collect());
    }
    let m = cols[0].len();
    let mut out = vec![0.0; m * n];
    for (a, col) in cols.iter().enumerate() {
        for i in 0..m {
            out[i * n + a] = col[i];
        }
    }
    Ok((out, m))
}
