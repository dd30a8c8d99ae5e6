//! Singular values of layer weights via one-sided (Hestenes) Jacobi.

use serde::Serialize;

use crate::error::Result;
use crate::network::Network;

/// Relative orthogonality threshold between column pairs.
pub const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 80;

/// Singular values of the row-major `rows × cols` matrix `m`, descending.
/// Returns `min(rows, cols)` values.
pub fn singular_values(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(m.len(), rows * cols, "matrix data does not match {rows}x{cols}");
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    // Orthogonalize the shorter side so the column count is min(rows, cols).
    // Columns are stored contiguously.
    let (n, len, mut a) = if rows >= cols {
        let mut a = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                a[c * rows + r] = m[r * cols + c];
            }
        }
        (cols, rows, a)
    } else {
        (rows, cols, m.to_vec())
    };

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (lo, hi) = a.split_at_mut(j * len);
                let ci = &mut lo[i * len..(i + 1) * len];
                let cj = &mut hi[..len];
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (x, y) in ci.iter().zip(cj.iter()) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
                    let (xv, yv) = (*x, *y);
                    *x = c * xv - s * yv;
                    *y = s * xv + c * yv;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = a.chunks(len).map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub ordinal: usize,
    pub singular_values: Vec<f64>,
    pub variance: f64,
}

/// Spectrum of layer `l`. Conv kernels are matricized as `(Cout, Cin·kH·kW)`;
/// dense weights are used as stored.
pub fn singular_spectrum(net: &Network, l: usize) -> Result<SpectrumReport> {
    let w = &net.layer(l)?.weight;
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let singular_values = singular_values(w.data(), rows, cols);
    let variance = variance(&singular_values);
    Ok(SpectrumReport { ordinal: l, singular_values, variance })
}

/// CSV with header `ordinal,rank,sigma`; ranks start at 1.
pub fn spectra_csv(reports: &[SpectrumReport]) -> String {
    let mut out = String::from("ordinal,rank,sigma\n");
    for r in reports {
        for (k, s) in r.singular_values.iter().enumerate() {
            out.push_str(&format!("{},{},{:e}\n", r.ordinal, k + 1, s));
        }
    }
    out
}
