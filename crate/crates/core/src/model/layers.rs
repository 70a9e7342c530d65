//! Forward/backward kernels for the toy backend. Row-major activations:
//! one row per grid cell.

use ndarray::{Array1, Array2, Axis};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(z: f64) -> f64 {
    let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * z * (1.0 + t)
}

pub(crate) fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

pub(crate) fn add_row(mut x: Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
    x += &bias.row(0);
    x
}

pub(crate) fn column_sums(x: &Array2<f64>) -> Array2<f64> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

pub(crate) struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Per-row layer normalization with affine `[1, D]` gain and shift.
pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: &Array2<f64>,
    shift: &Array2<f64>,
) -> (Array2<f64>, NormCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for k in 0..d {
            xhat[[i, k]] = (row[k] - mean) * is;
        }
    }
    let y = &xhat * &gain.row(0) + &shift.row(0);
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, d_gain, d_shift)`.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    gain: &Array2<f64>,
    cache: &NormCache,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (n, d) = dy.dim();
    let d_gain = column_sums(&(dy * &cache.xhat));
    let d_shift = column_sums(dy);
    let dxhat = dy * &gain.row(0);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let row = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = row.sum() / d as f64;
        let m2 = row.dot(&xh) / d as f64;
        for k in 0..d {
            dx[[i, k]] = cache.inv_std[i] * (row[k] - m1 - xh[k] * m2);
        }
    }
    (dx, d_gain, d_shift)
}

/// Row-normalized 3x3 neighbourhood averaging over a `gh x gw` grid.
pub(crate) fn neighbour_matrix(gh: usize, gw: usize) -> Array2<f64> {
    let n = gh * gw;
    let mut k = Array2::zeros((n, n));
    for y in 0..gh {
        for x in 0..gw {
            let i = y * gw + x;
            let mut members = Vec::new();
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < gh && (nx as usize) < gw {
                        members.push(ny as usize * gw + nx as usize);
                    }
                }
            }
            let w = 1.0 / members.len() as f64;
            for j in members {
                k[[i, j]] = w;
            }
        }
    }
    k
}

/// Bilinear interpolation weights `[out, in]` (half-pixel centres, edge clamp).
pub(crate) fn bilinear_matrix(out_len: usize, in_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        let w1 = src - i0 as f64;
        m[[o, i0]] += 1.0 - w1;
        m[[o, i1]] += w1;
    }
    m
}
