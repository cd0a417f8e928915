//! Raw slice kernels shared by the checked `Dense*` API and the tape.
//!
//! No shape checks happen here; callers validate first.

/// `y = W x + b` with `W` stored row-major as `rows x cols`.
pub(crate) fn linear(x: &[f64], w: &[f64], rows: usize, cols: usize, b: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            let row = &w[i * cols..(i + 1) * cols];
            row.iter().zip(x).map(|(wij, xj)| wij * xj).sum::<f64>() + b[i]
        })
        .collect()
}

/// Returns `(dx, dW, db)` for `y = W x + b` given `dy`.
pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    rows: usize,
    cols: usize,
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; cols];
    let mut gw = vec![0.0; rows * cols];
    for i in 0..rows {
        let g = gy[i];
        let row = &w[i * cols..(i + 1) * cols];
        let grow = &mut gw[i * cols..(i + 1) * cols];
        for j in 0..cols {
            gx[j] += row[j] * g;
            grow[j] = g * x[j];
        }
    }
    (gx, gw, gy.to_vec())
}

/// Row-major flattening of `u ⊗ v`: `out[i * v.len() + j] = u[i] * v[j]`.
pub(crate) fn outer(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len() * v.len());
    for &ui in u {
        out.extend(v.iter().map(|vj| ui * vj));
    }
    out
}

pub(crate) fn outer_backward(u: &[f64], v: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut gu = vec![0.0; u.len()];
    let mut gv = vec![0.0; n];
    for (i, &ui) in u.iter().enumerate() {
        let grow = &g[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += grow[j] * v[j];
            gv[j] += grow[j] * ui;
        }
        gu[i] = acc;
    }
    (gu, gv)
}

/// Cached intermediates of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

/// Population-variance layer norm. Returns the output and the cache needed
/// by [`layernorm_backward`].
pub(crate) fn layernorm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((h, g), b)| g * h + b)
        .collect();
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layernorm_backward(
    gy: &[f64],
    gamma: &[f64],
    cache: &LayerNormCache,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = gy.len() as f64;
    let xhat = &cache.xhat;
    let gxhat: Vec<f64> = gy.iter().zip(gamma).map(|(g, s)| g * s).collect();
    let mean_g = gxhat.iter().sum::<f64>() / n;
    let mean_gx = gxhat.iter().zip(xhat).map(|(g, h)| g * h).sum::<f64>() / n;
    let gx = gxhat
        .iter()
        .zip(xhat)
        .map(|(g, h)| cache.inv_std * (g - mean_g - h * mean_gx))
        .collect();
    let ggamma = gy.iter().zip(xhat).map(|(g, h)| g * h).collect();
    (gx, ggamma, gy.to_vec())
}
