//! Dense vector and matrix arithmetic with analytic forward/backward kernels.
//!
//! Everything is `f64`. The free functions here are the checked, value-level
//! API; [`GradTape`] records the same kernels for reverse-mode gradients.

mod kernels;
mod params;
mod tape;

pub use params::{GradMap, Param, ParamBinding, ParamId, ParamStore};
pub use tape::{GradTape, Gradients, NodeId};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, non-empty vector of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVec(Vec<f64>);

impl DenseVec {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::config("vector must have at least one entry"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "vector entry {i} is not finite ({})",
                data[i]
            )));
        }
        Ok(DenseVec(data))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "zero-length vector");
        DenseVec(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        assert!(len > 0, "zero-length vector");
        DenseVec(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for DenseVec {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        DenseVec::new(data)
    }
}

impl From<DenseVec> for Vec<f64> {
    fn from(v: DenseVec) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for DenseVec {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Row-major real matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!("matrix shape {rows}x{cols} is empty")));
        }
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("matrix contains non-finite entries"));
        }
        Ok(DenseMat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::config("ragged matrix rows"));
        }
        DenseMat::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix");
        DenseMat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `W x + b`.
pub fn linear_forward(x: &DenseVec, w: &DenseMat, b: &DenseVec) -> Result<DenseVec> {
    if w.cols != x.len() || b.len() != w.rows {
        return Err(Error::config(format!(
            "linear shape mismatch: W is {}x{}, x has {}, b has {}",
            w.rows,
            w.cols,
            x.len(),
            b.len()
        )));
    }
    Ok(DenseVec(kernels::linear(
        x.as_slice(),
        &w.data,
        w.rows,
        w.cols,
        b.as_slice(),
    )))
}

/// Flattened outer product, `out[i*d + j] = u[i] * v[j]`.
pub fn outer_flatten(u: &DenseVec, v: &DenseVec) -> Result<DenseVec> {
    if u.len() != v.len() {
        return Err(Error::config(format!(
            "outer product needs equal lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(DenseVec(kernels::outer(u.as_slice(), v.as_slice())))
}

pub fn layernorm_forward(
    x: &DenseVec,
    gamma: &DenseVec,
    beta: &DenseVec,
    eps: f64,
) -> Result<DenseVec> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::config(format!(
            "layernorm shape mismatch: x has {}, gamma {}, beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::config(format!("layernorm eps must be positive, got {eps}")));
    }
    let (y, _) = kernels::layernorm(x.as_slice(), gamma.as_slice(), beta.as_slice(), eps);
    Ok(DenseVec(y))
}

pub fn concat(parts: &[DenseVec]) -> Result<DenseVec> {
    if parts.is_empty() {
        return Err(Error::config("concat of an empty list"));
    }
    Ok(DenseVec(parts.iter().flat_map(|p| p.0.iter().copied()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> DenseVec {
        DenseVec::new(data.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let id = DenseMat::identity(2);
        assert_eq!(linear_forward(&v(&[1.0, 2.0]), &id, &v(&[0.0, 0.0])).unwrap(), v(&[1.0, 2.0]));

        let w = DenseMat::from_rows(&[vec![2.0, 3.0]]).unwrap();
        assert_eq!(linear_forward(&v(&[1.0, 1.0]), &w, &v(&[-1.0])).unwrap(), v(&[4.0]));

        let w = DenseMat::from_rows(&[vec![0.3, -7.0], vec![1.5, 2.0]]).unwrap();
        assert_eq!(linear_forward(&v(&[0.0, 0.0]), &w, &v(&[5.0, 7.0])).unwrap(), v(&[5.0, 7.0]));
    }

    #[test]
    fn linear_shape_error_names_shapes() {
        let w = DenseMat::zeros(3, 2);
        let err = linear_forward(&v(&[1.0, 2.0, 3.0]), &w, &v(&[0.0; 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3x2") && msg.contains("x has 3"), "{msg}");
    }

    #[test]
    fn outer_examples() {
        assert_eq!(outer_flatten(&v(&[1.0, 2.0]), &v(&[3.0, 4.0])).unwrap(), v(&[3.0, 4.0, 6.0, 8.0]));
        assert_eq!(outer_flatten(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), v(&[1.0, 0.0, 0.0, 0.0]));
        let u = DenseVec::filled(16, 0.5);
        assert_eq!(outer_flatten(&u, &u).unwrap().len(), 256);
        assert!(outer_flatten(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let ones3 = DenseVec::filled(3, 1.0);
        let zeros3 = DenseVec::zeros(3);
        let y = layernorm_forward(&v(&[5.0, 5.0, 5.0]), &ones3, &zeros3, 1e-5).unwrap();
        assert_eq!(y, zeros3);

        let y = layernorm_forward(&v(&[1.0, -1.0]), &v(&[1.0, 1.0]), &v(&[0.0, 0.0]), 1e-300).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);

        // mean 2, population variance 2/3
        let eps = 1e-5;
        let s = (2.0f64 / 3.0 + eps).sqrt();
        let y = layernorm_forward(&v(&[1.0, 2.0, 3.0]), &ones3, &ones3, eps).unwrap();
        for (yi, xi) in y.as_slice().iter().zip([1.0, 2.0, 3.0]) {
            assert!((yi - ((xi - 2.0) / s + 1.0)).abs() < 1e-12);
        }
        assert!(layernorm_forward(&ones3, &ones3, &zeros3, 0.0).is_err());
    }

    #[test]
    fn concat_examples() {
        assert_eq!(concat(&[v(&[1.0]), v(&[2.0, 3.0])]).unwrap(), v(&[1.0, 2.0, 3.0]));
        assert_eq!(concat(&[v(&[4.0, 5.0])]).unwrap(), v(&[4.0, 5.0]));
        assert!(concat(&[]).is_err());
    }

    #[test]
    fn dense_constructors_reject_bad_input() {
        assert!(DenseVec::new(vec![]).is_err());
        assert!(DenseVec::new(vec![f64::NAN]).is_err());
        assert!(DenseMat::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMat::new(1, 1, vec![f64::INFINITY]).is_err());
    }
}
