use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from equally sized rows. An empty slice gives a 0x0 tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data reinterpreted with a new shape of equal size.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {}x{} into {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} contains NaN or Inf")))
        }
    }
}

/// `x · wᵀ`: `x` is n×in, `w` is out×in, result n×out.
///
/// Each output element is accumulated in input-index order, so a row's
/// result does not depend on which other rows are in the batch.
pub(crate) fn matmul_t(x: &Tensor2, w: &Tensor2) -> Tensor2 {
    debug_assert_eq!(x.cols, w.cols);
    let (n, k, m) = (x.rows, x.cols, w.rows);
    if n < 8 {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xr = &x.data[i * k..(i + 1) * k];
            for o in 0..m {
                let wr = &w.data[o * k..(o + 1) * k];
                let mut acc = 0.0;
                for t in 0..k {
                    acc += xr[t] * wr[t];
                }
                out[i * m + o] = acc;
            }
        }
        return Tensor2 {
            rows: n,
            cols: m,
            data: out,
        };
    }
    // wt is k×m so each output row accumulates contiguous slices, in the
    // same t order as a plain dot product.
    let mut wt = vec![0.0; k * m];
    for o in 0..m {
        for t in 0..k {
            wt[t * m + o] = w.data[o * k + t];
        }
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xr = &x.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (t, &xv) in xr.iter().enumerate() {
            for (slot, &wv) in orow.iter_mut().zip(&wt[t * m..(t + 1) * m]) {
                *slot += xv * wv;
            }
        }
    }
    Tensor2 {
        rows: n,
        cols: m,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_rows_rejects_ragged() {
        assert!(Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let t = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_t_small() {
        let x = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor2::from_rows(&[vec![3.0, 4.0], vec![-1.0, 0.5]]).unwrap();
        assert_eq!(matmul_t(&x, &w).data(), &[11.0, 0.0]);
    }
}
