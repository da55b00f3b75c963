//! Dense row-major tensors of `f64` scalars.
//!
//! A [`Tensor`] is a plain immutable value: shape plus a flat data buffer.
//! All differentiable computation happens on a [`crate::tape::Tape`]; tensors
//! are what flows in and out of it.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` and `data` agree in element count.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor.new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Rank-2 tensor from explicit rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "tensor.from_rows",
                    format!("row 0 has {} columns, row {} has {}", cols, i, r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the flat buffer; the shape stays fixed.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when the tensor holds exactly one element (any rank).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    ///
    /// Panics when the tensor is not scalar; callers check shape contracts first.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on tensor of shape {:?}", self.shape);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on tensor of shape {:?}", self.shape);
        self.shape[1]
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// New rank-2 tensor holding the given rows of `self`, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::shape(
                    "tensor.select_rows",
                    format!("row index {} out of range for {} rows", i, self.rows()),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), c], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Column-tile width for the matrix kernels. Tiling keeps the working set of
/// `b` rows inside the cache when `n` runs into the thousands (the im2col
/// products during convolution), instead of streaming all of `b` once per
/// output row.
const TILE_COLS: usize = 512;

/// Row-major matrix product `a[m×k] · b[k×n]` on raw buffers.
///
/// The inner loop runs over contiguous row slices of `b` so it vectorizes;
/// zero entries of `a` are skipped, which matters for the sparse selector and
/// class-assignment matrices built by the prototype graph.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let mut start = 0;
    while start < n {
        let end = (start + TILE_COLS).min(n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let out_row = &mut out[i * n + start..i * n + end];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[p * n + start..p * n + end];
                for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += av * bv;
                }
            }
        }
        start = end;
    }
    out
}

/// `aᵀ[k×m] · g[m×n]` without materializing the transpose; `a` is `[m×k]`.
pub(crate) fn matmul_at_raw(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let mut start = 0;
    while start < n {
        let end = (start + TILE_COLS).min(n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let g_row = &g[i * n + start..i * n + end];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let out_row = &mut out[p * n + start..p * n + end];
                for (o, &gv) in out_row.iter_mut().zip(g_row.iter()) {
                    *o += av * gv;
                }
            }
        }
        start = end;
    }
    out
}

/// `a[m×n] · bᵀ[n×p]` without materializing the transpose; `b` is `[p×n]`.
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    let mut start = 0;
    while start < n {
        let end = (start + TILE_COLS).min(n);
        for i in 0..m {
            let a_row = &a[i * n + start..i * n + end];
            for j in 0..p {
                let b_row = &b[j * n + start..j * n + end];
                out[i * p + j] += dot(a_row, b_row);
            }
        }
        start = end;
    }
    out
}

/// Four-lane dot product; the fixed accumulation pattern keeps results
/// deterministic while letting the loop vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let split = a.len() - a.len() % 4;
    let mut acc = [0.0f64; 4];
    for (ca, cb) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_one_element_and_empty_shape() {
        let t = Tensor::scalar(4.5);
        assert!(t.is_scalar());
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.item(), 4.5);
    }

    #[test]
    fn select_rows_picks_in_order() {
        let t = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = t.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(t.select_rows(&[3]).is_err());
    }

    #[test]
    fn matmul_raw_matches_hand_product() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let c = matmul_raw(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_kernels_agree_with_explicit_transposes() {
        let (m, k, n) = (3, 5, 700); // n crosses a tile boundary
        let a: Vec<f64> = (0..m * k).map(|i| ((i as f64) * 0.37).sin()).collect();
        let g: Vec<f64> = (0..m * n).map(|i| ((i as f64) * 0.11).cos()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i as f64) * 0.23).sin()).collect();

        // aᵀ·g against a materialized transpose
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let want = matmul_raw(&at, &g, k, m, n);
        let got = matmul_at_raw(&a, &g, m, k, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // g·bᵀ against a materialized transpose
        let mut bt = vec![0.0; n * k];
        for j in 0..k {
            for c in 0..n {
                bt[c * k + j] = b[j * n + c];
            }
        }
        let want = matmul_raw(&g, &bt, m, n, k);
        let got = matmul_bt_raw(&g, &b, m, k, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
