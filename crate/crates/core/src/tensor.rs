//! Dense row-major tensors and a central-difference gradient checker.
//!
//! Only the handful of operations the loss and attention code needs are
//! provided. Every reduction accumulates in ascending index order, so results
//! are reproducible bit-for-bit on a given platform.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    /// 2-D tensor from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// 2-D tensor from nested rows; all rows must have the same length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(m * n);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::shape(format!("row {i} has length {}, expected {n}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(m, n, data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Extent of the leading axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-axis slot.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.row_len();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let d = self.row_len();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(Error::shape(format!("{what} expects a 2-D tensor, got {other:?}"))),
        }
    }

    fn require_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::matrix(n, m, out)
    }

    /// Matrix product. Each output entry sums over the inner index in
    /// ascending order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let acc = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &other.data[p * n..(p + 1) * n];
                for (c, &bv) in acc.iter_mut().zip(b) {
                    *c += a * bv;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("softmax_rows")?;
        let mut out = self.data.clone();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Self::matrix(m, n, out)
    }

    /// Selects leading-axis slots; duplicates are allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let m = self.rows();
        if idx.is_empty() {
            return Err(Error::shape("gather_rows needs at least one index"));
        }
        let d = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= m {
                return Err(Error::Index { index: i, extent: m });
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(shape, data)
    }

    /// Contiguous column block `[start, start + width)` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        let (m, n) = self.require_matrix("slice_cols")?;
        if width == 0 || start + width > n {
            return Err(Error::shape(format!(
                "column block {start}..{} out of range for {n} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + start + width]);
        }
        Self::matrix(m, width, data)
    }

    /// Writes `block` into columns `[start, start + block.cols)`.
    pub fn set_cols(&mut self, start: usize, block: &Self) -> Result<()> {
        let (m, n) = self.require_matrix("set_cols")?;
        let (bm, bw) = block.require_matrix("set_cols")?;
        if bm != m || start + bw > n {
            return Err(Error::shape(format!(
                "cannot place {bm}x{bw} block at column {start} of {m}x{n}"
            )));
        }
        for i in 0..m {
            self.data[i * n + start..i * n + start + bw]
                .copy_from_slice(&block.data[i * bw..(i + 1) * bw]);
        }
        Ok(())
    }

    /// Leading-axis slots `[start, start + count)`.
    pub fn row_block(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.rows() {
            return Err(Error::shape(format!(
                "row block {start}..{} out of range for {} rows",
                start + count,
                self.rows()
            )));
        }
        let d = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self::new(shape, self.data[start * d..(start + count) * d].to_vec())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.require_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.require_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().fold(T::zero(), |a, b| a + b)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.require_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }
}

/// Central-difference gradient of a scalar function at `x`.
///
/// Coordinate `i` of the result is `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> T,
{
    if !(eps > T::zero()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let two_eps = eps + eps;
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = f(&probe);
        probe.data[i] = orig - eps;
        let lo = f(&probe);
        probe.data[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at coordinate {i} is not finite ({lo}, {hi})"
            )));
        }
        grad.push((hi - lo) / two_eps);
    }
    Tensor::new(x.shape.clone(), grad)
}

/// [`finite_diff_grad`] over a fixed-size parameter array.
pub fn finite_diff_grad_array<T, F, const N: usize>(f: F, x: [T; N], eps: T) -> Result<[T; N]>
where
    T: Scalar,
    F: Fn(&[T; N]) -> T,
{
    let t = Tensor::new(vec![N], x.to_vec())?;
    let g = finite_diff_grad(
        |p: &Tensor<T>| {
            let mut arr = [T::zero(); N];
            arr.copy_from_slice(p.data());
            f(&arr)
        },
        &t,
        eps,
    )?;
    let mut out = [T::zero(); N];
    out.copy_from_slice(g.data());
    Ok(out)
}
