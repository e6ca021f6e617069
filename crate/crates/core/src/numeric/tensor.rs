//! Row-major dense matrix of `f64` with an instrumented multiply-accumulate
//! counter.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::NumericError;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates performed by kernels on this thread since the last
/// reset.
pub fn mac_count() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_mac_count() {
    MACS.with(|m| m.set(0));
}

#[inline]
pub(crate) fn count_macs(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

/// Run `f` and return its result along with the MACs it performed.
pub fn with_mac_count<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = mac_count();
    let out = f();
    (out, mac_count() - before)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        if rows * cols != data.len() {
            return Err(NumericError::ShapeMismatch(format!(
                "{rows}x{cols} tensor from {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2, NumericError> {
        if self.cols != other.rows {
            return Err(NumericError::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b = &other.data[k * other.cols..(k + 1) * other.cols];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        count_macs((self.rows * self.cols * other.cols) as u64);
        Ok(out)
    }

    /// `selfᵀ · other`, used by backward passes.
    pub fn t_matmul(&self, other: &Tensor2) -> Result<Tensor2, NumericError> {
        if self.rows != other.rows {
            return Err(NumericError::ShapeMismatch(format!(
                "t_matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &av) in a.iter().enumerate() {
                let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, used by backward passes.
    pub fn matmul_t(&self, other: &Tensor2) -> Result<Tensor2, NumericError> {
        if self.cols != other.cols {
            return Err(NumericError::ShapeMismatch(format!(
                "matmul_t {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Tensor2::from_fn(self.rows, other.rows, |i, j| {
            self.row(i).iter().zip(other.row(j)).map(|(a, b)| a * b).sum()
        }))
    }

    pub fn transpose(&self) -> Tensor2 {
        Tensor2::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2, NumericError> {
        if self.shape() != other.shape() {
            return Err(NumericError::ShapeMismatch("elementwise add".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor2 { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<(), NumericError> {
        if self.shape() != other.shape() {
            return Err(NumericError::ShapeMismatch("elementwise add".into()));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<(), NumericError> {
        if bias.len() != self.cols {
            return Err(NumericError::ShapeMismatch("bias length".into()));
        }
        for r in 0..self.rows {
            self.row_mut(r).iter_mut().zip(bias).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Tensor2 {
        self.map(|v| v * s)
    }

    /// Column sums.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            out.iter_mut().zip(self.row(r)).for_each(|(o, v)| *o += v);
        }
        out
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor2 { rows: idx.len(), cols: self.cols, data }
    }

    pub fn select_cols(&self, start: usize, len: usize) -> Tensor2 {
        Tensor2::from_fn(self.rows, len, |r, c| self.get(r, start + c))
    }

    pub fn hcat(&self, other: &Tensor2) -> Result<Tensor2, NumericError> {
        if self.rows != other.rows {
            return Err(NumericError::ShapeMismatch("hcat row counts".into()));
        }
        Ok(Tensor2::from_fn(self.rows, self.cols + other.cols, |r, c| {
            if c < self.cols {
                self.get(r, c)
            } else {
                other.get(r, c - self.cols)
            }
        }))
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), NumericError> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(NumericError::ShapeMismatch("push_row length".into()));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Row-wise softmax with max subtraction. `-inf` entries get zero weight.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return;
    }
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_counts_macs() {
        let a = Tensor2::from_fn(2, 3, |i, j| (i + j) as f64);
        let b = Tensor2::from_fn(3, 4, |i, j| (i * j) as f64 + 1.0);
        let (c, macs) = with_mac_count(|| a.matmul(&b).unwrap());
        assert_eq!(macs, 24);
        assert_eq!(c.get(1, 2), 1.0 * 1.0 + 2.0 * 3.0 + 3.0 * 5.0);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor2::from_fn(3, 2, |i, j| (i as f64) - 0.5 * j as f64);
        let b = Tensor2::from_fn(3, 4, |i, j| (i * j) as f64 + 0.25);
        let lhs = a.t_matmul(&b).unwrap();
        let rhs = a.transpose().matmul(&b).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let c = Tensor2::from_fn(4, 2, |i, j| (i + 2 * j) as f64);
        assert!(a.matmul_t(&c).unwrap().max_abs_diff(&a.matmul(&c.transpose()).unwrap()) < 1e-12);
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, 999.0, f64::NEG_INFINITY]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigmoid_is_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
