//! Dense row-major `f64` arrays and the reverse-mode tape built on them.

mod graph;
pub mod meter;

pub use graph::{Gradients, Graph, Var};
pub use meter::AllocationMeter;

use std::fmt;

use crate::error::{Result, SableError};

/// Dense row-major array of 64-bit floats.
///
/// Almost every operation in the crate works on rank-2 arrays; vectors are
/// stored as `[1, n]` rows or `[n, 1]` columns.
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SableError::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        meter::acquire(data.len() * std::mem::size_of::<f64>());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1, 1], vec![value])
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self::from_parts(vec![1, values.len()], values)
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self::from_parts(vec![values.len(), 1], values)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SableError::dim("from_rows", "ragged rows"));
        }
        Ok(Self::from_parts(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        ))
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_parts(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.clone()
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(SableError::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn require_rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(SableError::dim(op, format!("expected rank 2, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_rank2("matmul")?;
        let (k2, n) = other.require_rank2("matmul")?;
        if k != k2 {
            return Err(SableError::dim(
                "matmul",
                format!("[{m},{k}] x [{k2},{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.require_rank2("matmul_tn")?;
        let (k2, n) = other.require_rank2("matmul_tn")?;
        if k != k2 {
            return Err(SableError::dim("matmul_tn", format!("[{k},{m}]ᵀ x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_rank2("matmul_nt")?;
        let (n, k2) = other.require_rank2("matmul_nt")?;
        if k != k2 {
            return Err(SableError::dim("matmul_nt", format!("[{m},{k}] x [{n},{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_rank2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(SableError::dim(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(SableError::dim(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.require_rank2("slice_rows")?;
        if start + len > m {
            return Err(SableError::dim("slice_rows", format!("{start}+{len} > {m}")));
        }
        Ok(Self::from_parts(
            vec![len, n],
            self.data[start * n..(start + len) * n].to_vec(),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.require_rank2("slice_cols")?;
        if start + len > n {
            return Err(SableError::dim("slice_cols", format!("{start}+{len} > {n}")));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&self.data[r * n + start..r * n + start + len]);
        }
        Ok(Self::from_parts(vec![m, len], out))
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, n) = p.require_rank2("concat_rows")?;
            if n != cols {
                return Err(SableError::dim("concat_rows", format!("{n} vs {cols} columns")));
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts(vec![rows, cols], data))
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |t| t.rows());
        let mut cols = 0;
        for p in parts {
            let (m, n) = p.require_rank2("concat_cols")?;
            if m != rows {
                return Err(SableError::dim("concat_cols", format!("{m} vs {rows} rows")));
            }
            cols += n;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row_slice(r));
            }
        }
        Ok(Self::from_parts(vec![rows, cols], data))
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        meter::release(self.data.len() * std::mem::size_of::<f64>());
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(&self.data).finish()
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.25, 4.0, -1.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::column(vec![1.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(SableError::Dimension { .. })));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.1 - 0.4);
        let b = Tensor::from_fn(4, 5, |r, c| (r as f64 - c as f64) * 0.3);
        let tn = a.matmul_tn(&b).unwrap();
        assert!(tn.max_abs_diff(&a.transpose().unwrap().matmul(&b).unwrap()) < 1e-14);
        let c = Tensor::from_fn(5, 3, |r, c| (r + 2 * c) as f64 * 0.05);
        let nt = a.matmul_nt(&c).unwrap();
        assert!(nt.max_abs_diff(&a.matmul(&c.transpose().unwrap()).unwrap()) < 1e-14);
    }

    #[test]
    fn shape_product_invariant() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.shape().iter().product::<usize>(), t.len());
    }
}
