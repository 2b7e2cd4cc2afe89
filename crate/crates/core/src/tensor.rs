use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix. `f32` is the ingestion/quantization type; other
/// scalars are used by the reference products and the error model.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    /// Fails on a length mismatch or any non-finite entry.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::shape(format!(
                "{} values cannot form a {rows}x{cols} tensor",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite_val()) {
            return Err(Error::NonFinite {
                index,
                value: data[index].to_f64_lossy() as f32,
            });
        }
        Ok(DenseTensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseTensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        DenseTensor { rows, cols, data }
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> DenseTensor<U> {
        DenseTensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Column `src[j]` becomes column `j`; indices at or past `cols` select a
    /// zero padding column.
    pub fn gather_cols(&self, src: &[usize]) -> Self {
        Self::from_fn(self.rows, src.len(), |r, j| {
            let c = src[j];
            if c < self.cols {
                self.get(r, c)
            } else {
                T::zero()
            }
        })
    }

    /// Row analogue of [`DenseTensor::gather_cols`].
    pub fn gather_rows(&self, src: &[usize]) -> Self {
        Self::from_fn(src.len(), self.cols, |i, c| {
            let r = src[i];
            if r < self.rows {
                self.get(r, c)
            } else {
                T::zero()
            }
        })
    }

    /// Zero-pads columns up to the next multiple of `multiple`; returns the
    /// padded tensor and the number of columns added.
    pub fn pad_cols(&self, multiple: usize) -> (Self, usize) {
        let padded = self.cols.div_ceil(multiple) * multiple;
        let idx: Vec<usize> = (0..padded).collect();
        (self.gather_cols(&idx), padded - self.cols)
    }

    pub fn abs_max(&self) -> T {
        self.data
            .iter()
            .map(|v| v.abs_val())
            .fold(T::zero(), |m, v| if v > m { v } else { m })
    }

    /// Plain row-by-column product with a single accumulator per output in
    /// ascending-k order.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Self::from_fn(self.rows, rhs.cols, |i, j| {
            let mut acc = T::zero();
            for k in 0..self.cols {
                acc = acc + self.get(i, k) * rhs.get(k, j);
            }
            acc
        }))
    }
}
