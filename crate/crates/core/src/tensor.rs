//! Row-major dense matrices of `f64`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: alloc::vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: alloc::vec![v; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, o: &Mat) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, o: &Mat) {
        debug_assert!(self.same_shape(o));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self · o`
    pub fn matmul(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.rows, "matmul inner dimension");
        let (n, k, m) = (self.rows, self.cols, o.cols);
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            let orow = &mut out.data[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &o.data[p * m..(p + 1) * m];
                for (c, b) in orow.iter_mut().zip(brow) {
                    *c += a * b;
                }
            }
        }
        out
    }

    /// `self · oᵀ`
    pub fn matmul_bt(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.cols, "matmul_bt inner dimension");
        let mut out = Mat::zeros(self.rows, o.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..o.rows {
                out.data[i * o.rows + j] = dot(a, o.row(j));
            }
        }
        out
    }

    /// `selfᵀ · o`
    pub fn matmul_at(&self, o: &Mat) -> Mat {
        assert_eq!(self.rows, o.rows, "matmul_at inner dimension");
        let (k, m) = (self.cols, o.cols);
        let mut out = Mat::zeros(k, m);
        for i in 0..self.rows {
            let a = self.row(i);
            let b = o.row(i);
            for (p, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out.data[p * m..(p + 1) * m];
                for (c, bv) in orow.iter_mut().zip(b) {
                    *c += av * bv;
                }
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
