//! Dense row-major f64 matrix used for token grids and weight blocks.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Mat> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self (T×I) times wᵀ where w is stored (O×I): result (T×O).
    pub fn matmul_nt(&self, w: &Mat) -> Mat {
        assert_eq!(self.cols, w.cols, "inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, w.rows);
        for t in 0..self.rows {
            let x = self.row(t);
            let o_row = out.row_mut(t);
            for (o, val) in o_row.iter_mut().enumerate() {
                let wr = w.row(o);
                let mut acc = 0.0;
                for i in 0..x.len() {
                    acc += x[i] * wr[i];
                }
                *val = acc;
            }
        }
        out
    }

    /// self (T×O) times w (O×I): result (T×I). The backward companion of
    /// [`Mat::matmul_nt`].
    pub fn matmul_nn(&self, w: &Mat) -> Mat {
        assert_eq!(self.cols, w.rows, "inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, w.cols);
        for t in 0..self.rows {
            let g = self.row(t);
            let o_row = out.row_mut(t);
            for (o, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let wr = w.row(o);
                for i in 0..wr.len() {
                    o_row[i] += gv * wr[i];
                }
            }
        }
        out
    }

    /// gw (O×I) += g_yᵀ · x where g_y is (T×O) and x is (T×I).
    pub fn accumulate_outer(gw: &mut Mat, gy: &Mat, x: &Mat) {
        assert_eq!(gw.rows, gy.cols);
        assert_eq!(gw.cols, x.cols);
        assert_eq!(gy.rows, x.rows);
        for t in 0..gy.rows {
            let g = gy.row(t);
            let xr = x.row(t);
            for (o, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let row = gw.row_mut(o);
                for i in 0..xr.len() {
                    row[i] += gv * xr[i];
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nt_small() {
        // x (2×3) · wᵀ with w (2×3) gives (2×2).
        let x = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Mat::from_vec(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let y = x.matmul_nt(&w);
        assert_eq!(y.data, vec![-2.0, 3.0, -2.0, 7.5]);
    }

    #[test]
    fn matmul_nn_is_transpose_companion() {
        let g = Mat::from_vec(1, 2, vec![2.0, -1.0]).unwrap();
        let w = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let gx = g.matmul_nn(&w);
        assert_eq!(gx.data, vec![-2.0, -1.0, 0.0]);
    }

    #[test]
    fn accumulate_outer_matches_manual() {
        let gy = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let x = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut gw = Mat::zeros(2, 3);
        Mat::accumulate_outer(&mut gw, &gy, &x);
        assert_eq!(gw.data, vec![1.0, 2.0, 3.0, 8.0, 10.0, 12.0]);
    }
}
