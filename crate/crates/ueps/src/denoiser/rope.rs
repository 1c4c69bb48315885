//! 2D rotary position encoding over patch-grid coordinates.
//!
//! Each head's dimension splits in half: the first half rotates by angles
//! proportional to the patch row, the second half to the patch column, with
//! the geometric frequency ladder (base 10000) inside each half. Rotations
//! are orthogonal, so the encoding is norm-preserving per token.

use super::mat::Mat;
use crate::error::{Error, Result};

const ROPE_BASE: f64 = 10000.0;

/// Precomputed cos/sin tables for one (head_dim, patch grid) combination.
#[derive(Clone, Debug)]
pub struct Rope2d {
    head_dim: usize,
    pairs_per_axis: usize,
    grid_cols: usize,
    /// cos/sin at [position][pair], rows then cols.
    row_cos: Vec<f64>,
    row_sin: Vec<f64>,
    col_cos: Vec<f64>,
    col_sin: Vec<f64>,
}

impl Rope2d {
    pub fn new(head_dim: usize, grid_rows: usize, grid_cols: usize) -> Result<Rope2d> {
        if head_dim == 0 || !head_dim.is_multiple_of(4) {
            return Err(Error::arg(format!(
                "head dim {head_dim} must be a positive multiple of 4"
            )));
        }
        let axis_dim = head_dim / 2;
        let pairs = axis_dim / 2;
        let freqs: Vec<f64> = (0..pairs)
            .map(|j| ROPE_BASE.powf(-2.0 * j as f64 / axis_dim as f64))
            .collect();
        let table = |extent: usize| -> (Vec<f64>, Vec<f64>) {
            let mut cos = vec![0.0; extent * pairs];
            let mut sin = vec![0.0; extent * pairs];
            for pos in 0..extent {
                for (j, f) in freqs.iter().enumerate() {
                    let angle = pos as f64 * f;
                    cos[pos * pairs + j] = angle.cos();
                    sin[pos * pairs + j] = angle.sin();
                }
            }
            (cos, sin)
        };
        let (row_cos, row_sin) = table(grid_rows);
        let (col_cos, col_sin) = table(grid_cols);
        Ok(Rope2d {
            head_dim,
            pairs_per_axis: pairs,
            grid_cols,
            row_cos,
            row_sin,
            col_cos,
            col_sin,
        })
    }

    /// Rotate one head vector in place for patch position (row, col).
    /// `invert` applies the transpose (negative angles); the backward pass.
    pub fn rotate(&self, head: &mut [f64], row: usize, col: usize, invert: bool) {
        debug_assert_eq!(head.len(), self.head_dim);
        let pairs = self.pairs_per_axis;
        let half = self.head_dim / 2;
        for j in 0..pairs {
            let (c, mut s) = (
                self.row_cos[row * pairs + j],
                self.row_sin[row * pairs + j],
            );
            if invert {
                s = -s;
            }
            let (a, b) = (head[2 * j], head[2 * j + 1]);
            head[2 * j] = a * c - b * s;
            head[2 * j + 1] = a * s + b * c;
        }
        for j in 0..pairs {
            let (c, mut s) = (
                self.col_cos[col * pairs + j],
                self.col_sin[col * pairs + j],
            );
            if invert {
                s = -s;
            }
            let (a, b) = (head[half + 2 * j], head[half + 2 * j + 1]);
            head[half + 2 * j] = a * c - b * s;
            head[half + 2 * j + 1] = a * s + b * c;
        }
    }

    /// Rotate every head of every token; positions derive from the token
    /// index over a row-major patch grid with `grid_cols` columns.
    pub fn apply(&self, m: &mut Mat, heads: usize, invert: bool) -> Result<()> {
        if !m.cols.is_multiple_of(heads) || m.cols / heads != self.head_dim {
            return Err(Error::shape(format!(
                "token width {} does not split into {heads} heads of {}",
                m.cols, self.head_dim
            )));
        }
        let dh = self.head_dim;
        for t in 0..m.rows {
            let (row, col) = (t / self.grid_cols, t % self.grid_cols);
            let tok = m.row_mut(t);
            for h in 0..heads {
                self.rotate(&mut tok[h * dh..(h + 1) * dh], row, col, invert);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn origin_position_is_identity() {
        let rope = Rope2d::new(8, 4, 4).unwrap();
        let mut rng = SeededRng::new(1);
        let v = random_vec(&mut rng, 8);
        let mut rotated = v.clone();
        rope.rotate(&mut rotated, 0, 0, false);
        assert_eq!(rotated, v);
    }

    #[test]
    fn rotation_preserves_norm() {
        let rope = Rope2d::new(16, 8, 8).unwrap();
        let mut rng = SeededRng::new(2);
        for _ in 0..20 {
            let v = random_vec(&mut rng, 16);
            let before: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut w = v.clone();
            rope.rotate(&mut w, 5, 3, false);
            let after: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((before - after).abs() < 1e-12 * before.max(1.0));
        }
    }

    #[test]
    fn invert_undoes_rotation() {
        let rope = Rope2d::new(12, 6, 6).unwrap();
        let mut rng = SeededRng::new(3);
        let v = random_vec(&mut rng, 12);
        let mut w = v.clone();
        rope.rotate(&mut w, 4, 2, false);
        rope.rotate(&mut w, 4, 2, true);
        for (a, b) in v.iter().zip(w.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_product_depends_only_on_position_difference() {
        let rope = Rope2d::new(16, 10, 10).unwrap();
        let mut rng = SeededRng::new(4);
        // Pairs of positions sharing the same (Δrow, Δcol).
        let pairs = [
            ((0usize, 0usize), (2usize, 3usize)),
            ((1, 2), (3, 5)),
            ((4, 0), (6, 3)),
            ((5, 6), (7, 9)),
        ];
        for _ in 0..3 {
            let q = random_vec(&mut rng, 16);
            let k = random_vec(&mut rng, 16);
            let mut reference: Option<f64> = None;
            for (a, b) in pairs {
                let mut qa = q.clone();
                let mut kb = k.clone();
                rope.rotate(&mut qa, a.0, a.1, false);
                rope.rotate(&mut kb, b.0, b.1, false);
                let dot: f64 = qa.iter().zip(kb.iter()).map(|(x, y)| x * y).sum();
                match reference {
                    None => reference = Some(dot),
                    Some(r) => assert!(
                        (dot - r).abs() < 1e-10,
                        "relative property violated: {dot} vs {r}"
                    ),
                }
            }
        }
    }

    #[test]
    fn indivisible_head_dim_rejected() {
        assert!(Rope2d::new(6, 4, 4).is_err());
        assert!(Rope2d::new(0, 4, 4).is_err());
    }
}
