//! Tokenization: non-overlapping p×p patches of a complex image, flattened
//! as (real plane, imaginary plane), row-major within each plane.

use num_complex::Complex64;

use super::mat::Mat;
use crate::error::{Error, Result};

/// Token grid extents for an H×W image at patch size p.
pub fn patch_grid(height: usize, width: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::arg(format!(
            "patch size {patch} does not divide image {height}x{width}"
        )));
    }
    Ok((height / patch, width / patch))
}

/// One coil slab (H·W complex values) to a (R_p·C_p) × 2p² token matrix.
/// Token (r, c) holds image rows [r·p, r·p+p), cols [c·p, c·p+p).
pub fn patchify(slab: &[Complex64], height: usize, width: usize, patch: usize) -> Result<Mat> {
    let (rows, cols) = patch_grid(height, width, patch)?;
    let pp = patch * patch;
    let mut out = Mat::zeros(rows * cols, 2 * pp);
    for pr in 0..rows {
        for pc in 0..cols {
            let tok = out.row_mut(pr * cols + pc);
            for i in 0..patch {
                for j in 0..patch {
                    let z = slab[(pr * patch + i) * width + (pc * patch + j)];
                    tok[i * patch + j] = z.re;
                    tok[pp + i * patch + j] = z.im;
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(
    tokens: &Mat,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Vec<Complex64>> {
    let (rows, cols) = patch_grid(height, width, patch)?;
    let pp = patch * patch;
    if tokens.rows != rows * cols || tokens.cols != 2 * pp {
        return Err(Error::shape(format!(
            "token matrix {}x{} does not match a {height}x{width}/{patch} grid",
            tokens.rows, tokens.cols
        )));
    }
    let mut slab = vec![Complex64::new(0.0, 0.0); height * width];
    for pr in 0..rows {
        for pc in 0..cols {
            let tok = tokens.row(pr * cols + pc);
            for i in 0..patch {
                for j in 0..patch {
                    slab[(pr * patch + i) * width + (pc * patch + j)] =
                        Complex64::new(tok[i * patch + j], tok[pp + i * patch + j]);
                }
            }
        }
    }
    Ok(slab)
}
