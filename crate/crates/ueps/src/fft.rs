//! Centered, unitary 2D Fourier transforms over `ComplexGrid`.
//!
//! Convention: `fft2c = shift ∘ DFT ∘ unshift` with 1/√(HW) scaling in both
//! directions, so Parseval holds exactly and `ifft2c` is the exact inverse.
//! The DC bin sits at (floor(H/2), floor(W/2)). Centering is done by index
//! shifts, never by phase multiplication, so odd and even sizes behave the
//! same way.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::Result;
use crate::grid::ComplexGrid;

type PlanCache = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

thread_local! {
    static PLANS: RefCell<PlanCache> = RefCell::new(HashMap::new());
}

fn plan(len: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut map = cell.borrow_mut();
        map.entry((len, forward))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                let dir = if forward {
                    FftDirection::Forward
                } else {
                    FftDirection::Inverse
                };
                planner.plan_fft(len, dir)
            })
            .clone()
    })
}

/// Roll a slice so that element 0 lands at index floor(n/2) (fftshift).
fn shift_into(src: &[Complex64], dst: &mut [Complex64], inverse: bool) {
    let n = src.len();
    let half = n / 2;
    // fftshift: dst[(i + half) % n] = src[i]; ifftshift undoes it.
    if inverse {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = src[(i + half) % n];
        }
    } else {
        for (i, s) in src.iter().enumerate() {
            dst[(i + half) % n] = *s;
        }
    }
}

/// One coil slab: centered transform along both axes, in place over `buf`.
fn transform_slab(buf: &mut [Complex64], h: usize, w: usize, forward: bool) {
    let row_fft = plan(w, forward);
    let col_fft = plan(h, forward);
    let mut tmp = vec![Complex64::new(0.0, 0.0); w.max(h)];

    // Rows: unshift, DFT, shift.
    for r in 0..h {
        let row = &mut buf[r * w..(r + 1) * w];
        shift_into(row, &mut tmp[..w], true);
        row_fft.process(&mut tmp[..w]);
        shift_into(&tmp[..w], row, false);
    }
    // Columns: gather, unshift, DFT, shift, scatter.
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        shift_into(&col, &mut tmp[..h], true);
        col_fft.process(&mut tmp[..h]);
        shift_into(&tmp[..h], &mut col, false);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }

    // rustfft leaves both directions unscaled; apply 1/√(HW) for unitarity.
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Centered unitary 2D DFT, applied per coil.
pub fn fft2c(x: &ComplexGrid) -> Result<ComplexGrid> {
    let mut out = x.clone();
    let (h, w) = (x.height(), x.width());
    for coil in 0..x.coils() {
        transform_slab(out.coil_mut(coil), h, w, true);
    }
    out.check_finite("fft2c output")?;
    Ok(out)
}

/// Exact inverse of [`fft2c`].
pub fn ifft2c(k: &ComplexGrid) -> Result<ComplexGrid> {
    let mut out = k.clone();
    let (h, w) = (k.height(), k.width());
    for coil in 0..k.coils() {
        transform_slab(out.coil_mut(coil), h, w, false);
    }
    out.check_finite("ifft2c output")?;
    Ok(out)
}

/// Center index along an axis of the given size: floor(size/2).
pub fn center_index(size: usize) -> usize {
    size / 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use std::f64::consts::PI;

    /// Direct O(N²) centered unitary DFT; the independent oracle.
    pub(crate) fn dft2c_naive(x: &ComplexGrid) -> ComplexGrid {
        let (n, h, w) = (x.coils(), x.height(), x.width());
        let (ch, cw) = (center_index(h), center_index(w));
        let scale = 1.0 / ((h * w) as f64).sqrt();
        let mut out = ComplexGrid::zeros(n, h, w).unwrap();
        for coil in 0..n {
            for kr in 0..h {
                for kc in 0..w {
                    let fr = kr as f64 - ch as f64;
                    let fc = kc as f64 - cw as f64;
                    let mut acc = Complex64::new(0.0, 0.0);
                    for r in 0..h {
                        for c in 0..w {
                            let pr = r as f64 - ch as f64;
                            let pc = c as f64 - cw as f64;
                            let phase =
                                -2.0 * PI * (fr * pr / h as f64 + fc * pc / w as f64);
                            acc += x.get(coil, r, c) * Complex64::from_polar(1.0, phase);
                        }
                    }
                    out.set(coil, kr, kc, acc * scale);
                }
            }
        }
        out
    }

    fn random_grid(rng: &mut SeededRng, coils: usize, h: usize, w: usize) -> ComplexGrid {
        rng.normal_complex_grid(coils, h, w, 1.0).unwrap()
    }

    #[test]
    fn all_ones_concentrates_at_center() {
        let g = ComplexGrid::from_vec(1, 4, 4, vec![Complex64::new(1.0, 0.0); 16]).unwrap();
        let k = fft2c(&g).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let v = k.get(0, r, c);
                if r == 2 && c == 2 {
                    assert!((v - Complex64::new(4.0, 0.0)).norm() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12, "sidelobe at ({r},{c}): {v}");
                }
            }
        }
    }

    #[test]
    fn center_impulse_has_flat_spectrum() {
        let mut g = ComplexGrid::zeros(1, 8, 8).unwrap();
        g.set(0, 4, 4, Complex64::new(1.0, 0.0));
        let k = fft2c(&g).unwrap();
        for v in k.data() {
            assert!((v.norm() - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_kspace_is_scaled_center_impulse() {
        let k = ComplexGrid::from_vec(1, 8, 8, vec![Complex64::new(1.0, 0.0); 64]).unwrap();
        let x = ifft2c(&k).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let v = x.get(0, r, c);
                if r == 4 && c == 4 {
                    assert!((v - Complex64::new(8.0, 0.0)).norm() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matches_naive_dft_oracle() {
        let mut rng = SeededRng::new(11);
        let x = random_grid(&mut rng, 1, 16, 16);
        let fast = fft2c(&x).unwrap();
        let slow = dft2c_naive(&x);
        let rel = fast.sub(&slow).unwrap().norm() / slow.norm();
        assert!(rel < 1e-12, "relative error {rel}");
        // Parseval against the same draw.
        let parseval = (fast.norm() - x.norm()).abs() / x.norm();
        assert!(parseval < 1e-12);
    }

    #[test]
    fn round_trip_on_random_32x32() {
        let mut rng = SeededRng::new(5);
        let x = random_grid(&mut rng, 1, 32, 32);
        let back = ifft2c(&fft2c(&x).unwrap()).unwrap();
        assert!(x.max_abs_diff(&back) < 1e-10);
    }

    #[test]
    fn batch_matches_per_coil_calls() {
        let mut rng = SeededRng::new(9);
        let x = random_grid(&mut rng, 3, 12, 10);
        let batch = fft2c(&x).unwrap();
        for coil in 0..3 {
            let single = fft2c(&x.extract_coil(coil)).unwrap();
            assert_eq!(single.coil(0), batch.coil(coil));
        }
    }

    #[test]
    fn shifted_impulse_matches_analytic_linear_phase_ramp() {
        // Impulse displaced from the grid center must transform to the
        // analytic ramp exp(-2πi(k·δ/n)) referenced to the center bin; this
        // pins down the centering convention for both axes.
        let (h, w) = (16, 12);
        let (dr, dc) = (2i64, 3i64);
        let mut g = ComplexGrid::zeros(1, h, w).unwrap();
        g.set(
            0,
            (center_index(h) as i64 + dr) as usize,
            (center_index(w) as i64 + dc) as usize,
            Complex64::new(1.0, 0.0),
        );
        let k = fft2c(&g).unwrap();
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for kr in 0..h {
            for kc in 0..w {
                let fr = kr as f64 - center_index(h) as f64;
                let fc = kc as f64 - center_index(w) as f64;
                let phase = -2.0 * PI * (fr * dr as f64 / h as f64 + fc * dc as f64 / w as f64);
                let expect = Complex64::from_polar(scale, phase);
                assert!(
                    (k.get(0, kr, kc) - expect).norm() < 1e-10,
                    "bin ({kr},{kc})"
                );
            }
        }
    }

    #[test]
    fn linearity_holds() {
        let mut rng = SeededRng::new(3);
        let x = random_grid(&mut rng, 1, 8, 8);
        let y = random_grid(&mut rng, 1, 8, 8);
        let a = Complex64::new(0.7, -0.3);
        let b = Complex64::new(-1.1, 0.2);
        let lhs = fft2c(&x.scale(a).add(&y.scale(b)).unwrap()).unwrap();
        let rhs = fft2c(&x).unwrap().scale(a).add(&fft2c(&y).unwrap().scale(b)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12 * rhs.norm());
    }

    #[test]
    fn odd_sizes_round_trip_and_center() {
        let mut rng = SeededRng::new(21);
        let x = random_grid(&mut rng, 1, 7, 9);
        let back = ifft2c(&fft2c(&x).unwrap()).unwrap();
        assert!(x.max_abs_diff(&back) < 1e-10);
        // DC of an all-ones odd grid lands at (3, 4).
        let ones = ComplexGrid::from_vec(1, 7, 9, vec![Complex64::new(1.0, 0.0); 63]).unwrap();
        let k = fft2c(&ones).unwrap();
        let dc = k.get(0, 3, 4);
        assert!((dc.re - (63.0f64).sqrt()).abs() < 1e-12);
    }
}
