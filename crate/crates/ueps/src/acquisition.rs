//! Multi-coil Cartesian acquisition simulator.
//!
//! Synthesizes imaging objects (Shepp-Logan or random ellipses), smooth
//! ring-Gaussian coil sensitivity maps, equispaced line masks over the
//! phase-encode (width) axis, and the masked multi-coil forward model,
//! plus the classical zero-fill and RSS reconstructions.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{fft2c, ifft2c};
use crate::grid::{ComplexGrid, RealGrid};
use crate::rng::SeededRng;

/// The standard 10-ellipse head phantom: (value, a, b, x0, y0, phi_deg).
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.98, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.02, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.02, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.01, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.01, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.01, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.01, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.01, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.01, 0.0230, 0.0460, 0.06, -0.605, 0.0),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomPhase {
    None,
    SmoothRandom,
}

/// Recipe for a synthetic imaging object; deterministic given the seed.
#[derive(Clone, Copy, Debug)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub height: usize,
    pub width: usize,
    pub phase: PhantomPhase,
    pub seed: u64,
}

struct Ellipse {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.x0, y - self.y0);
        let (s, c) = self.phi.sin_cos();
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }
}

fn rasterize(ellipses: &[Ellipse], height: usize, width: usize) -> Vec<f64> {
    let (hy, hx) = (height as f64 / 2.0, width as f64 / 2.0);
    let mut out = vec![0.0; height * width];
    for r in 0..height {
        // +y is up: row 0 maps to y = +1.
        let y = ((height as f64 - 1.0) / 2.0 - r as f64) / hy;
        for c in 0..width {
            let x = (c as f64 - (width as f64 - 1.0) / 2.0) / hx;
            let mut v = 0.0;
            for e in ellipses {
                if e.contains(x, y) {
                    v += e.value;
                }
            }
            out[r * width + c] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Smooth low-order polynomial phase field with max |phase| ≤ π/2.
fn smooth_phase(height: usize, width: usize, rng: &mut SeededRng) -> Vec<f64> {
    let coeffs: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    let amplitude = std::f64::consts::FRAC_PI_2 * rng.uniform_in(0.4, 1.0);
    let mut phi = vec![0.0; height * width];
    let mut max_abs: f64 = 0.0;
    for r in 0..height {
        let y = (r as f64 / (height as f64 - 1.0)) * 2.0 - 1.0;
        for c in 0..width {
            let x = (c as f64 / (width as f64 - 1.0)) * 2.0 - 1.0;
            let v = coeffs[0] * x
                + coeffs[1] * y
                + coeffs[2] * x * y
                + coeffs[3] * x * x
                + coeffs[4] * y * y;
            phi[r * width + c] = v;
            max_abs = max_abs.max(v.abs());
        }
    }
    if max_abs > 0.0 {
        let s = amplitude / max_abs;
        for v in phi.iter_mut() {
            *v *= s;
        }
    }
    phi
}

/// Synthesize the imaging object as a (1, H, W) complex grid.
pub fn make_phantom(spec: &PhantomSpec) -> Result<ComplexGrid> {
    if spec.height < 16 || spec.width < 16 {
        return Err(Error::arg(format!(
            "phantom grid {}x{} too small (min 16)",
            spec.height, spec.width
        )));
    }
    let mut rng = SeededRng::new(spec.seed);
    let magnitudes = match spec.kind {
        PhantomKind::SheppLogan => {
            let ellipses: Vec<Ellipse> = SHEPP_LOGAN
                .iter()
                .map(|&(value, a, b, x0, y0, deg)| Ellipse {
                    value,
                    a,
                    b,
                    x0,
                    y0,
                    phi: deg.to_radians(),
                })
                .collect();
            rasterize(&ellipses, spec.height, spec.width)
        }
        PhantomKind::RandomEllipses => {
            let count = rng.uniform_usize(5, 12);
            let mut ellipses = Vec::with_capacity(count);
            for _ in 0..count {
                ellipses.push(Ellipse {
                    value: rng.uniform_in(0.2, 1.0),
                    a: rng.uniform_in(0.15, 0.45),
                    b: rng.uniform_in(0.15, 0.45),
                    x0: rng.uniform_in(-0.5, 0.5),
                    y0: rng.uniform_in(-0.5, 0.5),
                    phi: rng.uniform_in(0.0, std::f64::consts::PI),
                });
            }
            let mut m = rasterize(&ellipses, spec.height, spec.width);
            if m.iter().all(|&v| v == 0.0) {
                // Degenerate draw; fall back to one centered disc.
                let disc = Ellipse {
                    value: 1.0,
                    a: 0.3,
                    b: 0.3,
                    x0: 0.0,
                    y0: 0.0,
                    phi: 0.0,
                };
                m = rasterize(&[disc], spec.height, spec.width);
            }
            m
        }
    };
    let phase = match spec.phase {
        PhantomPhase::None => None,
        PhantomPhase::SmoothRandom => Some(smooth_phase(spec.height, spec.width, &mut rng)),
    };
    let data: Vec<Complex64> = match phase {
        None => magnitudes
            .iter()
            .map(|&m| Complex64::new(m, 0.0))
            .collect(),
        Some(phi) => magnitudes
            .iter()
            .zip(phi.iter())
            .map(|(&m, &p)| Complex64::from_polar(m, p))
            .collect(),
    };
    ComplexGrid::from_vec(1, spec.height, spec.width, data)
}

/// Complex coil sensitivity maps with pixelwise Σ|Sᵢ|² = 1.
#[derive(Clone, Debug)]
pub struct CoilSensitivities {
    maps: ComplexGrid,
}

impl CoilSensitivities {
    /// Wrap existing maps. Validates coil count and finiteness only; the
    /// sum-of-squares normalization is a synthesis guarantee of
    /// [`make_csm`], not a wrapping requirement (perturbed maps are legal
    /// inputs to the robustness experiment).
    pub fn from_grid(maps: ComplexGrid) -> Result<Self> {
        if maps.coils() < 1 {
            return Err(Error::arg("coil count must be >= 1"));
        }
        maps.check_finite("coil sensitivity maps")?;
        Ok(CoilSensitivities { maps })
    }

    pub fn maps(&self) -> &ComplexGrid {
        &self.maps
    }

    pub fn num_coils(&self) -> usize {
        self.maps.coils()
    }

    pub fn height(&self) -> usize {
        self.maps.height()
    }

    pub fn width(&self) -> usize {
        self.maps.width()
    }

    /// Largest deviation of pixelwise Σ|Sᵢ|² from 1.
    pub fn max_normalization_error(&self) -> f64 {
        let (h, w) = (self.maps.height(), self.maps.width());
        let mut worst: f64 = 0.0;
        for r in 0..h {
            for c in 0..w {
                let s: f64 = (0..self.maps.coils())
                    .map(|i| self.maps.get(i, r, c).norm_sqr())
                    .sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// Ring centers used by the ring-Gaussian synthesis: equal angles on a ring
/// of radius 0.45·min(H, W) around the grid center, in (row, col) pixels.
pub fn ring_centers(num_coils: usize, height: usize, width: usize) -> Vec<(f64, f64)> {
    let radius = 0.45 * height.min(width) as f64;
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    (0..num_coils)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / num_coils as f64;
            (cy + radius * theta.sin(), cx + radius * theta.cos())
        })
        .collect()
}

/// Unnormalized Gaussian reception profile of one ring coil.
pub fn ring_gaussian_profile(
    center: (f64, f64),
    height: usize,
    width: usize,
    row: usize,
    col: usize,
) -> f64 {
    let sigma = 0.5 * height.min(width) as f64;
    let d2 = (row as f64 - center.0).powi(2) + (col as f64 - center.1).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Synthesize N smooth ring-Gaussian coil maps, normalized so Σ|Sᵢ|² = 1
/// at every pixel. Each coil carries a mild linear phase drawn from `rng`.
pub fn make_csm(
    num_coils: usize,
    height: usize,
    width: usize,
    rng: &mut SeededRng,
) -> Result<CoilSensitivities> {
    if num_coils == 0 {
        return Err(Error::arg("coil count must be >= 1"));
    }
    let centers = ring_centers(num_coils, height, width);
    let slopes: Vec<(f64, f64)> = (0..num_coils)
        .map(|_| {
            (
                rng.uniform_in(-0.03, 0.03),
                rng.uniform_in(-0.03, 0.03),
            )
        })
        .collect();
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);

    let mut maps = ComplexGrid::zeros(num_coils, height, width)?;
    for r in 0..height {
        for c in 0..width {
            let profiles: Vec<f64> = centers
                .iter()
                .map(|&ctr| ring_gaussian_profile(ctr, height, width, r, c))
                .collect();
            let norm = profiles.iter().map(|g| g * g).sum::<f64>().sqrt();
            for i in 0..num_coils {
                let phase = slopes[i].0 * (c as f64 - cx) + slopes[i].1 * (r as f64 - cy);
                maps.set(i, r, c, Complex64::from_polar(profiles[i] / norm, phase));
            }
        }
    }
    CoilSensitivities::from_grid(maps)
}

/// Binary 1D line mask over the width (phase-encode) axis.
#[derive(Clone, Debug)]
pub struct SamplingMask {
    width: usize,
    lines: Vec<bool>,
    acceleration: f64,
    center_fraction: f64,
    num_center: usize,
}

/// round() with half away from zero, as used for the center-line count.
fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

impl SamplingMask {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lines(&self) -> &[bool] {
        &self.lines
    }

    #[inline]
    pub fn is_sampled(&self, col: usize) -> bool {
        self.lines[col]
    }

    pub fn num_sampled(&self) -> usize {
        self.lines.iter().filter(|&&b| b).count()
    }

    pub fn sampled_indices(&self) -> Vec<usize> {
        (0..self.width).filter(|&c| self.lines[c]).collect()
    }

    pub fn acceleration(&self) -> f64 {
        self.acceleration
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
    }

    pub fn num_center(&self) -> usize {
        self.num_center
    }

    /// Width divided by the number of sampled lines.
    pub fn effective_acceleration(&self) -> f64 {
        self.width as f64 / self.num_sampled() as f64
    }

    /// Rebuild a mask from explicit sampled line indices (manifest loading).
    pub fn from_sampled_indices(
        width: usize,
        sampled: &[usize],
        acceleration: f64,
        center_fraction: f64,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::arg("mask width must be >= 1"));
        }
        let mut lines = vec![false; width];
        for &i in sampled {
            if i >= width {
                return Err(Error::arg(format!("line index {i} out of range {width}")));
            }
            lines[i] = true;
        }
        if !lines.iter().any(|&b| b) {
            return Err(Error::arg("mask must sample at least one line"));
        }
        let num_center = round_half_away(width as f64 * center_fraction);
        Ok(SamplingMask {
            width,
            lines,
            acceleration,
            center_fraction,
            num_center,
        })
    }

    /// Zero out unsampled columns of a k-space grid (broadcast over rows
    /// and coils).
    pub fn apply(&self, k: &ComplexGrid) -> Result<ComplexGrid> {
        if k.width() != self.width {
            return Err(Error::shape(format!(
                "mask width {} vs grid width {}",
                self.width,
                k.width()
            )));
        }
        let mut out = k.clone();
        for coil in 0..k.coils() {
            for r in 0..k.height() {
                for c in 0..k.width() {
                    if !self.lines[c] {
                        out.set(coil, r, c, Complex64::new(0.0, 0.0));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Center-crop of the line mask: the middle `w` columns, with the center
    /// index (floor(W/2)) mapping onto the cropped center (floor(w/2)).
    pub fn center_crop(&self, w: usize) -> Result<SamplingMask> {
        if w > self.width || w == 0 {
            return Err(Error::arg(format!(
                "crop width {w} out of range for mask width {}",
                self.width
            )));
        }
        let start = self.width / 2 - w / 2;
        let lines: Vec<bool> = self.lines[start..start + w].to_vec();
        if !lines.iter().any(|&b| b) {
            return Err(Error::contract(
                "cropped mask samples no lines; crop must cover the center block",
            ));
        }
        Ok(SamplingMask {
            width: w,
            lines,
            acceleration: self.acceleration,
            center_fraction: self.center_fraction,
            num_center: self.num_center.min(w),
        })
    }
}

/// Equispaced Cartesian mask: a fully-sampled contiguous center block of
/// round(W·c) lines plus a uniform integer stride over the axis, the stride
/// chosen so the total sampled count lands as close to round(W/R) as
/// possible without exceeding it (ties toward fewer lines).
pub fn make_equispaced_mask(
    width: usize,
    acceleration: f64,
    center_fraction: f64,
    offset: usize,
) -> Result<SamplingMask> {
    if width == 0 {
        return Err(Error::arg("mask width must be >= 1"));
    }
    if acceleration < 1.0 {
        return Err(Error::arg(format!("acceleration {acceleration} < 1")));
    }
    if !(0.0..=1.0).contains(&center_fraction) {
        return Err(Error::arg(format!(
            "center fraction {center_fraction} outside [0, 1]"
        )));
    }
    let num_center = round_half_away(width as f64 * center_fraction);
    if num_center > width {
        return Err(Error::arg("center block exceeds mask width"));
    }
    let budget = round_half_away(width as f64 / acceleration);
    if budget < num_center.max(1) {
        return Err(Error::arg(format!(
            "line budget {budget} cannot cover the {num_center}-line center block"
        )));
    }

    let center_start = width / 2 - num_center / 2;
    let center_end = center_start + num_center;
    let in_center = |i: usize| i >= center_start && i < center_end;

    let total_for = |stride: usize| -> usize {
        let stride_extra = (offset..width)
            .step_by(stride)
            .filter(|&i| !in_center(i))
            .count();
        num_center + stride_extra
    };

    // Largest total not exceeding the budget; ties toward the larger stride.
    let mut best: Option<(usize, usize)> = None; // (total, stride)
    for stride in 1..=width {
        let total = total_for(stride);
        if total > budget {
            continue;
        }
        match best {
            Some((t, _)) if t >= total => {}
            _ => best = Some((total, stride)),
        }
    }
    let stride = match best {
        Some((_, s)) => s,
        None => {
            return Err(Error::arg(
                "no integer stride satisfies the sampling budget",
            ))
        }
    };

    let mut lines = vec![false; width];
    for line in lines[center_start..center_end].iter_mut() {
        *line = true;
    }
    for i in (offset..width).step_by(stride) {
        lines[i] = true;
    }
    if !lines.iter().any(|&b| b) {
        return Err(Error::arg("mask must sample at least one line"));
    }
    Ok(SamplingMask {
        width,
        lines,
        acceleration,
        center_fraction,
        num_center,
    })
}

/// Masked multi-coil acquisition: 𝓜(F(Sᵢ·m) + εᵢ) per coil. Noise enters
/// before masking, so unsampled columns are exactly zero.
pub fn forward_model(
    m: &ComplexGrid,
    csm: &CoilSensitivities,
    mask: &SamplingMask,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<ComplexGrid> {
    let full = full_kspace(m, csm, sigma, rng)?;
    mask.apply(&full)
}

/// Unmasked acquisition: F(Sᵢ·m) + εᵢ per coil. The fully-sampled k-space
/// that ground truth is reconstructed from.
pub fn full_kspace(
    m: &ComplexGrid,
    csm: &CoilSensitivities,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<ComplexGrid> {
    if m.coils() != 1 {
        return Err(Error::shape(format!(
            "imaging object must have one coil axis entry, got {}",
            m.coils()
        )));
    }
    if m.height() != csm.height() || m.width() != csm.width() {
        return Err(Error::shape(format!(
            "object ({}, {}) vs csm ({}, {})",
            m.height(),
            m.width(),
            csm.height(),
            csm.width()
        )));
    }
    let (n, h, w) = (csm.num_coils(), m.height(), m.width());
    let mut coil_images = ComplexGrid::zeros(n, h, w)?;
    for i in 0..n {
        for r in 0..h {
            for c in 0..w {
                let v = csm.maps().get(i, r, c) * m.get(0, r, c);
                coil_images.set(i, r, c, v);
            }
        }
    }
    let mut k = fft2c(&coil_images)?;
    if sigma > 0.0 {
        let noise = rng.normal_complex_grid(n, h, w, sigma)?;
        k = k.add(&noise)?;
    } else if sigma < 0.0 {
        return Err(Error::arg(format!("negative sigma {sigma}")));
    }
    Ok(k)
}

/// Per-coil inverse transform of (possibly undersampled) k-space; the
/// classical zero-filled reconstruction and the cascade initializer.
pub fn zero_filled(k: &ComplexGrid) -> Result<ComplexGrid> {
    ifft2c(k)
}

/// Pixelwise root-sum-of-squares coil combination.
pub fn rss(x: &ComplexGrid) -> Result<RealGrid> {
    let (h, w) = (x.height(), x.width());
    let mut out = RealGrid::zeros(h, w)?;
    for r in 0..h {
        for c in 0..w {
            let s: f64 = (0..x.coils()).map(|i| x.get(i, r, c).norm_sqr()).sum();
            out.set(r, c, s.sqrt());
        }
    }
    Ok(out)
}
