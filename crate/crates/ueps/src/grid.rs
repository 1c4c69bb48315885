//! Dense complex and real grids with explicit (coils, height, width) shape.
//!
//! `ComplexGrid` is the carrier for both image-space and k-space data; which
//! domain a grid lives in is decided by context, not by the type. Data is
//! row-major with the coil axis slowest.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Shape of a grid: (coils, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub coils: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(coils: usize, height: usize, width: usize) -> Self {
        Shape {
            coils,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.coils * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.coils, self.height, self.width)
    }
}

/// Dense complex-valued array, row-major, coil axis slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    shape: Shape,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    /// All-zero grid. Errors on any zero extent.
    pub fn zeros(coils: usize, height: usize, width: usize) -> Result<Self> {
        let shape = Shape::new(coils, height, width);
        if shape.is_empty() {
            return Err(Error::shape(format!("zero extent in {shape}")));
        }
        Ok(ComplexGrid {
            shape,
            data: vec![Complex64::new(0.0, 0.0); shape.len()],
        })
    }

    /// Wrap an existing buffer. Length must match the shape.
    pub fn from_vec(
        coils: usize,
        height: usize,
        width: usize,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        let shape = Shape::new(coils, height, width);
        if shape.is_empty() {
            return Err(Error::shape(format!("zero extent in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "data length {} does not match {shape}",
                data.len()
            )));
        }
        Ok(ComplexGrid { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn coils(&self) -> usize {
        self.shape.coils
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, coil: usize, row: usize, col: usize) -> usize {
        (coil * self.shape.height + row) * self.shape.width + col
    }

    #[inline]
    pub fn get(&self, coil: usize, row: usize, col: usize) -> Complex64 {
        self.data[self.idx(coil, row, col)]
    }

    #[inline]
    pub fn set(&mut self, coil: usize, row: usize, col: usize, v: Complex64) {
        let i = self.idx(coil, row, col);
        self.data[i] = v;
    }

    /// View of one coil's (height × width) slab.
    pub fn coil(&self, coil: usize) -> &[Complex64] {
        let hw = self.shape.height * self.shape.width;
        &self.data[coil * hw..(coil + 1) * hw]
    }

    pub fn coil_mut(&mut self, coil: usize) -> &mut [Complex64] {
        let hw = self.shape.height * self.shape.width;
        &mut self.data[coil * hw..(coil + 1) * hw]
    }

    /// New grid holding just one coil of `self`.
    pub fn extract_coil(&self, coil: usize) -> ComplexGrid {
        ComplexGrid {
            shape: Shape::new(1, self.shape.height, self.shape.width),
            data: self.coil(coil).to_vec(),
        }
    }

    /// ℓ₂ norm over all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Real inner product over (re, im) components: Re ⟨a, b⟩ = Σ Re(conj(a)·b).
    pub fn inner_re(&self, other: &ComplexGrid) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.conj() * b).re)
            .sum()
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &ComplexGrid) -> Result<ComplexGrid> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(ComplexGrid {
            shape: self.shape,
            data,
        })
    }

    /// Elementwise difference; shapes must agree.
    pub fn sub(&self, other: &ComplexGrid) -> Result<ComplexGrid> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(ComplexGrid {
            shape: self.shape,
            data,
        })
    }

    pub fn scale(&self, s: Complex64) -> ComplexGrid {
        ComplexGrid {
            shape: self.shape,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    /// Largest |a - b| over all entries.
    pub fn max_abs_diff(&self, other: &ComplexGrid) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn check_same_shape(&self, other: &ComplexGrid) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Dense real-valued (height × width) grid; magnitude images and metrics targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealGrid {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("zero extent in ({height}, {width})")));
        }
        Ok(RealGrid {
            height,
            width,
            data: vec![0.0; height * width],
        })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("zero extent in ({height}, {width})")));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "data length {} does not match ({height}, {width})",
                data.len()
            )));
        }
        Ok(RealGrid {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &RealGrid) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_same_shape(&self, other: &RealGrid) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(format!(
                "shape mismatch: ({}, {}) vs ({}, {})",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}
