//! File formats: CGRID v1 grid serialization and dataset manifests.
//!
//! CGRID v1 layout: magic `CGRD`, version u8 = 1, ndim u8, ndim little-endian
//! u64 dims, then raw little-endian float32 interleaved (re, im) values in
//! row-major order. Complex grids use ndim = 3 (coils, height, width); real
//! grids ndim = 2; flat vectors ndim = 1 (imaginary parts zero).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, RealGrid};

const MAGIC: [u8; 4] = *b"CGRD";
const VERSION: u8 = 1;
/// Element-count ceiling when reading: guards against corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 31;

fn write_cgrid(path: &Path, dims: &[u64], values: &[Complex64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, dims.len() as u8])?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in values {
        w.write_all(&(v.re as f32).to_le_bytes())?;
        w.write_all(&(v.im as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_cgrid(path: &Path) -> Result<(Vec<u64>, Vec<Complex64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if head[0..4] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {}",
            path.display(),
            head[4]
        )));
    }
    let ndim = head[5] as usize;
    if ndim == 0 || ndim > 4 {
        return Err(Error::Format(format!("{}: ndim {ndim}", path.display())));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut total: u64 = 1;
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let d = u64::from_le_bytes(b);
        total = total.saturating_mul(d);
        dims.push(d);
    }
    if total == 0 || total > MAX_ELEMENTS {
        return Err(Error::Format(format!(
            "{}: implausible element count {total}",
            path.display()
        )));
    }
    let mut values = Vec::with_capacity(total as usize);
    let mut buf = [0u8; 8];
    for _ in 0..total {
        r.read_exact(&mut buf)?;
        let re = f32::from_le_bytes(buf[0..4].try_into().unwrap());
        let im = f32::from_le_bytes(buf[4..8].try_into().unwrap());
        values.push(Complex64::new(re as f64, im as f64));
    }
    Ok((dims, values))
}

pub fn save_complex_grid(path: &Path, grid: &ComplexGrid) -> Result<()> {
    let dims = [
        grid.coils() as u64,
        grid.height() as u64,
        grid.width() as u64,
    ];
    write_cgrid(path, &dims, grid.data())
}

pub fn load_complex_grid(path: &Path) -> Result<ComplexGrid> {
    let (dims, values) = read_cgrid(path)?;
    if dims.len() != 3 {
        return Err(Error::Format(format!(
            "{}: expected ndim 3, got {}",
            path.display(),
            dims.len()
        )));
    }
    ComplexGrid::from_vec(dims[0] as usize, dims[1] as usize, dims[2] as usize, values)
}

pub fn save_real_grid(path: &Path, grid: &RealGrid) -> Result<()> {
    let dims = [grid.height() as u64, grid.width() as u64];
    let values: Vec<Complex64> = grid.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    write_cgrid(path, &dims, &values)
}

pub fn load_real_grid(path: &Path) -> Result<RealGrid> {
    let (dims, values) = read_cgrid(path)?;
    if dims.len() != 2 {
        return Err(Error::Format(format!(
            "{}: expected ndim 2, got {}",
            path.display(),
            dims.len()
        )));
    }
    RealGrid::from_vec(
        dims[0] as usize,
        dims[1] as usize,
        values.into_iter().map(|z| z.re).collect(),
    )
}

/// Flat f64 vector (parameter checkpoints). Stored 32-bit on disk.
pub fn save_flat_vector(path: &Path, values: &[f64]) -> Result<()> {
    let dims = [values.len() as u64];
    let complex: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    write_cgrid(path, &dims, &complex)
}

pub fn load_flat_vector(path: &Path) -> Result<Vec<f64>> {
    let (dims, values) = read_cgrid(path)?;
    if dims.len() != 1 {
        return Err(Error::Format(format!(
            "{}: expected ndim 1, got {}",
            path.display(),
            dims.len()
        )));
    }
    Ok(values.into_iter().map(|z| z.re).collect())
}

/// Per-slice file paths inside a dataset manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceEntry {
    /// Undersampled multi-coil k-space (CGRID, ndim 3).
    pub kspace: String,
    /// Coil sensitivity maps (CGRID, ndim 3).
    pub csm: String,
    /// Fully-sampled RSS magnitude (CGRID, ndim 2).
    pub ground_truth: String,
}

/// Sampling mask description as stored on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskInfo {
    pub width: usize,
    pub lines: Vec<usize>,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub effective_acceleration: f64,
}

/// Generation parameters recorded for reproducibility.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenParams {
    pub num_slices: usize,
    pub height: usize,
    pub width: usize,
    pub coils: usize,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// JSON manifest emitted next to the per-slice CGRID files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub params: GenParams,
    pub mask: MaskInfo,
    /// Max ground-truth magnitude over the whole dataset; the PSNR/SSIM
    /// normalization constant.
    pub data_max: f64,
    pub slices: Vec<SliceEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }

    /// Resolve a slice-relative path against the manifest's directory.
    pub fn resolve(&self, manifest_path: &Path, rel: &str) -> std::path::PathBuf {
        match manifest_path.parent() {
            Some(dir) => dir.join(rel),
            None => std::path::PathBuf::from(rel),
        }
    }
}
