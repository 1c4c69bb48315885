//! Evaluation over dataset manifests, the attention runtime benchmark, and
//! the CSM-robustness experiment.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{rss, zero_filled, CoilSensitivities};
use crate::denoiser::attention::{attention, attention_flops, AttentionPattern};
use crate::denoiser::mat::Mat;
use crate::error::{Error, Result};
use crate::grid::ComplexGrid;
use crate::metrics::{psnr, ssim};
use crate::plot::{line_chart, Series};
use crate::rng::SeededRng;
use crate::training::{Dataset, TrainSlice};
use crate::unrolled::{run_pipeline, ModelParams, PipelineConfig};

/// How to reconstruct a slice during evaluation.
pub enum ReconMethod<'a> {
    /// The classical baseline: RSS of the zero-filled inverse transform.
    ZeroFilled,
    Pipeline(&'a PipelineConfig, &'a ModelParams),
}

impl ReconMethod<'_> {
    pub fn variant_name(&self) -> String {
        match self {
            ReconMethod::ZeroFilled => "zero-filled".to_string(),
            ReconMethod::Pipeline(cfg, _) => cfg.variant.as_str().to_string(),
        }
    }

    pub fn reconstruct(&self, slice: &TrainSlice, data: &Dataset) -> Result<crate::grid::RealGrid> {
        match self {
            ReconMethod::ZeroFilled => rss(&zero_filled(&slice.k0)?),
            ReconMethod::Pipeline(cfg, params) => {
                let csm = if cfg.variant.needs_csm() {
                    Some(slice.csm.as_ref().ok_or_else(|| {
                        Error::contract("the dum variant requires per-slice coil maps")
                    })?)
                } else {
                    None
                };
                Ok(run_pipeline(cfg, params, &slice.k0, &data.mask, csm)?.magnitude)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub index: usize,
    pub psnr_db: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceError {
    pub index: usize,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub slices: Vec<SliceMetrics>,
    pub errors: Vec<SliceError>,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.flush()?;
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Short content hash of a checkpoint file; "zero-filled" for the baseline.
pub fn checkpoint_id(path: Option<&Path>) -> String {
    match path {
        None => "zero-filled".to_string(),
        Some(p) => match std::fs::read(p) {
            Ok(bytes) => {
                let digest = Sha256::digest(&bytes);
                let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
                format!("{}@{hex}", p.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt"))
            }
            Err(_) => p.display().to_string(),
        },
    }
}

fn build_report(
    method: &ReconMethod,
    results: Vec<(usize, Result<SliceMetrics>)>,
    checkpoint_id: &str,
    dataset_id: &str,
) -> Result<EvalReport> {
    let mut slices = Vec::new();
    let mut errors = Vec::new();
    for (index, item) in results {
        match item {
            Ok(m) => slices.push(m),
            Err(e) => errors.push(SliceError {
                index,
                error: e.to_string(),
            }),
        }
    }
    if slices.is_empty() {
        return Err(Error::arg("every slice failed to evaluate"));
    }
    let psnrs: Vec<f64> = slices.iter().map(|s| s.psnr_db).collect();
    let ssims: Vec<f64> = slices.iter().map(|s| s.ssim).collect();
    let (mean_psnr, std_psnr) = mean_std(&psnrs);
    let (mean_ssim, std_ssim) = mean_std(&ssims);
    Ok(EvalReport {
        variant: method.variant_name(),
        checkpoint_id: checkpoint_id.to_string(),
        dataset_id: dataset_id.to_string(),
        slices,
        errors,
        mean_psnr,
        std_psnr,
        mean_ssim,
        std_ssim,
    })
}

fn score_slice(
    method: &ReconMethod,
    slice: &TrainSlice,
    data: &Dataset,
    index: usize,
) -> Result<SliceMetrics> {
    let recon = method.reconstruct(slice, data)?;
    let p = psnr(&recon, &slice.target, data.data_max)?;
    let s = ssim(&recon, &slice.target, data.data_max)?;
    Ok(SliceMetrics {
        index,
        psnr_db: p.db,
        psnr_capped: p.capped,
        ssim: s,
    })
}

/// Reconstruct every slice and score it against the RSS ground truth.
/// Per-slice failures become error entries instead of aborting the run.
pub fn evaluate(
    method: &ReconMethod,
    data: &Dataset,
    checkpoint_id: &str,
    dataset_id: &str,
) -> Result<EvalReport> {
    if data.slices.is_empty() {
        return Err(Error::arg("dataset has no slices"));
    }
    let results: Vec<(usize, Result<SliceMetrics>)> = data
        .slices
        .par_iter()
        .enumerate()
        .map(|(index, slice)| (index, score_slice(method, slice, data, index)))
        .collect();
    build_report(method, results, checkpoint_id, dataset_id)
}

/// Evaluation straight off a manifest: each slice's files load
/// independently, so a missing or corrupt file becomes a per-slice error
/// entry instead of sinking the whole run.
pub fn evaluate_manifest(
    method: &ReconMethod,
    manifest_path: &Path,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    use crate::acquisition::SamplingMask;
    use crate::io::{self, DatasetManifest};

    let manifest = DatasetManifest::load(manifest_path)?;
    let mask = SamplingMask::from_sampled_indices(
        manifest.mask.width,
        &manifest.mask.lines,
        manifest.mask.acceleration,
        manifest.mask.center_fraction,
    )?;
    let shell = Dataset {
        slices: Vec::new(),
        mask,
        data_max: manifest.data_max,
    };
    let results: Vec<(usize, Result<SliceMetrics>)> = manifest
        .slices
        .iter()
        .enumerate()
        .map(|(index, entry)| {
            let scored = (|| -> Result<SliceMetrics> {
                let k0 = io::load_complex_grid(&manifest.resolve(manifest_path, &entry.kspace))?;
                let target =
                    io::load_real_grid(&manifest.resolve(manifest_path, &entry.ground_truth))?;
                let csm_path = manifest.resolve(manifest_path, &entry.csm);
                let csm = if csm_path.exists() {
                    Some(CoilSensitivities::from_grid(io::load_complex_grid(
                        &csm_path,
                    )?)?)
                } else {
                    None
                };
                let slice = TrainSlice { k0, csm, target };
                score_slice(method, &slice, &shell, index)
            })();
            (index, scored)
        })
        .collect();
    build_report(method, results, checkpoint_id, &manifest_path.display().to_string())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRecord {
    pub pattern: String,
    pub tokens: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub repeats: usize,
    pub median_ms: f64,
    /// Analytic multiply count for one attention pass.
    pub flops: u64,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn time_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    pattern: &AttentionPattern,
    heads: usize,
    repeats: usize,
) -> Result<f64> {
    // Two warm runs discarded; median over the rest.
    for _ in 0..2 {
        attention(q, k, v, pattern, heads)?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        attention(q, k, v, pattern, heads)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// Time full vs row-band attention forward passes over square token grids.
/// Below the sparse threshold the "sparse" row reports the full measurement
/// (the pattern resolution falls back to full by construction).
pub fn bench_attention(
    token_counts: &[usize],
    repeats: usize,
    width: usize,
    heads: usize,
    band_halfwidth: usize,
    sparse_threshold: usize,
) -> Result<Vec<BenchRecord>> {
    if repeats < 5 {
        return Err(Error::arg("benchmark needs at least 5 repeats"));
    }
    let mut records = Vec::new();
    for &tokens in token_counts {
        let side = (tokens as f64).sqrt().round() as usize;
        if side * side != tokens {
            return Err(Error::arg(format!(
                "token count {tokens} is not realizable as a square patch grid"
            )));
        }
        let mut rng = SeededRng::new(tokens as u64);
        let fill = |rng: &mut SeededRng| -> Mat {
            Mat::from_vec(
                tokens,
                width,
                (0..tokens * width).map(|_| rng.normal()).collect(),
            )
            .unwrap()
        };
        let q = fill(&mut rng);
        let k = fill(&mut rng);
        let v = fill(&mut rng);

        let full = AttentionPattern::full(side, side)?;
        let full_ms = time_attention(&q, &k, &v, &full, heads, repeats)?;
        records.push(BenchRecord {
            pattern: "full".to_string(),
            tokens,
            grid_rows: side,
            grid_cols: side,
            repeats,
            median_ms: full_ms,
            flops: attention_flops(&full, width),
        });

        if tokens > sparse_threshold {
            let band = AttentionPattern::row_band(side, side, band_halfwidth)?;
            let band_ms = time_attention(&q, &k, &v, &band, heads, repeats)?;
            records.push(BenchRecord {
                pattern: format!("row-band({band_halfwidth})"),
                tokens,
                grid_rows: side,
                grid_cols: side,
                repeats,
                median_ms: band_ms,
                flops: attention_flops(&band, width),
            });
        } else {
            // Threshold fallback: the sparse row is the full measurement.
            records.push(BenchRecord {
                pattern: "full (threshold fallback)".to_string(),
                tokens,
                grid_rows: side,
                grid_cols: side,
                repeats,
                median_ms: full_ms,
                flops: attention_flops(&full, width),
            });
        }
    }
    Ok(records)
}

pub fn write_bench_csv(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "pattern,tokens,grid_rows,grid_cols,repeats,median_ms,flops")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{:.6},{}",
            r.pattern, r.tokens, r.grid_rows, r.grid_cols, r.repeats, r.median_ms, r.flops
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn plot_bench(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let full: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.pattern == "full")
        .map(|r| (r.tokens as f64, r.median_ms))
        .collect();
    let sparse: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.pattern != "full")
        .map(|r| (r.tokens as f64, r.median_ms))
        .collect();
    line_chart(
        path,
        "Attention forward runtime",
        "tokens",
        "median ms",
        &[
            Series {
                label: "full".into(),
                points: full,
            },
            Series {
                label: "row-band".into(),
                points: sparse,
            },
        ],
        true,
    )
}

/// Multiply each coil map by (1 + δ·ζ) with ζ a smooth stationary random
/// complex field of unit RMS: complex white noise restricted to the lowest
/// k-space block, so the modulation is band-limited and equally strong
/// everywhere in the field of view. The same `rng` stream drawn at δ=1
/// scale keeps perturbations paired across δ values.
pub fn perturb_csm(
    csm: &CoilSensitivities,
    delta: f64,
    rng: &mut SeededRng,
) -> Result<CoilSensitivities> {
    let (n, h, w) = (csm.num_coils(), csm.height(), csm.width());
    let halfwidth = (h.min(w) / 16).max(1);
    let (ch, cw) = (h / 2, w / 2);
    let mut maps = csm.maps().clone();
    for coil in 0..n {
        let white = rng.normal_complex_grid(1, h, w, 1.0)?;
        let mut low = ComplexGrid::zeros(1, h, w)?;
        for r in ch.saturating_sub(halfwidth)..(ch + halfwidth + 1).min(h) {
            for c in cw.saturating_sub(halfwidth)..(cw + halfwidth + 1).min(w) {
                low.set(0, r, c, white.get(0, r, c));
            }
        }
        let field = crate::fft::ifft2c(&low)?;
        let rms = (field.data().iter().map(|z| z.norm_sqr()).sum::<f64>()
            / (h * w) as f64)
            .sqrt()
            .max(1e-12);
        for r in 0..h {
            for c in 0..w {
                let zeta = field.get(0, r, c) / rms;
                let v = maps.get(coil, r, c) * (Complex64::new(1.0, 0.0) + zeta * delta);
                maps.set(coil, r, c, v);
            }
        }
    }
    CoilSensitivities::from_grid(maps)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub delta: f64,
    pub dum_psnr: f64,
    pub ue_psnr: f64,
}

/// Evaluate a trained dum checkpoint under increasing CSM perturbation and
/// a ue checkpoint once (it takes no CSM; its line is constant by
/// construction). Per-slice perturbation fields are drawn once and scaled
/// by δ, pairing the comparison across levels.
pub fn csm_robustness(
    dum: (&PipelineConfig, &ModelParams),
    ue: (&PipelineConfig, &ModelParams),
    data: &Dataset,
    deltas: &[f64],
    seed: u64,
) -> Result<Vec<RobustnessPoint>> {
    if !dum.0.variant.needs_csm() {
        return Err(Error::arg("first checkpoint must be the dum variant"));
    }
    if ue.0.variant.needs_csm() {
        return Err(Error::arg("second checkpoint must be CSM-free"));
    }
    let ue_report = evaluate(&ReconMethod::Pipeline(ue.0, ue.1), data, "ue", "robustness")?;
    let ue_psnr = ue_report.mean_psnr;

    let mut points = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let psnrs: Vec<Result<f64>> = data
            .slices
            .par_iter()
            .enumerate()
            .map(|(i, slice)| {
                let csm = slice.csm.as_ref().ok_or_else(|| {
                    Error::contract("robustness experiment needs per-slice coil maps")
                })?;
                // One substream per slice: the field is identical across
                // delta levels, only its amplitude changes.
                let mut field_rng = SeededRng::new(seed).split(i as u64);
                let perturbed = perturb_csm(csm, delta, &mut field_rng)?;
                let out = run_pipeline(dum.0, dum.1, &slice.k0, &data.mask, Some(&perturbed))?;
                Ok(psnr(&out.magnitude, &slice.target, data.data_max)?.db)
            })
            .collect();
        let mut total = 0.0;
        for p in psnrs {
            total += p?;
        }
        points.push(RobustnessPoint {
            delta,
            dum_psnr: total / data.slices.len() as f64,
            ue_psnr,
        });
    }
    Ok(points)
}

pub fn write_robustness_csv(path: &Path, points: &[RobustnessPoint]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "delta,dum_psnr,ue_psnr")?;
    for p in points {
        writeln!(f, "{},{:.6},{:.6}", p.delta, p.dum_psnr, p.ue_psnr)?;
    }
    f.flush()?;
    Ok(())
}

pub fn plot_robustness(path: &Path, points: &[RobustnessPoint]) -> Result<()> {
    line_chart(
        path,
        "Reconstruction PSNR under CSM perturbation",
        "perturbation magnitude",
        "PSNR (dB)",
        &[
            Series {
                label: "dum (perturbed CSM)".into(),
                points: points.iter().map(|p| (p.delta, p.dum_psnr)).collect(),
            },
            Series {
                label: "ue (no CSM input)".into(),
                points: points.iter().map(|p| (p.delta, p.ue_psnr)).collect(),
            },
        ],
        false,
    )
}
