//! The cascade engine: standard CSM-based iteration (dum), per-coil
//! CSM-free iteration (ue), and progressive k-space resolution (uep/ueps),
//! with soft data consistency, coil reduce/expand, and k-space crop/pad.
//!
//! One cascade maps the image estimate x through denoise → FFT → data
//! consistency (→ pad, when progressive) → inverse FFT. Cascade weights are
//! untied; the DC weight η is a learnable scalar per cascade shared over
//! coils.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::acquisition::{rss, zero_filled, CoilSensitivities, SamplingMask};
use crate::denoiser::{self, DenoiserCache, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::fft::{fft2c, ifft2c};
use crate::grid::{ComplexGrid, RealGrid};
use crate::rng::SeededRng;

/// Σᵢ conj(Sᵢ) ⊙ xᵢ: multi-coil image to a single combined image.
pub fn reduce(x: &ComplexGrid, csm: &CoilSensitivities) -> Result<ComplexGrid> {
    csm.maps().check_same_shape(x)?;
    let (h, w) = (x.height(), x.width());
    let mut out = ComplexGrid::zeros(1, h, w)?;
    for i in 0..x.coils() {
        for r in 0..h {
            for c in 0..w {
                let v = out.get(0, r, c) + csm.maps().get(i, r, c).conj() * x.get(i, r, c);
                out.set(0, r, c, v);
            }
        }
    }
    Ok(out)
}

/// Coil i gets Sᵢ ⊙ m; the adjoint of [`reduce`].
pub fn expand(m: &ComplexGrid, csm: &CoilSensitivities) -> Result<ComplexGrid> {
    if m.coils() != 1 || m.height() != csm.height() || m.width() != csm.width() {
        return Err(Error::shape(format!(
            "expand expects (1, {}, {}), got {}",
            csm.height(),
            csm.width(),
            m.shape()
        )));
    }
    let (n, h, w) = (csm.num_coils(), m.height(), m.width());
    let mut out = ComplexGrid::zeros(n, h, w)?;
    for i in 0..n {
        for r in 0..h {
            for c in 0..w {
                out.set(i, r, c, csm.maps().get(i, r, c) * m.get(0, r, c));
            }
        }
    }
    Ok(out)
}

/// Soft data consistency: k − η·𝓜(k − k0). Unsampled columns pass through
/// unchanged; η = 1 pins sampled columns to k0 exactly.
pub fn data_consistency(
    k: &ComplexGrid,
    k0: &ComplexGrid,
    mask: &SamplingMask,
    eta: f64,
) -> Result<ComplexGrid> {
    k.check_same_shape(k0)?;
    if mask.width() != k.width() {
        return Err(Error::shape(format!(
            "mask width {} vs k-space width {}",
            mask.width(),
            k.width()
        )));
    }
    let mut out = k.clone();
    for coil in 0..k.coils() {
        for r in 0..k.height() {
            for c in 0..k.width() {
                if mask.is_sampled(c) {
                    let v = k.get(coil, r, c);
                    out.set(coil, r, c, v - eta * (v - k0.get(coil, r, c)));
                }
            }
        }
    }
    Ok(out)
}

/// Centered block extraction; the center index floor(size/2) of the source
/// maps onto the center of the crop, for both parities.
pub fn kspace_center_crop(k: &ComplexGrid, h: usize, w: usize) -> Result<ComplexGrid> {
    if h > k.height() || w > k.width() || h == 0 || w == 0 {
        return Err(Error::arg(format!(
            "crop ({h}, {w}) out of range for ({}, {})",
            k.height(),
            k.width()
        )));
    }
    let r0 = k.height() / 2 - h / 2;
    let c0 = k.width() / 2 - w / 2;
    let mut out = ComplexGrid::zeros(k.coils(), h, w)?;
    for coil in 0..k.coils() {
        for r in 0..h {
            for c in 0..w {
                out.set(coil, r, c, k.get(coil, r0 + r, c0 + c));
            }
        }
    }
    Ok(out)
}

/// Plain zero padding of a centered block back into a larger grid.
pub fn kspace_zero_pad(k_small: &ComplexGrid, h: usize, w: usize) -> Result<ComplexGrid> {
    if h < k_small.height() || w < k_small.width() {
        return Err(Error::arg(format!(
            "pad target ({h}, {w}) smaller than source ({}, {})",
            k_small.height(),
            k_small.width()
        )));
    }
    let r0 = h / 2 - k_small.height() / 2;
    let c0 = w / 2 - k_small.width() / 2;
    let mut out = ComplexGrid::zeros(k_small.coils(), h, w)?;
    for coil in 0..k_small.coils() {
        for r in 0..k_small.height() {
            for c in 0..k_small.width() {
                out.set(coil, r0 + r, c0 + c, k_small.get(coil, r, c));
            }
        }
    }
    Ok(out)
}

/// The k-space expansion operator: the center block is `k_small` unchanged;
/// the ring out to (h′, w′) is filled from acquired measurements (the
/// center-crop of `k0_full` at sampled columns) and zero elsewhere.
pub fn kspace_pad(
    k_small: &ComplexGrid,
    k0_full: &ComplexGrid,
    mask_full: &SamplingMask,
    target_h: usize,
    target_w: usize,
) -> Result<ComplexGrid> {
    let (hs, ws) = (k_small.height(), k_small.width());
    if target_h < hs || target_w < ws {
        return Err(Error::arg(format!(
            "pad target ({target_h}, {target_w}) smaller than source ({hs}, {ws})"
        )));
    }
    if target_h > k0_full.height() || target_w > k0_full.width() {
        return Err(Error::arg(format!(
            "pad target ({target_h}, {target_w}) exceeds acquired k-space ({}, {})",
            k0_full.height(),
            k0_full.width()
        )));
    }
    if k_small.coils() != k0_full.coils() {
        return Err(Error::shape("coil counts disagree"));
    }
    let k0_crop = kspace_center_crop(k0_full, target_h, target_w)?;
    let mask_crop = mask_full.center_crop(target_w)?;
    let mut out = ComplexGrid::zeros(k_small.coils(), target_h, target_w)?;
    let r0 = target_h / 2 - hs / 2;
    let c0 = target_w / 2 - ws / 2;
    for coil in 0..out.coils() {
        for r in 0..target_h {
            for c in 0..target_w {
                let in_center = r >= r0 && r < r0 + hs && c >= c0 && c < c0 + ws;
                let v = if in_center {
                    k_small.get(coil, r - r0, c - c0)
                } else if mask_crop.is_sampled(c) {
                    k0_crop.get(coil, r, c)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                out.set(coil, r, c, v);
            }
        }
    }
    Ok(out)
}

/// Zero-pad an intermediate image's k-space support up to full size; a
/// diagnostic view, never part of the pipeline itself.
pub fn upsample_to_full(x: &ComplexGrid, full_h: usize, full_w: usize) -> Result<ComplexGrid> {
    let k = fft2c(x)?;
    ifft2c(&kspace_zero_pad(&k, full_h, full_w)?)
}

/// Per-cascade target shapes; the final stage is the full grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionSchedule {
    stages: Vec<(usize, usize)>,
}

impl ResolutionSchedule {
    pub fn new(stages: Vec<(usize, usize)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::arg("schedule needs at least one stage"));
        }
        for pair in stages.windows(2) {
            if pair[1].0 < pair[0].0 || pair[1].1 < pair[0].1 {
                return Err(Error::arg(format!(
                    "stage shapes must be non-decreasing: {:?} then {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(ResolutionSchedule { stages })
    }

    /// The same shape at every cascade (dum/ue).
    pub fn constant(cascades: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(vec![(h, w); cascades])
    }

    pub fn stages(&self) -> &[(usize, usize)] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.stages.iter().all(|&s| s == self.stages[0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Standard cascade with CSM-based reduce/expand around the denoiser.
    Dum,
    /// Per-coil denoising, no CSM anywhere.
    Ue,
    /// ue plus the progressive resolution schedule.
    Uep,
    /// uep plus row-band sparse attention above the token threshold.
    Ueps,
}

impl Variant {
    pub fn needs_csm(&self) -> bool {
        matches!(self, Variant::Dum)
    }

    pub fn is_progressive(&self) -> bool {
        matches!(self, Variant::Uep | Variant::Ueps)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Dum => "dum",
            Variant::Ue => "ue",
            Variant::Uep => "uep",
            Variant::Ueps => "ueps",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dum" => Ok(Variant::Dum),
            "ue" => Ok(Variant::Ue),
            "uep" => Ok(Variant::Uep),
            "ueps" => Ok(Variant::Ueps),
            other => Err(Error::arg(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub cascades: usize,
    pub schedule: ResolutionSchedule,
    pub denoiser: DenoiserConfig,
}

impl PipelineConfig {
    /// Constant-resolution pipeline (dum/ue) at the full grid size.
    pub fn standard(
        variant: Variant,
        cascades: usize,
        denoiser: DenoiserConfig,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        if variant.is_progressive() {
            return Err(Error::arg("progressive variants need an explicit schedule"));
        }
        let config = PipelineConfig {
            variant,
            cascades,
            schedule: ResolutionSchedule::constant(cascades, h, w)?,
            denoiser,
        };
        config.validate()?;
        Ok(config)
    }

    /// Progressive pipeline (uep/ueps) over explicit stage shapes.
    pub fn progressive(
        variant: Variant,
        denoiser: DenoiserConfig,
        stages: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if !variant.is_progressive() {
            return Err(Error::arg("constant-resolution variants take no schedule"));
        }
        let schedule = ResolutionSchedule::new(stages)?;
        let config = PipelineConfig {
            variant,
            cascades: schedule.len(),
            schedule,
            denoiser,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.cascades == 0 {
            return Err(Error::arg("pipeline needs at least one cascade"));
        }
        if self.schedule.len() != self.cascades {
            return Err(Error::arg(format!(
                "schedule has {} stages for {} cascades",
                self.schedule.len(),
                self.cascades
            )));
        }
        if !self.variant.is_progressive() && !self.schedule.is_constant() {
            return Err(Error::arg(
                "constant-resolution variants require a constant schedule",
            ));
        }
        let p = self.denoiser.patch_size;
        for &(h, w) in self.schedule.stages() {
            if h % p != 0 || w % p != 0 {
                return Err(Error::arg(format!(
                    "stage ({h}, {w}) not divisible by patch size {p}"
                )));
            }
        }
        Ok(())
    }

    /// The denoiser config the variant actually runs: sparse/full
    /// interleaving is a ueps feature; every other variant runs full
    /// attention at any token count.
    pub fn effective_denoiser(&self) -> DenoiserConfig {
        let mut cfg = self.denoiser.clone();
        if self.variant != Variant::Ueps {
            cfg.sparse_threshold = usize::MAX;
        }
        cfg
    }

    /// Check the config against an acquisition's full shape and mask.
    pub fn validate_against(&self, k0: &ComplexGrid, mask: &SamplingMask) -> Result<()> {
        self.validate()?;
        let (full_h, full_w) = (k0.height(), k0.width());
        let last = *self.schedule.stages().last().unwrap();
        if last != (full_h, full_w) {
            return Err(Error::arg(format!(
                "final stage {last:?} must equal the full grid ({full_h}, {full_w})"
            )));
        }
        if mask.width() != full_w {
            return Err(Error::shape(format!(
                "mask width {} vs k-space width {full_w}",
                mask.width()
            )));
        }
        if self.variant.is_progressive() {
            // The fully sampled center block must fit inside the first crop.
            let w0 = self.schedule.stages()[0].1;
            if mask.num_center() > w0 {
                return Err(Error::arg(format!(
                    "{}-line center block does not fit the first stage width {w0}",
                    mask.num_center()
                )));
            }
        }
        Ok(())
    }
}

/// All learnable state of a pipeline: per-cascade denoiser trees (weights
/// untied) plus one DC weight η per cascade. Flatten order: every cascade's
/// denoiser parameters in cascade order, then all η values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub denoisers: Vec<DenoiserParams>,
    pub etas: Vec<f64>,
}

impl ModelParams {
    /// η starts at 1.0 (hard consistency); denoisers use the training init.
    pub fn init(config: &PipelineConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let denoisers = (0..config.cascades)
            .map(|_| DenoiserParams::init(&config.denoiser, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            denoisers,
            etas: vec![1.0; config.cascades],
        })
    }

    pub fn zeros(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let denoisers = (0..config.cascades)
            .map(|_| DenoiserParams::zeros(&config.denoiser))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            denoisers,
            etas: vec![0.0; config.cascades],
        })
    }

    pub fn num_params(config: &PipelineConfig) -> usize {
        config.cascades * DenoiserParams::num_params(&config.denoiser) + config.cascades
    }

    /// Group layout in flatten order: cascade-prefixed denoiser groups,
    /// then the η block.
    pub fn layout(config: &PipelineConfig) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for t in 0..config.cascades {
            for (name, len) in DenoiserParams::layout(&config.denoiser) {
                out.push((format!("cascade{t}.{name}"), len));
            }
        }
        out.push(("eta".to_string(), config.cascades));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for d in &self.denoisers {
            out.extend(d.flatten());
        }
        out.extend_from_slice(&self.etas);
        out
    }

    pub fn unflatten(config: &PipelineConfig, flat: &[f64]) -> Result<Self> {
        let expect = Self::num_params(config);
        if flat.len() != expect {
            return Err(Error::shape(format!(
                "flat vector has {} entries, config needs {expect}",
                flat.len()
            )));
        }
        let per = DenoiserParams::num_params(&config.denoiser);
        let mut denoisers = Vec::with_capacity(config.cascades);
        for t in 0..config.cascades {
            denoisers.push(DenoiserParams::unflatten(
                &config.denoiser,
                &flat[t * per..(t + 1) * per],
            )?);
        }
        let etas = flat[config.cascades * per..].to_vec();
        Ok(ModelParams { denoisers, etas })
    }
}

/// Reconstruction result: the RSS magnitude plus every intermediate image
/// estimate x⁽⁰⁾..x⁽ᵀ⁾ at its native stage shape.
pub struct PipelineOutput {
    pub magnitude: RealGrid,
    pub intermediates: Vec<ComplexGrid>,
}

struct CascadeCache {
    denoiser: DenoiserCache,
    /// Stage k-space before DC; needed for the η gradient.
    k_pre_dc: ComplexGrid,
    k0_stage: ComplexGrid,
    mask_stage: SamplingMask,
    /// Pad target when this cascade expands to a larger stage.
    pad_to: Option<(usize, usize)>,
}

/// Forward byproducts for [`pipeline_backward`].
pub struct PipelineCache {
    cascades: Vec<CascadeCache>,
}

fn check_inputs(
    config: &PipelineConfig,
    k0: &ComplexGrid,
    mask: &SamplingMask,
    csm: Option<&CoilSensitivities>,
) -> Result<()> {
    config.validate_against(k0, mask)?;
    match (config.variant.needs_csm(), csm) {
        (true, None) => {
            return Err(Error::contract(
                "the dum variant requires coil sensitivity maps",
            ))
        }
        (false, Some(_)) => {
            return Err(Error::contract(format!(
                "the {} variant accepts no CSM input",
                config.variant.as_str()
            )))
        }
        (true, Some(s)) => {
            s.maps().check_same_shape(k0)?;
        }
        (false, None) => {}
    }
    // Acquired k-space must be zero on unsampled columns.
    for coil in 0..k0.coils() {
        for r in 0..k0.height() {
            for c in 0..k0.width() {
                if !mask.is_sampled(c) && k0.get(coil, r, c) != Complex64::new(0.0, 0.0) {
                    return Err(Error::contract(format!(
                        "k0 has nonzero data at unsampled column {c}"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn run_cascades(
    config: &PipelineConfig,
    params: &ModelParams,
    k0: &ComplexGrid,
    mask: &SamplingMask,
    csm: Option<&CoilSensitivities>,
    mut caches: Option<&mut Vec<CascadeCache>>,
) -> Result<Vec<ComplexGrid>> {
    if params.denoisers.len() != config.cascades || params.etas.len() != config.cascades {
        return Err(Error::shape(format!(
            "parameter tree has {} cascades, config {}",
            params.denoisers.len(),
            config.cascades
        )));
    }
    let den_cfg = config.effective_denoiser();
    let stages = config.schedule.stages();
    let (full_h, full_w) = (k0.height(), k0.width());

    let mut x = if config.variant.is_progressive() {
        let (h0, w0) = stages[0];
        ifft2c(&kspace_center_crop(k0, h0, w0)?)?
    } else {
        zero_filled(k0)?
    };
    let mut intermediates = vec![x.clone()];

    for t in 0..config.cascades {
        let (h_t, w_t) = stages[t];
        let k0_stage = if (h_t, w_t) == (full_h, full_w) {
            k0.clone()
        } else {
            kspace_center_crop(k0, h_t, w_t)?
        };
        let mask_stage = mask.center_crop(w_t)?;

        // Denoise: per-coil batch, with reduce/expand around it for dum.
        let (x_refined, den_cache) = match config.variant {
            Variant::Dum => {
                let csm = csm.unwrap();
                let red = reduce(&x, csm)?;
                let (d, cache) =
                    denoiser::forward_with_cache(&red, &params.denoisers[t], &den_cfg)?;
                (x.add(&expand(&d, csm)?)?, cache)
            }
            _ => {
                let (d, cache) = denoiser::forward_with_cache(&x, &params.denoisers[t], &den_cfg)?;
                (x.add(&d)?, cache)
            }
        };

        let k = fft2c(&x_refined)?;
        let k_dc = data_consistency(&k, &k0_stage, &mask_stage, params.etas[t])?;

        let pad_to = if t + 1 < config.cascades && stages[t + 1] != (h_t, w_t) {
            Some(stages[t + 1])
        } else {
            None
        };
        let k_next = match pad_to {
            Some((h_n, w_n)) => kspace_pad(&k_dc, k0, mask, h_n, w_n)?,
            None => k_dc,
        };
        x = ifft2c(&k_next)?;
        intermediates.push(x.clone());

        if let Some(list) = caches.as_deref_mut() {
            list.push(CascadeCache {
                denoiser: den_cache,
                k_pre_dc: k,
                k0_stage,
                mask_stage,
                pad_to,
            });
        }
    }
    Ok(intermediates)
}

/// Reconstruct one slice. `csm` is required by dum and rejected by the
/// CSM-free variants; the acquired `k0` must be zero on unsampled columns.
pub fn run_pipeline(
    config: &PipelineConfig,
    params: &ModelParams,
    k0: &ComplexGrid,
    mask: &SamplingMask,
    csm: Option<&CoilSensitivities>,
) -> Result<PipelineOutput> {
    check_inputs(config, k0, mask, csm)?;
    let intermediates = run_cascades(config, params, k0, mask, csm, None)?;
    let magnitude = rss(intermediates.last().unwrap())?;
    Ok(PipelineOutput {
        magnitude,
        intermediates,
    })
}

/// Forward pass retaining everything [`pipeline_backward`] needs.
pub fn run_pipeline_with_cache(
    config: &PipelineConfig,
    params: &ModelParams,
    k0: &ComplexGrid,
    mask: &SamplingMask,
    csm: Option<&CoilSensitivities>,
) -> Result<(PipelineOutput, PipelineCache)> {
    check_inputs(config, k0, mask, csm)?;
    let mut caches = Vec::with_capacity(config.cascades);
    let intermediates = run_cascades(config, params, k0, mask, csm, Some(&mut caches))?;
    let magnitude = rss(intermediates.last().unwrap())?;
    Ok((
        PipelineOutput {
            magnitude,
            intermediates,
        },
        PipelineCache { cascades: caches },
    ))
}

/// Gradient of a real loss through RSS: ∂L/∂xᵢ = g_mag ⊙ xᵢ / rss(x), with
/// the subgradient 0 where the magnitude is exactly zero.
pub fn rss_backward(x: &ComplexGrid, mag: &RealGrid, g_mag: &RealGrid) -> Result<ComplexGrid> {
    mag.check_same_shape(g_mag)?;
    if x.height() != mag.height() || x.width() != mag.width() {
        return Err(Error::shape("rss gradient shape mismatch"));
    }
    let mut out = ComplexGrid::zeros(x.coils(), x.height(), x.width())?;
    for i in 0..x.coils() {
        for r in 0..x.height() {
            for c in 0..x.width() {
                let m = mag.get(r, c);
                if m > 0.0 {
                    out.set(i, r, c, x.get(i, r, c) * (g_mag.get(r, c) / m));
                }
            }
        }
    }
    Ok(out)
}

/// Reverse-mode pass over the whole pipeline. `g_final` is ∂L/∂x⁽ᵀ⁾ (the
/// multi-coil image the RSS head consumed); gradients accumulate into
/// `grads`.
pub fn pipeline_backward(
    config: &PipelineConfig,
    params: &ModelParams,
    cache: &PipelineCache,
    csm: Option<&CoilSensitivities>,
    g_final: &ComplexGrid,
    grads: &mut ModelParams,
) -> Result<()> {
    if cache.cascades.len() != config.cascades {
        return Err(Error::shape("cache/config cascade count mismatch"));
    }
    let den_cfg = config.effective_denoiser();
    let mut g_x = g_final.clone();

    for t in (0..config.cascades).rev() {
        let cc = &cache.cascades[t];
        // x⁽ᵗ⁺¹⁾ = ifft2c(k_next): the unitary adjoint of ifft2c is fft2c.
        let g_k_next = fft2c(&g_x)?;
        // Pad adjoint: only the center block flows back into this cascade;
        // the ring came from acquired data.
        let g_k_dc = match cc.pad_to {
            Some(_) => kspace_center_crop(&g_k_next, cc.k_pre_dc.height(), cc.k_pre_dc.width())?,
            None => g_k_next,
        };
        // DC: k_dc = k − η·M(k − k0).
        let eta = params.etas[t];
        let mut g_k = g_k_dc.clone();
        let mut g_eta = 0.0;
        for coil in 0..g_k.coils() {
            for r in 0..g_k.height() {
                for c in 0..g_k.width() {
                    if cc.mask_stage.is_sampled(c) {
                        let g = g_k_dc.get(coil, r, c);
                        let residual = cc.k_pre_dc.get(coil, r, c) - cc.k0_stage.get(coil, r, c);
                        g_eta -= (g.conj() * residual).re;
                        g_k.set(coil, r, c, g * (1.0 - eta));
                    }
                }
            }
        }
        grads.etas[t] += g_eta;
        let g_x_refined = ifft2c(&g_k)?;

        // x_refined = x + denoise-path(x).
        match config.variant {
            Variant::Dum => {
                let csm = csm.ok_or_else(|| {
                    Error::contract("the dum variant requires coil sensitivity maps")
                })?;
                let g_d_out = reduce(&g_x_refined, csm)?;
                let g_d_in = denoiser::backward(
                    &g_d_out,
                    &params.denoisers[t],
                    &den_cfg,
                    &cc.denoiser,
                    &mut grads.denoisers[t],
                )?;
                g_x = g_x_refined.add(&expand(&g_d_in, csm)?)?;
            }
            _ => {
                let g_d_in = denoiser::backward(
                    &g_x_refined,
                    &params.denoisers[t],
                    &den_cfg,
                    &cc.denoiser,
                    &mut grads.denoisers[t],
                )?;
                g_x = g_x_refined.add(&g_d_in)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{
        forward_model, make_csm, make_equispaced_mask, make_phantom, PhantomKind, PhantomPhase,
        PhantomSpec,
    };

    fn phantom(h: usize, w: usize) -> ComplexGrid {
        make_phantom(&PhantomSpec {
            kind: PhantomKind::SheppLogan,
            height: h,
            width: w,
            phase: PhantomPhase::SmoothRandom,
            seed: 1,
        })
        .unwrap()
    }

    fn uniform_csm(n: usize, h: usize, w: usize) -> CoilSensitivities {
        // Equal-magnitude real maps with Σ|Sᵢ|² = 1.
        let mag = 1.0 / (n as f64).sqrt();
        let mut maps = ComplexGrid::zeros(n, h, w).unwrap();
        for i in 0..n {
            for v in maps.coil_mut(i) {
                *v = Complex64::new(mag, 0.0);
            }
        }
        CoilSensitivities::from_grid(maps).unwrap()
    }

    fn tiny_denoiser() -> DenoiserConfig {
        DenoiserConfig {
            patch_size: 4,
            depth: 2,
            width: 32,
            heads: 2,
            mlp_hidden: 64,
            band_halfwidth: 1,
            sparse_threshold: 256,
            full_layer_indices: DenoiserConfig::default_full_layers(2),
        }
    }

    fn random_model(config: &PipelineConfig, seed: u64) -> ModelParams {
        let mut rng = SeededRng::new(seed);
        let mut params = ModelParams::init(config, &mut rng).unwrap();
        for d in params.denoisers.iter_mut() {
            for v in d.unembed_w.data.iter_mut() {
                *v = rng.truncated_normal(0.05);
            }
        }
        params
    }

    #[test]
    fn reduce_expand_identity_under_normalization() {
        let mut rng = SeededRng::new(2);
        let csm = make_csm(4, 16, 16, &mut rng).unwrap();
        let m = rng.normal_complex_grid(1, 16, 16, 1.0).unwrap();
        let back = reduce(&expand(&m, &csm).unwrap(), &csm).unwrap();
        assert!(m.max_abs_diff(&back) < 1e-10);
        let e = expand(&m, &csm).unwrap();
        assert!((e.norm() - m.norm()).abs() < 1e-10);
        // Expanding zero gives zero.
        let z = ComplexGrid::zeros(1, 16, 16).unwrap();
        assert!(expand(&z, &csm).unwrap().norm() == 0.0);
    }

    #[test]
    fn single_uniform_coil_degenerates_to_identity() {
        let mut rng = SeededRng::new(3);
        let ones = ComplexGrid::from_vec(1, 8, 8, vec![Complex64::new(1.0, 0.0); 64]).unwrap();
        let csm = CoilSensitivities::from_grid(ones).unwrap();
        let x = rng.normal_complex_grid(1, 8, 8, 1.0).unwrap();
        assert!(reduce(&x, &csm).unwrap().max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn reduce_and_expand_are_adjoint() {
        let mut rng = SeededRng::new(4);
        let csm = make_csm(3, 12, 12, &mut rng).unwrap();
        let x = rng.normal_complex_grid(3, 12, 12, 1.0).unwrap();
        let m = rng.normal_complex_grid(1, 12, 12, 1.0).unwrap();
        let lhs = reduce(&x, &csm).unwrap().inner_re(&m);
        let rhs = x.inner_re(&expand(&m, &csm).unwrap());
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn dc_endpoints_and_midpoint() {
        let mut rng = SeededRng::new(5);
        let mask = make_equispaced_mask(16, 4.0, 0.08, 0).unwrap();
        let k = rng.normal_complex_grid(1, 8, 16, 1.0).unwrap();
        let k0 = mask
            .apply(&rng.normal_complex_grid(1, 8, 16, 1.0).unwrap())
            .unwrap();
        assert_eq!(data_consistency(&k, &k0, &mask, 0.0).unwrap(), k);
        let hard = data_consistency(&k, &k0, &mask, 1.0).unwrap();
        for r in 0..8 {
            for c in 0..16 {
                let expect = if mask.is_sampled(c) {
                    k0.get(0, r, c)
                } else {
                    k.get(0, r, c)
                };
                assert!((hard.get(0, r, c) - expect).norm() < 1e-15);
            }
        }
        let c_sampled = (0..16).find(|&c| mask.is_sampled(c)).unwrap();
        let mut k2 = ComplexGrid::zeros(1, 1, 16).unwrap();
        k2.set(0, 0, c_sampled, Complex64::new(2.0, 0.0));
        let k0z = ComplexGrid::zeros(1, 1, 16).unwrap();
        let mid = data_consistency(&k2, &k0z, &mask, 0.5).unwrap();
        assert_eq!(mid.get(0, 0, c_sampled), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn crop_full_size_is_identity() {
        let mut rng = SeededRng::new(6);
        let k = rng.normal_complex_grid(2, 12, 10, 1.0).unwrap();
        assert_eq!(kspace_center_crop(&k, 12, 10).unwrap(), k);
        assert!(kspace_center_crop(&k, 13, 10).is_err());
    }

    #[test]
    fn crop_retains_acs_and_lowers_effective_acceleration() {
        let mask = make_equispaced_mask(320, 4.0, 0.08, 0).unwrap();
        let cropped = mask.center_crop(64).unwrap();
        assert!(cropped.num_sampled() >= 26);
        let start = 64 / 2 - 26 / 2;
        for c in start..start + 26 {
            assert!(cropped.is_sampled(c));
        }
        assert!(cropped.effective_acceleration() <= mask.effective_acceleration());
    }

    #[test]
    fn crop_then_zero_pad_zeroes_the_ring() {
        let mut rng = SeededRng::new(7);
        let k = rng.normal_complex_grid(1, 16, 16, 1.0).unwrap();
        let small = kspace_center_crop(&k, 8, 8).unwrap();
        let back = kspace_zero_pad(&small, 16, 16).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let inside = (4..12).contains(&r) && (4..12).contains(&c);
                let expect = if inside {
                    k.get(0, r, c)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                assert_eq!(back.get(0, r, c), expect);
            }
        }
    }

    #[test]
    fn pad_identity_and_fully_sampled_composition() {
        let mut rng = SeededRng::new(8);
        let full_mask = make_equispaced_mask(32, 1.0, 0.0, 0).unwrap();
        let k0 = rng.normal_complex_grid(1, 32, 32, 1.0).unwrap();
        let crop8 = kspace_center_crop(&k0, 8, 8).unwrap();
        assert_eq!(kspace_pad(&crop8, &k0, &full_mask, 8, 8).unwrap(), crop8);
        let padded = kspace_pad(&crop8, &k0, &full_mask, 16, 16).unwrap();
        assert_eq!(padded, kspace_center_crop(&k0, 16, 16).unwrap());
        // Shrinking targets are rejected.
        assert!(kspace_pad(&crop8, &k0, &full_mask, 4, 8).is_err());
    }

    #[test]
    fn pad_ring_respects_the_mask() {
        let mut rng = SeededRng::new(9);
        let mask = make_equispaced_mask(32, 4.0, 0.08, 0).unwrap();
        let k0 = mask
            .apply(&rng.normal_complex_grid(2, 32, 32, 1.0).unwrap())
            .unwrap();
        let small = rng.normal_complex_grid(2, 8, 8, 1.0).unwrap();
        let padded = kspace_pad(&small, &k0, &mask, 16, 16).unwrap();
        let k0_16 = kspace_center_crop(&k0, 16, 16).unwrap();
        let mask_16 = mask.center_crop(16).unwrap();
        for coil in 0..2 {
            for r in 0..16 {
                for c in 0..16 {
                    let in_center = (4..12).contains(&r) && (4..12).contains(&c);
                    let expect = if in_center {
                        small.get(coil, r - 4, c - 4)
                    } else if mask_16.is_sampled(c) {
                        k0_16.get(coil, r, c)
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                    assert_eq!(padded.get(coil, r, c), expect, "({coil},{r},{c})");
                }
            }
        }
    }

    #[test]
    fn model_params_flatten_round_trip() {
        let config =
            PipelineConfig::progressive(Variant::Ueps, tiny_denoiser(), vec![(16, 16), (32, 32)])
                .unwrap();
        let params = random_model(&config, 10);
        let flat = params.flatten();
        assert_eq!(flat.len(), ModelParams::num_params(&config));
        let back = ModelParams::unflatten(&config, &flat).unwrap();
        assert_eq!(back, params);
        let layout_total: usize = ModelParams::layout(&config).iter().map(|(_, n)| n).sum();
        assert_eq!(layout_total, flat.len());
    }

    #[test]
    fn csm_contract_is_enforced() {
        let m = phantom(32, 32);
        let mut rng = SeededRng::new(11);
        let csm = make_csm(2, 32, 32, &mut rng).unwrap();
        let mask = make_equispaced_mask(32, 4.0, 0.08, 0).unwrap();
        let k0 = forward_model(&m, &csm, &mask, 0.0, &mut rng).unwrap();

        let dum = PipelineConfig::standard(Variant::Dum, 1, tiny_denoiser(), 32, 32).unwrap();
        let params = random_model(&dum, 12);
        assert!(matches!(
            run_pipeline(&dum, &params, &k0, &mask, None),
            Err(Error::ContractViolation(_))
        ));

        let ue = PipelineConfig::standard(Variant::Ue, 1, tiny_denoiser(), 32, 32).unwrap();
        let ue_params = random_model(&ue, 13);
        assert!(matches!(
            run_pipeline(&ue, &ue_params, &k0, &mask, Some(&csm)),
            Err(Error::ContractViolation(_))
        ));
        assert!(run_pipeline(&ue, &ue_params, &k0, &mask, None).is_ok());
    }

    #[test]
    fn fully_sampled_zero_init_recovers_ground_truth() {
        let m = phantom(32, 32);
        let mut rng = SeededRng::new(14);
        let csm = make_csm(3, 32, 32, &mut rng).unwrap();
        let full = make_equispaced_mask(32, 1.0, 0.0, 0).unwrap();
        let k0 = forward_model(&m, &csm, &full, 0.0, &mut rng).unwrap();
        let truth = rss(&zero_filled(&k0).unwrap()).unwrap();

        for variant in [Variant::Dum, Variant::Ue, Variant::Uep, Variant::Ueps] {
            let config = match variant {
                Variant::Uep | Variant::Ueps => {
                    PipelineConfig::progressive(variant, tiny_denoiser(), vec![(16, 16), (32, 32)])
                        .unwrap()
                }
                _ => PipelineConfig::standard(variant, 2, tiny_denoiser(), 32, 32).unwrap(),
            };
            let mut rng2 = SeededRng::new(15);
            let params = ModelParams::init(&config, &mut rng2).unwrap(); // zero unembed
            let csm_arg = if variant.needs_csm() { Some(&csm) } else { None };
            let out = run_pipeline(&config, &params, &k0, &full, csm_arg).unwrap();
            assert!(
                out.magnitude.max_abs_diff(&truth) < 1e-8,
                "variant {variant:?}"
            );
        }
    }

    #[test]
    fn ue_single_coil_matches_dum_with_unit_maps() {
        let m = phantom(32, 32);
        let mut rng = SeededRng::new(16);
        let csm = uniform_csm(1, 32, 32);
        let mask = make_equispaced_mask(32, 4.0, 0.08, 0).unwrap();
        let k0 = forward_model(&m, &csm, &mask, 0.01, &mut rng).unwrap();

        let dum_cfg = PipelineConfig::standard(Variant::Dum, 2, tiny_denoiser(), 32, 32).unwrap();
        let ue_cfg = PipelineConfig::standard(Variant::Ue, 2, tiny_denoiser(), 32, 32).unwrap();
        let params = random_model(&dum_cfg, 17);
        let a = run_pipeline(&dum_cfg, &params, &k0, &mask, Some(&csm)).unwrap();
        let b = run_pipeline(&ue_cfg, &params, &k0, &mask, None).unwrap();
        assert!(a.magnitude.max_abs_diff(&b.magnitude) < 1e-10);
    }

    #[test]
    fn progressive_shape_trace_and_final_consistency() {
        let m = phantom(32, 32);
        let mut rng = SeededRng::new(18);
        let csm = make_csm(2, 32, 32, &mut rng).unwrap();
        let mask = make_equispaced_mask(32, 4.0, 0.08, 0).unwrap();
        let k0 = forward_model(&m, &csm, &mask, 0.0, &mut rng).unwrap();

        let config =
            PipelineConfig::progressive(Variant::Ueps, tiny_denoiser(), vec![(16, 16), (32, 32)])
                .unwrap();
        let params = random_model(&config, 19); // etas stay 1.0
        let out = run_pipeline(&config, &params, &k0, &mask, None).unwrap();

        assert_eq!(out.intermediates.len(), 3);
        assert_eq!(
            (out.intermediates[0].height(), out.intermediates[0].width()),
            (16, 16)
        );
        assert_eq!(
            (out.intermediates[1].height(), out.intermediates[1].width()),
            (32, 32)
        );

        let k_final = fft2c(out.intermediates.last().unwrap()).unwrap();
        for coil in 0..2 {
            for r in 0..32 {
                for c in 0..32 {
                    if mask.is_sampled(c) {
                        assert!(
                            (k_final.get(coil, r, c) - k0.get(coil, r, c)).norm() < 1e-10,
                            "({coil},{r},{c})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dc_holds_at_every_cascade_for_every_variant() {
        let m = phantom(32, 32);
        let mut rng = SeededRng::new(20);
        let csm = make_csm(2, 32, 32, &mut rng).unwrap();
        let mask = make_equispaced_mask(32, 4.0, 0.08, 0).unwrap();
        let k0 = forward_model(&m, &csm, &mask, 0.01, &mut rng).unwrap();

        for variant in [Variant::Dum, Variant::Ue, Variant::Uep, Variant::Ueps] {
            let config = match variant {
                Variant::Uep | Variant::Ueps => {
                    PipelineConfig::progressive(variant, tiny_denoiser(), vec![(16, 16), (32, 32)])
                        .unwrap()
                }
                _ => PipelineConfig::standard(variant, 2, tiny_denoiser(), 32, 32).unwrap(),
            };
            let params = random_model(&config, 21);
            let csm_arg = if variant.needs_csm() { Some(&csm) } else { None };
            let out = run_pipeline(&config, &params, &k0, &mask, csm_arg).unwrap();
            for (t, x) in out.intermediates.iter().enumerate().skip(1) {
                let k = fft2c(x).unwrap();
                let k0_stage = kspace_center_crop(&k0, x.height(), x.width()).unwrap();
                let mask_stage = mask.center_crop(x.width()).unwrap();
                for coil in 0..k.coils() {
                    for r in 0..k.height() {
                        for c in 0..k.width() {
                            if mask_stage.is_sampled(c) {
                                let err = (k.get(coil, r, c) - k0_stage.get(coil, r, c)).norm();
                                assert!(
                                    err < 1e-10,
                                    "{variant:?} cascade {t} bin ({coil},{r},{c}): {err}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn progressive_acs_must_fit_first_stage() {
        // 26 center lines at W=320 cannot fit a 16-wide first stage.
        let config =
            PipelineConfig::progressive(Variant::Uep, tiny_denoiser(), vec![(16, 16), (320, 320)])
                .unwrap();
        let mask = make_equispaced_mask(320, 4.0, 0.08, 0).unwrap();
        let k0 = mask.apply(&ComplexGrid::zeros(1, 320, 320).unwrap()).unwrap();
        let mut rng = SeededRng::new(22);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        assert!(run_pipeline(&config, &params, &k0, &mask, None).is_err());
    }

    #[test]
    fn progressive_effective_acceleration_monotone() {
        let mask = make_equispaced_mask(320, 4.0, 0.08, 0).unwrap();
        let mut last = 0.0;
        for w in [64usize, 128, 256, 320] {
            let eff = mask.center_crop(w).unwrap().effective_acceleration();
            assert!(eff >= last, "width {w}: {eff} < {last}");
            last = eff;
        }
    }

    #[test]
    fn upsample_diagnostic_preserves_low_frequencies() {
        let m = phantom(32, 32);
        let small = ifft2c(&kspace_center_crop(&fft2c(&m).unwrap(), 16, 16).unwrap()).unwrap();
        let up = upsample_to_full(&small, 32, 32).unwrap();
        let k_up = fft2c(&up).unwrap();
        let k_m = fft2c(&m).unwrap();
        let center_up = kspace_center_crop(&k_up, 16, 16).unwrap();
        let center_m = kspace_center_crop(&k_m, 16, 16).unwrap();
        assert!(center_up.max_abs_diff(&center_m) < 1e-10);
    }
}
