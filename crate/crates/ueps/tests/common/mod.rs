//! Shared fixtures for the integration suites: in-memory synthetic
//! datasets and finite-difference gradient checking.

use ueps::acquisition::{
    full_kspace, make_csm, make_phantom, rss, zero_filled, PhantomKind, PhantomPhase, PhantomSpec,
    SamplingMask,
};
use ueps::denoiser::DenoiserConfig;
use ueps::rng::SeededRng;
use ueps::training::{loss_and_grads, Dataset, TrainSlice};
use ueps::unrolled::{ModelParams, PipelineConfig};

/// The gradient-oracle pipeline: 2 cascades over a 16→32 schedule, patch 4,
/// width 32, 2 layers, 2 heads.
pub fn oracle_denoiser() -> DenoiserConfig {
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

/// Synthesize `n` slices at the given size with the standard forward model.
pub fn synthetic_dataset(
    n: usize,
    height: usize,
    width: usize,
    coils: usize,
    mask: SamplingMask,
    sigma: f64,
    seed: u64,
) -> Dataset {
    let root = SeededRng::new(seed);
    let mut slices = Vec::with_capacity(n);
    let mut data_max: f64 = 0.0;
    for i in 0..n {
        let mut rng = root.split(i as u64);
        let m = make_phantom(&PhantomSpec {
            kind: PhantomKind::RandomEllipses,
            height,
            width,
            phase: PhantomPhase::SmoothRandom,
            seed: seed.wrapping_mul(7919).wrapping_add(i as u64),
        })
        .unwrap();
        let csm = make_csm(coils, height, width, &mut rng).unwrap();
        let k_full = full_kspace(&m, &csm, sigma, &mut rng).unwrap();
        let target = rss(&zero_filled(&k_full).unwrap()).unwrap();
        data_max = data_max.max(target.max_value());
        slices.push(TrainSlice {
            k0: mask.apply(&k_full).unwrap(),
            csm: Some(csm),
            target,
        });
    }
    Dataset {
        slices,
        mask,
        data_max,
    }
}

/// Training loss of a flat parameter vector on one batch.
pub fn flat_loss(
    pipeline: &PipelineConfig,
    flat: &[f64],
    batch: &[&TrainSlice],
    mask: &SamplingMask,
) -> f64 {
    let params = ModelParams::unflatten(pipeline, flat).unwrap();
    let (loss, _) = loss_and_grads(pipeline, &params, batch, mask).unwrap();
    loss
}

pub struct GradCheckReport {
    pub worst_rel: f64,
    pub worst_group: String,
    pub probes: usize,
}

/// Compare analytic gradients against central finite differences on
/// `probes_per_group` sampled coordinates of every parameter group.
pub fn gradient_check(
    pipeline: &PipelineConfig,
    params: &ModelParams,
    batch: &[&TrainSlice],
    mask: &SamplingMask,
    probes_per_group: usize,
    fd_step: f64,
    probe_seed: u64,
) -> GradCheckReport {
    let (_, analytic) = loss_and_grads(pipeline, params, batch, mask).unwrap();
    let flat = params.flatten();
    let layout = ModelParams::layout(pipeline);

    let mut probe_rng = SeededRng::new(probe_seed);
    let mut worst_rel: f64 = 0.0;
    let mut worst_group = String::new();
    let mut probes = 0usize;
    let mut offset = 0usize;
    for (name, len) in layout {
        for _ in 0..probes_per_group.min(len) {
            let idx = offset + probe_rng.uniform_usize(0, len - 1);
            let mut plus = flat.clone();
            plus[idx] += fd_step;
            let up = flat_loss(pipeline, &plus, batch, mask);
            let mut minus = flat.clone();
            minus[idx] -= fd_step;
            let down = flat_loss(pipeline, &minus, batch, mask);
            let fd = (up - down) / (2.0 * fd_step);
            let an = analytic[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if rel > worst_rel {
                worst_rel = rel;
                worst_group = format!("{name}[{}]", idx - offset);
            }
            probes += 1;
        }
        offset += len;
    }
    GradCheckReport {
        worst_rel,
        worst_group,
        probes,
    }
}
