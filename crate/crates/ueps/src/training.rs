//! End-to-end optimization: MAE loss on RSS magnitudes, Adam with
//! warmup+cosine learning rate, batch gradients through the full cascade
//! stack, checkpointing and newline-delimited JSON metrics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{CoilSensitivities, SamplingMask};
use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, RealGrid};
use crate::io::{self, DatasetManifest};
use crate::metrics::psnr;
use crate::rng::SeededRng;
use crate::unrolled::{
    pipeline_backward, rss_backward, run_pipeline, run_pipeline_with_cache, ModelParams,
    PipelineConfig,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            base_lr: 3e-4,
            warmup_fraction: 0.01,
            final_lr_fraction: 0.10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::arg(format!(
                "warmup fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::arg(format!(
                "final lr fraction {} outside (0, 1]",
                self.final_lr_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Mean absolute error over all pixels.
pub fn mae_loss(pred: &RealGrid, target: &RealGrid) -> Result<f64> {
    pred.check_same_shape(target)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Gradient of [`mae_loss`] w.r.t. the prediction: sign/(pixel count), with
/// subgradient 0 at exact ties.
pub fn mae_backward(pred: &RealGrid, target: &RealGrid) -> Result<RealGrid> {
    pred.check_same_shape(target)?;
    let n = pred.data().len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            if a > b {
                1.0 / n
            } else if a < b {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    RealGrid::from_vec(pred.height(), pred.width(), data)
}

/// Warmup steps for a run: ceil(warmup_fraction · total).
pub fn warmup_steps(total_steps: usize, config: &TrainConfig) -> usize {
    ((total_steps as f64) * config.warmup_fraction).ceil() as usize
}

/// Linear warmup from 0 to base_lr over the first ceil(1%·total) steps,
/// then cosine to final_lr_fraction·base_lr at total_steps.
pub fn lr_schedule(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    config.validate()?;
    if step > total_steps {
        return Err(Error::arg(format!(
            "step {step} out of range 0..={total_steps}"
        )));
    }
    let warmup = warmup_steps(total_steps, config).max(1);
    if step <= warmup {
        return Ok(config.base_lr * step as f64 / warmup as f64);
    }
    let final_lr = config.base_lr * config.final_lr_fraction;
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(final_lr
        + (config.base_lr - final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Bias-corrected Adam moments over the flat parameter vector.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: usize,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(param_len: usize) -> Self {
        OptimizerState {
            step: 0,
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
        }
    }
}

/// One Adam update in place. NaN gradients abort with the step index and the
/// offending parameter group (resolved through `layout` when provided).
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
    layout: Option<&[(String, usize)]>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "adam: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        let group = layout
            .map(|groups| {
                let mut offset = 0usize;
                for (name, len) in groups {
                    if bad < offset + len {
                        return name.clone();
                    }
                    offset += len;
                }
                format!("index {bad}")
            })
            .unwrap_or_else(|| format!("index {bad}"));
        return Err(Error::Diverged {
            step: state.step,
            detail: format!("non-finite gradient in parameter group {group}"),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first_moment[i] = config.beta1 * state.first_moment[i] + (1.0 - config.beta1) * g;
        state.second_moment[i] =
            config.beta2 * state.second_moment[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.first_moment[i] / bc1;
        let v_hat = state.second_moment[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    Ok(())
}

/// One training example: acquired k-space, optional coil maps, RSS target.
pub struct TrainSlice {
    pub k0: ComplexGrid,
    pub csm: Option<CoilSensitivities>,
    pub target: RealGrid,
}

/// A dataset loaded from a manifest: slices plus the shared mask and the
/// volume-max normalization constant.
pub struct Dataset {
    pub slices: Vec<TrainSlice>,
    pub mask: SamplingMask,
    pub data_max: f64,
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let mask = SamplingMask::from_sampled_indices(
        manifest.mask.width,
        &manifest.mask.lines,
        manifest.mask.acceleration,
        manifest.mask.center_fraction,
    )?;
    let mut slices = Vec::with_capacity(manifest.slices.len());
    for entry in &manifest.slices {
        let k0 = io::load_complex_grid(&manifest.resolve(manifest_path, &entry.kspace))?;
        let csm_grid = io::load_complex_grid(&manifest.resolve(manifest_path, &entry.csm))?;
        let target = io::load_real_grid(&manifest.resolve(manifest_path, &entry.ground_truth))?;
        slices.push(TrainSlice {
            k0,
            csm: Some(CoilSensitivities::from_grid(csm_grid)?),
            target,
        });
    }
    Ok(Dataset {
        slices,
        mask,
        data_max: manifest.data_max,
    })
}

/// Loss and flat gradient for one slice.
fn slice_loss_and_grads(
    pipeline: &PipelineConfig,
    params: &ModelParams,
    slice: &TrainSlice,
    mask: &SamplingMask,
) -> Result<(f64, Vec<f64>)> {
    let csm = if pipeline.variant.needs_csm() {
        Some(slice.csm.as_ref().ok_or_else(|| {
            Error::contract("the dum variant requires per-slice coil sensitivity maps")
        })?)
    } else {
        None
    };
    let (out, cache) = run_pipeline_with_cache(pipeline, params, &slice.k0, mask, csm)?;
    let loss = mae_loss(&out.magnitude, &slice.target)?;
    let g_mag = mae_backward(&out.magnitude, &slice.target)?;
    let x_final = out.intermediates.last().unwrap();
    let g_final = rss_backward(x_final, &out.magnitude, &g_mag)?;
    let mut grads = ModelParams::zeros(pipeline)?;
    pipeline_backward(pipeline, params, &cache, csm, &g_final, &mut grads)?;
    Ok((loss, grads.flatten()))
}

/// Mean loss and mean flat gradient over a batch. Per-slice work runs in
/// parallel; the reduction is a fixed-order sum, so results are
/// deterministic regardless of scheduling.
pub fn loss_and_grads(
    pipeline: &PipelineConfig,
    params: &ModelParams,
    batch: &[&TrainSlice],
    mask: &SamplingMask,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let per_slice: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|slice| slice_loss_and_grads(pipeline, params, slice, mask))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut total_grads = vec![0.0; ModelParams::num_params(pipeline)];
    for item in per_slice {
        let (loss, grads) = item?;
        total_loss += loss;
        for (acc, g) in total_grads.iter_mut().zip(grads.iter()) {
            *acc += g;
        }
    }
    for g in total_grads.iter_mut() {
        *g *= scale;
    }
    Ok((total_loss * scale, total_grads))
}

/// Sidecar stored next to each checkpoint's CGRID parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub pipeline: PipelineConfig,
    pub param_len: usize,
    /// Flatten ordering: (group name, length) in vector order.
    pub flatten_order: Vec<(String, usize)>,
    pub seed: u64,
    pub epoch: usize,
}

/// Write `<stem>.cgrid` (flat f32 parameters) and `<stem>.json` (config +
/// flatten ordering).
pub fn save_checkpoint(
    stem: &Path,
    pipeline: &PipelineConfig,
    params: &ModelParams,
    seed: u64,
    epoch: usize,
) -> Result<()> {
    let flat = params.flatten();
    io::save_flat_vector(&stem.with_extension("cgrid"), &flat)?;
    let meta = CheckpointMeta {
        pipeline: pipeline.clone(),
        param_len: flat.len(),
        flatten_order: ModelParams::layout(pipeline),
        seed,
        epoch,
    };
    let mut f = BufWriter::new(File::create(stem.with_extension("json"))?);
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.flush()?;
    Ok(())
}

/// Load a checkpoint stem saved by [`save_checkpoint`].
pub fn load_checkpoint(stem: &Path) -> Result<(PipelineConfig, ModelParams)> {
    let meta: CheckpointMeta = serde_json::from_reader(File::open(stem.with_extension("json"))?)?;
    let flat = io::load_flat_vector(&stem.with_extension("cgrid"))?;
    if flat.len() != meta.param_len {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, sidecar says {}",
            flat.len(),
            meta.param_len
        )));
    }
    let params = ModelParams::unflatten(&meta.pipeline, &flat)?;
    Ok((meta.pipeline, params))
}

/// One metrics-log line; `heldout_psnr` appears on epoch boundaries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_psnr: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<TrainRecord>,
    pub final_checkpoint: PathBuf,
}

/// Mean reconstruction PSNR of `params` over a held-out dataset.
pub fn mean_heldout_psnr(
    pipeline: &PipelineConfig,
    params: &ModelParams,
    heldout: &Dataset,
) -> Result<f64> {
    let values: Vec<Result<f64>> = heldout
        .slices
        .par_iter()
        .map(|slice| {
            let csm = if pipeline.variant.needs_csm() {
                slice.csm.as_ref()
            } else {
                None
            };
            let out = run_pipeline(pipeline, params, &slice.k0, &heldout.mask, csm)?;
            Ok(psnr(&out.magnitude, &slice.target, heldout.data_max)?.db)
        })
        .collect();
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / heldout.slices.len() as f64)
}

/// Deterministic end-to-end training. Shuffling, initialization and batch
/// reduction are all functions of the seed; checkpoints land in `out_dir`
/// every epoch plus a `checkpoint_final` stem. A NaN loss aborts with the
/// last checkpoint kept on disk.
pub fn train(
    pipeline: &PipelineConfig,
    config: &TrainConfig,
    data: &Dataset,
    heldout: Option<&Dataset>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    pipeline.validate()?;
    if data.slices.is_empty() {
        return Err(Error::arg("training dataset is empty"));
    }
    std::fs::create_dir_all(out_dir)?;

    let root = SeededRng::new(config.seed);
    let mut init_rng = root.split(0);
    let mut params = ModelParams::init(pipeline, &mut init_rng)?;
    let mut flat = params.flatten();
    let mut state = OptimizerState::new(flat.len());
    let layout = ModelParams::layout(pipeline);

    let n = data.slices.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (config.epochs * steps_per_epoch).max(1);

    let metrics_path = out_dir.join("metrics.ndjson");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut records = Vec::new();
    let mut last_checkpoint = out_dir.join("checkpoint_init");
    save_checkpoint(&last_checkpoint, pipeline, &params, config.seed, 0)?;

    let mut step = 0usize;
    for epoch in 0..config.epochs {
        // Seeded Fisher-Yates; one substream per epoch.
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = root.split(1 + epoch as u64);
        for i in (1..n).rev() {
            let j = shuffle_rng.uniform_usize(0, i);
            order.swap(i, j);
        }

        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainSlice> = chunk.iter().map(|&i| &data.slices[i]).collect();
            let lr = lr_schedule(step + 1, total_steps, config)?;
            // A non-finite forward is divergence too: abort, keep the last
            // checkpoint on disk.
            let (loss, grads) = match loss_and_grads(pipeline, &params, &batch, &data.mask) {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged {
                        step,
                        detail: format!(
                            "non-finite values in {what}; last checkpoint at {}",
                            last_checkpoint.display()
                        ),
                    })
                }
                Err(other) => return Err(other),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!(
                        "loss became non-finite; last checkpoint at {}",
                        last_checkpoint.display()
                    ),
                });
            }
            adam_step(&mut flat, &grads, &mut state, lr, config, Some(&layout))?;
            params = ModelParams::unflatten(pipeline, &flat)?;

            let record = TrainRecord {
                step,
                lr,
                loss,
                heldout_psnr: None,
            };
            serde_json::to_writer(&mut metrics, &record)?;
            metrics.write_all(b"\n")?;
            records.push(record);
            step += 1;
        }

        if let Some(h) = heldout {
            if !h.slices.is_empty() {
                let db = mean_heldout_psnr(pipeline, &params, h)?;
                let line = format!("{{\"step\":{step},\"heldout_psnr\":{db}}}\n");
                metrics.write_all(line.as_bytes())?;
                records.push(TrainRecord {
                    step,
                    lr: 0.0,
                    loss: f64::NAN,
                    heldout_psnr: Some(db),
                });
            }
        }
        last_checkpoint = out_dir.join(format!("checkpoint_epoch_{:04}", epoch + 1));
        save_checkpoint(&last_checkpoint, pipeline, &params, config.seed, epoch + 1)?;
    }
    metrics.flush()?;

    let final_stem = out_dir.join("checkpoint_final");
    save_checkpoint(&final_stem, pipeline, &params, config.seed, config.epochs)?;
    Ok(TrainOutcome {
        params,
        records,
        final_checkpoint: final_stem,
    })
}
