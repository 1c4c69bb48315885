//! The learnable image denoiser: a pre-norm ViT over complex images split
//! into (real, imag) channels, with 2D rotary position encoding, SwiGLU
//! feedforward, and per-layer full or row-band attention patterns.
//!
//! Multi-coil inputs are processed with coils as a batch dimension. The
//! output is the residual the caller adds to its input.

pub mod attention;
pub mod mat;
pub mod patch;
pub mod rope;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ComplexGrid;
use crate::rng::SeededRng;
use attention::{
    attention, attention_backward, attention_with_cache, AttentionCache, AttentionPattern,
};
use mat::Mat;
use patch::{patch_grid, patchify, unpatchify};
use rope::Rope2d;

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Row-band halfwidth n: a query patch row attends to rows within n.
    pub band_halfwidth: usize,
    /// Sparse layers activate only when the token count exceeds this.
    pub sparse_threshold: usize,
    /// Layers pinned to full attention regardless of token count.
    pub full_layer_indices: Vec<usize>,
}

impl DenoiserConfig {
    /// The full-scale configuration: patch 8, 10 layers, width 512, 8 heads,
    /// MLP 1280, band n = 1, sparse above 256 tokens, first and last layer
    /// full.
    pub fn base() -> Self {
        DenoiserConfig {
            patch_size: 8,
            depth: 10,
            width: 512,
            heads: 8,
            mlp_hidden: 1280,
            band_halfwidth: 1,
            sparse_threshold: 256,
            full_layer_indices: vec![0, 9],
        }
    }

    /// First and last layer, the default full-attention set.
    pub fn default_full_layers(depth: usize) -> Vec<usize> {
        if depth <= 1 {
            vec![0]
        } else {
            vec![0, depth - 1]
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Token feature count: 2p² (real plane then imaginary plane).
    pub fn token_dim(&self) -> usize {
        2 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.depth == 0 || self.width == 0 || self.mlp_hidden == 0 {
            return Err(Error::arg("config extents must be >= 1"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::arg(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(4) {
            return Err(Error::arg(format!(
                "head dim {} must be divisible by 4 for 2D rotary encoding",
                self.head_dim()
            )));
        }
        if self.full_layer_indices.iter().any(|&i| i >= self.depth) {
            return Err(Error::arg("full layer index out of range"));
        }
        Ok(())
    }

    /// Per-layer pattern for an R_p × C_p token grid: row-band only on
    /// layers not pinned full and only when the token count exceeds the
    /// sparse threshold.
    pub fn resolve_patterns(
        &self,
        grid_rows: usize,
        grid_cols: usize,
    ) -> Result<Vec<AttentionPattern>> {
        let tokens = grid_rows * grid_cols;
        (0..self.depth)
            .map(|layer| {
                if tokens > self.sparse_threshold && !self.full_layer_indices.contains(&layer) {
                    AttentionPattern::row_band(grid_rows, grid_cols, self.band_halfwidth)
                } else {
                    AttentionPattern::full(grid_rows, grid_cols)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub norm1_scale: Vec<f64>,
    pub norm1_offset: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub norm2_scale: Vec<f64>,
    pub norm2_offset: Vec<f64>,
    pub w_gate: Mat,
    pub w_up: Mat,
    pub w_down: Mat,
}

/// Full parameter tree of one denoiser. All linear maps are (out × in)
/// row-major; `flatten`/`unflatten` are exact inverses with the documented
/// field order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub embed_w: Mat,
    pub embed_b: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub final_scale: Vec<f64>,
    pub final_offset: Vec<f64>,
    pub unembed_w: Mat,
    pub unembed_b: Vec<f64>,
}

impl DenoiserParams {
    /// Training initialization: truncated normal (std 0.02) for linear
    /// maps, unit norm scales, zero offsets and biases, and a zero unembed
    /// layer so the initial denoiser output is exactly zero.
    pub fn init(config: &DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (d, td, m) = (config.width, config.token_dim(), config.mlp_hidden);
        let mut filled = |rows: usize, cols: usize| -> Mat {
            let mut w = Mat::zeros(rows, cols);
            for v in w.data.iter_mut() {
                *v = rng.truncated_normal(0.02);
            }
            w
        };
        let embed_w = filled(d, td);
        let layers = (0..config.depth)
            .map(|_| LayerParams {
                norm1_scale: vec![1.0; d],
                norm1_offset: vec![0.0; d],
                wq: filled(d, d),
                wk: filled(d, d),
                wv: filled(d, d),
                wo: filled(d, d),
                norm2_scale: vec![1.0; d],
                norm2_offset: vec![0.0; d],
                w_gate: filled(m, d),
                w_up: filled(m, d),
                w_down: filled(d, m),
            })
            .collect();
        Ok(DenoiserParams {
            embed_w,
            embed_b: vec![0.0; d],
            layers,
            final_scale: vec![1.0; d],
            final_offset: vec![0.0; d],
            unembed_w: Mat::zeros(td, d),
            unembed_b: vec![0.0; td],
        })
    }

    /// All-zero tree with the config's shapes; the gradient accumulator.
    pub fn zeros(config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let (d, td, m) = (config.width, config.token_dim(), config.mlp_hidden);
        let layers = (0..config.depth)
            .map(|_| LayerParams {
                norm1_scale: vec![0.0; d],
                norm1_offset: vec![0.0; d],
                wq: Mat::zeros(d, d),
                wk: Mat::zeros(d, d),
                wv: Mat::zeros(d, d),
                wo: Mat::zeros(d, d),
                norm2_scale: vec![0.0; d],
                norm2_offset: vec![0.0; d],
                w_gate: Mat::zeros(m, d),
                w_up: Mat::zeros(m, d),
                w_down: Mat::zeros(d, m),
            })
            .collect();
        Ok(DenoiserParams {
            embed_w: Mat::zeros(d, td),
            embed_b: vec![0.0; d],
            layers,
            final_scale: vec![0.0; d],
            final_offset: vec![0.0; d],
            unembed_w: Mat::zeros(td, d),
            unembed_b: vec![0.0; td],
        })
    }

    /// Parameter-group layout: (name, length) in flatten order. The order is
    /// the checkpoint contract: embed (w, b); per layer norm1 (scale,
    /// offset), wq, wk, wv, wo, norm2 (scale, offset), ff (gate, up, down);
    /// final norm (scale, offset); unembed (w, b). Matrices are row-major
    /// (out × in).
    pub fn layout(config: &DenoiserConfig) -> Vec<(String, usize)> {
        let (d, td, m) = (config.width, config.token_dim(), config.mlp_hidden);
        let mut groups = vec![("embed.w".to_string(), d * td), ("embed.b".to_string(), d)];
        for layer in 0..config.depth {
            let base = format!("layer{layer}");
            groups.push((format!("{base}.norm1.scale"), d));
            groups.push((format!("{base}.norm1.offset"), d));
            groups.push((format!("{base}.attn.wq"), d * d));
            groups.push((format!("{base}.attn.wk"), d * d));
            groups.push((format!("{base}.attn.wv"), d * d));
            groups.push((format!("{base}.attn.wo"), d * d));
            groups.push((format!("{base}.norm2.scale"), d));
            groups.push((format!("{base}.norm2.offset"), d));
            groups.push((format!("{base}.ff.gate"), m * d));
            groups.push((format!("{base}.ff.up"), m * d));
            groups.push((format!("{base}.ff.down"), d * m));
        }
        groups.push(("final_norm.scale".to_string(), d));
        groups.push(("final_norm.offset".to_string(), d));
        groups.push(("unembed.w".to_string(), td * d));
        groups.push(("unembed.b".to_string(), td));
        groups
    }

    pub fn num_params(config: &DenoiserConfig) -> usize {
        Self::layout(config).iter().map(|(_, n)| n).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.embed_w.data);
        out.extend_from_slice(&self.embed_b);
        for layer in &self.layers {
            out.extend_from_slice(&layer.norm1_scale);
            out.extend_from_slice(&layer.norm1_offset);
            out.extend_from_slice(&layer.wq.data);
            out.extend_from_slice(&layer.wk.data);
            out.extend_from_slice(&layer.wv.data);
            out.extend_from_slice(&layer.wo.data);
            out.extend_from_slice(&layer.norm2_scale);
            out.extend_from_slice(&layer.norm2_offset);
            out.extend_from_slice(&layer.w_gate.data);
            out.extend_from_slice(&layer.w_up.data);
            out.extend_from_slice(&layer.w_down.data);
        }
        out.extend_from_slice(&self.final_scale);
        out.extend_from_slice(&self.final_offset);
        out.extend_from_slice(&self.unembed_w.data);
        out.extend_from_slice(&self.unembed_b);
        out
    }

    pub fn unflatten(config: &DenoiserConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let expect = Self::num_params(config);
        if flat.len() != expect {
            return Err(Error::shape(format!(
                "flat parameter vector has {} entries, config needs {expect}",
                flat.len()
            )));
        }
        let (d, td, m) = (config.width, config.token_dim(), config.mlp_hidden);
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Vec<f64> {
            let s = flat[cursor..cursor + n].to_vec();
            cursor += n;
            s
        };
        let embed_w = Mat::from_vec(d, td, take(d * td))?;
        let embed_b = take(d);
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            layers.push(LayerParams {
                norm1_scale: take(d),
                norm1_offset: take(d),
                wq: Mat::from_vec(d, d, take(d * d))?,
                wk: Mat::from_vec(d, d, take(d * d))?,
                wv: Mat::from_vec(d, d, take(d * d))?,
                wo: Mat::from_vec(d, d, take(d * d))?,
                norm2_scale: take(d),
                norm2_offset: take(d),
                w_gate: Mat::from_vec(m, d, take(m * d))?,
                w_up: Mat::from_vec(m, d, take(m * d))?,
                w_down: Mat::from_vec(d, m, take(d * m))?,
            });
        }
        let final_scale = take(d);
        let final_offset = take(d);
        let unembed_w = Mat::from_vec(td, d, take(td * d))?;
        let unembed_b = take(td);
        Ok(DenoiserParams {
            embed_w,
            embed_b,
            layers,
            final_scale,
            final_offset,
            unembed_w,
            unembed_b,
        })
    }
}

struct NormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

/// Pre-norm layer normalization with learned scale/offset; statistics are
/// per token over the feature axis.
fn layer_norm(x: &Mat, scale: &[f64], offset: &[f64]) -> (Mat, NormCache) {
    let (rows, cols) = (x.rows, x.cols);
    let mut y = Mat::zeros(rows, cols);
    let mut xhat = Mat::zeros(rows, cols);
    let mut inv_std = vec![0.0; rows];
    for (t, slot) in inv_std.iter_mut().enumerate() {
        let xr = x.row(t);
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        *slot = is;
        let xh = xhat.row_mut(t);
        let yr = y.row_mut(t);
        for i in 0..cols {
            let h = (xr[i] - mean) * is;
            xh[i] = h;
            yr[i] = scale[i] * h + offset[i];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    gy: &Mat,
    cache: &NormCache,
    scale: &[f64],
    g_scale: &mut [f64],
    g_offset: &mut [f64],
) -> Mat {
    let (rows, cols) = (gy.rows, gy.cols);
    let mut gx = Mat::zeros(rows, cols);
    for t in 0..rows {
        let g = gy.row(t);
        let xh = cache.xhat.row(t);
        let is = cache.inv_std[t];
        let mut mean_ghat = 0.0;
        let mut mean_ghat_xhat = 0.0;
        for i in 0..cols {
            g_scale[i] += g[i] * xh[i];
            g_offset[i] += g[i];
            let gh = g[i] * scale[i];
            mean_ghat += gh;
            mean_ghat_xhat += gh * xh[i];
        }
        mean_ghat /= cols as f64;
        mean_ghat_xhat /= cols as f64;
        let out = gx.row_mut(t);
        for i in 0..cols {
            let gh = g[i] * scale[i];
            out[i] = is * (gh - mean_ghat - xh[i] * mean_ghat_xhat);
        }
    }
    gx
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_derivative(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn add_bias(m: &mut Mat, b: &[f64]) {
    for t in 0..m.rows {
        let row = m.row_mut(t);
        for i in 0..row.len() {
            row[i] += b[i];
        }
    }
}

struct LayerCache {
    norm1: NormCache,
    u1: Mat,
    q_rot: Mat,
    k_rot: Mat,
    v: Mat,
    attn: AttentionCache,
    attn_out: Mat,
    norm2: NormCache,
    u2: Mat,
    gate: Mat,
    up: Mat,
}

struct CoilCache {
    tokens_in: Mat,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    hf: Mat,
}

/// Forward byproducts needed by [`backward`], plus the per-layer pattern
/// log recording which attention pattern each layer actually ran.
pub struct DenoiserCache {
    coils: Vec<CoilCache>,
    pub patterns: Vec<AttentionPattern>,
    grid_rows: usize,
    grid_cols: usize,
}

fn run_tokens(
    tokens: &Mat,
    params: &DenoiserParams,
    config: &DenoiserConfig,
    patterns: &[AttentionPattern],
    rope: &Rope2d,
) -> Result<Mat> {
    let mut h = tokens.matmul_nt(&params.embed_w);
    add_bias(&mut h, &params.embed_b);
    for (layer, pattern) in params.layers.iter().zip(patterns.iter()) {
        let (u1, _) = layer_norm(&h, &layer.norm1_scale, &layer.norm1_offset);
        let mut q = u1.matmul_nt(&layer.wq);
        let mut k = u1.matmul_nt(&layer.wk);
        let v = u1.matmul_nt(&layer.wv);
        rope.apply(&mut q, config.heads, false)?;
        rope.apply(&mut k, config.heads, false)?;
        let a = attention(&q, &k, &v, pattern, config.heads)?;
        h.add_assign(&a.matmul_nt(&layer.wo));

        let (u2, _) = layer_norm(&h, &layer.norm2_scale, &layer.norm2_offset);
        let gate = u2.matmul_nt(&layer.w_gate);
        let up = u2.matmul_nt(&layer.w_up);
        let mut act = Mat::zeros(gate.rows, gate.cols);
        for i in 0..act.data.len() {
            act.data[i] = silu(gate.data[i]) * up.data[i];
        }
        h.add_assign(&act.matmul_nt(&layer.w_down));
    }
    let (hf, _) = layer_norm(&h, &params.final_scale, &params.final_offset);
    let mut y = hf.matmul_nt(&params.unembed_w);
    add_bias(&mut y, &params.unembed_b);
    Ok(y)
}

fn run_tokens_cached(
    tokens: Mat,
    params: &DenoiserParams,
    config: &DenoiserConfig,
    patterns: &[AttentionPattern],
    rope: &Rope2d,
) -> Result<(Mat, CoilCache)> {
    let mut h = tokens.matmul_nt(&params.embed_w);
    add_bias(&mut h, &params.embed_b);
    let mut layers = Vec::with_capacity(config.depth);
    for (layer, pattern) in params.layers.iter().zip(patterns.iter()) {
        let (u1, norm1) = layer_norm(&h, &layer.norm1_scale, &layer.norm1_offset);
        let mut q = u1.matmul_nt(&layer.wq);
        let mut k = u1.matmul_nt(&layer.wk);
        let v = u1.matmul_nt(&layer.wv);
        rope.apply(&mut q, config.heads, false)?;
        rope.apply(&mut k, config.heads, false)?;
        let (attn_out, attn) = attention_with_cache(&q, &k, &v, pattern, config.heads)?;
        h.add_assign(&attn_out.matmul_nt(&layer.wo));

        let (u2, norm2) = layer_norm(&h, &layer.norm2_scale, &layer.norm2_offset);
        let gate = u2.matmul_nt(&layer.w_gate);
        let up = u2.matmul_nt(&layer.w_up);
        let mut act = Mat::zeros(gate.rows, gate.cols);
        for i in 0..act.data.len() {
            act.data[i] = silu(gate.data[i]) * up.data[i];
        }
        h.add_assign(&act.matmul_nt(&layer.w_down));
        layers.push(LayerCache {
            norm1,
            u1,
            q_rot: q,
            k_rot: k,
            v,
            attn,
            attn_out,
            norm2,
            u2,
            gate,
            up,
        });
    }
    let (hf, final_norm) = layer_norm(&h, &params.final_scale, &params.final_offset);
    let mut y = hf.matmul_nt(&params.unembed_w);
    add_bias(&mut y, &params.unembed_b);
    Ok((
        y,
        CoilCache {
            tokens_in: tokens,
            layers,
            final_norm,
            hf,
        },
    ))
}

fn validate_input(
    x: &ComplexGrid,
    params: &DenoiserParams,
    config: &DenoiserConfig,
) -> Result<(usize, usize)> {
    config.validate()?;
    if params.embed_w.rows != config.width || params.embed_w.cols != config.token_dim() {
        return Err(Error::shape("parameter shapes do not match the config"));
    }
    if params.layers.len() != config.depth {
        return Err(Error::shape(format!(
            "parameter tree has {} layers, config {}",
            params.layers.len(),
            config.depth
        )));
    }
    patch_grid(x.height(), x.width(), config.patch_size)
}

/// Denoiser forward over a (N, H, W) grid: coils are a batch dimension.
/// Returns the residual the caller adds.
pub fn forward(
    x: &ComplexGrid,
    params: &DenoiserParams,
    config: &DenoiserConfig,
) -> Result<ComplexGrid> {
    let (rows, cols) = validate_input(x, params, config)?;
    let patterns = config.resolve_patterns(rows, cols)?;
    let rope = Rope2d::new(config.head_dim(), rows, cols)?;
    let (h, w, p) = (x.height(), x.width(), config.patch_size);
    let slabs: Vec<Result<Vec<Complex64>>> = (0..x.coils())
        .into_par_iter()
        .map(|coil| {
            let tokens = patchify(x.coil(coil), h, w, p)?;
            let y = run_tokens(&tokens, params, config, &patterns, &rope)?;
            unpatchify(&y, h, w, p)
        })
        .collect();
    let mut out = ComplexGrid::zeros(x.coils(), h, w)?;
    for (coil, slab) in slabs.into_iter().enumerate() {
        out.coil_mut(coil).copy_from_slice(&slab?);
    }
    out.check_finite("denoiser output")?;
    Ok(out)
}

/// Forward pass that keeps everything [`backward`] needs.
pub fn forward_with_cache(
    x: &ComplexGrid,
    params: &DenoiserParams,
    config: &DenoiserConfig,
) -> Result<(ComplexGrid, DenoiserCache)> {
    let (rows, cols) = validate_input(x, params, config)?;
    let patterns = config.resolve_patterns(rows, cols)?;
    let rope = Rope2d::new(config.head_dim(), rows, cols)?;
    let (h, w, p) = (x.height(), x.width(), config.patch_size);
    let mut out = ComplexGrid::zeros(x.coils(), h, w)?;
    let mut coils = Vec::with_capacity(x.coils());
    for coil in 0..x.coils() {
        let tokens = patchify(x.coil(coil), h, w, p)?;
        let (y, cache) = run_tokens_cached(tokens, params, config, &patterns, &rope)?;
        out.coil_mut(coil)
            .copy_from_slice(&unpatchify(&y, h, w, p)?);
        coils.push(cache);
    }
    out.check_finite("denoiser output")?;
    Ok((
        out,
        DenoiserCache {
            coils,
            patterns,
            grid_rows: rows,
            grid_cols: cols,
        },
    ))
}

/// Reverse-mode pass. `g_out` carries ∂L/∂(re, im) of the residual output;
/// parameter gradients accumulate into `grads` and the input gradient grid
/// is returned.
pub fn backward(
    g_out: &ComplexGrid,
    params: &DenoiserParams,
    config: &DenoiserConfig,
    cache: &DenoiserCache,
    grads: &mut DenoiserParams,
) -> Result<ComplexGrid> {
    let (h, w, p) = (g_out.height(), g_out.width(), config.patch_size);
    if cache.coils.len() != g_out.coils() {
        return Err(Error::shape(format!(
            "cache has {} coils, gradient grid {}",
            cache.coils.len(),
            g_out.coils()
        )));
    }
    let rope = Rope2d::new(config.head_dim(), cache.grid_rows, cache.grid_cols)?;
    let mut g_input = ComplexGrid::zeros(g_out.coils(), h, w)?;

    for (coil, cc) in cache.coils.iter().enumerate() {
        // Unpatchify adjoint = patchify of the gradient image.
        let gy = patchify(g_out.coil(coil), h, w, p)?;

        // Unembed: y = hf·Wᵀ + b.
        for t in 0..gy.rows {
            for (i, &g) in gy.row(t).iter().enumerate() {
                grads.unembed_b[i] += g;
            }
        }
        Mat::accumulate_outer(&mut grads.unembed_w, &gy, &cc.hf);
        let g_hf = gy.matmul_nn(&params.unembed_w);
        let mut g_h = layer_norm_backward(
            &g_hf,
            &cc.final_norm,
            &params.final_scale,
            &mut grads.final_scale,
            &mut grads.final_offset,
        );

        for (li, layer) in params.layers.iter().enumerate().rev() {
            let lc = &cc.layers[li];
            let gl = &mut grads.layers[li];
            let pattern = &cache.patterns[li];

            // Feedforward sublayer: h_out = h_mid + (silu(G)⊙P)·Wdᵀ; the
            // residual passthrough leaves g_h in place.
            let mut act = Mat::zeros(lc.gate.rows, lc.gate.cols);
            for i in 0..act.data.len() {
                act.data[i] = silu(lc.gate.data[i]) * lc.up.data[i];
            }
            Mat::accumulate_outer(&mut gl.w_down, &g_h, &act);
            let g_act = g_h.matmul_nn(&layer.w_down);
            let mut g_gate = Mat::zeros(lc.gate.rows, lc.gate.cols);
            let mut g_up = Mat::zeros(lc.up.rows, lc.up.cols);
            for i in 0..g_act.data.len() {
                let g = g_act.data[i];
                g_gate.data[i] = g * lc.up.data[i] * silu_derivative(lc.gate.data[i]);
                g_up.data[i] = g * silu(lc.gate.data[i]);
            }
            Mat::accumulate_outer(&mut gl.w_gate, &g_gate, &lc.u2);
            Mat::accumulate_outer(&mut gl.w_up, &g_up, &lc.u2);
            let mut g_u2 = g_gate.matmul_nn(&layer.w_gate);
            g_u2.add_assign(&g_up.matmul_nn(&layer.w_up));
            let g_norm2_in = layer_norm_backward(
                &g_u2,
                &lc.norm2,
                &layer.norm2_scale,
                &mut gl.norm2_scale,
                &mut gl.norm2_offset,
            );
            g_h.add_assign(&g_norm2_in);

            // Attention sublayer: h_mid = h_in + A·Woᵀ.
            Mat::accumulate_outer(&mut gl.wo, &g_h, &lc.attn_out);
            let g_a = g_h.matmul_nn(&layer.wo);
            let (mut g_q, mut g_k, g_v) = attention_backward(
                &g_a,
                &lc.q_rot,
                &lc.k_rot,
                &lc.v,
                pattern,
                config.heads,
                &lc.attn,
            )?;
            rope.apply(&mut g_q, config.heads, true)?;
            rope.apply(&mut g_k, config.heads, true)?;
            Mat::accumulate_outer(&mut gl.wq, &g_q, &lc.u1);
            Mat::accumulate_outer(&mut gl.wk, &g_k, &lc.u1);
            Mat::accumulate_outer(&mut gl.wv, &g_v, &lc.u1);
            let mut g_u1 = g_q.matmul_nn(&layer.wq);
            g_u1.add_assign(&g_k.matmul_nn(&layer.wk));
            g_u1.add_assign(&g_v.matmul_nn(&layer.wv));
            let g_norm1_in = layer_norm_backward(
                &g_u1,
                &lc.norm1,
                &layer.norm1_scale,
                &mut gl.norm1_scale,
                &mut gl.norm1_offset,
            );
            g_h.add_assign(&g_norm1_in);
        }

        // Embed: h⁰ = X·Weᵀ + be.
        for t in 0..g_h.rows {
            for (i, &g) in g_h.row(t).iter().enumerate() {
                grads.embed_b[i] += g;
            }
        }
        Mat::accumulate_outer(&mut grads.embed_w, &g_h, &cc.tokens_in);
        let g_tokens = g_h.matmul_nn(&params.embed_w);
        g_input
            .coil_mut(coil)
            .copy_from_slice(&unpatchify(&g_tokens, h, w, p)?);
    }
    Ok(g_input)
}
