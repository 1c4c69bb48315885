//! Scaled dot-product attention with full or row-band sparsity patterns.
//!
//! The row-band pattern admits, for a query patch at grid row r, every key
//! whose patch row lies within n of r (all columns). Because tokens are laid
//! out row-major over the patch grid, the admitted key set is a single
//! contiguous index range, which both the forward tiles and the backward
//! pass exploit.

use rayon::prelude::*;

use super::mat::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternKind {
    Full,
    RowBand { halfwidth: usize },
}

/// Attention sparsity pattern over an R_p × C_p patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionPattern {
    rows: usize,
    cols: usize,
    kind: PatternKind,
}

impl AttentionPattern {
    pub fn full(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::arg("pattern extents must be >= 1"));
        }
        Ok(AttentionPattern {
            rows,
            cols,
            kind: PatternKind::Full,
        })
    }

    pub fn row_band(rows: usize, cols: usize, halfwidth: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::arg("pattern extents must be >= 1"));
        }
        Ok(AttentionPattern {
            rows,
            cols,
            kind: PatternKind::RowBand { halfwidth },
        })
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn grid_rows(&self) -> usize {
        self.rows
    }

    pub fn grid_cols(&self) -> usize {
        self.cols
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_full(&self) -> bool {
        match self.kind {
            PatternKind::Full => true,
            // A band covering every row is full in effect.
            PatternKind::RowBand { halfwidth } => halfwidth + 1 >= self.rows,
        }
    }

    /// Membership predicate: may query token `q` attend to key token `k`.
    pub fn admits(&self, q: usize, k: usize) -> bool {
        match self.kind {
            PatternKind::Full => true,
            PatternKind::RowBand { halfwidth } => {
                let qr = (q / self.cols) as i64;
                let kr = (k / self.cols) as i64;
                (qr - kr).unsigned_abs() as usize <= halfwidth
            }
        }
    }

    /// Contiguous admitted key range [start, end) for a query token.
    /// Nonempty for every query: a band always covers the query's own row.
    pub fn admitted_range(&self, q: usize) -> (usize, usize) {
        match self.kind {
            PatternKind::Full => (0, self.tokens()),
            PatternKind::RowBand { halfwidth } => {
                let qr = q / self.cols;
                let lo = qr.saturating_sub(halfwidth);
                let hi = (qr + halfwidth).min(self.rows - 1);
                (lo * self.cols, (hi + 1) * self.cols)
            }
        }
    }

    /// Analytic keys-per-query count: C_p·min(2n+1, R_p) for a band, T for
    /// full. Edge rows see fewer keys; this is the interior count used by
    /// the flop model.
    pub fn keys_per_query(&self) -> usize {
        match self.kind {
            PatternKind::Full => self.tokens(),
            PatternKind::RowBand { halfwidth } => (2 * halfwidth + 1).min(self.rows) * self.cols,
        }
    }
}

/// Analytic multiply count for one attention pass (QKᵀ plus weights·V) at
/// the given embedding width.
pub fn attention_flops(pattern: &AttentionPattern, width: usize) -> u64 {
    2 * pattern.tokens() as u64 * pattern.keys_per_query() as u64 * width as u64
}

fn validate(q: &Mat, k: &Mat, v: &Mat, pattern: &AttentionPattern, heads: usize) -> Result<usize> {
    if q.rows != k.rows || q.rows != v.rows || q.rows != pattern.tokens() {
        return Err(Error::shape(format!(
            "token counts disagree: q {}, k {}, v {}, pattern {}",
            q.rows,
            k.rows,
            v.rows,
            pattern.tokens()
        )));
    }
    if q.cols != k.cols || q.cols != v.cols {
        return Err(Error::shape("q/k/v widths disagree"));
    }
    if heads == 0 || !q.cols.is_multiple_of(heads) {
        return Err(Error::shape(format!(
            "width {} does not split into {heads} heads",
            q.cols
        )));
    }
    Ok(q.cols / heads)
}

#[allow(clippy::too_many_arguments)]
fn attend_query(
    out_tok: &mut [f64],
    q: &Mat,
    k: &Mat,
    v: &Mat,
    t: usize,
    range: (usize, usize),
    heads: usize,
    dh: usize,
    scale: f64,
    logits: &mut Vec<f64>,
    mut record: Option<&mut [f64]>,
) {
    let (start, end) = range;
    let len = end - start;
    logits.resize(len, 0.0);
    for h in 0..heads {
        let off = h * dh;
        let qh = &q.row(t)[off..off + dh];
        let mut max_logit = f64::NEG_INFINITY;
        for (slot, j) in (start..end).enumerate() {
            let kh = &k.row(j)[off..off + dh];
            let mut acc = 0.0;
            for i in 0..dh {
                acc += qh[i] * kh[i];
            }
            let l = acc * scale;
            logits[slot] = l;
            if l > max_logit {
                max_logit = l;
            }
        }
        let mut denom = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max_logit).exp();
            denom += *l;
        }
        let inv = 1.0 / denom;
        let out_h = &mut out_tok[off..off + dh];
        for (slot, j) in (start..end).enumerate() {
            let w = logits[slot] * inv;
            if let Some(buf) = record.as_deref_mut() {
                buf[h * len + slot] = w;
            }
            let vh = &v.row(j)[off..off + dh];
            for i in 0..dh {
                out_h[i] += w * vh[i];
            }
        }
    }
}

/// Pattern-restricted multi-head attention. Softmax runs only over admitted
/// keys; disallowed pairs contribute exactly zero weight.
pub fn attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    pattern: &AttentionPattern,
    heads: usize,
) -> Result<Mat> {
    let dh = validate(q, k, v, pattern, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let t_count = q.rows;
    let mut out = Mat::zeros(t_count, q.cols);

    // Tile queries; each tile owns a disjoint slice of the output, so the
    // parallel path computes bit-identical values to the serial one.
    let tile = 32usize;
    let cols = q.cols;
    let work: Vec<(usize, &mut [f64])> = out
        .data
        .chunks_mut(tile * cols)
        .enumerate()
        .map(|(i, chunk)| (i * tile, chunk))
        .collect();
    let run_tile = |(t0, chunk): (usize, &mut [f64])| {
        let mut logits: Vec<f64> = Vec::new();
        for (local, out_tok) in chunk.chunks_mut(cols).enumerate() {
            let t = t0 + local;
            attend_query(
                out_tok,
                q,
                k,
                v,
                t,
                pattern.admitted_range(t),
                heads,
                dh,
                scale,
                &mut logits,
                None,
            );
        }
    };
    // Parallelism pays only for large grids; small token counts stay serial.
    if t_count * pattern.keys_per_query() >= 1 << 16 {
        work.into_par_iter().for_each(run_tile);
    } else {
        work.into_iter().for_each(run_tile);
    }
    Ok(out)
}

/// Softmax weights cached by [`attention_with_cache`]; layout is
/// per-query blocks of `heads × range_len`, concatenated in query order.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    offsets: Vec<usize>,
    weights: Vec<f64>,
}

impl AttentionCache {
    /// Weight block for one query: heads × admitted-range length.
    fn block(&self, t: usize) -> &[f64] {
        &self.weights[self.offsets[t]..self.offsets[t + 1]]
    }
}

/// Attention forward that also records softmax weights for the backward
/// pass. Serial; training-scale token counts only.
pub fn attention_with_cache(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    pattern: &AttentionPattern,
    heads: usize,
) -> Result<(Mat, AttentionCache)> {
    let dh = validate(q, k, v, pattern, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let t_count = q.rows;

    let mut offsets = Vec::with_capacity(t_count + 1);
    offsets.push(0usize);
    for t in 0..t_count {
        let (s, e) = pattern.admitted_range(t);
        offsets.push(offsets[t] + heads * (e - s));
    }
    let mut weights = vec![0.0; offsets[t_count]];
    let mut out = Mat::zeros(t_count, q.cols);
    let mut logits: Vec<f64> = Vec::new();
    let cols = out.cols;
    for t in 0..t_count {
        let block = &mut weights[offsets[t]..offsets[t + 1]];
        attend_query(
            &mut out.data[t * cols..(t + 1) * cols],
            q,
            k,
            v,
            t,
            pattern.admitted_range(t),
            heads,
            dh,
            scale,
            &mut logits,
            Some(block),
        );
    }
    Ok((out, AttentionCache { offsets, weights }))
}

/// Reverse-mode pass for [`attention_with_cache`]. Returns gradients with
/// respect to q, k, v (all post-rotation).
pub fn attention_backward(
    g_out: &Mat,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    pattern: &AttentionPattern,
    heads: usize,
    cache: &AttentionCache,
) -> Result<(Mat, Mat, Mat)> {
    let dh = validate(q, k, v, pattern, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let t_count = q.rows;
    let mut gq = Mat::zeros(t_count, q.cols);
    let mut gk = Mat::zeros(t_count, q.cols);
    let mut gv = Mat::zeros(t_count, q.cols);

    for t in 0..t_count {
        let (start, end) = pattern.admitted_range(t);
        let len = end - start;
        let block = cache.block(t);
        for h in 0..heads {
            let off = h * dh;
            let w = &block[h * len..(h + 1) * len];
            let go = &g_out.row(t)[off..off + dh];
            // g_w[j] = g_out · v_j ; g_logit = w ⊙ (g_w − Σ w g_w)
            let mut gw = vec![0.0; len];
            let mut dot = 0.0;
            for (slot, j) in (start..end).enumerate() {
                let vh = &v.row(j)[off..off + dh];
                let mut acc = 0.0;
                for i in 0..dh {
                    acc += go[i] * vh[i];
                }
                gw[slot] = acc;
                dot += w[slot] * acc;
            }
            let qh = &q.row(t)[off..off + dh];
            for (slot, j) in (start..end).enumerate() {
                let wl = w[slot];
                let gvj = &mut gv.row_mut(j)[off..off + dh];
                for i in 0..dh {
                    gvj[i] += wl * go[i];
                }
                let glogit = wl * (gw[slot] - dot) * scale;
                if glogit == 0.0 {
                    continue;
                }
                let kh = &k.row(j)[off..off + dh];
                let gqt = &mut gq.row_mut(t)[off..off + dh];
                for i in 0..dh {
                    gqt[i] += glogit * kh[i];
                }
                let gkj = &mut gk.row_mut(j)[off..off + dh];
                for i in 0..dh {
                    gkj[i] += glogit * qh[i];
                }
            }
        }
    }
    Ok((gq, gk, gv))
}
