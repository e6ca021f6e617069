//! Scaled dot-product multi-head attention: dense, grouped (arbitrary
//! partitions of the rows) and windowed over a token grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{count_macs, softmax_in_place, Tensor2};
use super::NumericError;

/// Head-averaged attention weights, one row per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub weights: Tensor2,
}

impl AttentionTrace {
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.weights.rows()).map(|r| self.weights.row(r).iter().sum()).collect()
    }
}

/// `softmax(Q Kᵀ / √d_h) V` per head; heads split the feature columns.
pub fn attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, heads: usize) -> Result<(Tensor2, AttentionTrace), NumericError> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 || v.cols() % heads != 0 {
        return Err(NumericError::ShapeMismatch(format!("feature dims {d}/{} not divisible by {heads} heads", v.cols())));
    }
    if k.cols() != d {
        return Err(NumericError::ShapeMismatch("query/key feature dims differ".into()));
    }
    if k.rows() != v.rows() {
        return Err(NumericError::ShapeMismatch("key/value row counts differ".into()));
    }
    let (nq, nk, dv) = (q.rows(), k.rows(), v.cols());
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor2::zeros(nq, dv);
    let mut trace = Tensor2::zeros(nq, nk);
    let mut scores = vec![0.0; nk];
    for h in 0..heads {
        let (qo, vo) = (h * dh, h * dvh);
        for i in 0..nq {
            let qi = &q.row(i)[qo..qo + dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k.row(j)[qo..qo + dh];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut scores);
            let orow = &mut out.row_mut(i)[vo..vo + dvh];
            for (j, &p) in scores.iter().enumerate() {
                let vj = &v.row(j)[vo..vo + dvh];
                for (o, x) in orow.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
            let trow = trace.row_mut(i);
            for (t, &p) in trow.iter_mut().zip(&scores) {
                *t += p / heads as f64;
            }
        }
    }
    count_macs((nq * nk * d + nq * nk * dv) as u64);
    Ok((out, AttentionTrace { weights: trace }))
}

/// Self-attention restricted to rows sharing a group id.
pub fn grouped_attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, groups: &[u64], heads: usize) -> Result<Tensor2, NumericError> {
    if groups.len() != q.rows() || q.rows() != k.rows() || k.rows() != v.rows() {
        return Err(NumericError::ShapeMismatch("grouped attention needs one group id per row".into()));
    }
    let mut members: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut out = Tensor2::zeros(q.rows(), v.cols());
    for idx in members.values() {
        let (o, _) = attention(&q.select_rows(idx), &k.select_rows(idx), &v.select_rows(idx), heads)?;
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(o.row(r));
        }
    }
    Ok(out)
}

/// Window id of grid cell `(row, col)` for square windows of side `window`.
pub fn window_id(row: usize, col: usize, grid_w: usize, window: usize) -> u64 {
    let windows_per_row = grid_w.div_ceil(window);
    ((row / window) * windows_per_row + col / window) as u64
}

/// Self-attention of row-major `h × w` grid tokens within non-overlapping
/// `window × window` blocks. The grid is zero-padded to window multiples and
/// outputs are cropped back.
pub fn windowed_attention(tokens: &Tensor2, grid: (usize, usize), window: usize, heads: usize) -> Result<Tensor2, NumericError> {
    windowed_attention_qkv(tokens, tokens, tokens, grid, window, heads)
}

pub fn windowed_attention_qkv(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    grid: (usize, usize),
    window: usize,
    heads: usize,
) -> Result<Tensor2, NumericError> {
    let (h, w) = grid;
    if window == 0 || q.rows() != h * w || k.rows() != h * w || v.rows() != h * w {
        return Err(NumericError::ShapeMismatch(format!("{} tokens for a {h}x{w} grid", q.rows())));
    }
    let (hp, wp) = (h.div_ceil(window) * window, w.div_ceil(window) * window);
    let pad = |t: &Tensor2| {
        Tensor2::from_fn(hp * wp, t.cols(), |i, c| {
            let (r, col) = (i / wp, i % wp);
            if r < h && col < w {
                t.get(r * w + col, c)
            } else {
                0.0
            }
        })
    };
    let (qp, kp, vp) = (pad(q), pad(k), pad(v));
    let groups: Vec<u64> = (0..hp * wp).map(|i| window_id(i / wp, i % wp, wp, window)).collect();
    let out = grouped_attention(&qp, &kp, &vp, &groups, heads)?;
    Ok(Tensor2::from_fn(h * w, v.cols(), |i, c| out.get((i / w) * wp + i % w, c)))
}
