//! Bilinear sampling and multi-scale deformable cross-attention for a single
//! query.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mlp::Linear;
use super::tensor::{count_macs, softmax_in_place, Tensor2};
use super::NumericError;

/// `h × w` grid of `C`-channel features, row-major. `token_index` maps each
/// cell to a row of the token stream it came from (`None` for cells with no
/// active token).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub features: Tensor2,
    pub token_index: Vec<Option<usize>>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, features: Tensor2) -> Result<Self, NumericError> {
        if features.rows() != h * w {
            return Err(NumericError::ShapeMismatch(format!("{} rows for a {h}x{w} map", features.rows())));
        }
        Ok(Self { h, w, token_index: (0..h * w).map(Some).collect(), features })
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// 2×2 average pooling with stride 2 (odd edges dropped).
    pub fn avg_pool2(&self) -> FeatureMap {
        let (h, w) = ((self.h / 2).max(1), (self.w / 2).max(1));
        let c = self.channels();
        let features = Tensor2::from_fn(h * w, c, |i, ch| {
            let (r, col) = (i / w, i % w);
            let mut s = 0.0;
            let mut n = 0.0;
            for dr in 0..2 {
                for dc in 0..2 {
                    let (rr, cc) = (2 * r + dr, 2 * col + dc);
                    if rr < self.h && cc < self.w {
                        s += self.features.get(rr * self.w + cc, ch);
                        n += 1.0;
                    }
                }
            }
            s / n
        });
        FeatureMap { h, w, features, token_index: vec![None; h * w] }
    }
}

/// The four bilinear neighbors of continuous grid coordinate `(x, y)` (x
/// along columns) with their weights; coordinates are clamped to the grid.
pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

fn accumulate_bilinear(fm: &FeatureMap, x: f64, y: f64, scale: f64, out: &mut [f64]) -> [(usize, f64); 4] {
    let taps = bilinear_taps(fm.h, fm.w, x, y);
    for &(cell, tw) in &taps {
        let coef = scale * tw;
        for (o, f) in out.iter_mut().zip(fm.features.row(cell)) {
            *o += coef * f;
        }
    }
    count_macs(4 * fm.channels() as u64);
    taps
}

/// Bilinear interpolation of the feature map at `(x, y)` in grid units.
pub fn bilinear_sample(fm: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let mut out = vec![0.0; fm.channels()];
    accumulate_bilinear(fm, x, y, 1.0, &mut out);
    out
}

/// Learned projections of a deformable cross-attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformableParams {
    pub levels: usize,
    pub points: usize,
    /// D → levels·points·2 sampling offsets, in level grid units.
    pub offset_proj: Linear,
    /// D → levels·points attention logits.
    pub weight_proj: Linear,
}

impl DeformableParams {
    pub fn validate(&self, dim: usize) -> Result<(), NumericError> {
        let lp = self.levels * self.points;
        if self.offset_proj.in_dim() != dim || self.offset_proj.out_dim() != 2 * lp {
            return Err(NumericError::ShapeMismatch("offset projection shape".into()));
        }
        if self.weight_proj.in_dim() != dim || self.weight_proj.out_dim() != lp {
            return Err(NumericError::ShapeMismatch("weight projection shape".into()));
        }
        Ok(())
    }
}

/// Where one query's sampling weight landed on token rows, renormalized to
/// sum to one over tokens that exist.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Footprint {
    pub entries: Vec<(usize, f64)>,
}

impl Footprint {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn one_hot(token: usize) -> Self {
        Footprint { entries: vec![(token, 1.0)] }
    }
}

/// Context vector for one query: softmax-weighted bilinear samples at
/// `ref_point` plus learned offsets on every pyramid level. Also returns the
/// footprint of the sampling weights on the token rows behind level maps.
pub fn deformable_cross_attention(
    query: &[f64],
    ref_point: (f64, f64),
    pyramid: &[FeatureMap],
    params: &DeformableParams,
) -> Result<(Vec<f64>, Footprint), NumericError> {
    if pyramid.len() != params.levels {
        return Err(NumericError::ShapeMismatch(format!("{} pyramid levels, params expect {}", pyramid.len(), params.levels)));
    }
    params.validate(query.len())?;
    let c = pyramid[0].channels();
    if pyramid.iter().any(|l| l.channels() != c) {
        return Err(NumericError::ShapeMismatch("pyramid levels differ in channels".into()));
    }
    let offsets = params.offset_proj.forward_vec(query)?;
    let mut weights = params.weight_proj.forward_vec(query)?;
    softmax_in_place(&mut weights);

    let (u, v) = (ref_point.0.clamp(0.0, 1.0), ref_point.1.clamp(0.0, 1.0));
    let mut context = vec![0.0; c];
    let mut scatter: BTreeMap<usize, f64> = BTreeMap::new();
    for (l, fm) in pyramid.iter().enumerate() {
        for p in 0..params.points {
            let s = l * params.points + p;
            let x = u * (fm.w - 1) as f64 + offsets[2 * s];
            let y = v * (fm.h - 1) as f64 + offsets[2 * s + 1];
            let taps = accumulate_bilinear(fm, x, y, weights[s], &mut context);
            for (cell, tw) in taps {
                if let Some(tok) = fm.token_index[cell] {
                    *scatter.entry(tok).or_insert(0.0) += weights[s] * tw;
                }
            }
        }
    }
    let total: f64 = scatter.values().sum();
    let entries = if total > 0.0 { scatter.into_iter().map(|(t, w)| (t, w / total)).collect() } else { Vec::new() };
    Ok((context, Footprint { entries }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(h, w, Tensor2::from_fn(h * w, 2, |i, c| (i * (c + 1)) as f64)).unwrap()
    }

    #[test]
    fn lattice_point() {
        let fm = ramp(3, 4);
        assert_eq!(bilinear_sample(&fm, 2.0, 1.0), fm.features.row(6).to_vec());
    }

    #[test]
    fn constant_map() {
        let fm = FeatureMap::new(3, 3, Tensor2::from_fn(9, 3, |_, _| 2.5)).unwrap();
        for (x, y) in [(0.3, 1.7), (-5.0, 9.0), (1.5, 1.5)] {
            assert!(bilinear_sample(&fm, x, y).iter().all(|v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let fm = ramp(3, 4);
        let s = bilinear_sample(&fm, 1.5, 0.5);
        let idx = [1, 2, 5, 6];
        for c in 0..2 {
            let mean: f64 = idx.iter().map(|&i| fm.features.get(i, c)).sum::<f64>() / 4.0;
            assert!((s[c] - mean).abs() < 1e-12);
        }
    }

    fn params(rng: &mut ChaCha8Rng, d: usize, levels: usize, points: usize, zero_offsets: bool) -> DeformableParams {
        let mut offset_proj = Linear::random(rng, d, levels * points * 2, 1.0);
        if zero_offsets {
            offset_proj = Linear::zeros(d, levels * points * 2);
        }
        DeformableParams { levels, points, offset_proj, weight_proj: Linear::random(rng, d, levels * points, 1.0) }
    }

    #[test]
    fn degenerate_sampling_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fm = ramp(5, 6);
        let p = params(&mut rng, 4, 1, 1, true);
        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (ctx, fp) = deformable_cross_attention(&q, (0.3, 0.6), &[fm.clone()], &p).unwrap();
        let direct = bilinear_sample(&fm, 0.3 * 5.0, 0.6 * 4.0);
        for (a, b) in ctx.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((fp.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_pyramid_gives_constant_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l0 = FeatureMap::new(4, 4, Tensor2::from_fn(16, 3, |_, c| c as f64 - 1.0)).unwrap();
        let l1 = l0.avg_pool2();
        let p = params(&mut rng, 3, 2, 3, false);
        let (ctx, fp) = deformable_cross_attention(&[0.2, -0.4, 0.9], (0.5, 0.1), &[l0, l1], &p).unwrap();
        for (c, v) in ctx.iter().enumerate() {
            assert!((v - (c as f64 - 1.0)).abs() < 1e-12);
        }
        // only level 0 maps to tokens
        assert!((fp.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn footprint_skips_missing_tokens() {
        let mut fm = ramp(2, 2);
        fm.token_index = vec![Some(10), None, None, None];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = params(&mut rng, 2, 1, 2, true);
        let (_, fp) = deformable_cross_attention(&[0.1, 0.2], (0.4, 0.4), &[fm], &p).unwrap();
        assert_eq!(fp.entries.len(), 1);
        assert_eq!(fp.entries[0].0, 10);
        assert!((fp.entries[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn level_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = params(&mut rng, 2, 2, 1, true);
        assert!(deformable_cross_attention(&[0.0, 0.0], (0.0, 0.0), &[ramp(2, 2)], &p).is_err());
    }
}
