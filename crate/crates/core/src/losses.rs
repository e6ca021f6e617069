//! Training objective: set-matching detection loss, relevance loss and the
//! auxiliary image-space loss, each with an analytic gradient.
//!
//! Sums run over sorted terms so reordering inputs never changes a result.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{hungarian, CostMatrix};
use crate::corridor::FrameLabels;
use crate::dataset::Frame;
use crate::numeric::Tensor2;
use crate::sparsity::camera::ToyCamera;
use crate::sparsity::heads::{BoxParams, BOX_PARAMS};
use crate::sparsity::relevance::RelevanceKind;
use crate::sparsity::stream::QuerySet;

/// Clamp used by callers before the focal losses.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction {value} at {index} is outside (0, 1)")]
    Domain { index: usize, value: f64 },
    #[error("target {value} at {index} is not a valid label")]
    InvalidTarget { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("frame {frame}: no relevance label for agent {agent}")]
    MissingLabels { frame: String, agent: String },
    #[error("relevance term carries an embedding gradient; it must stop at the head inputs")]
    StopGradient,
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_rel: f64,
    pub lambda_aux: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub gaussian_alpha: f64,
    pub gaussian_beta: f64,
    pub match_class_weight: f64,
    pub match_l1_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rel: 1.0,
            lambda_aux: 0.25,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            gaussian_alpha: 2.0,
            gaussian_beta: 4.0,
            match_class_weight: 2.0,
            match_l1_weight: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.lambda_rel,
            self.lambda_aux,
            self.focal_alpha,
            self.focal_gamma,
            self.gaussian_alpha,
            self.gaussian_beta,
            self.match_class_weight,
            self.match_l1_weight,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LossError::InvalidConfig("weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det_class: f64,
    pub det_l1: f64,
    pub rel: f64,
    pub aux: f64,
    pub total: f64,
}

/// Scalar loss and its gradient with respect to the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Order-independent sum: terms sorted, then compensated summation.
pub fn stable_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &x in terms.iter() {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn check_probs(preds: &[f64]) -> Result<(), LossError> {
    match preds.iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
        Some(i) => Err(LossError::Domain { index: i, value: preds[i] }),
        None => Ok(()),
    }
}

/// Mean of `−α (1−p_t)^γ log p_t` with `p_t = p` for `y = 1` and `1 − p`
/// for `y = 0`. α weighs both classes alike.
pub fn focal_loss(preds: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> Result<LossValue, LossError> {
    if preds.len() != targets.len() {
        return Err(LossError::ShapeMismatch(format!("{} predictions, {} targets", preds.len(), targets.len())));
    }
    check_probs(preds)?;
    if let Some(i) = targets.iter().position(|y| *y != 0.0 && *y != 1.0) {
        return Err(LossError::InvalidTarget { index: i, value: targets[i] });
    }
    let n = preds.len().max(1) as f64;
    let mut terms = Vec::with_capacity(preds.len());
    let mut grad = Vec::with_capacity(preds.len());
    for (&p, &y) in preds.iter().zip(targets) {
        let (pt, sign) = if y == 1.0 { (p, 1.0) } else { (1.0 - p, -1.0) };
        let q = 1.0 - pt;
        terms.push(-alpha * q.powf(gamma) * pt.ln());
        let mod_grad = if gamma == 0.0 { 0.0 } else { alpha * gamma * q.powf(gamma - 1.0) * pt.ln() };
        let d_pt = mod_grad - alpha * q.powf(gamma) / pt;
        grad.push(sign * d_pt / n);
    }
    Ok(LossValue { value: stable_sum(&mut terms) / n, grad })
}

/// Heatmap focal loss on soft targets: `−(1−p)^α log p` where `y = 1`,
/// `−(1−y)^β p^α log(1−p)` elsewhere, normalized by the positive count
/// (at least one).
pub fn gaussian_focal_loss(preds: &[f64], targets: &[f64], alpha: f64, beta: f64) -> Result<LossValue, LossError> {
    if preds.len() != targets.len() {
        return Err(LossError::ShapeMismatch(format!("{} predictions, {} targets", preds.len(), targets.len())));
    }
    check_probs(preds)?;
    if let Some(i) = targets.iter().position(|y| !(0.0..=1.0).contains(y)) {
        return Err(LossError::InvalidTarget { index: i, value: targets[i] });
    }
    let positives = targets.iter().filter(|&&y| y == 1.0).count().max(1) as f64;
    let mut terms = Vec::with_capacity(preds.len());
    let mut grad = Vec::with_capacity(preds.len());
    for (&p, &y) in preds.iter().zip(targets) {
        if y == 1.0 {
            terms.push(-(1.0 - p).powf(alpha) * p.ln());
            let g = alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() - (1.0 - p).powf(alpha) / p;
            grad.push(g / positives);
        } else {
            let w = (1.0 - y).powf(beta);
            terms.push(-w * p.powf(alpha) * (1.0 - p).ln());
            let g = -w * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p));
            grad.push(g / positives);
        }
    }
    Ok(LossValue { value: stable_sum(&mut terms) / positives, grad })
}

/// Mean absolute difference over matched pairs and parameters. The
/// subgradient at zero difference is 0. Gradient is w.r.t. `pred`.
pub fn l1_box_loss(pred: &[BoxParams], gt: &[BoxParams]) -> Result<LossValue, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::ShapeMismatch(format!("{} predicted boxes, {} targets", pred.len(), gt.len())));
    }
    let n = (pred.len() * BOX_PARAMS).max(1) as f64;
    let mut terms = Vec::with_capacity(pred.len() * BOX_PARAMS);
    let mut grad = Vec::with_capacity(pred.len() * BOX_PARAMS);
    for (p, g) in pred.iter().zip(gt) {
        for k in 0..BOX_PARAMS {
            let d = p[k] - g[k];
            terms.push(d.abs());
            grad.push(if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            });
        }
    }
    Ok(LossValue { value: stable_sum(&mut terms) / n, grad })
}

/// A ground-truth target for set matching: class index and ego-frame box
/// parameters (center absolute, not anchor-relative).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchTarget {
    pub class: usize,
    pub params: BoxParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingLoss {
    pub det_class: f64,
    pub det_l1: f64,
    /// `(prediction, target)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub matching_cost: f64,
    pub grad_probs: Tensor2,
    pub grad_boxes: Tensor2,
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Hungarian matching on `w_cls·(1 − p_class) + w_L1·meanL1`, then focal on
/// every class score (one-hot for matched rows, background otherwise) and
/// L1 on matched boxes.
pub fn set_matching_loss(probs: &Tensor2, boxes: &Tensor2, targets: &[MatchTarget], cfg: &LossConfig) -> Result<MatchingLoss, LossError> {
    let (q, c) = probs.shape();
    if boxes.rows() != q || boxes.cols() != BOX_PARAMS {
        return Err(LossError::ShapeMismatch("box predictions must be Q x 10".into()));
    }
    if let Some(t) = targets.iter().find(|t| t.class >= c) {
        return Err(LossError::ShapeMismatch(format!("target class {} with {c} class scores", t.class)));
    }
    let mut costs = Vec::with_capacity(q * targets.len());
    for i in 0..q {
        for t in targets {
            costs.push(cfg.match_class_weight * (1.0 - probs.get(i, t.class)) + cfg.match_l1_weight * mean_abs_diff(boxes.row(i), &t.params));
        }
    }
    let assignment = if targets.is_empty() || q == 0 {
        crate::assignment::Assignment { pairs: Vec::new(), total_cost: 0.0 }
    } else {
        hungarian(&CostMatrix::new(q, targets.len(), costs).map_err(|e| LossError::ShapeMismatch(e.to_string()))?)
    };

    let mut cls_targets = vec![0.0; q * c];
    for &(i, j) in &assignment.pairs {
        cls_targets[i * c + targets[j].class] = 1.0;
    }
    let focal = focal_loss(probs.data(), &cls_targets, cfg.focal_alpha, cfg.focal_gamma)?;

    let pred: Vec<BoxParams> = assignment.pairs.iter().map(|&(i, _)| boxes.row(i).try_into().expect("width checked")).collect();
    let gt: Vec<BoxParams> = assignment.pairs.iter().map(|&(_, j)| targets[j].params).collect();
    let l1 = l1_box_loss(&pred, &gt)?;
    let mut grad_boxes = Tensor2::zeros(q, BOX_PARAMS);
    for (k, &(i, _)) in assignment.pairs.iter().enumerate() {
        grad_boxes.row_mut(i).copy_from_slice(&l1.grad[k * BOX_PARAMS..(k + 1) * BOX_PARAMS]);
    }
    let mut matched_costs: Vec<f64> = assignment
        .pairs
        .iter()
        .map(|&(i, j)| cfg.match_class_weight * (1.0 - probs.get(i, targets[j].class)) + cfg.match_l1_weight * mean_abs_diff(boxes.row(i), &targets[j].params))
        .collect();
    Ok(MatchingLoss {
        det_class: focal.value,
        det_l1: l1.value,
        matching_cost: stable_sum(&mut matched_costs),
        pairs: assignment.pairs,
        grad_probs: Tensor2::new(q, c, focal.grad).expect("same shape"),
        grad_boxes,
    })
}

/// Per-query relevance targets. Plan: a matched query whose ground truth
/// is relevant gets `exp(−d²/2σ²)` with `d` the reference-point distance to
/// the box center and `σ` half the box diagonal; everything else 0. Det:
/// matched queries 1, others 0. `pairs` are `(query, gt index)`.
pub fn relevance_targets(
    queries: &QuerySet,
    frame: &Frame,
    labels: Option<&FrameLabels>,
    pairs: &[(usize, usize)],
    kind: RelevanceKind,
) -> Result<Vec<f64>, LossError> {
    let mut t = vec![0.0; queries.reference_points.len()];
    let to_ego = frame.ego_pose.inverse();
    for &(qi, gi) in pairs {
        let g = frame.gt_boxes.get(gi).ok_or_else(|| LossError::ShapeMismatch(format!("gt index {gi}")))?;
        if qi >= t.len() {
            return Err(LossError::ShapeMismatch(format!("query index {qi}")));
        }
        match kind {
            RelevanceKind::Det => t[qi] = 1.0,
            RelevanceKind::Plan => {
                let missing = || LossError::MissingLabels { frame: frame.frame_id.clone(), agent: g.agent_id.clone() };
                let label = labels.ok_or_else(missing)?.get(&g.agent_id).ok_or_else(missing)?;
                if label.relevant {
                    let c = to_ego.apply(g.bbox.center());
                    let r = queries.reference_points[qi];
                    let d2 = (r[0] - c.x).powi(2) + (r[1] - c.y).powi(2);
                    let sigma = 0.5 * g.bbox.length().hypot(g.bbox.width());
                    t[qi] = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    Ok(t)
}

/// Per-cell image-space targets on the finest level: objectness and the
/// object-center offset from the cell center in cell units.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxTargets {
    pub objectness: Vec<f64>,
    /// `(cell, [du, dv])` for occupied cells.
    pub offsets: Vec<(usize, [f64; 2])>,
}

pub fn aux_roi_targets(camera: &ToyCamera, frame: &Frame) -> AuxTargets {
    let n = camera.num_tokens();
    let to_ego = frame.ego_pose.inverse();
    let mut best: Vec<Option<(f64, [f64; 2])>> = vec![None; n];
    for g in &frame.gt_boxes {
        let p = to_ego.apply(g.bbox.center());
        if let Some(cell) = camera.cell_of(p) {
            let pr = camera.project(p);
            let du = pr.u * (camera.grid_w - 1) as f64 - cell.col as f64;
            let dv = pr.v * (camera.grid_h - 1) as f64 - cell.row as f64;
            let d = du.hypot(dv);
            let idx = camera.token_index(cell);
            if best[idx].map_or(true, |(bd, _)| d < bd) {
                best[idx] = Some((d, [du, dv]));
            }
        }
    }
    AuxTargets {
        objectness: best.iter().map(|b| if b.is_some() { 1.0 } else { 0.0 }).collect(),
        offsets: best.iter().enumerate().filter_map(|(i, b)| b.map(|(_, o)| (i, o))).collect(),
    }
}

/// Focal on per-cell objectness plus L1 on center offsets of occupied
/// cells. Returns the value and gradients w.r.t. objectness and offsets
/// (`cells × 2`).
pub fn aux_roi_loss(objectness: &[f64], offsets: &Tensor2, targets: &AuxTargets, cfg: &LossConfig) -> Result<(f64, Vec<f64>, Tensor2), LossError> {
    if offsets.rows() != objectness.len() || offsets.cols() != 2 {
        return Err(LossError::ShapeMismatch("offset predictions must be cells x 2".into()));
    }
    let focal = focal_loss(objectness, &targets.objectness, cfg.focal_alpha, cfg.focal_gamma)?;
    let n = (targets.offsets.len() * 2).max(1) as f64;
    let mut terms = Vec::new();
    let mut g_off = Tensor2::zeros(offsets.rows(), 2);
    for &(cell, o) in &targets.offsets {
        for k in 0..2 {
            let d = offsets.get(cell, k) - o[k];
            terms.push(d.abs());
            g_off.set(cell, k, if d > 0.0 { 1.0 / n } else if d < 0.0 { -1.0 / n } else { 0.0 });
        }
    }
    Ok((focal.value + stable_sum(&mut terms) / n, focal.grad, g_off))
}

/// Loss components before weighting. `rel_embedding_grad` is the slot for
/// a relevance-loss gradient on token/query embeddings; it must be empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossParts {
    pub det_class: f64,
    pub det_l1: f64,
    pub rel: f64,
    pub aux: f64,
    pub rel_embedding_grad: Option<Tensor2>,
}

pub fn joint_loss(parts: &LossParts, cfg: &LossConfig) -> Result<LossBreakdown, LossError> {
    if parts.rel_embedding_grad.is_some() {
        return Err(LossError::StopGradient);
    }
    Ok(LossBreakdown {
        det_class: parts.det_class,
        det_l1: parts.det_l1,
        rel: parts.rel,
        aux: parts.aux,
        total: parts.det_class + parts.det_l1 + cfg.lambda_rel * parts.rel + cfg.lambda_aux * parts.aux,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.05..0.95)).collect()
    }

    #[test]
    fn focal_reduces_to_bce() {
        let p = [0.2, 0.7, 0.9, 0.4];
        let y = [0.0, 1.0, 1.0, 0.0];
        let l = focal_loss(&p, &y, 1.0, 0.0).unwrap();
        let bce: f64 = p.iter().zip(&y).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / 4.0;
        assert!((l.value - bce).abs() < 1e-15);
    }

    #[test]
    fn focal_near_perfect() {
        let y = [1.0, 0.0, 1.0];
        let p: Vec<f64> = y.iter().map(|&y| clamp_prob(y)).collect();
        assert!(focal_loss(&p, &y, 0.25, 2.0).unwrap().value < 1e-5);
    }

    #[test]
    fn focal_domain() {
        assert!(matches!(focal_loss(&[1.0], &[1.0], 0.25, 2.0), Err(LossError::Domain { .. })));
        assert!(matches!(focal_loss(&[0.5], &[0.5], 0.25, 2.0), Err(LossError::InvalidTarget { .. })));
    }

    #[test]
    fn focal_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let r = finite_diff_check(|p: &[f64]| {
            let l = focal_loss(p, &y, 0.25, 2.0).unwrap();
            (l.value, l.grad)
        }, &rand_probs(&mut rng, 12), 1e-5);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gaussian_focal_cases() {
        let l = gaussian_focal_loss(&[0.5], &[1.0], 2.0, 4.0).unwrap();
        assert!((l.value - (-0.25 * 0.5f64.ln())).abs() < 1e-15);
        let l = gaussian_focal_loss(&[1e-7, 1e-7], &[0.0, 0.0], 2.0, 4.0).unwrap();
        assert!(l.value < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = vec![1.0, 0.3, 0.0, 0.9, 1.0, 0.0];
        let r = finite_diff_check(|p: &[f64]| {
            let l = gaussian_focal_loss(p, &y, 2.0, 4.0).unwrap();
            (l.value, l.grad)
        }, &rand_probs(&mut rng, 6), 1e-5);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn l1_cases() {
        let a = [[0.5; BOX_PARAMS]; 2];
        assert_eq!(l1_box_loss(&a, &a).unwrap().value, 0.0);
        assert!(l1_box_loss(&a, &a).unwrap().grad.iter().all(|g| *g == 0.0));
        let mut b = a;
        b[1][3] += 0.2;
        let l = l1_box_loss(&b, &a).unwrap();
        assert!((l.value - 0.2 / 20.0).abs() < 1e-15);
        assert!(l1_box_loss(&a[..1], &a).is_err());
    }

    fn rand_case(rng: &mut ChaCha8Rng, q: usize, g: usize, c: usize) -> (Tensor2, Tensor2, Vec<MatchTarget>) {
        let probs = Tensor2::from_fn(q, c, |_, _| rng.gen_range(0.05..0.95));
        let boxes = Tensor2::from_fn(q, BOX_PARAMS, |_, _| rng.gen_range(-2.0..2.0));
        let targets = (0..g)
            .map(|_| MatchTarget { class: rng.gen_range(0..c), params: std::array::from_fn(|_| rng.gen_range(-2.0..2.0)) })
            .collect();
        (probs, boxes, targets)
    }

    #[test]
    fn matching_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig::default();
        let (p, b, t) = rand_case(&mut rng, 9, 4, 3);
        let base = set_matching_loss(&p, &b, &t, &cfg).unwrap();
        let perm = [4, 0, 8, 2, 6, 1, 3, 7, 5];
        let pp = p.select_rows(&perm);
        let bp = b.select_rows(&perm);
        let l = set_matching_loss(&pp, &bp, &t, &cfg).unwrap();
        assert_eq!(l.det_class, base.det_class);
        assert_eq!(l.det_l1, base.det_l1);
    }

    #[test]
    fn matching_cost_is_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = LossConfig::default();
        for _ in 0..20 {
            let (p, b, t) = rand_case(&mut rng, 3, 2, 2);
            let l = set_matching_loss(&p, &b, &t, &cfg).unwrap();
            let cost = |i: usize, j: usize| cfg.match_class_weight * (1.0 - p.get(i, t[j].class)) + cfg.match_l1_weight * mean_abs_diff(b.row(i), &t[j].params);
            let mut best = f64::INFINITY;
            for a in 0..3 {
                for c in 0..3 {
                    if a != c {
                        best = best.min(cost(a, 0) + cost(c, 1));
                    }
                }
            }
            assert!((l.matching_cost - best).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_prediction_has_tiny_loss() {
        let cfg = LossConfig::default();
        let params = [0.3; BOX_PARAMS];
        let probs = Tensor2::new(1, 2, vec![1.0 - 1e-7, 1e-7]).unwrap();
        let boxes = Tensor2::new(1, BOX_PARAMS, params.to_vec()).unwrap();
        let l = set_matching_loss(&probs, &boxes, &[MatchTarget { class: 0, params }], &cfg).unwrap();
        assert!(l.det_class + l.det_l1 < 1e-6);
    }

    #[test]
    fn joint_loss_contract() {
        let cfg = LossConfig { lambda_rel: 0.0, lambda_aux: 0.0, ..LossConfig::default() };
        let parts = LossParts { det_class: 0.3, det_l1: 0.2, rel: 5.0, aux: 7.0, rel_embedding_grad: None };
        assert_eq!(joint_loss(&parts, &cfg).unwrap().total, 0.3 + 0.2);
        let c1 = LossConfig { lambda_rel: 1.0, ..cfg };
        let c2 = LossConfig { lambda_rel: 2.0, ..cfg };
        let d1 = joint_loss(&parts, &c1).unwrap().total - 0.5;
        let d2 = joint_loss(&parts, &c2).unwrap().total - 0.5;
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
        let bad = LossParts { rel_embedding_grad: Some(Tensor2::zeros(1, 1)), ..parts };
        assert_eq!(joint_loss(&bad, &cfg), Err(LossError::StopGradient));
    }

    #[test]
    fn stable_sum_is_order_free() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 1e-3];
        let mut b = vec![3.5, -1e16, 1e-3, 1e16, 1.0];
        assert_eq!(stable_sum(&mut a), stable_sum(&mut b));
    }
}
