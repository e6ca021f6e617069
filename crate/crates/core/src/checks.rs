//! Finite-difference gradient suites shared by the `gradcheck` command and
//! the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::EgoState;
use crate::losses::{
    aux_roi_loss, focal_loss, gaussian_focal_loss, joint_loss, l1_box_loss, set_matching_loss, AuxTargets, LossConfig, LossParts,
    MatchTarget,
};
use crate::numeric::gumbel::{gumbel_topk, GumbelTopkConfig, TopkMode};
use crate::numeric::{finite_diff_check, Tensor2};
use crate::sparsity::heads::BOX_PARAMS;
use crate::sparsity::relevance::detach;
use crate::sparsity::training::{relevance_loss_and_grad, RelevanceSample};
use crate::sparsity::RelevanceHead;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn suite(name: &str, errors: Vec<f64>) -> SuiteResult {
    let max = errors.iter().cloned().fold(0.0, f64::max);
    SuiteResult { suite: name.into(), cases: errors.len(), max_rel_error: max, passed: max < TOLERANCE }
}

fn probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.05..0.95)).collect()
}

/// Jacobian of the soft relaxation, one output coordinate at a time.
pub fn gumbel_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = Vec::new();
    for _ in 0..4 {
        let n = 8;
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = GumbelTopkConfig { k: 3, temperature: 0.5, seed: 0, stage: 0, mode: TopkMode::Soft };
        for out in 0..n {
            let f = |x: &[f64]| {
                let r = gumbel_topk(x, &cfg).expect("valid k");
                let mut up = vec![0.0; n];
                up[out] = 1.0;
                (r.soft_weights[out], r.backward(&up))
            };
            errs.push(finite_diff_check(f, &s, FD_STEP).max_rel_error);
        }
    }
    suite("gumbel_topk_soft_jacobian", errs)
}

/// Relevance head parameters through the Gaussian-focal relevance loss.
pub fn relevance_head_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = RelevanceHead::random(&mut rng, 6, 5, Some(4), 1.0);
    let samples: Vec<RelevanceSample> = (0..3)
        .map(|i| RelevanceSample {
            frame_id: format!("f{i}"),
            features: Tensor2::from_fn(5, 6, |_, _| rng.gen_range(-1.0..1.0)),
            ego: EgoState { speed: rng.gen_range(2.0..10.0), yaw_rate: rng.gen_range(-0.2..0.2), acceleration: 0.0 },
            targets: vec![1.0, 0.4, 0.0, 0.0, 0.8],
            agents: Vec::new(),
        })
        .collect();
    let f = |theta: &[f64]| {
        let mut h = head.clone();
        h.set_flat(theta);
        relevance_loss_and_grad(&h, &samples, 2.0, 4.0).expect("valid samples")
    };
    suite("relevance_head", vec![finite_diff_check(f, &head.to_flat(), FD_STEP).max_rel_error])
}

pub fn focal_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errs = (0..4)
        .map(|_| {
            let y: Vec<f64> = (0..12).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
            let p = probs(&mut rng, 12);
            let f = |p: &[f64]| {
                let l = focal_loss(p, &y, 0.25, 2.0).expect("valid inputs");
                (l.value, l.grad)
            };
            finite_diff_check(f, &p, FD_STEP).max_rel_error
        })
        .collect();
    suite("focal", errs)
}

pub fn gaussian_focal_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errs = (0..4)
        .map(|_| {
            let y: Vec<f64> = (0..10).map(|i| if i % 4 == 0 { 1.0 } else { rng.gen_range(0.0..0.95) }).collect();
            let p = probs(&mut rng, 10);
            let f = |p: &[f64]| {
                let l = gaussian_focal_loss(p, &y, 2.0, 4.0).expect("valid inputs");
                (l.value, l.grad)
            };
            finite_diff_check(f, &p, FD_STEP).max_rel_error
        })
        .collect();
    suite("gaussian_focal", errs)
}

/// Random box pair whose coordinates differ by at least 0.05, away from
/// the kink of `|x|`.
fn box_pair(rng: &mut ChaCha8Rng) -> ([f64; BOX_PARAMS], [f64; BOX_PARAMS]) {
    let g: [f64; BOX_PARAMS] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
    let p = std::array::from_fn(|k| g[k] + rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
    (p, g)
}

pub fn l1_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errs = (0..4)
        .map(|_| {
            let pairs: Vec<_> = (0..3).map(|_| box_pair(&mut rng)).collect();
            let gt: Vec<[f64; BOX_PARAMS]> = pairs.iter().map(|p| p.1).collect();
            let flat: Vec<f64> = pairs.iter().flat_map(|p| p.0).collect();
            let f = |x: &[f64]| {
                let pred: Vec<[f64; BOX_PARAMS]> = x.chunks(BOX_PARAMS).map(|c| c.try_into().expect("chunk")).collect();
                let l = l1_box_loss(&pred, &gt).expect("matched lengths");
                (l.value, l.grad)
            };
            finite_diff_check(f, &flat, FD_STEP).max_rel_error
        })
        .collect();
    suite("l1_box", errs)
}

/// Weighted total of matching, relevance and auxiliary terms against every
/// prediction (class scores, boxes, relevance scores, objectness, offsets).
pub fn joint_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let (q, c, cells) = (5, 3, 6);
    let targets: Vec<MatchTarget> = (0..2)
        .map(|_| MatchTarget { class: rng.gen_range(0..c), params: std::array::from_fn(|_| rng.gen_range(-2.0..2.0)) })
        .collect();
    let rel_t: Vec<f64> = vec![1.0, 0.5, 0.0, 0.0, 0.2];
    let aux_t = AuxTargets { objectness: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], offsets: vec![(0, [0.2, -0.1]), (3, [-0.3, 0.25])] };
    let split = [q * c, q * BOX_PARAMS, q, cells, cells * 2];
    let mut x: Vec<f64> = Vec::new();
    x.extend(probs(&mut rng, q * c));
    x.extend((0..q * BOX_PARAMS).map(|_| rng.gen_range(-2.0..2.0)));
    x.extend(probs(&mut rng, q));
    x.extend(probs(&mut rng, cells));
    // offsets kept away from their targets
    x.extend((0..cells * 2).map(|_| rng.gen_range(0.5..1.0)));
    let f = |x: &[f64]| {
        let mut parts = Vec::new();
        let mut o = 0;
        for n in split {
            parts.push(&x[o..o + n]);
            o += n;
        }
        let p = Tensor2::new(q, c, parts[0].to_vec()).expect("shape");
        let b = Tensor2::new(q, BOX_PARAMS, parts[1].to_vec()).expect("shape");
        let m = set_matching_loss(&p, &b, &targets, &cfg).expect("valid targets");
        let rel = gaussian_focal_loss(parts[2], &rel_t, cfg.gaussian_alpha, cfg.gaussian_beta).expect("valid inputs");
        let off = Tensor2::new(cells, 2, parts[4].to_vec()).expect("shape");
        let (aux, g_obj, g_off) = aux_roi_loss(parts[3], &off, &aux_t, &cfg).expect("valid inputs");
        let total = joint_loss(&LossParts { det_class: m.det_class, det_l1: m.det_l1, rel: rel.value, aux, rel_embedding_grad: None }, &cfg)
            .expect("no embedding gradient")
            .total;
        let mut g = Vec::with_capacity(x.len());
        g.extend_from_slice(m.grad_probs.data());
        g.extend_from_slice(m.grad_boxes.data());
        g.extend(rel.grad.iter().map(|v| cfg.lambda_rel * v));
        g.extend(g_obj.iter().map(|v| cfg.lambda_aux * v));
        g.extend(g_off.data().iter().map(|v| cfg.lambda_aux * v));
        (total, g)
    };
    suite("joint_loss", vec![finite_diff_check(f, &x, FD_STEP).max_rel_error])
}

/// Relevance gradient delivered to embeddings is exactly zero, and the
/// joint loss rejects a populated embedding-gradient slot.
pub fn stop_gradient_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = RelevanceHead::random(&mut rng, 6, 5, None, 1.0);
    let x = Tensor2::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
    let (_, cache) = head.forward(&x, None).expect("shape");
    let (_, at_inputs) = head.backward(&cache, &[1.0, -0.5, 0.25, 2.0]).expect("shape");
    let delivered = detach(&at_inputs);
    let max = delivered.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rejected = joint_loss(&LossParts { rel_embedding_grad: Some(delivered), ..Default::default() }, &LossConfig::default()).is_err();
    SuiteResult { suite: "relevance_stop_gradient".into(), cases: 1, max_rel_error: max, passed: max == 0.0 && rejected }
}

pub fn all_suites(seed: u64) -> Vec<SuiteResult> {
    vec![
        gumbel_suite(seed),
        relevance_head_suite(seed),
        focal_suite(seed),
        gaussian_focal_suite(seed),
        l1_suite(seed),
        joint_suite(seed),
        stop_gradient_suite(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_pass() {
        for s in all_suites(0) {
            assert!(s.passed, "{s:?}");
        }
    }
}
