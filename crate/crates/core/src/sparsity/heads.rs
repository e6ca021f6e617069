//! Box parameterization, detection heads, decoding and the closed-form
//! ridge fit used to train heads on frozen features.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SparsityError;
use crate::dataset::GtBox;
use crate::geometry::{normalize_angle, OrientedBoxBEV, Point2, SE2Pose};
use crate::metrics::Detection;
use crate::numeric::{Linear, Tensor2};

/// `(dx, dy, z, ln l, ln w, ln h, sin yaw, cos yaw, vx, vy)` in the ego
/// frame, center relative to an anchor.
pub const BOX_PARAMS: usize = 10;
pub type BoxParams = [f64; BOX_PARAMS];

pub fn encode_box(g: &GtBox, ego_pose: &SE2Pose, anchor: [f64; 2]) -> BoxParams {
    let to_ego = ego_pose.inverse();
    let p = to_ego.apply(g.bbox.center());
    let yaw = normalize_angle(g.bbox.yaw() - ego_pose.rotation());
    let v = g.velocity.unwrap_or([0.0, 0.0]);
    let ve = Point2::new(v[0], v[1]).rotate(-ego_pose.rotation());
    [
        p.x - anchor[0],
        p.y - anchor[1],
        g.z,
        g.bbox.length().ln(),
        g.bbox.width().ln(),
        g.height.ln(),
        yaw.sin(),
        yaw.cos(),
        ve.x,
        ve.y,
    ]
}

/// World-frame box, z, height and velocity from parameters.
pub fn decode_box(b: &BoxParams, anchor: [f64; 2], ego_pose: &SE2Pose) -> (OrientedBoxBEV, f64, f64, [f64; 2]) {
    let size = |v: f64| v.clamp(-3.0, 3.5).exp();
    let center = ego_pose.apply(Point2::new(anchor[0] + b[0], anchor[1] + b[1]));
    let yaw = normalize_angle(b[6].atan2(b[7]) + ego_pose.rotation());
    let v = Point2::new(b[8], b[9]).rotate(ego_pose.rotation());
    let bbox = OrientedBoxBEV::new(center, yaw, size(b[3]), size(b[4])).expect("finite clamped box");
    (bbox, b[2], size(b[5]), [v.x, v.y])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionHeads {
    pub class: Linear,
    pub boxes: Linear,
}

pub const PROB_EPS: f64 = 1e-6;

impl DetectionHeads {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self { class: Linear::zeros(features, classes), boxes: Linear::zeros(features, BOX_PARAMS) }
    }

    /// Class scores (clamped into `(0, 1)`) and box parameters per row.
    pub fn predict(&self, features: &Tensor2) -> Result<(Tensor2, Tensor2), SparsityError> {
        let probs = self.class.forward(features)?.map(|v| v.clamp(PROB_EPS, 1.0 - PROB_EPS));
        Ok((probs, self.boxes.forward(features)?))
    }
}

/// Minimizes `‖X W + 1 bᵀ − Y‖² + λ‖W‖²` (bias unpenalized).
pub fn fit_ridge(x: &Tensor2, y: &Tensor2, lambda: f64) -> Result<Linear, SparsityError> {
    if x.rows() != y.rows() || x.rows() == 0 {
        return Err(SparsityError::ShapeMismatch(format!("ridge fit on {} inputs, {} targets", x.rows(), y.rows())));
    }
    let (n, f) = x.shape();
    let a = DMatrix::from_fn(n, f + 1, |r, c| if c < f { x.get(r, c) } else { 1.0 });
    let mut gram = a.transpose() * &a;
    for i in 0..f {
        gram[(i, i)] += lambda;
    }
    // tiny jitter on the bias so an all-zero design stays solvable
    gram[(f, f)] += 1e-12;
    let chol = gram.cholesky().ok_or_else(|| SparsityError::InvalidInput("ridge system not positive definite".into()))?;
    let mut weight = Tensor2::zeros(f, y.cols());
    let mut bias = vec![0.0; y.cols()];
    for k in 0..y.cols() {
        let rhs = a.transpose() * DVector::from_fn(n, |r, _| y.get(r, k));
        let sol = chol.solve(&rhs);
        for i in 0..f {
            weight.set(i, k, sol[i]);
        }
        bias[k] = sol[f];
    }
    Ok(Linear::new(weight, bias)?)
}

/// Turn per-query outputs into detections: best class per query, class-wise
/// center-distance suppression, then the top `max_detections` by score.
pub fn decode_detections(
    probs: &Tensor2,
    boxes: &Tensor2,
    anchors: &[[f64; 3]],
    ego_pose: &SE2Pose,
    frame_id: &str,
    classes: &[String],
    max_detections: usize,
    nms_radius: f64,
) -> Vec<Detection> {
    let mut cands: Vec<Detection> = (0..probs.rows())
        .map(|q| {
            let row = probs.row(q);
            let (cls, &score) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).expect("classes");
            let b: BoxParams = boxes.row(q).try_into().expect("box width");
            let (bbox, z, height, velocity) = decode_box(&b, [anchors[q][0], anchors[q][1]], ego_pose);
            Detection {
                frame_id: frame_id.to_string(),
                class_name: classes[cls].clone(),
                bbox,
                z,
                height,
                velocity,
                attribute: "none".into(),
                score,
            }
        })
        .collect();
    // stable sort keeps query order among equal scores
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in cands {
        if kept.len() == max_detections {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class_name == d.class_name && k.bbox.center().distance(d.bbox.center()) < nms_radius);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt() -> GtBox {
        GtBox {
            agent_id: "a".into(),
            class_name: "car".into(),
            bbox: OrientedBoxBEV::new(Point2::new(12.0, -3.0), 0.4, 4.5, 1.9).unwrap(),
            z: 0.8,
            height: 1.6,
            velocity: Some([3.0, 1.0]),
            attribute: None,
        }
    }

    #[test]
    fn box_round_trip() {
        let pose = SE2Pose::new(Point2::new(5.0, 2.0), 0.7);
        let b = encode_box(&gt(), &pose, [1.0, 2.0]);
        let (bbox, z, h, v) = decode_box(&b, [1.0, 2.0], &pose);
        let g = gt();
        assert!(bbox.center().distance(g.bbox.center()) < 1e-12);
        assert!((bbox.yaw() - g.bbox.yaw()).abs() < 1e-12);
        assert!((bbox.length() - 4.5).abs() < 1e-12 && (h - 1.6).abs() < 1e-12 && z == 0.8);
        assert!((v[0] - 3.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_recovers_linear_map() {
        let x = Tensor2::from_fn(50, 3, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0 + 0.1 * c as f64 * r as f64);
        let y = Tensor2::from_fn(50, 2, |r, k| {
            let w = [[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]];
            (0..3).map(|c| x.get(r, c) * w[c][k]).sum::<f64>() + [0.7, -1.1][k]
        });
        let l = fit_ridge(&x, &y, 0.0).unwrap();
        assert!((l.weight.get(0, 1) + 2.0).abs() < 1e-8);
        assert!((l.bias[0] - 0.7).abs() < 1e-8);
    }

    #[test]
    fn suppression_keeps_best() {
        let probs = Tensor2::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.1], vec![0.1, 0.7]]).unwrap();
        let boxes = Tensor2::from_rows(&vec![vec![0.0, 0.0, 0.0, 1.0, 0.5, 0.3, 0.0, 1.0, 0.0, 0.0]; 3]).unwrap();
        let anchors = [[10.0, 0.0, 0.0], [10.3, 0.0, 0.0], [10.0, 0.2, 0.0]];
        let classes = vec!["car".to_string(), "pedestrian".to_string()];
        let d = decode_detections(&probs, &boxes, &anchors, &SE2Pose::identity(), "f", &classes, 10, 1.0);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].score, 0.9);
        assert_eq!(d[1].class_name, "pedestrian");
    }
}
