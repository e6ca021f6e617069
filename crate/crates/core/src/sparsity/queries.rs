//! Object-query initialization from 3D anchors and temporal propagation.

use super::camera::ToyCamera;
use super::stream::{QueryOrigin, QuerySet, TokenMeta};
use super::SparsityError;
use crate::geometry::SE2Pose;
use crate::numeric::{positional_encoding, Mlp, Tensor2};

/// `q⁽⁰⁾ = MLP(PE(p))` for every anchor.
pub fn init_queries(anchors: &[[f64; 3]], init_mlp: &Mlp) -> Result<QuerySet, SparsityError> {
    if anchors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SparsityError::InvalidInput("non-finite anchor".into()));
    }
    let pe: Vec<Vec<f64>> = anchors.iter().map(|&p| positional_encoding(p)).collect();
    let dim = init_mlp.out_dim();
    let embeddings = if anchors.is_empty() {
        Tensor2::zeros(0, dim)
    } else {
        init_mlp.forward(&Tensor2::from_rows(&pe)?)?
    };
    Ok(QuerySet {
        embeddings,
        reference_points: anchors.to_vec(),
        origin: vec![QueryOrigin::Initialized; anchors.len()],
        original_index: (0..anchors.len()).collect(),
    })
}

/// Carry the previous frame's top queries into the current ego frame.
/// `ego_motion` maps previous-ego coordinates to current-ego coordinates.
pub fn propagate_queries(prev_topk: &QuerySet, ego_motion: &SE2Pose) -> QuerySet {
    let reference_points = prev_topk
        .reference_points
        .iter()
        .map(|p| {
            let q = ego_motion.apply(crate::geometry::Point2::new(p[0], p[1]));
            [q.x, q.y, p[2]]
        })
        .collect();
    QuerySet {
        embeddings: prev_topk.embeddings.clone(),
        reference_points,
        origin: vec![QueryOrigin::Propagated; prev_topk.original_index.len()],
        original_index: (0..prev_topk.original_index.len()).collect(),
    }
}

/// Anchors at the centers of every `stride`-th grid cell of every view,
/// starting half a stride in.
pub fn anchor_grid(camera: &ToyCamera, stride: usize) -> Vec<[f64; 3]> {
    let stride = stride.max(1);
    let start = stride / 2;
    let mut out = Vec::new();
    for view in 0..camera.views {
        for row in (start..camera.grid_h).step_by(stride) {
            for col in (start..camera.grid_w).step_by(stride) {
                let c = camera.cell_center(TokenMeta { view, row, col });
                out.push([c.x, c.y, 0.0]);
            }
        }
    }
    out
}

/// Extra anchors used to top up the query set when fewer queries were
/// propagated than reserved: a stride grid offset from [`anchor_grid`].
pub fn top_up_anchors(camera: &ToyCamera, stride: usize, count: usize) -> Vec<[f64; 3]> {
    let stride = stride.max(2);
    let mut out = Vec::with_capacity(count);
    'outer: for view in 0..camera.views {
        for row in (0..camera.grid_h).step_by(stride) {
            for col in (0..camera.grid_w).step_by(stride) {
                if out.len() == count {
                    break 'outer;
                }
                let c = camera.cell_center(TokenMeta { view, row: row.max(1), col });
                out.push([c.x, c.y, 0.0]);
            }
        }
    }
    while out.len() < count {
        let k = out.len() as f64;
        out.push([5.0 + k, 0.0, 0.0]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::numeric::{Linear, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_anchors_identical_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::random(&mut rng, &[192, 16, 8], false, 1.0);
        let q = init_queries(&[[1.0, 2.0, 0.0], [1.0, 2.0, 0.0], [3.0, -1.0, 0.5]], &mlp).unwrap();
        assert_eq!(q.embeddings.row(0), q.embeddings.row(1));
        assert_ne!(q.embeddings.row(0), q.embeddings.row(2));
    }

    #[test]
    fn zero_weight_mlp_gives_bias() {
        let mut l = Linear::zeros(192, 4);
        l.bias = vec![0.5, -1.0, 2.0, 0.0];
        let mlp = Mlp::new(vec![l], false).unwrap();
        let q = init_queries(&[[10.0, 0.0, 0.0], [0.0, 3.0, 1.0]], &mlp).unwrap();
        for r in 0..2 {
            assert_eq!(q.embeddings.row(r), &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn propagation_transforms_points() {
        let prev = QuerySet {
            embeddings: Tensor2::from_fn(1, 2, |_, c| c as f64),
            reference_points: vec![[10.0, 0.0, 1.5]],
            origin: vec![QueryOrigin::Initialized],
            original_index: vec![7],
        };
        let same = propagate_queries(&prev, &SE2Pose::identity());
        assert_eq!(same.reference_points, prev.reference_points);
        let moved = propagate_queries(&prev, &SE2Pose::new(Point2::new(-1.0, 0.0), 0.0));
        assert_eq!(moved.reference_points[0], [9.0, 0.0, 1.5]);
        assert_eq!(moved.origin, vec![QueryOrigin::Propagated]);
        assert_eq!(moved.embeddings, prev.embeddings);
    }
}
