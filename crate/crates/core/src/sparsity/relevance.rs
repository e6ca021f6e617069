//! Query relevance heads and attention-aggregated token relevance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::ToyCamera;
use super::stream::QuerySet;
use super::SparsityError;
use crate::dataset::EgoState;
use crate::numeric::mlp::{grads_to_flat, MlpCache};
use crate::numeric::{deformable_cross_attention, sigmoid, DeformableParams, FeatureMap, Footprint, Mlp, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceKind {
    /// Supervised by interaction-corridor labels; takes an ego embedding.
    Plan,
    /// Supervised by foreground matches.
    Det,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub kind: RelevanceKind,
    pub scores: Vec<f64>,
}

/// `r = σ(uᵀ φ([q ‖ c ‖ e]))`; `e` is an ego embedding present only for the
/// planning variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceHead {
    pub phi: Mlp,
    pub u: Vec<f64>,
    pub ego: Option<Mlp>,
}

pub const EGO_INPUTS: usize = 3;

pub fn ego_vector(e: &EgoState) -> [f64; 3] {
    [e.speed / 10.0, e.yaw_rate, e.acceleration / 2.0]
}

pub struct HeadCache {
    phi: MlpCache,
    hidden: Tensor2,
    ego: Option<(MlpCache, usize)>,
    scores: Vec<f64>,
}

impl RelevanceHead {
    /// `feature_dim` is the width of `[q ‖ c]`.
    pub fn random(rng: &mut impl Rng, feature_dim: usize, hidden: usize, ego_dim: Option<usize>, gain: f64) -> Self {
        let ego = ego_dim.map(|d| Mlp::random(rng, &[EGO_INPUTS, d, d], false, gain));
        let input = feature_dim + ego_dim.unwrap_or(0);
        let phi = Mlp::random(rng, &[input, hidden, hidden], true, gain);
        let s = gain / (hidden as f64).sqrt();
        let u = (0..hidden).map(|_| rng.gen_range(-s..s)).collect();
        Self { phi, u, ego }
    }

    pub fn kind(&self) -> RelevanceKind {
        if self.ego.is_some() {
            RelevanceKind::Plan
        } else {
            RelevanceKind::Det
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.phi.in_dim() - self.ego.as_ref().map_or(0, Mlp::out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.phi.num_params() + self.u.len() + self.ego.as_ref().map_or(0, Mlp::num_params)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.phi.to_flat();
        v.extend_from_slice(&self.u);
        if let Some(e) = &self.ego {
            v.extend(e.to_flat());
        }
        v
    }

    pub fn set_flat(&mut self, src: &[f64]) {
        let mut off = self.phi.set_flat(src);
        let n = self.u.len();
        self.u.copy_from_slice(&src[off..off + n]);
        off += n;
        if let Some(e) = &mut self.ego {
            e.set_flat(&src[off..]);
        }
    }

    fn check_ego(&self, ego: Option<&EgoState>) -> Result<(), SparsityError> {
        match (&self.ego, ego) {
            (Some(_), None) => Err(SparsityError::ShapeMismatch("planning relevance needs an ego state".into())),
            (None, Some(_)) => Err(SparsityError::ShapeMismatch("detection relevance takes no ego state".into())),
            _ => Ok(()),
        }
    }

    pub fn forward(&self, features: &Tensor2, ego: Option<&EgoState>) -> Result<(Vec<f64>, HeadCache), SparsityError> {
        self.check_ego(ego)?;
        if features.cols() != self.feature_dim() {
            return Err(SparsityError::ShapeMismatch(format!(
                "relevance head expects {} features, got {}",
                self.feature_dim(),
                features.cols()
            )));
        }
        let (input, ego_cache) = match (&self.ego, ego) {
            (Some(mlp), Some(state)) => {
                let x = Tensor2::new(1, EGO_INPUTS, ego_vector(state).to_vec())?;
                let (e, cache) = mlp.forward_cached(&x)?;
                let tiled = Tensor2::from_fn(features.rows(), e.cols(), |_, c| e.get(0, c));
                (features.hcat(&tiled)?, Some((cache, e.cols())))
            }
            _ => (features.clone(), None),
        };
        let (hidden, phi) = self.phi.forward_cached(&input)?;
        let scores: Vec<f64> = (0..hidden.rows())
            .map(|r| sigmoid(hidden.row(r).iter().zip(&self.u).map(|(h, u)| h * u).sum()))
            .collect();
        Ok((scores.clone(), HeadCache { phi, hidden, ego: ego_cache, scores }))
    }

    /// Backward from `∂L/∂r`. Returns flat parameter gradients (same layout
    /// as [`RelevanceHead::to_flat`]) and the gradient that reached the
    /// `[q ‖ c]` inputs before the detach boundary.
    pub fn backward(&self, cache: &HeadCache, grad_scores: &[f64]) -> Result<(Vec<f64>, Tensor2), SparsityError> {
        let n = cache.scores.len();
        if grad_scores.len() != n {
            return Err(SparsityError::ShapeMismatch("score gradient length".into()));
        }
        let h = self.u.len();
        let mut gu = vec![0.0; h];
        let mut gh = Tensor2::zeros(n, h);
        for r in 0..n {
            let s = cache.scores[r];
            let dz = grad_scores[r] * s * (1.0 - s);
            for k in 0..h {
                gu[k] += dz * cache.hidden.get(r, k);
                gh.set(r, k, dz * self.u[k]);
            }
        }
        let (phi_grads, gin) = self.phi.backward(&cache.phi, &gh)?;
        let fd = self.feature_dim();
        let mut flat = grads_to_flat(&phi_grads);
        flat.extend_from_slice(&gu);
        if let (Some(mlp), Some((ego_cache, ed))) = (&self.ego, &cache.ego) {
            let ge = Tensor2::from_fn(1, *ed, |_, c| (0..n).map(|r| gin.get(r, fd + c)).sum());
            let (eg, _) = mlp.backward(ego_cache, &ge)?;
            flat.extend(grads_to_flat(&eg));
        }
        Ok((flat, gin.select_cols(0, fd)))
    }
}

/// Gradient delivered to token/query embeddings by the relevance path.
/// Relevance inputs are detached, so this is identically zero whatever
/// reached the head inputs.
pub fn detach(grad_at_inputs: &Tensor2) -> Tensor2 {
    Tensor2::zeros(grad_at_inputs.rows(), grad_at_inputs.cols())
}

/// Per-view feature pyramids (level 0 first).
pub type ViewPyramids = Vec<Vec<FeatureMap>>;

#[derive(Debug, Clone)]
pub struct QueryRelevance {
    pub scores: RelevanceScores,
    /// `[q ‖ c]` rows fed to the head.
    pub features: Tensor2,
    pub footprints: Vec<Footprint>,
}

/// Deformable context for every query at its projected reference point.
pub fn query_context(
    queries: &QuerySet,
    pyramids: &ViewPyramids,
    sampler: &DeformableParams,
    camera: &ToyCamera,
) -> Result<(Tensor2, Vec<Footprint>), SparsityError> {
    let c = pyramids.first().and_then(|p| p.first()).map_or(0, FeatureMap::channels);
    let mut ctx = Tensor2::zeros(queries.embeddings.rows(), c);
    let mut footprints = Vec::with_capacity(queries.embeddings.rows());
    for (j, p) in queries.reference_points.iter().enumerate() {
        let pr = camera.project(crate::geometry::Point2::new(p[0], p[1]));
        let (cj, fp) = deformable_cross_attention(queries.embeddings.row(j), (pr.u, pr.v), &pyramids[pr.view], sampler)?;
        ctx.row_mut(j).copy_from_slice(&cj);
        footprints.push(fp);
    }
    Ok((ctx, footprints))
}

pub fn query_relevance(
    queries: &QuerySet,
    pyramids: &ViewPyramids,
    sampler: &DeformableParams,
    camera: &ToyCamera,
    head: &RelevanceHead,
    ego: Option<&EgoState>,
    kind: RelevanceKind,
) -> Result<QueryRelevance, SparsityError> {
    if kind != head.kind() {
        return Err(SparsityError::ShapeMismatch(format!("{kind:?} relevance requested from a {:?} head", head.kind())));
    }
    let (ctx, footprints) = query_context(queries, pyramids, sampler, camera)?;
    let features = queries.embeddings.hcat(&ctx)?;
    let (scores, _) = head.forward(&features, ego)?;
    Ok(QueryRelevance { scores: RelevanceScores { kind, scores }, features, footprints })
}

/// `r_i = (1/K) Σ_j A_{j→i}` over the given top-K query footprints.
pub fn token_relevance(footprints: &[&Footprint], num_tokens: usize) -> Result<Vec<f64>, SparsityError> {
    if footprints.is_empty() {
        return Err(SparsityError::EmptyTopK);
    }
    let mut r = vec![0.0; num_tokens];
    for fp in footprints {
        for &(t, w) in &fp.entries {
            if t >= num_tokens {
                return Err(SparsityError::ShapeMismatch(format!("footprint token {t} beyond {num_tokens}")));
            }
            r[t] += w;
        }
    }
    let k = footprints.len() as f64;
    r.iter_mut().for_each(|v| *v /= k);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ego() -> EgoState {
        EgoState { speed: 8.0, yaw_rate: 0.1, acceleration: -0.5 }
    }

    #[test]
    fn zero_u_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = RelevanceHead::random(&mut rng, 6, 5, Some(4), 1.0);
        head.u = vec![0.0; 5];
        let x = Tensor2::from_fn(4, 6, |r, c| (r + c) as f64 * 0.3);
        let (s, _) = head.forward(&x, Some(&ego())).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn scores_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = RelevanceHead::random(&mut rng, 6, 5, None, 1.0);
        let x = Tensor2::from_fn(20, 6, |_, _| rng.gen_range(-3.0..3.0));
        let (s, _) = head.forward(&x, None).unwrap();
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(head.forward(&x, Some(&ego())).is_err());
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = RelevanceHead::random(&mut rng, 6, 5, Some(4), 1.0);
        let x = Tensor2::from_fn(7, 6, |_, _| rng.gen_range(-1.0..1.0));
        let e = ego();
        let f = |theta: &[f64]| {
            let mut h = head.clone();
            h.set_flat(theta);
            let (s, cache) = h.forward(&x, Some(&e)).unwrap();
            let n = s.len() as f64;
            let (g, _) = h.backward(&cache, &vec![1.0 / n; s.len()]).unwrap();
            (s.iter().sum::<f64>() / n, g)
        };
        let rep = finite_diff_check(f, &head.to_flat(), 1e-5);
        assert!(rep.max_rel_error < 1e-4, "{}", rep.max_rel_error);
    }

    #[test]
    fn relevance_gradient_stops_at_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = RelevanceHead::random(&mut rng, 6, 5, None, 1.0);
        let x = Tensor2::from_fn(3, 6, |_, _| rng.gen_range(-1.0..1.0));
        let (_, cache) = head.forward(&x, None).unwrap();
        let (_, gin) = head.backward(&cache, &[1.0, -2.0, 0.5]).unwrap();
        assert!(gin.data().iter().any(|&v| v != 0.0));
        assert!(detach(&gin).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_relevance_examples() {
        let one = Footprint::one_hot(3);
        assert_eq!(token_relevance(&[&one], 5).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        let uni = Footprint { entries: (0..4).map(|i| (i, 0.25)).collect() };
        assert_eq!(token_relevance(&[&uni, &uni], 4).unwrap(), vec![0.25; 4]);
        assert!(matches!(token_relevance(&[], 4), Err(SparsityError::EmptyTopK)));
        let mixed = Footprint { entries: vec![(0, 0.7), (2, 0.3)] };
        let r = token_relevance(&[&one, &mixed, &uni], 5).unwrap();
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
