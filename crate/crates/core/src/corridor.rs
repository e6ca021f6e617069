//! Future interaction corridors and the relevance labels derived from them.
//!
//! A corridor is the convex hull of every sampled future footprint of a track
//! over `[t0, t0 + H]`. An agent is relevant when its corridor comes within
//! `d_min` of the ego corridor.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AgentTrack, Frame, Scene, SceneDataset};
use crate::geometry::{convex_hull, polygon_distance, ConvexPolygon, GeometryError};

/// Shortest truncated horizon still labeled; shorter remainders are flagged
/// uncovered.
pub const MIN_TRUNCATED_HORIZON: f64 = 1.0;

#[derive(Debug, Error)]
pub enum CorridorError {
    #[error("track {agent_id} does not cover [{t0}, {t_end}]")]
    InsufficientTrack { agent_id: String, t0: f64, t_end: f64 },
    #[error("no (frame, agent) pair has horizon coverage")]
    EmptyDistribution,
    #[error("invalid relevance config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelevanceConfig {
    /// Horizon H in seconds.
    pub horizon: f64,
    /// Sampling step within the horizon, seconds.
    pub step_dt: f64,
    pub d_min: f64,
    /// Percentile used by [`calibrate_dmin`], in (0, 1].
    pub percentile: f64,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self { horizon: 5.0, step_dt: 0.1, d_min: 1.2, percentile: 0.10 }
    }
}

impl RelevanceConfig {
    pub fn validate(&self) -> Result<(), CorridorError> {
        if !(self.horizon > 0.0) {
            return Err(CorridorError::InvalidConfig("horizon must be > 0".into()));
        }
        if !(self.step_dt > 0.0 && self.step_dt <= self.horizon) {
            return Err(CorridorError::InvalidConfig("need 0 < step_dt <= horizon".into()));
        }
        if !(self.d_min >= 0.0) {
            return Err(CorridorError::InvalidConfig("d_min must be >= 0".into()));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(CorridorError::InvalidConfig("percentile must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceLabel {
    pub agent_id: String,
    pub relevant: bool,
    /// Closest corridor-corridor distance; +∞ when uncovered (serialized as null).
    #[serde(rename = "d_c", with = "inf_as_null")]
    pub closest_distance: f64,
    #[serde(default)]
    pub uncovered: bool,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Labels of one frame, in the order the frame lists its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub frame_id: String,
    pub labels: Vec<RelevanceLabel>,
}

impl FrameLabels {
    pub fn get(&self, agent_id: &str) -> Option<&RelevanceLabel> {
        self.labels.iter().find(|l| l.agent_id == agent_id)
    }
}

/// Sample times `t0, t0+dt, ...` clipped to `t0 + horizon` (endpoint included).
pub fn sample_times(t0: f64, horizon: f64, dt: f64) -> Vec<f64> {
    let steps = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
    (0..=steps).map(|k| t0 + (k as f64 * dt).min(horizon)).collect()
}

fn corridor_over(track: &AgentTrack, t0: f64, horizon: f64, dt: f64) -> Result<ConvexPolygon, CorridorError> {
    let mut pts = Vec::new();
    for t in sample_times(t0, horizon, dt) {
        let b = track.box_at(t).ok_or_else(|| CorridorError::InsufficientTrack {
            agent_id: track.agent_id.clone(),
            t0,
            t_end: t0 + horizon,
        })?;
        pts.extend_from_slice(&b.corners());
    }
    Ok(convex_hull(&pts)?)
}

/// Convex hull of all footprints of `track` sampled over `[t0, t0 + H]`.
pub fn swept_corridor(track: &AgentTrack, t0: f64, cfg: &RelevanceConfig) -> Result<ConvexPolygon, CorridorError> {
    corridor_over(track, t0, cfg.horizon, cfg.step_dt)
}

/// Horizon usable for `track` starting at `t0`: the full horizon when
/// covered, the remaining span when at least [`MIN_TRUNCATED_HORIZON`]
/// remains, otherwise `None`.
pub fn covered_horizon(track: &AgentTrack, t0: f64, cfg: &RelevanceConfig) -> Option<f64> {
    if track.box_at(t0).is_none() {
        return None;
    }
    let available = track.end_time() - t0;
    if available >= cfg.horizon - 1e-9 {
        Some(cfg.horizon)
    } else if available >= MIN_TRUNCATED_HORIZON {
        Some(available)
    } else {
        None
    }
}

/// Relevance of `agent` with respect to `ego` at `t0` over the full horizon.
pub fn relevance_label(
    agent: &AgentTrack,
    ego: &AgentTrack,
    t0: f64,
    cfg: &RelevanceConfig,
) -> Result<RelevanceLabel, CorridorError> {
    let a = swept_corridor(agent, t0, cfg)?;
    let e = swept_corridor(ego, t0, cfg)?;
    let d = polygon_distance(&a, &e);
    Ok(RelevanceLabel {
        agent_id: agent.agent_id.clone(),
        relevant: d <= cfg.d_min,
        closest_distance: d,
        uncovered: false,
    })
}

fn uncovered(agent_id: &str) -> RelevanceLabel {
    RelevanceLabel {
        agent_id: agent_id.to_string(),
        relevant: false,
        closest_distance: f64::INFINITY,
        uncovered: true,
    }
}

/// Closest corridor distances for every ground-truth agent of a frame.
/// Uncovered agents get `None`.
fn frame_distances(scene: &Scene, frame: &Frame, cfg: &RelevanceConfig) -> Vec<(String, Option<f64>)> {
    let t0 = frame.timestamp;
    let ego_h = covered_horizon(&scene.ego, t0, cfg);
    let mut ego_cache: HashMap<u64, Option<ConvexPolygon>> = HashMap::new();
    frame
        .gt_boxes
        .iter()
        .map(|g| {
            let d = (|| {
                let agent = scene.agent(&g.agent_id)?;
                let h = ego_h?.min(covered_horizon(agent, t0, cfg)?);
                let ego_poly = ego_cache
                    .entry(h.to_bits())
                    .or_insert_with(|| corridor_over(&scene.ego, t0, h, cfg.step_dt).ok())
                    .clone()?;
                let agent_poly = corridor_over(agent, t0, h, cfg.step_dt).ok()?;
                Some(polygon_distance(&agent_poly, &ego_poly))
            })();
            (g.agent_id.clone(), d)
        })
        .collect()
}

/// Label every ground-truth agent of every frame. Output is ordered by scene,
/// then frame, then the frame's ground-truth order.
pub fn label_dataset(dataset: &SceneDataset, cfg: &RelevanceConfig) -> Vec<FrameLabels> {
    let frames: Vec<(&Scene, &Frame)> = dataset.frames().collect();
    frames
        .par_iter()
        .map(|(scene, frame)| FrameLabels {
            frame_id: frame.frame_id.clone(),
            labels: frame_distances(scene, frame, cfg)
                .into_iter()
                .map(|(id, d)| match d {
                    Some(d) => RelevanceLabel { agent_id: id, relevant: d <= cfg.d_min, closest_distance: d, uncovered: false },
                    None => uncovered(&id),
                })
                .collect(),
        })
        .collect()
}

/// Relabel existing distances with a different threshold.
pub fn relabel(labels: &[FrameLabels], d_min: f64) -> Vec<FrameLabels> {
    labels
        .iter()
        .map(|f| FrameLabels {
            frame_id: f.frame_id.clone(),
            labels: f
                .labels
                .iter()
                .map(|l| RelevanceLabel { relevant: !l.uncovered && l.closest_distance <= d_min, ..l.clone() })
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub d_min: f64,
    pub percentile: f64,
    pub num_pairs: usize,
    /// Empirical CDF: `(distance, cumulative fraction)` over the ascending list.
    pub cdf: Vec<(f64, f64)>,
}

/// Nearest-rank percentile of an ascending list: element `⌈p·n⌉` (1-based).
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    Some(sorted[rank - 1])
}

pub fn empirical_cdf(sorted: &[f64]) -> Vec<(f64, f64)> {
    let n = sorted.len() as f64;
    sorted.iter().enumerate().map(|(i, &d)| (d, (i + 1) as f64 / n)).collect()
}

/// Choose `d_min` as the nearest-rank percentile of all covered ego-agent
/// corridor distances in the dataset.
pub fn calibrate_dmin(dataset: &SceneDataset, cfg: &RelevanceConfig) -> Result<Calibration, CorridorError> {
    let frames: Vec<(&Scene, &Frame)> = dataset.frames().collect();
    let mut dists: Vec<f64> = frames
        .par_iter()
        .flat_map_iter(|(s, f)| frame_distances(s, f, cfg).into_iter().filter_map(|(_, d)| d))
        .collect();
    dists.sort_by(f64::total_cmp);
    let d_min = nearest_rank(&dists, cfg.percentile).ok_or(CorridorError::EmptyDistribution)?;
    Ok(Calibration { d_min, percentile: cfg.percentile, num_pairs: dists.len(), cdf: empirical_cdf(&dists) })
}

/// Fraction of covered labels marked relevant.
pub fn relevant_fraction(labels: &[FrameLabels]) -> f64 {
    let covered = labels.iter().flat_map(|f| &f.labels).filter(|l| !l.uncovered);
    let (n, r) = covered.fold((0usize, 0usize), |(n, r), l| (n + 1, r + l.relevant as usize));
    if n == 0 {
        0.0
    } else {
        r as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TimedBox;
    use crate::geometry::{OrientedBoxBEV, Point2};

    fn straight(id: &str, x0: f64, y0: f64, vx: f64, vy: f64, yaw: f64, l: f64, w: f64, t_end: f64) -> AgentTrack {
        let boxes = (0..=((t_end / 0.5) as usize))
            .map(|k| {
                let t = k as f64 * 0.5;
                TimedBox {
                    t,
                    bbox: OrientedBoxBEV::new(Point2::new(x0 + vx * t, y0 + vy * t), yaw, l, w).unwrap(),
                }
            })
            .collect();
        AgentTrack::new(id, "car", boxes).unwrap()
    }

    #[test]
    fn static_agent_corridor_is_its_box() {
        let tr = straight("a", 3.0, 4.0, 0.0, 0.0, 0.4, 4.0, 2.0, 10.0);
        let c = swept_corridor(&tr, 0.0, &RelevanceConfig::default()).unwrap();
        assert_eq!(c.vertices().len(), 4);
        assert!((c.area() - 8.0).abs() < 1e-9);
    }

    #[test]
    fn translating_agent_sweeps_rectangle() {
        let tr = straight("a", 0.0, 0.0, 2.0, 0.0, 0.0, 4.0, 2.0, 10.0);
        let c = swept_corridor(&tr, 0.0, &RelevanceConfig::default()).unwrap();
        assert_eq!(c.vertices().len(), 4);
        assert!((c.area() - 28.0).abs() < 1e-9);
        let xs: Vec<f64> = c.vertices().iter().map(|p| p.x).collect();
        let span = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        assert!((span - 14.0).abs() < 1e-9);
    }

    #[test]
    fn short_track_is_insufficient() {
        let tr = straight("a", 0.0, 0.0, 1.0, 0.0, 0.0, 4.0, 2.0, 3.0);
        assert!(matches!(
            swept_corridor(&tr, 0.0, &RelevanceConfig::default()),
            Err(CorridorError::InsufficientTrack { .. })
        ));
    }

    #[test]
    fn crossing_and_far_agents() {
        let cfg = RelevanceConfig::default();
        let ego = straight("ego", 0.0, 0.0, 10.0, 0.0, 0.0, 4.08, 1.73, 10.0);
        let crossing = straight("x", 25.0, -10.0, 0.0, 4.0, std::f64::consts::FRAC_PI_2, 4.0, 2.0, 10.0);
        let l = relevance_label(&crossing, &ego, 0.0, &cfg).unwrap();
        assert!(l.relevant);
        assert_eq!(l.closest_distance, 0.0);

        let still = straight("ego", 0.0, 0.0, 0.0, 0.0, 0.0, 4.08, 1.73, 10.0);
        let parked = straight("p", 0.0, 100.0, 0.0, 0.0, 0.0, 4.0, 2.0, 10.0);
        let l = relevance_label(&parked, &still, 0.0, &cfg).unwrap();
        assert!(!l.relevant);
        assert!((l.closest_distance - (100.0 - 1.0 - 1.73 / 2.0)).abs() < 1e-9);
    }

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(nearest_rank(&v, 0.10), Some(1.0));
        assert_eq!(nearest_rank(&v, 1.0), Some(10.0));
        assert_eq!(nearest_rank(&v, 0.11), Some(2.0));
        assert_eq!(nearest_rank(&[], 0.5), None);
        let cdf = empirical_cdf(&v);
        assert_eq!(cdf.last(), Some(&(10.0, 1.0)));
    }

    #[test]
    fn sample_grid_includes_endpoint() {
        let ts = sample_times(2.0, 5.0, 0.1);
        assert_eq!(ts.len(), 51);
        assert_eq!(*ts.last().unwrap(), 7.0);
        let ts = sample_times(0.0, 1.0, 0.3);
        assert_eq!(ts, vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
    }

    #[test]
    fn label_serializes_inf_as_null() {
        let l = uncovered("a");
        let s = serde_json::to_string(&l).unwrap();
        assert!(s.contains("\"d_c\":null"));
        let back: RelevanceLabel = serde_json::from_str(&s).unwrap();
        assert!(back.closest_distance.is_infinite());
    }
}
