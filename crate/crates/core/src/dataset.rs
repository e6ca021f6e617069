//! Scene/frame/track containers shared by labeling, evaluation and the
//! pipeline driver. Everything is in a fixed world frame; per-frame ego poses
//! map ego-frame quantities into it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_diff, normalize_angle, OrientedBoxBEV, Point2, SE2Pose};

/// Ego footprint used when dataset metadata does not provide one.
pub const DEFAULT_EGO_LENGTH: f64 = 4.08;
pub const DEFAULT_EGO_WIDTH: f64 = 1.73;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("track {0}: timestamps must be strictly increasing")]
    NonMonotonicTrack(String),
    #[error("track {0}: no boxes")]
    EmptyTrack(String),
    #[error("track {0}: velocity list length does not match boxes")]
    VelocityLength(String),
    #[error("scene {0}: frame timestamps must be increasing")]
    FrameOrder(String),
    #[error("scene {scene}: duplicate agent id {agent}")]
    DuplicateAgent { scene: String, agent: String },
    #[error("scene {scene}: frame {frame} references unknown agent {agent}")]
    UnknownAgent { scene: String, frame: String, agent: String },
    #[error("duplicate frame id {0}")]
    DuplicateFrame(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedBox {
    pub t: f64,
    #[serde(rename = "box")]
    pub bbox: OrientedBoxBEV,
}

/// A time-ordered sequence of BEV boxes for one agent (or the ego).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: String,
    pub class_name: String,
    pub boxes: Vec<TimedBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
}

impl AgentTrack {
    pub fn new(agent_id: impl Into<String>, class_name: impl Into<String>, boxes: Vec<TimedBox>) -> Result<Self, DatasetError> {
        let t = AgentTrack {
            agent_id: agent_id.into(),
            class_name: class_name.into(),
            boxes,
            velocity: None,
            attribute: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.boxes.is_empty() {
            return Err(DatasetError::EmptyTrack(self.agent_id.clone()));
        }
        if self.boxes.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(DatasetError::NonMonotonicTrack(self.agent_id.clone()));
        }
        if let Some(v) = &self.velocity {
            if v.len() != self.boxes.len() {
                return Err(DatasetError::VelocityLength(self.agent_id.clone()));
            }
        }
        Ok(())
    }

    pub fn start_time(&self) -> f64 {
        self.boxes[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.boxes[self.boxes.len() - 1].t
    }

    /// Box at time `t`: linear center/dimension interpolation and shortest-arc
    /// yaw interpolation between keyframes. `None` outside the track span.
    pub fn box_at(&self, t: f64) -> Option<OrientedBoxBEV> {
        const EPS: f64 = 1e-9;
        if t < self.start_time() - EPS || t > self.end_time() + EPS {
            return None;
        }
        let idx = self.boxes.partition_point(|b| b.t <= t);
        if idx == 0 {
            return Some(self.boxes[0].bbox);
        }
        if idx == self.boxes.len() {
            return Some(self.boxes[idx - 1].bbox);
        }
        let a = &self.boxes[idx - 1];
        let b = &self.boxes[idx];
        if t == a.t {
            return Some(a.bbox);
        }
        let s = (t - a.t) / (b.t - a.t);
        let ca = a.bbox.center();
        let cb = b.bbox.center();
        let center = ca + (cb - ca) * s;
        let yaw = normalize_angle(a.bbox.yaw() + s * angle_diff(a.bbox.yaw(), b.bbox.yaw()));
        let length = a.bbox.length() + s * (b.bbox.length() - a.bbox.length());
        let width = a.bbox.width() + s * (b.bbox.width() - a.bbox.width());
        OrientedBoxBEV::new(center, yaw, length, width).ok()
    }

    /// Velocity at `t`, either from annotations (linear interpolation) or a
    /// finite difference of the interpolated centers.
    pub fn velocity_at(&self, t: f64) -> Option<[f64; 2]> {
        if let Some(vs) = &self.velocity {
            let idx = self.boxes.partition_point(|b| b.t <= t);
            if idx == 0 {
                return vs.first().copied();
            }
            if idx == self.boxes.len() {
                return vs.last().copied();
            }
            let (ta, tb) = (self.boxes[idx - 1].t, self.boxes[idx].t);
            let s = (t - ta) / (tb - ta);
            let (va, vb) = (vs[idx - 1], vs[idx]);
            return Some([va[0] + s * (vb[0] - va[0]), va[1] + s * (vb[1] - va[1])]);
        }
        if self.boxes.len() < 2 {
            return Some([0.0, 0.0]);
        }
        let h = 0.25;
        let lo = (t - h).max(self.start_time());
        let hi = (t + h).min(self.end_time());
        if hi <= lo {
            return None;
        }
        let a = self.box_at(lo)?.center();
        let b = self.box_at(hi)?.center();
        Some([(b.x - a.x) / (hi - lo), (b.y - a.y) / (hi - lo)])
    }
}

/// A ground-truth box as annotated in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub agent_id: String,
    pub class_name: String,
    #[serde(rename = "box")]
    pub bbox: OrientedBoxBEV,
    pub z: f64,
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
}

/// Ego kinematics used by the planning-relevance head.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    pub speed: f64,
    pub yaw_rate: f64,
    pub acceleration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: String,
    pub timestamp: f64,
    pub ego_pose: SE2Pose,
    #[serde(default)]
    pub ego_state: EgoState,
    pub gt_boxes: Vec<GtBox>,
}

impl Frame {
    pub fn ego_center(&self) -> Point2 {
        self.ego_pose.translation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub ego: AgentTrack,
    pub agents: Vec<AgentTrack>,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn agent(&self, id: &str) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.agent_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub classes: Vec<String>,
    #[serde(default = "default_ego_length")]
    pub ego_length: f64,
    #[serde(default = "default_ego_width")]
    pub ego_width: f64,
}

fn default_ego_length() -> f64 {
    DEFAULT_EGO_LENGTH
}
fn default_ego_width() -> f64 {
    DEFAULT_EGO_WIDTH
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self { classes: Vec::new(), ego_length: DEFAULT_EGO_LENGTH, ego_width: DEFAULT_EGO_WIDTH }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDataset {
    pub meta: DatasetMeta,
    pub scenes: Vec<Scene>,
}

impl SceneDataset {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut frame_ids = std::collections::HashSet::new();
        for scene in &self.scenes {
            scene.ego.validate()?;
            let mut ids = std::collections::HashSet::new();
            for a in &scene.agents {
                a.validate()?;
                if !ids.insert(a.agent_id.as_str()) {
                    return Err(DatasetError::DuplicateAgent {
                        scene: scene.scene_id.clone(),
                        agent: a.agent_id.clone(),
                    });
                }
            }
            if scene.frames.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
                return Err(DatasetError::FrameOrder(scene.scene_id.clone()));
            }
            for f in &scene.frames {
                if !frame_ids.insert(f.frame_id.as_str()) {
                    return Err(DatasetError::DuplicateFrame(f.frame_id.clone()));
                }
                for g in &f.gt_boxes {
                    if !ids.contains(g.agent_id.as_str()) {
                        return Err(DatasetError::UnknownAgent {
                            scene: scene.scene_id.clone(),
                            frame: f.frame_id.clone(),
                            agent: g.agent_id.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> impl Iterator<Item = (&Scene, &Frame)> {
        self.scenes.iter().flat_map(|s| s.frames.iter().map(move |f| (s, f)))
    }

    pub fn num_frames(&self) -> usize {
        self.scenes.iter().map(|s| s.frames.len()).sum()
    }
}
