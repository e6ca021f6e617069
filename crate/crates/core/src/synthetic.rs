//! Desk-scale synthetic driving scenes: an ego on a straight or gently
//! curved road with parked, oncoming, leading, crossing and sidewalk agents.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    AgentTrack, DatasetMeta, EgoState, Frame, GtBox, Scene, SceneDataset, TimedBox, DEFAULT_EGO_LENGTH,
    DEFAULT_EGO_WIDTH,
};
use crate::geometry::{normalize_angle, OrientedBoxBEV, Point2, SE2Pose};

pub const CLASSES: [&str; 3] = ["car", "pedestrian", "cyclist"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub scenes: usize,
    pub agents_per_scene: usize,
    /// Keyframe span in seconds.
    pub duration: f64,
    pub frame_rate: f64,
    /// Tracks run this long past the last keyframe so horizons are covered.
    pub track_tail: f64,
    /// Track sampling step in seconds.
    pub track_dt: f64,
    pub ego_speed: (f64, f64),
    pub car_speed: (f64, f64),
    pub pedestrian_speed: (f64, f64),
    pub cyclist_speed: (f64, f64),
    /// Fraction of scenes where the road curves.
    pub curved_fraction: f64,
    /// Largest road curvature magnitude, 1/m.
    pub max_curvature: f64,
    /// Ground truth is annotated within this ego distance.
    pub annotation_range: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            scenes: 4,
            agents_per_scene: 12,
            duration: 20.0,
            frame_rate: 2.0,
            track_tail: 6.0,
            track_dt: 0.1,
            ego_speed: (4.0, 9.0),
            car_speed: (4.0, 11.0),
            pedestrian_speed: (0.8, 1.6),
            cyclist_speed: (2.5, 5.0),
            curved_fraction: 0.3,
            max_curvature: 0.004,
            annotation_range: 50.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), String> {
        let ranges = [self.ego_speed, self.car_speed, self.pedestrian_speed, self.cyclist_speed];
        if ranges.iter().any(|r| !(r.0 >= 0.0 && r.1 >= r.0 && r.1.is_finite())) {
            return Err("speed ranges need 0 <= min <= max".into());
        }
        if !(self.duration > 0.0 && self.frame_rate > 0.0 && self.track_dt > 0.0 && self.track_tail >= 0.0) {
            return Err("duration, frame_rate and track_dt must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.curved_fraction) || !(self.max_curvature >= 0.0) {
            return Err("curved_fraction must be in [0, 1] and max_curvature >= 0".into());
        }
        if !(self.annotation_range > 0.0) {
            return Err("annotation_range must be positive".into());
        }
        Ok(())
    }
}

/// Road centerline as a constant-curvature arc through the origin, heading +x.
#[derive(Debug, Clone, Copy)]
struct Road {
    curvature: f64,
}

impl Road {
    fn heading(&self, s: f64) -> f64 {
        self.curvature * s
    }

    fn point(&self, s: f64, lateral: f64) -> Point2 {
        let k = self.curvature;
        let c = if k.abs() < 1e-12 {
            Point2::new(s, 0.0)
        } else {
            Point2::new((k * s).sin() / k, (1.0 - (k * s).cos()) / k)
        };
        let th = self.heading(s);
        Point2::new(c.x - lateral * th.sin(), c.y + lateral * th.cos())
    }
}

#[derive(Debug, Clone, Copy)]
enum Motion {
    /// Along the road at fixed lateral offset; `dir` -1 drives against s.
    Road { s0: f64, lateral: f64, speed: f64, dir: f64, stop_go: Option<(f64, f64)>, weave: Weave },
    /// Constant speed and turn rate in the world frame.
    Free { start: Point2, yaw: f64, speed: f64, yaw_rate: f64 },
}

/// Lateral lane-keeping oscillation `amplitude · sin(2πt/period + phase)`.
#[derive(Debug, Clone, Copy, Default)]
struct Weave {
    amplitude: f64,
    period: f64,
    phase: f64,
}

impl Weave {
    fn random(rng: &mut impl Rng, amplitude: f64) -> Self {
        Weave { amplitude: rng.gen_range(0.5 * amplitude..amplitude), period: rng.gen_range(5.0..11.0), phase: rng.gen_range(0.0..2.0 * PI) }
    }

    fn offset(&self, t: f64) -> (f64, f64) {
        if self.amplitude == 0.0 {
            return (0.0, 0.0);
        }
        let w = 2.0 * PI / self.period;
        (self.amplitude * (w * t + self.phase).sin(), self.amplitude * w * (w * t + self.phase).cos())
    }
}

/// Distance covered by `t` under a go/stop cycle of `period` (moving for the
/// first half) shifted by `phase`.
fn stop_go_distance(speed: f64, period: f64, phase: f64, t: f64) -> f64 {
    let go = |tau: f64| {
        let cycles = (tau / period).floor();
        let rem = tau - cycles * period;
        speed * (cycles * period / 2.0 + rem.min(period / 2.0))
    };
    go(t + phase) - go(phase)
}

impl Motion {
    fn state(&self, road: &Road, t: f64) -> (Point2, f64, [f64; 2]) {
        match *self {
            Motion::Road { s0, lateral, speed, dir, stop_go, weave } => {
                let (ds, v) = match stop_go {
                    Some((period, phase)) => {
                        let moving = ((t + phase) / period).fract() < 0.5;
                        (stop_go_distance(speed, period, phase, t), if moving { speed } else { 0.0 })
                    }
                    None => (speed * t, speed),
                };
                let s = s0 + dir * ds;
                let (dl, dl_dt) = weave.offset(t);
                let drift = if v > 0.0 { (dir * dl_dt).atan2(v) } else { 0.0 };
                let yaw = normalize_angle(road.heading(s) + drift + if dir < 0.0 { PI } else { 0.0 });
                let speed = (v * v + if v > 0.0 { dl_dt * dl_dt } else { 0.0 }).sqrt();
                (road.point(s, lateral + dl), yaw, [speed * yaw.cos(), speed * yaw.sin()])
            }
            Motion::Free { start, yaw, speed, yaw_rate } => {
                let th = yaw + yaw_rate * t;
                let p = if yaw_rate.abs() < 1e-12 {
                    Point2::new(start.x + speed * t * yaw.cos(), start.y + speed * t * yaw.sin())
                } else {
                    let r = speed / yaw_rate;
                    Point2::new(start.x + r * (th.sin() - yaw.sin()), start.y - r * (th.cos() - yaw.cos()))
                };
                (p, normalize_angle(th), [speed * th.cos(), speed * th.sin()])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AgentKind {
    Parked,
    Oncoming,
    Lead,
    SameDirection,
    Cyclist,
    SidewalkPedestrian,
    CrossingPedestrian,
    CrossingCar,
    TurningCar,
}

const KIND_WEIGHTS: [(AgentKind, f64); 9] = [
    (AgentKind::Parked, 0.20),
    (AgentKind::Oncoming, 0.20),
    (AgentKind::Lead, 0.015),
    (AgentKind::SameDirection, 0.10),
    (AgentKind::Cyclist, 0.10),
    (AgentKind::SidewalkPedestrian, 0.22),
    (AgentKind::CrossingPedestrian, 0.04),
    (AgentKind::CrossingCar, 0.03),
    (AgentKind::TurningCar, 0.04),
];

fn pick_kind(rng: &mut impl Rng) -> AgentKind {
    let total: f64 = KIND_WEIGHTS.iter().map(|k| k.1).sum();
    let mut x = rng.gen_range(0.0..total);
    for &(k, w) in &KIND_WEIGHTS {
        if x < w {
            return k;
        }
        x -= w;
    }
    KIND_WEIGHTS[KIND_WEIGHTS.len() - 1].0
}

struct AgentPlan {
    class: &'static str,
    length: f64,
    width: f64,
    z: f64,
    height: f64,
    motion: Motion,
}

fn range(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.gen_range(r.0..r.1)
    } else {
        r.0
    }
}

fn side(rng: &mut impl Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn car_dims(rng: &mut impl Rng) -> (f64, f64) {
    (rng.gen_range(4.1..4.9), rng.gen_range(1.75..2.0))
}

fn plan_agent(kind: AgentKind, spec: &SyntheticSpec, road: &Road, ego_speed: f64, rng: &mut ChaCha8Rng) -> AgentPlan {
    let span = ego_speed * spec.duration;
    let ahead = |rng: &mut ChaCha8Rng| rng.gen_range(-20.0..span + 50.0);
    let car = |rng: &mut ChaCha8Rng, motion| {
        let (l, w) = car_dims(rng);
        AgentPlan { class: "car", length: l, width: w, z: 0.85, height: 1.6, motion }
    };
    let person = |motion| AgentPlan { class: "pedestrian", length: 0.7, width: 0.7, z: 0.9, height: 1.75, motion };
    match kind {
        AgentKind::Parked => {
            let m = Motion::Road { s0: ahead(rng), lateral: side(rng) * rng.gen_range(4.5..7.0), speed: 0.0, dir: 1.0, stop_go: None, weave: Weave::default() };
            car(rng, m)
        }
        AgentKind::Oncoming => {
            let speed = range(rng, spec.car_speed);
            let s0 = rng.gen_range(0.0..span + speed * spec.duration + 40.0);
            let m = Motion::Road { s0, lateral: -3.5 + rng.gen_range(-0.3..0.3), speed, dir: -1.0, stop_go: None, weave: Weave::random(rng, 0.25) };
            car(rng, m)
        }
        AgentKind::Lead => {
            let m = Motion::Road { s0: rng.gen_range(20.0..45.0), lateral: 0.0, speed: ego_speed * rng.gen_range(1.4..1.8), dir: 1.0, stop_go: None, weave: Weave::random(rng, 0.2) };
            car(rng, m)
        }
        AgentKind::SameDirection => {
            let stop_go = rng.gen_bool(0.3).then(|| (rng.gen_range(6.0..12.0), rng.gen_range(0.0..6.0)));
            let speed = range(rng, spec.car_speed);
            let m = Motion::Road { s0: ahead(rng), lateral: 3.6 + rng.gen_range(-0.3..0.3), speed, dir: 1.0, stop_go, weave: Weave::random(rng, 0.25) };
            car(rng, m)
        }
        AgentKind::Cyclist => {
            let m = Motion::Road {
                s0: ahead(rng),
                lateral: side(rng) * rng.gen_range(2.6..3.2),
                speed: range(rng, spec.cyclist_speed),
                dir: 1.0,
                stop_go: None,
                weave: Weave::random(rng, 0.2),
            };
            AgentPlan { class: "cyclist", length: 1.8, width: 0.6, z: 0.8, height: 1.6, motion: m }
        }
        AgentKind::SidewalkPedestrian => {
            let stop_go = rng.gen_bool(0.3).then(|| (rng.gen_range(4.0..10.0), rng.gen_range(0.0..4.0)));
            person(Motion::Road {
                s0: ahead(rng),
                lateral: side(rng) * rng.gen_range(6.0..9.0),
                speed: range(rng, spec.pedestrian_speed),
                dir: side(rng),
                stop_go,
                weave: Weave::random(rng, 0.3),
            })
        }
        AgentKind::CrossingPedestrian => {
            let s = ahead(rng);
            let from = side(rng);
            let start = road.point(s, from * rng.gen_range(6.0..12.0));
            let yaw = road.heading(s) - from * PI / 2.0;
            person(Motion::Free { start, yaw, speed: range(rng, spec.pedestrian_speed), yaw_rate: 0.0 })
        }
        AgentKind::CrossingCar => {
            let s = ahead(rng);
            let from = side(rng);
            let speed = range(rng, spec.car_speed);
            let start = road.point(s, from * rng.gen_range(20.0..20.0 + speed * spec.duration));
            let yaw = road.heading(s) - from * PI / 2.0;
            car(rng, Motion::Free { start, yaw, speed, yaw_rate: 0.0 })
        }
        AgentKind::TurningCar => {
            let s = ahead(rng);
            let from = side(rng);
            let speed = range(rng, spec.car_speed);
            let start = road.point(s, from * rng.gen_range(10.0..40.0));
            let yaw = road.heading(s) - from * PI / 2.0;
            let yaw_rate = side(rng) * rng.gen_range(0.05..0.15);
            car(rng, Motion::Free { start, yaw, speed, yaw_rate })
        }
    }
}

fn build_track(id: String, class: &str, length: f64, width: f64, motion: &Motion, road: &Road, times: &[f64]) -> AgentTrack {
    let mut boxes = Vec::with_capacity(times.len());
    let mut velocity = Vec::with_capacity(times.len());
    for &t in times {
        let (p, yaw, v) = motion.state(road, t);
        boxes.push(TimedBox { t, bbox: OrientedBoxBEV::new(p, yaw, length, width).expect("positive synthetic dims") });
        velocity.push(v);
    }
    AgentTrack { agent_id: id, class_name: class.to_string(), boxes, velocity: Some(velocity), attribute: None }
}

fn sample_grid(end: f64, dt: f64) -> Vec<f64> {
    let n = (end / dt).round() as usize;
    (0..=n).map(|i| i as f64 * dt).collect()
}

struct AgentInfo {
    z: f64,
    height: f64,
}

fn assemble_scene(
    scene_id: String,
    spec: &SyntheticSpec,
    road: Road,
    ego_speed: f64,
    ego_weave: Weave,
    plans: Vec<AgentPlan>,
) -> Scene {
    let times = sample_grid(spec.duration + spec.track_tail, spec.track_dt);
    let ego_motion = Motion::Road { s0: 0.0, lateral: 0.0, speed: ego_speed, dir: 1.0, stop_go: None, weave: ego_weave };
    let ego = build_track("ego".into(), "car", DEFAULT_EGO_LENGTH, DEFAULT_EGO_WIDTH, &ego_motion, &road, &times);
    let mut agents = Vec::with_capacity(plans.len());
    let mut info = Vec::with_capacity(plans.len());
    for (i, p) in plans.iter().enumerate() {
        agents.push(build_track(format!("{scene_id}-a{i:03}"), p.class, p.length, p.width, &p.motion, &road, &times));
        info.push(AgentInfo { z: p.z, height: p.height });
    }
    let n_frames = (spec.duration * spec.frame_rate).round() as usize;
    let frames = (0..n_frames)
        .map(|k| {
            let t = k as f64 / spec.frame_rate;
            let (ep, eyaw, _) = ego_motion.state(&road, t);
            let gt_boxes = agents
                .iter()
                .zip(&info)
                .filter_map(|(a, inf)| {
                    let b = a.box_at(t)?;
                    if b.center().distance(ep) > spec.annotation_range {
                        return None;
                    }
                    Some(GtBox {
                        agent_id: a.agent_id.clone(),
                        class_name: a.class_name.clone(),
                        bbox: b,
                        z: inf.z,
                        height: inf.height,
                        velocity: a.velocity_at(t),
                        attribute: None,
                    })
                })
                .collect();
            Frame {
                frame_id: format!("{scene_id}-f{k:03}"),
                timestamp: t,
                ego_pose: SE2Pose::new(ep, eyaw),
                ego_state: EgoState { speed: ego_speed, yaw_rate: ego_speed * road.curvature, acceleration: 0.0 },
                gt_boxes,
            }
        })
        .collect();
    Scene { scene_id, ego, agents, frames }
}

fn meta() -> DatasetMeta {
    DatasetMeta { classes: CLASSES.iter().map(|c| c.to_string()).collect(), ..DatasetMeta::default() }
}

/// Deterministic synthetic dataset for a spec.
pub fn gen_synthetic(spec: &SyntheticSpec) -> SceneDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scenes = (0..spec.scenes)
        .map(|si| {
            let mut srng = ChaCha8Rng::seed_from_u64(rng.gen());
            let curvature = if srng.gen_bool(spec.curved_fraction) && spec.max_curvature > 0.0 {
                side(&mut srng) * srng.gen_range(0.3 * spec.max_curvature..spec.max_curvature)
            } else {
                0.0
            };
            let road = Road { curvature };
            let ego_speed = range(&mut srng, spec.ego_speed);
            let ego_weave = Weave::random(&mut srng, 0.3);
            let plans = (0..spec.agents_per_scene)
                .map(|_| {
                    let kind = pick_kind(&mut srng);
                    plan_agent(kind, spec, &road, ego_speed, &mut srng)
                })
                .collect();
            assemble_scene(format!("s{si:03}"), spec, road, ego_speed, ego_weave, plans)
        })
        .collect();
    SceneDataset { meta: meta(), scenes }
}

/// One short scene where a pedestrian steps into the ego lane ahead.
pub fn crossing_scenario() -> SceneDataset {
    let spec = SyntheticSpec { scenes: 1, agents_per_scene: 1, duration: 4.0, ..SyntheticSpec::default() };
    let road = Road { curvature: 0.0 };
    let plan = AgentPlan {
        class: "pedestrian",
        length: 0.7,
        width: 0.7,
        z: 0.9,
        height: 1.75,
        motion: Motion::Free { start: Point2::new(25.0, 6.0), yaw: -PI / 2.0, speed: 1.4, yaw_rate: 0.0 },
    };
    SceneDataset { meta: meta(), scenes: vec![assemble_scene("crossing".into(), &spec, road, 6.0, Weave::default(), vec![plan])] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corridor::{label_dataset, RelevanceConfig};

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec { scenes: 2, seed: 7, ..SyntheticSpec::default() };
        let a = serde_json::to_string(&gen_synthetic(&spec)).unwrap();
        let b = serde_json::to_string(&gen_synthetic(&spec)).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&gen_synthetic(&SyntheticSpec { seed: 8, ..spec })).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_agents_is_ego_only() {
        let ds = gen_synthetic(&SyntheticSpec { scenes: 1, agents_per_scene: 0, ..SyntheticSpec::default() });
        ds.validate().unwrap();
        assert_eq!(ds.scenes[0].frames.len(), 40);
        assert!(ds.scenes[0].frames.iter().all(|f| f.gt_boxes.is_empty()));
        assert!(ds.scenes[0].agents.is_empty());
    }

    #[test]
    fn frames_at_two_hertz() {
        let ds = gen_synthetic(&SyntheticSpec { scenes: 1, ..SyntheticSpec::default() });
        ds.validate().unwrap();
        let f = &ds.scenes[0].frames;
        assert!((f[1].timestamp - f[0].timestamp - 0.5).abs() < 1e-12);
        assert!((f[f.len() - 1].timestamp - 19.5).abs() < 1e-12);
    }

    #[test]
    fn crossing_agent_is_relevant() {
        let ds = crossing_scenario();
        let labels = label_dataset(&ds, &RelevanceConfig::default());
        let first = &labels[0].labels[0];
        assert!(!first.uncovered);
        assert!(first.relevant, "{first:?}");
    }

    #[test]
    fn stop_and_go_distance() {
        // 4 s cycle: 2 s moving at 3 m/s, 2 s stopped
        assert_eq!(stop_go_distance(3.0, 4.0, 0.0, 2.0), 6.0);
        assert_eq!(stop_go_distance(3.0, 4.0, 0.0, 4.0), 6.0);
        assert_eq!(stop_go_distance(3.0, 4.0, 0.0, 5.0), 9.0);
        assert_eq!(stop_go_distance(3.0, 4.0, 2.0, 2.0), 0.0);
    }

    #[test]
    fn curved_road_keeps_lateral_offset() {
        let road = Road { curvature: 0.01 };
        for s in [0.0, 10.0, 50.0] {
            let c = road.point(s, 0.0);
            let p = road.point(s, 3.0);
            assert!((c.distance(p) - 3.0).abs() < 1e-12);
        }
    }
}
