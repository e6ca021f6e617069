//! Detection metrics: center-distance AP, true-positive errors and NDS, plus
//! the range-filtered (RA) and relevance-filtered (RM) variants.
//!
//! AP follows the published nuScenes devkit: precision is sampled on 101
//! evenly spaced recall points by linear interpolation, points with recall
//! at or below `min_recall` are dropped, precision is floored at
//! `min_precision` and the mean is normalized by `1 - min_precision`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{greedy_match, GtCenter, ScoredCenter};
use crate::corridor::FrameLabels;
use crate::dataset::{GtBox, SceneDataset};
use crate::geometry::{angle_diff, OrientedBoxBEV, Point2};

pub const AP_FORMULA: &str =
    "devkit: mean over 101-point interpolated PR curve of max(p - min_precision, 0) for recall > min_recall, / (1 - min_precision)";
pub const RM_FN_POLICY: &str = "discard-irrelevant-matches";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("class {0} has no ground truth")]
    NoGroundTruth(String),
    #[error("frame {frame}: ground-truth agent {agent} has no relevance label")]
    MissingLabels { frame: String, agent: String },
    #[error("detection references unknown frame {0}")]
    UnknownFrame(String),
    #[error("invalid metrics config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_id: String,
    pub class_name: String,
    pub bbox: OrientedBoxBEV,
    pub z: f64,
    pub height: f64,
    pub velocity: [f64; 2],
    pub attribute: String,
    pub score: f64,
}

/// Wire format of one detection line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame_id: String,
    pub class: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoxRecord,
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default = "none_attr")]
    pub attribute: String,
}

fn none_attr() -> String {
    "none".into()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
}

impl TryFrom<DetectionRecord> for Detection {
    type Error = String;
    fn try_from(r: DetectionRecord) -> Result<Self, String> {
        if !(0.0..=1.0).contains(&r.score) {
            return Err(format!("score {} outside [0, 1]", r.score));
        }
        if !(r.bbox.h > 0.0) {
            return Err("box height must be positive".into());
        }
        let bbox = OrientedBoxBEV::new(Point2::new(r.bbox.x, r.bbox.y), r.bbox.yaw, r.bbox.l, r.bbox.w)
            .map_err(|e| e.to_string())?;
        Ok(Detection {
            frame_id: r.frame_id,
            class_name: r.class,
            bbox,
            z: r.bbox.z,
            height: r.bbox.h,
            velocity: r.velocity,
            attribute: r.attribute,
            score: r.score,
        })
    }
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        DetectionRecord {
            frame_id: d.frame_id.clone(),
            class: d.class_name.clone(),
            score: d.score,
            bbox: BoxRecord {
                x: d.bbox.center().x,
                y: d.bbox.center().y,
                z: d.z,
                yaw: d.bbox.yaw(),
                l: d.bbox.length(),
                w: d.bbox.width(),
                h: d.height,
            },
            velocity: d.velocity,
            attribute: d.attribute.clone(),
        }
    }
}

impl Detection {
    /// A detection sitting exactly on a ground-truth box.
    pub fn from_gt(frame_id: &str, g: &GtBox, score: f64) -> Detection {
        Detection {
            frame_id: frame_id.to_string(),
            class_name: g.class_name.clone(),
            bbox: g.bbox,
            z: g.z,
            height: g.height,
            velocity: g.velocity.unwrap_or([0.0, 0.0]),
            attribute: g.attribute.clone().unwrap_or_else(none_attr),
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub center_thresholds: Vec<f64>,
    /// Threshold at which true-positive errors are measured.
    pub tp_threshold: f64,
    pub ra_radius: f64,
    pub min_recall: f64,
    pub min_precision: f64,
    /// Classes evaluated; empty means every class present in the ground truth.
    #[serde(default)]
    pub classes: Vec<String>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            center_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            ra_radius: 30.0,
            min_recall: 0.1,
            min_precision: 0.1,
            classes: Vec::new(),
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.center_thresholds.is_empty()
            || self.center_thresholds.iter().any(|t| !(*t > 0.0))
            || self.center_thresholds.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(MetricsError::InvalidConfig("center_thresholds must be positive and ascending".into()));
        }
        if !(self.ra_radius > 0.0) {
            return Err(MetricsError::InvalidConfig("ra_radius must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.min_recall) || !(0.0..1.0).contains(&self.min_precision) {
            return Err(MetricsError::InvalidConfig("min_recall/min_precision must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn largest_threshold(&self) -> f64 {
        self.center_thresholds.iter().cloned().fold(0.0, f64::max)
    }
}

/// Detections and ground truth of one frame after any filtering.
#[derive(Debug, Clone)]
pub struct EvalFrame<'a> {
    pub frame_id: &'a str,
    pub ego_center: Point2,
    pub dets: Vec<&'a Detection>,
    pub gts: Vec<&'a GtBox>,
}

/// `np.interp(x, xp, fp, right=0)` for non-decreasing `xp`.
fn interp_right_zero(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    let last = xp.len() - 1;
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[last] {
        return 0.0;
    }
    let j = xp.partition_point(|&v| v <= x) - 1;
    if j == last || x == xp[j] {
        return fp[j];
    }
    let slope = (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j]);
    slope * (x - xp[j]) + fp[j]
}

/// AP from the true-positive flags of score-sorted detections.
pub fn ap_from_tp_flags(tp_flags: &[bool], num_gt: usize, min_recall: f64, min_precision: f64) -> f64 {
    if tp_flags.is_empty() || num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prec = Vec::with_capacity(tp_flags.len());
    let mut rec = Vec::with_capacity(tp_flags.len());
    for &f in tp_flags {
        if f {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        prec.push(tp / (tp + fp));
        rec.push(tp / num_gt as f64);
    }
    let first = (100.0 * min_recall).round() as usize + 1;
    if first > 100 {
        return 0.0;
    }
    let clipped: Vec<f64> =
        (first..=100).map(|i| (interp_right_zero(i as f64 / 100.0, &rec, &prec) - min_precision).max(0.0)).collect();
    let ap = compensated_sum(&clipped) / (clipped.len() as f64 * (1.0 - min_precision));
    ap.clamp(0.0, 1.0)
}

/// Neumaier summation; keeps a perfect curve at exactly 1.0.
pub(crate) fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Per-class matching outcome at one threshold, detections in global score
/// order.
struct ClassMatches<'a> {
    tp_flags: Vec<bool>,
    pairs: Vec<(&'a Detection, &'a GtBox)>,
    num_gt: usize,
}

fn match_class<'a>(frames: &[EvalFrame<'a>], class: &str, threshold: f64) -> ClassMatches<'a> {
    // (score, frame_id, local index, is_tp, matched gt)
    let mut scored: Vec<(f64, &str, usize, Option<&'a GtBox>, &'a Detection)> = Vec::new();
    let mut num_gt = 0;
    for f in frames {
        let dets: Vec<&'a Detection> = f.dets.iter().copied().filter(|d| d.class_name == class).collect();
        let gts: Vec<&'a GtBox> = f.gts.iter().copied().filter(|g| g.class_name == class).collect();
        num_gt += gts.len();
        let dc: Vec<ScoredCenter> = dets
            .iter()
            .map(|d| ScoredCenter { class_name: &d.class_name, center: d.bbox.center(), score: d.score })
            .collect();
        let gc: Vec<GtCenter> = gts.iter().map(|g| GtCenter { class_name: &g.class_name, center: g.bbox.center() }).collect();
        let mut matched: Vec<Option<&'a GtBox>> = vec![None; dets.len()];
        for (di, gi) in greedy_match(&dc, &gc, threshold) {
            matched[di] = Some(gts[gi]);
        }
        for (i, d) in dets.iter().enumerate() {
            scored.push((d.score, f.frame_id, i, matched[i], d));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    ClassMatches {
        tp_flags: scored.iter().map(|s| s.3.is_some()).collect(),
        pairs: scored.iter().filter_map(|s| s.3.map(|g| (s.4, g))).collect(),
        num_gt,
    }
}

/// AP of one class at one center threshold.
pub fn average_precision(frames: &[EvalFrame<'_>], class: &str, threshold: f64, cfg: &MetricsConfig) -> Result<f64, MetricsError> {
    let m = match_class(frames, class, threshold);
    if m.num_gt == 0 {
        return Err(MetricsError::NoGroundTruth(class.to_string()));
    }
    Ok(ap_from_tp_flags(&m.tp_flags, m.num_gt, cfg.min_recall, cfg.min_precision))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors { ate: 1.0, ase: 1.0, aoe: 1.0, ave: 1.0, aae: 1.0 };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }

    fn mean(items: &[TpErrors]) -> TpErrors {
        if items.is_empty() {
            return TpErrors::WORST;
        }
        let n = items.len() as f64;
        let s = items.iter().fold([0.0; 5], |mut acc, e| {
            for (a, v) in acc.iter_mut().zip(e.as_array()) {
                *a += v;
            }
            acc
        });
        TpErrors { ate: s[0] / n, ase: s[1] / n, aoe: s[2] / n, ave: s[3] / n, aae: s[4] / n }
    }
}

/// 1 − IoU of two boxes aligned on center and yaw.
pub fn scale_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// Mean true-positive errors over matched pairs; all 1.0 when empty.
pub fn tp_errors(pairs: &[(&Detection, &GtBox)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mut e = [0.0; 5];
    for (d, g) in pairs {
        e[0] += d.bbox.center().distance(g.bbox.center());
        e[1] += scale_error(
            [d.bbox.length(), d.bbox.width(), d.height],
            [g.bbox.length(), g.bbox.width(), g.height],
        );
        e[2] += angle_diff(d.bbox.yaw(), g.bbox.yaw()).abs();
        let gv = g.velocity.unwrap_or([0.0, 0.0]);
        e[3] += (d.velocity[0] - gv[0]).hypot(d.velocity[1] - gv[1]);
        let ga = g.attribute.as_deref().unwrap_or("none");
        e[4] += if d.attribute == ga { 0.0 } else { 1.0 };
    }
    TpErrors { ate: e[0] / n, ase: e[1] / n, aoe: e[2] / n, ave: e[3] / n, aae: e[4] / n }
}

/// NDS over all five TP errors.
pub fn nds(map: f64, errors: &TpErrors) -> f64 {
    nds_masked(map, errors, [true; 5])
}

/// NDS with some TP error terms excluded; the composite is renormalized by
/// the number of terms kept (5 weights for mAP plus one per included error).
pub fn nds_masked(map: f64, errors: &TpErrors, include: [bool; 5]) -> f64 {
    let mut num = 5.0 * map;
    let mut den = 5.0;
    for (e, keep) in errors.as_array().into_iter().zip(include) {
        if keep {
            num += 1.0 - e.min(1.0);
            den += 1.0;
        }
    }
    num / den
}

/// Keep items whose BEV center is within `ra_radius` of the ego.
pub fn apply_ra_filter<'a>(frame: &EvalFrame<'a>, ra_radius: f64) -> EvalFrame<'a> {
    let keep = |c: Point2| c.distance(frame.ego_center) <= ra_radius;
    EvalFrame {
        frame_id: frame.frame_id,
        ego_center: frame.ego_center,
        dets: frame.dets.iter().copied().filter(|d| keep(d.bbox.center())).collect(),
        gts: frame.gts.iter().copied().filter(|g| keep(g.bbox.center())).collect(),
    }
}

/// Restrict ground truth to relevant agents and drop detections that match an
/// irrelevant agent at `match_threshold`. Dropped detections count neither as
/// true nor false positives.
pub fn apply_rm_filter<'a>(
    frame: &EvalFrame<'a>,
    labels: &FrameLabels,
    match_threshold: f64,
) -> Result<EvalFrame<'a>, MetricsError> {
    let mut relevant = Vec::with_capacity(frame.gts.len());
    for g in &frame.gts {
        let l = labels.get(&g.agent_id).ok_or_else(|| MetricsError::MissingLabels {
            frame: frame.frame_id.to_string(),
            agent: g.agent_id.clone(),
        })?;
        relevant.push(l.relevant);
    }
    let dc: Vec<ScoredCenter> = frame
        .dets
        .iter()
        .map(|d| ScoredCenter { class_name: &d.class_name, center: d.bbox.center(), score: d.score })
        .collect();
    let gc: Vec<GtCenter> =
        frame.gts.iter().map(|g| GtCenter { class_name: &g.class_name, center: g.bbox.center() }).collect();
    let mut drop = vec![false; frame.dets.len()];
    for (di, gi) in greedy_match(&dc, &gc, match_threshold) {
        if !relevant[gi] {
            drop[di] = true;
        }
    }
    Ok(EvalFrame {
        frame_id: frame.frame_id,
        ego_center: frame.ego_center,
        dets: frame.dets.iter().zip(&drop).filter(|(_, &x)| !x).map(|(d, _)| *d).collect(),
        gts: frame.gts.iter().zip(&relevant).filter(|(_, &r)| r).map(|(g, _)| *g).collect(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub gt: usize,
    pub det: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    /// class -> threshold label -> AP
    pub per_class_ap: BTreeMap<String, BTreeMap<String, f64>>,
    pub mean_ap: f64,
    pub tp_errors: TpErrors,
    pub per_class_tp_errors: BTreeMap<String, TpErrors>,
    pub nds: f64,
    /// Counts at the TP-error threshold.
    pub counts: Counts,
    /// Classes without ground truth, excluded from means.
    pub excluded_classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub ap_formula: String,
    pub rm_fn_policy: String,
    pub center_thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub ra_radius: f64,
    /// TP error terms entering NDS, in (ATE, ASE, AOE, AVE, AAE) order.
    pub nds_components: [bool; 5],
    pub nds_renormalized: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "mAP_RA")]
    pub map_ra: f64,
    #[serde(rename = "NDS_RA")]
    pub nds_ra: f64,
    #[serde(rename = "NDS_RM")]
    pub nds_rm: Option<f64>,
    pub all: VariantMetrics,
    pub ra: VariantMetrics,
    pub rm: Option<VariantMetrics>,
    pub metadata: ReportMetadata,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 11] =
        ["mAP", "NDS", "mAP_RA", "NDS_RA", "NDS_RM", "ATE", "ASE", "AOE", "AVE", "AAE", "num_gt"];

    pub fn csv_row(&self) -> Vec<String> {
        let e = self.all.tp_errors;
        vec![
            self.map.to_string(),
            self.nds.to_string(),
            self.map_ra.to_string(),
            self.nds_ra.to_string(),
            self.nds_rm.map_or_else(|| "nan".into(), |v| v.to_string()),
            e.ate.to_string(),
            e.ase.to_string(),
            e.aoe.to_string(),
            e.ave.to_string(),
            e.aae.to_string(),
            self.all.counts.gt.to_string(),
        ]
    }
}

fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

fn evaluate_variant(frames: &[EvalFrame<'_>], classes: &[String], cfg: &MetricsConfig, include: [bool; 5]) -> VariantMetrics {
    let mut per_class_ap = BTreeMap::new();
    let mut per_class_tp = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut class_means = Vec::new();
    let mut tp_list = Vec::new();
    let mut counts = Counts::default();

    for class in classes {
        let mut aps = BTreeMap::new();
        let mut ok = true;
        for &t in &cfg.center_thresholds {
            match average_precision(frames, class, t, cfg) {
                Ok(ap) => {
                    aps.insert(threshold_key(t), ap);
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        let m = match_class(frames, class, cfg.tp_threshold);
        counts.gt += m.num_gt;
        counts.det += m.tp_flags.len();
        counts.tp += m.pairs.len();
        counts.fp += m.tp_flags.len() - m.pairs.len();
        if !ok {
            excluded.push(class.clone());
            continue;
        }
        class_means.push(aps.values().sum::<f64>() / aps.len() as f64);
        per_class_ap.insert(class.clone(), aps);
        let e = tp_errors(&m.pairs);
        per_class_tp.insert(class.clone(), e);
        tp_list.push(e);
    }
    let mean_ap = if class_means.is_empty() { 0.0 } else { class_means.iter().sum::<f64>() / class_means.len() as f64 };
    let tp = TpErrors::mean(&tp_list);
    VariantMetrics {
        per_class_ap,
        mean_ap,
        tp_errors: tp,
        per_class_tp_errors: per_class_tp,
        nds: nds_masked(mean_ap, &tp, include),
        counts,
        excluded_classes: excluded,
    }
}

/// Evaluate every variant in one pass. RM metrics require `labels`.
pub fn evaluate(
    dataset: &SceneDataset,
    detections: &[Detection],
    labels: Option<&[FrameLabels]>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    cfg.validate()?;
    let mut frames: BTreeMap<&str, EvalFrame<'_>> = BTreeMap::new();
    let mut any_velocity = false;
    let mut any_attribute = false;
    for (_, f) in dataset.frames() {
        for g in &f.gt_boxes {
            any_velocity |= g.velocity.is_some();
            any_attribute |= g.attribute.is_some();
        }
        frames.insert(
            &f.frame_id,
            EvalFrame { frame_id: &f.frame_id, ego_center: f.ego_center(), dets: Vec::new(), gts: f.gt_boxes.iter().collect() },
        );
    }
    for d in detections {
        frames
            .get_mut(d.frame_id.as_str())
            .ok_or_else(|| MetricsError::UnknownFrame(d.frame_id.clone()))?
            .dets
            .push(d);
    }
    let frames: Vec<EvalFrame<'_>> = frames.into_values().collect();

    let classes: Vec<String> = if cfg.classes.is_empty() {
        let mut c: Vec<String> = frames.iter().flat_map(|f| f.gts.iter().map(|g| g.class_name.clone())).collect();
        c.sort();
        c.dedup();
        c
    } else {
        cfg.classes.clone()
    };

    let include = [true, true, true, any_velocity, any_attribute];
    let mut notes = Vec::new();

    let all = evaluate_variant(&frames, &classes, cfg, include);
    let ra_frames: Vec<EvalFrame<'_>> = frames.iter().map(|f| apply_ra_filter(f, cfg.ra_radius)).collect();
    let ra = evaluate_variant(&ra_frames, &classes, cfg, include);

    let rm = match labels {
        None => {
            notes.push("no relevance labels supplied; RM metrics not computed".to_string());
            None
        }
        Some(labels) => {
            let by_id: HashMap<&str, &FrameLabels> = labels.iter().map(|l| (l.frame_id.as_str(), l)).collect();
            let empty = FrameLabels { frame_id: String::new(), labels: Vec::new() };
            let filtered: Result<Vec<EvalFrame<'_>>, MetricsError> = frames
                .iter()
                .map(|f| apply_rm_filter(f, by_id.get(f.frame_id).copied().unwrap_or(&empty), cfg.largest_threshold()))
                .collect();
            match filtered {
                Ok(fr) => Some(evaluate_variant(&fr, &classes, cfg, include)),
                Err(e) => {
                    notes.push(format!("RM metrics not computed: {e}"));
                    None
                }
            }
        }
    };

    Ok(MetricsReport {
        map: all.mean_ap,
        nds: all.nds,
        map_ra: ra.mean_ap,
        nds_ra: ra.nds,
        nds_rm: rm.as_ref().map(|v| v.nds),
        all,
        ra,
        rm,
        metadata: ReportMetadata {
            ap_formula: AP_FORMULA.into(),
            rm_fn_policy: RM_FN_POLICY.into(),
            center_thresholds: cfg.center_thresholds.clone(),
            tp_threshold: cfg.tp_threshold,
            ra_radius: cfg.ra_radius,
            nds_components: include,
            nds_renormalized: include.iter().any(|k| !k),
            notes,
        },
    })
}
