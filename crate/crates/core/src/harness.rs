//! End-to-end runs behind the `simulate`, `curve` and relevance-training
//! commands.

use serde::Serialize;
use thiserror::Error;

use crate::config::RunConfig;
use crate::corridor::{label_dataset, FrameLabels};
use crate::dataset::{Frame, SceneDataset};
use crate::metrics::{evaluate, Detection};
use crate::profiler::{pipeline_flops, PipelineShape};
use crate::sparsity::training::{
    agent_scores, fit_detection_heads, relevance_samples, roc_auc, train_relevance_head, HeadStage, TrainStep,
};
use crate::sparsity::{run_scene, ModelParams, PipelineOptions, RunMode, ScheduleConfig, SparsityTrace};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid input: {0}")]
    Data(String),
    #[error("check failed: {0}")]
    Check(String),
}

fn data<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Data(e.to_string())
}

/// First `n` scenes and the rest.
pub fn split_scenes(ds: &SceneDataset, n: usize) -> Result<(SceneDataset, SceneDataset), HarnessError> {
    if n == 0 || n >= ds.scenes.len() {
        return Err(HarnessError::Data(format!("cannot split {} scenes at {n}", ds.scenes.len())));
    }
    let part = |s: &[crate::dataset::Scene]| SceneDataset { meta: ds.meta.clone(), scenes: s.to_vec() };
    Ok((part(&ds.scenes[..n]), part(&ds.scenes[n..])))
}

fn frames(ds: &SceneDataset) -> Vec<&Frame> {
    ds.scenes.iter().flat_map(|s| s.frames.iter()).collect()
}

fn with_labels<'a>(ds: &'a SceneDataset, labels: &'a [FrameLabels]) -> Result<Vec<(&'a Frame, &'a FrameLabels)>, HarnessError> {
    frames(ds)
        .into_iter()
        .map(|f| {
            labels
                .iter()
                .find(|l| l.frame_id == f.frame_id)
                .map(|l| (f, l))
                .ok_or_else(|| HarnessError::Data(format!("no labels for frame {}", f.frame_id)))
        })
        .collect()
}

pub fn run_mode(tkr: f64) -> RunMode {
    if tkr == 1.0 {
        RunMode::Dense
    } else {
        RunMode::SparseEval
    }
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub frame_id: String,
    pub detections: Vec<Detection>,
    pub trace: SparsityTrace,
}

/// Run every scene with `params` under `schedule`.
pub fn run_dataset(params: &ModelParams, ds: &SceneDataset, schedule: &ScheduleConfig, opts: &PipelineOptions) -> Result<Vec<FrameOutput>, HarnessError> {
    let mut out = Vec::with_capacity(ds.num_frames());
    for s in &ds.scenes {
        for (f, r) in s.frames.iter().zip(run_scene(params, s, schedule, opts).map_err(data)?) {
            out.push(FrameOutput { frame_id: f.frame_id.clone(), detections: r.detections, trace: r.output.trace });
        }
    }
    Ok(out)
}

/// Toy model with detection heads fit on `train` for `schedule`.
pub fn fitted_model(cfg: &RunConfig, base: &ModelParams, train: &SceneDataset, schedule: &ScheduleConfig) -> Result<ModelParams, HarnessError> {
    let mut params = base.clone();
    params.det_heads = fit_detection_heads(base, &frames(train), schedule, &cfg.head_fit).map_err(data)?;
    Ok(params)
}

#[derive(Debug, Clone, Serialize)]
pub struct RelevanceReport {
    pub stage: HeadStage,
    pub train_frames: usize,
    pub test_frames: usize,
    pub test_agents: usize,
    pub test_relevant: usize,
    pub initial_test_auc: Option<f64>,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub steps: Vec<TrainStep>,
}

/// Train one relevance head of `params` on corridor labels of `train` and
/// score agents of `test` against their labels.
pub fn train_relevance(
    cfg: &RunConfig,
    params: &mut ModelParams,
    train: (&SceneDataset, &[FrameLabels]),
    test: Option<(&SceneDataset, &[FrameLabels])>,
    stage: HeadStage,
) -> Result<RelevanceReport, HarnessError> {
    let rt = &cfg.relevance_training;
    let gate = cfg.head_fit.match_gate;
    let tr = relevance_samples(params, &with_labels(train.0, train.1)?, stage, rt.negatives_per_frame, gate).map_err(data)?;
    let te = match test {
        Some((ds, l)) => relevance_samples(params, &with_labels(ds, l)?, stage, rt.negatives_per_frame, gate).map_err(data)?,
        None => Vec::new(),
    };
    let head = match stage {
        HeadStage::Token => &mut params.token_stage_head,
        HeadStage::Query => &mut params.query_stage_head,
    };
    let auc = |h: &crate::sparsity::RelevanceHead, s: &[_]| -> Result<(Option<f64>, Vec<bool>), HarnessError> {
        let (scores, labels) = agent_scores(h, s).map_err(data)?;
        Ok((roc_auc(&scores, &labels), labels))
    };
    let (initial_test_auc, test_labels) = auc(head, &te)?;
    let steps = train_relevance_head(head, &tr, &cfg.schedule(), &rt.optim).map_err(data)?;
    Ok(RelevanceReport {
        stage,
        train_frames: tr.len(),
        test_frames: te.len(),
        test_agents: test_labels.len(),
        test_relevant: test_labels.iter().filter(|&&b| b).count(),
        initial_test_auc,
        train_auc: auc(head, &tr)?.0,
        test_auc: auc(head, &te)?.0,
        steps,
    })
}

/// Token-stage training on all but the last `test_scenes` scenes, scored
/// on those.
pub fn relevance_experiment(cfg: &RunConfig, ds: &SceneDataset, labels: &[FrameLabels]) -> Result<RelevanceReport, HarnessError> {
    let n_test = cfg.relevance_training.test_scenes;
    let (train, test) = split_scenes(ds, ds.scenes.len().saturating_sub(n_test))?;
    let mut params = ModelParams::random(&cfg.model, cfg.seeds.model).map_err(data)?;
    train_relevance(cfg, &mut params, (&train, labels), Some((&test, labels)), HeadStage::Token)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub keep_ratio: f64,
    /// Analytic FLOPs per frame.
    pub flops: u64,
    pub flop_ratio: f64,
    /// Instrumented FLOPs per frame, averaged over evaluated frames.
    pub measured_flops: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "NDS")]
    pub nds: f64,
    #[serde(rename = "NDS_RM")]
    pub nds_rm: Option<f64>,
}

pub const CURVE_HEADER: [&str; 7] = ["keep_ratio", "flops", "flop_ratio", "measured_flops", "mAP", "NDS", "NDS_RM"];

impl CurvePoint {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.keep_ratio.to_string(),
            self.flops.to_string(),
            self.flop_ratio.to_string(),
            self.measured_flops.to_string(),
            self.map.to_string(),
            self.nds.to_string(),
            self.nds_rm.map_or_else(|| "nan".into(), |v| v.to_string()),
        ]
    }
}

/// Sweep keep ratios. Relevance heads are trained once on the first
/// `curve.train_scenes` scenes; detection heads are refit on the same
/// scenes at every operating point. The remaining scenes are evaluated.
pub fn sparsity_curve(cfg: &RunConfig, ds: &SceneDataset, labels: &[FrameLabels]) -> Result<Vec<CurvePoint>, HarnessError> {
    let (train, test) = split_scenes(ds, cfg.curve.train_scenes)?;
    let mut base = ModelParams::random(&cfg.model, cfg.seeds.model).map_err(data)?;
    for stage in [HeadStage::Token, HeadStage::Query] {
        train_relevance(cfg, &mut base, (&train, labels), None, stage)?;
    }
    let shape = PipelineShape::toy(&cfg.model);
    let mut points = Vec::with_capacity(cfg.curve.keep_ratios.len());
    for &tkr in &cfg.curve.keep_ratios {
        let schedule = cfg.schedule_at(tkr);
        let params = fitted_model(cfg, &base, &train, &schedule)?;
        let opts = PipelineOptions { seed: cfg.seeds.routing, ..PipelineOptions::new(run_mode(tkr)) };
        let outs = run_dataset(&params, &test, &schedule, &opts)?;
        let dets: Vec<Detection> = outs.iter().flat_map(|o| o.detections.iter().cloned()).collect();
        let report = evaluate(&test, &dets, Some(labels), &cfg.metrics).map_err(data)?;
        let flops = pipeline_flops(&shape, &schedule).map_err(data)?;
        let measured = outs.iter().map(|o| 2.0 * o.trace.macs.total() as f64).sum::<f64>() / outs.len().max(1) as f64;
        points.push(CurvePoint {
            keep_ratio: tkr,
            flops: flops.total,
            flop_ratio: flops.ratio,
            measured_flops: measured,
            map: report.map,
            nds: report.nds,
            nds_rm: report.nds_rm,
        });
    }
    Ok(points)
}

/// Labels for `ds` under the run's relevance config.
pub fn labels_for(cfg: &RunConfig, ds: &SceneDataset) -> Vec<FrameLabels> {
    label_dataset(ds, &cfg.relevance)
}
