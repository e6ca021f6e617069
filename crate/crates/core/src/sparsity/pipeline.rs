//! End-to-end toy pipeline: backbone with token select–store–reactivate,
//! feature pyramid, decoder with query routing, and detection heads.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::camera::ToyCamera;
use super::heads::decode_detections;
use super::model::{render_tokens, ModelParams};
use super::queries::{anchor_grid, init_queries, propagate_queries, top_up_anchors};
use super::relevance::{query_context, query_relevance, token_relevance, RelevanceScores, ViewPyramids};
use super::schedule::ScheduleConfig;
use super::stream::{
    reactivate, select_and_store_count, BufferKind, QuerySet, StorageBuffer, Stream, TokenStream,
};
use super::SparsityError;
use crate::dataset::{EgoState, Frame, Scene};
use crate::geometry::SE2Pose;
use crate::metrics::Detection;
use crate::numeric::gumbel::{topk_indices, GumbelTopkConfig, TopkMode};
use crate::numeric::{mac_count, FeatureMap, Footprint, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Dense,
    SparseEval,
    SparseTrain,
}

impl std::str::FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense" => Ok(RunMode::Dense),
            "sparse_eval" => Ok(RunMode::SparseEval),
            "sparse_train" => Ok(RunMode::SparseTrain),
            _ => Err(format!("unknown mode {s:?} (dense | sparse_eval | sparse_train)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub mode: RunMode,
    /// Gumbel temperature for `sparse_train` routing.
    pub temperature: f64,
    pub seed: u64,
    /// Keep full index lists in the trace.
    pub record_indices: bool,
    /// Compute relevance-head inputs at pruning stages even in dense mode.
    pub collect_features: bool,
}

impl PipelineOptions {
    pub fn new(mode: RunMode) -> Self {
        Self { mode, temperature: 1.0, seed: 0, record_indices: false, collect_features: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stream: BufferKind,
    pub layer: usize,
    pub active: usize,
    pub buffered: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub active_indices: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub buffered_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub query_init: u64,
    pub backbone: u64,
    pub relevance: u64,
    pub value_projection: u64,
    pub decoder: u64,
    pub heads: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.query_init + self.backbone + self.relevance + self.value_projection + self.decoder + self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityTrace {
    pub mode: RunMode,
    pub image_keep_ratio: f64,
    pub query_keep_ratio: f64,
    pub initial_tokens: usize,
    pub initial_queries: usize,
    pub stages: Vec<StageRecord>,
    pub macs: MacBreakdown,
}

impl SparsityTrace {
    /// Σ over stages of active rows for one stream.
    pub fn processed_rows(&self, stream: BufferKind) -> usize {
        self.stages.iter().filter(|s| s.stream == stream).map(|s| s.active).sum()
    }

    pub fn counts(&self, stream: BufferKind) -> Vec<usize> {
        self.stages.iter().filter(|s| s.stream == stream).map(|s| s.active).collect()
    }
}

/// Relevance inputs and scores computed at one routing stage.
#[derive(Debug, Clone)]
pub struct StageRelevance {
    pub stream: BufferKind,
    pub layer: usize,
    /// Original query indices of the scored rows.
    pub query_index: Vec<usize>,
    pub features: Tensor2,
    pub scores: RelevanceScores,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Per-query class scores, rows in original query order.
    pub class_probs: Tensor2,
    pub boxes: Tensor2,
    /// Final `[q ‖ c]` rows the heads read.
    pub head_features: Tensor2,
    pub queries: QuerySet,
    pub relevance: Vec<StageRelevance>,
    pub trace: SparsityTrace,
}

fn record<S: Stream, M>(
    stages: &mut Vec<StageRecord>,
    kind: BufferKind,
    layer: usize,
    active: &S,
    buffer: &StorageBuffer<M>,
    n0: usize,
    keep_indices: bool,
) -> Result<(), SparsityError> {
    // conservation: active and buffered indices partition 0..n0
    let mut seen = vec![false; n0];
    let buffered = buffer.indices();
    for &i in active.original_index().iter().chain(&buffered) {
        if i >= n0 || std::mem::replace(&mut seen[i], true) {
            return Err(SparsityError::ConservationViolated { layer, index: i });
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(SparsityError::ConservationViolated { layer, index: i });
    }
    stages.push(StageRecord {
        stream: kind,
        layer,
        active: active.len(),
        buffered: buffered.len(),
        active_indices: if keep_indices { active.original_index().to_vec() } else { Vec::new() },
        buffered_indices: if keep_indices { buffered } else { Vec::new() },
    });
    Ok(())
}

/// Per-view pyramids over the current token rows; cells without an active
/// token are zero and map to no token.
pub fn token_pyramids(stream: &TokenStream, camera: &ToyCamera, levels: usize) -> ViewPyramids {
    let (h, w) = (camera.grid_h, camera.grid_w);
    let d = stream.embeddings.cols();
    let mut base: Vec<FeatureMap> = (0..camera.views)
        .map(|_| FeatureMap { h, w, features: Tensor2::zeros(h * w, d), token_index: vec![None; h * w] })
        .collect();
    for (r, m) in stream.meta.iter().enumerate() {
        let cell = m.row * w + m.col;
        base[m.view].features.row_mut(cell).copy_from_slice(stream.embeddings.row(r));
        base[m.view].token_index[cell] = Some(r);
    }
    base.into_iter()
        .map(|l0| {
            let mut pyr = vec![l0];
            while pyr.len() < levels {
                let next = pyr[pyr.len() - 1].avg_pool2();
                pyr.push(next);
            }
            pyr
        })
        .collect()
}

fn gumbel_cfg(opts: &PipelineOptions, stage: u64) -> GumbelTopkConfig {
    GumbelTopkConfig {
        k: 1,
        temperature: opts.temperature,
        seed: opts.seed,
        stage,
        mode: if opts.mode == RunMode::SparseTrain { TopkMode::StraightThroughTrain } else { TopkMode::HardEval },
    }
}

const DECODER_STAGE_OFFSET: u64 = 1000;

/// Run the detector on one frame's tokens and queries.
pub fn run_pipeline(
    params: &ModelParams,
    tokens: TokenStream,
    queries: QuerySet,
    ego: &EgoState,
    schedule: &ScheduleConfig,
    opts: &PipelineOptions,
) -> Result<PipelineOutput, SparsityError> {
    schedule.validate()?;
    let cfg = &params.config;
    if schedule.backbone.total_layers != cfg.backbone_blocks.len() || schedule.decoder.total_layers != cfg.decoder_layers {
        return Err(SparsityError::InvalidSchedule("schedule layer counts do not match the model".into()));
    }
    tokens.validate()?;
    queries.validate()?;
    let camera = params.camera();
    let sparse = opts.mode != RunMode::Dense;
    let ego_arg = (params.token_stage_head.ego.is_some()).then_some(ego);
    let (n0, q0) = (tokens.len(), queries.len());
    let tok_counts = schedule.backbone.active_counts(schedule.image_tkr(), n0);
    let qry_counts = schedule.decoder.active_counts(schedule.query_tkr(), q0);
    let mut stages = Vec::new();
    let mut macs = MacBreakdown::default();
    let mut relevance = Vec::new();

    // backbone
    let mut stream = tokens;
    let mut tok_buf = StorageBuffer::new(BufferKind::Image);
    for (i, &kind) in cfg.backbone_blocks.iter().enumerate() {
        let l = i + 1;
        if sparse && l == schedule.backbone.reactivation_layer {
            stream = reactivate(&stream, &mut tok_buf)?;
        } else if schedule.backbone.pruning_layers.contains(&l) && (sparse || opts.collect_features) {
            let m0 = mac_count();
            let pyr = token_pyramids(&stream, &camera, cfg.levels);
            let rel = query_relevance(
                &queries,
                &pyr,
                &params.relevance_sampler,
                &camera,
                &params.token_stage_head,
                ego_arg,
                cfg.relevance_kind,
            )?;
            macs.relevance += mac_count() - m0;
            if sparse {
                let k = ((cfg.topk_fraction * q0 as f64).ceil() as usize).clamp(1, q0.max(1));
                let top = topk_indices(&rel.scores.scores, k.min(q0));
                let fps: Vec<&Footprint> = top.iter().map(|&j| &rel.footprints[j]).collect();
                let scores = token_relevance(&fps, stream.len())?;
                stream = select_and_store_count(&stream, &scores, tok_counts[i], &gumbel_cfg(opts, l as u64), &mut tok_buf, l)?.0;
            }
            relevance.push(StageRelevance {
                stream: BufferKind::Image,
                layer: l,
                query_index: queries.original_index.clone(),
                features: rel.features,
                scores: rel.scores,
            });
        }
        record(&mut stages, BufferKind::Image, l, &stream, &tok_buf, n0, opts.record_indices)?;
        let m0 = mac_count();
        let groups = params.token_groups(&stream.meta, kind);
        let out = params.backbone[i].forward(&stream.embeddings, &groups, cfg.heads)?;
        stream.embeddings = out;
        macs.backbone += mac_count() - m0;
    }
    if !tok_buf.is_empty() {
        stream = reactivate(&stream, &mut tok_buf)?;
    }

    // pyramid and value projection
    let m0 = mac_count();
    let mut values = token_pyramids(&stream, &camera, cfg.levels);
    for level in values.iter_mut().flatten() {
        level.features = params.value_proj.forward(&level.features)?;
    }
    macs.value_projection += mac_count() - m0;

    // decoder
    let mut q = queries;
    let mut q_buf = StorageBuffer::new(BufferKind::Query);
    let mut ctx = Tensor2::zeros(0, cfg.dim);
    for (i, layer) in params.decoder.iter().enumerate() {
        let l = i + 1;
        if sparse && l == schedule.decoder.reactivation_layer {
            q = reactivate(&q, &mut q_buf)?;
        } else if schedule.decoder.pruning_layers.contains(&l) && (sparse || opts.collect_features) {
            let m0 = mac_count();
            let rel = query_relevance(
                &q,
                &values,
                &params.relevance_sampler,
                &camera,
                &params.query_stage_head,
                ego_arg,
                cfg.relevance_kind,
            )?;
            macs.relevance += mac_count() - m0;
            let index = q.original_index.clone();
            if sparse {
                let stage = DECODER_STAGE_OFFSET + l as u64;
                q = select_and_store_count(&q, &rel.scores.scores, qry_counts[i], &gumbel_cfg(opts, stage), &mut q_buf, l)?.0;
            }
            relevance.push(StageRelevance {
                stream: BufferKind::Query,
                layer: l,
                query_index: index,
                features: rel.features,
                scores: rel.scores,
            });
        }
        record(&mut stages, BufferKind::Query, l, &q, &q_buf, q0, opts.record_indices)?;
        let m0 = mac_count();
        let x = layer.block.attend(&q.embeddings, &vec![0; q.len()], cfg.heads)?;
        let probe = QuerySet { embeddings: super::model::layer_norm(&x), ..q.clone() };
        let (c, _) = query_context(&probe, &values, &layer.cross, &camera)?;
        let x = x.add(&layer.cross_out.forward(&c)?)?;
        q.embeddings = layer.block.feed_forward(&x)?;
        ctx = c;
        macs.decoder += mac_count() - m0;
    }
    if !q_buf.is_empty() {
        return Err(SparsityError::InvalidSchedule("queries still buffered after the last decoder layer".into()));
    }

    let m0 = mac_count();
    let head_features = q.embeddings.hcat(&ctx)?;
    let (class_probs, boxes) = params.det_heads.predict(&head_features)?;
    macs.heads += mac_count() - m0;

    Ok(PipelineOutput {
        class_probs,
        boxes,
        head_features,
        queries: q,
        relevance,
        trace: SparsityTrace {
            mode: opts.mode,
            image_keep_ratio: schedule.image_tkr(),
            query_keep_ratio: schedule.query_tkr(),
            initial_tokens: n0,
            initial_queries: q0,
            stages,
            macs,
        },
    })
}

/// Queries carried from one frame to the next.
#[derive(Debug, Clone)]
pub struct PropagationState {
    pub queries: QuerySet,
    pub ego_pose: SE2Pose,
}

/// Build a frame's query set: anchor queries followed by the propagated
/// slots, topped up with initialized queries when fewer were propagated.
/// Returns the set and the MACs spent on initialization.
pub fn frame_queries(params: &ModelParams, frame: &Frame, prev: Option<&PropagationState>) -> Result<(QuerySet, u64), SparsityError> {
    let cfg = &params.config;
    let camera = params.camera();
    let m0 = mac_count();
    let mut set = init_queries(&anchor_grid(&camera, cfg.anchor_stride), &params.query_init)?;
    if cfg.propagated_queries > 0 {
        let carried = match prev {
            Some(p) => {
                let motion = frame.ego_pose.inverse().compose(&p.ego_pose);
                let mut c = propagate_queries(&p.queries, &motion);
                if c.len() > cfg.propagated_queries {
                    let idx: Vec<usize> = (0..cfg.propagated_queries).collect();
                    c = c.select(&idx);
                    c.original_index = (0..cfg.propagated_queries).collect();
                }
                c
            }
            None => QuerySet::empty(cfg.dim),
        };
        let missing = cfg.propagated_queries - carried.len();
        let extra = init_queries(&top_up_anchors(&camera, cfg.anchor_stride, missing), &params.query_init)?;
        set = set.concat(&carried)?.concat(&extra)?;
        set.original_index = (0..set.len()).collect();
    }
    Ok((set, mac_count() - m0))
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    pub detections: Vec<Detection>,
    pub output: PipelineOutput,
    pub next: PropagationState,
}

/// Render, build queries, run, decode. The top propagated-slot count of
/// queries by class score is handed to the next frame.
pub fn run_frame(
    params: &ModelParams,
    frame: &Frame,
    prev: Option<&PropagationState>,
    schedule: &ScheduleConfig,
    opts: &PipelineOptions,
) -> Result<FrameResult, SparsityError> {
    let (tokens, _) = render_tokens(params, frame)?;
    let (queries, init_macs) = frame_queries(params, frame, prev)?;
    let mut output = run_pipeline(params, tokens, queries, &frame.ego_state, schedule, opts)?;
    output.trace.macs.query_init = init_macs;
    let cfg = &params.config;
    let detections = decode_detections(
        &output.class_probs,
        &output.boxes,
        &output.queries.reference_points,
        &frame.ego_pose,
        &frame.frame_id,
        &cfg.classes,
        cfg.max_detections,
        cfg.nms_radius,
    );
    let best: Vec<f64> = (0..output.class_probs.rows()).map(|r| output.class_probs.row(r).iter().cloned().fold(0.0, f64::max)).collect();
    let mut top = topk_indices(&best, cfg.propagated_queries.min(best.len()));
    top.sort_unstable();
    let next = PropagationState { queries: output.queries.select(&top), ego_pose: frame.ego_pose };
    Ok(FrameResult { detections, output, next })
}

/// Run every frame of a scene in order, propagating queries.
pub fn run_scene(
    params: &ModelParams,
    scene: &Scene,
    schedule: &ScheduleConfig,
    opts: &PipelineOptions,
) -> Result<Vec<FrameResult>, SparsityError> {
    let mut prev: Option<PropagationState> = None;
    let mut out = Vec::with_capacity(scene.frames.len());
    for (i, f) in scene.frames.iter().enumerate() {
        let o = PipelineOptions { seed: opts.seed.wrapping_add(i as u64), ..*opts };
        let r = run_frame(params, f, prev.as_ref(), schedule, &o)?;
        prev = Some(r.next.clone());
        out.push(r);
    }
    Ok(out)
}

/// Sanity helper: the union of active and buffered indices at a stage.
pub fn stage_partition(rec: &StageRecord) -> (HashSet<usize>, HashSet<usize>) {
    (rec.active_indices.iter().copied().collect(), rec.buffered_indices.iter().copied().collect())
}
