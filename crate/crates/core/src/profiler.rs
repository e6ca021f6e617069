//! Analytic FLOP and buffer-memory model of the dense and sparse pipeline.
//!
//! Counting convention: one multiply-accumulate is two FLOPs; biases,
//! normalization, nonlinearities and softmax are not counted. The formulas
//! mirror the toy kernels, so on toy shapes they equal the instrumented
//! MAC counters exactly (dense runs, and sparse runs whose attention groups
//! split evenly).

use serde::{Deserialize, Serialize};

use crate::numeric::encoding::PE_DIM;
use crate::sparsity::heads::BOX_PARAMS;
use crate::sparsity::relevance::EGO_INPUTS;
use crate::sparsity::{BlockKind, ModelConfig, RelevanceKind, ScheduleConfig, SparsityError, StageSchedule};

/// Costs outside backbone and decoder that only the toy model carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxShape {
    /// Queries built from anchors by the init MLP (the rest are propagated).
    pub initialized_queries: usize,
    pub relevance_hidden: usize,
    /// Ego embedding width of the planning-aligned heads.
    pub ego_embed_dim: Option<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineShape {
    pub views: usize,
    /// Backbone tokens per view.
    pub tokens_per_view: usize,
    pub backbone_dim: usize,
    pub heads: usize,
    /// Window side; a window holds `window²` tokens.
    pub window: usize,
    pub backbone_blocks: Vec<BlockKind>,
    /// Decoder key cells per view, one entry per feature level.
    pub pyramid_per_view: Vec<usize>,
    pub dim: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    /// Sampling points per level.
    pub points: usize,
    pub bytes_per_element: usize,
    #[serde(default)]
    pub aux: Option<AuxShape>,
}

impl PipelineShape {
    /// Dense ViT-L shape: six views, 127,500 image tokens, 900 queries, six
    /// decoder layers at D = 256, global attention every third layer.
    pub fn large() -> Self {
        let blocks = (1..=24).map(|l| if l % 3 == 0 { BlockKind::Global } else { BlockKind::Window }).collect();
        Self {
            views: 6,
            tokens_per_view: 21_250,
            backbone_dim: 1024,
            heads: 16,
            window: 16,
            backbone_blocks: blocks,
            pyramid_per_view: vec![21_250],
            dim: 256,
            decoder_layers: 6,
            queries: 900,
            points: 16,
            bytes_per_element: 2,
            aux: None,
        }
    }

    /// Shape of the toy model, including query init, relevance and heads.
    pub fn toy(cfg: &ModelConfig) -> Self {
        let mut pyramid = Vec::with_capacity(cfg.levels);
        let (mut h, mut w) = (cfg.grid_h, cfg.grid_w);
        for _ in 0..cfg.levels {
            pyramid.push(h * w);
            (h, w) = ((h / 2).max(1), (w / 2).max(1));
        }
        Self {
            views: cfg.views,
            tokens_per_view: cfg.grid_h * cfg.grid_w,
            backbone_dim: cfg.dim,
            heads: cfg.heads,
            window: cfg.window,
            backbone_blocks: cfg.backbone_blocks.clone(),
            pyramid_per_view: pyramid,
            dim: cfg.dim,
            decoder_layers: cfg.decoder_layers,
            queries: cfg.num_queries(),
            points: cfg.points,
            bytes_per_element: 8,
            aux: Some(AuxShape {
                initialized_queries: cfg.num_queries(),
                relevance_hidden: cfg.relevance_hidden,
                ego_embed_dim: (cfg.relevance_kind == RelevanceKind::Plan).then_some(cfg.ego_embed_dim),
                classes: cfg.classes.len(),
            }),
        }
    }

    pub fn validate(&self) -> Result<(), SparsityError> {
        let positive = [
            self.views,
            self.tokens_per_view,
            self.backbone_dim,
            self.heads,
            self.window,
            self.dim,
            self.decoder_layers,
            self.queries,
            self.points,
            self.bytes_per_element,
        ];
        if positive.contains(&0) || self.backbone_blocks.is_empty() || self.pyramid_per_view.is_empty() || self.pyramid_per_view.contains(&0) {
            return Err(SparsityError::InvalidConfig("pipeline shape counts must be positive".into()));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.views * self.tokens_per_view
    }

    pub fn num_keys(&self) -> usize {
        self.views * self.pyramid_per_view.iter().sum::<usize>()
    }

    /// Sampling locations per query: levels × points.
    pub fn samples_per_query(&self) -> usize {
        self.pyramid_per_view.len() * self.points
    }

    /// Same shape with token and key counts scaled by `f` (rounded).
    pub fn scale_tokens(&self, f: f64) -> Self {
        let s = |n: usize| ((n as f64 * f).round() as usize).max(1);
        Self { tokens_per_view: s(self.tokens_per_view), pyramid_per_view: self.pyramid_per_view.iter().map(|&n| s(n)).collect(), ..self.clone() }
    }

    pub fn scale_queries(&self, f: f64) -> Self {
        let q = ((self.queries as f64 * f).round() as usize).max(1);
        let aux = self.aux.as_ref().map(|a| AuxShape {
            initialized_queries: ((a.initialized_queries as f64 * f).round() as usize).min(q),
            ..a.clone()
        });
        Self { queries: q, aux, ..self.clone() }
    }
}

/// FLOPs of one transformer block over `n` tokens of width `d`. Attention
/// runs within groups whose squared sizes sum to `sq`.
fn block_flops(n: u64, d: u64, sq: u64) -> u64 {
    // qkv + out 4nd², mlp (ratio 4) 8nd², scores + weighted sum 2·Σn_g²·d
    2 * (12 * n * d * d + 2 * sq * d)
}

/// Sum of squared sizes when `n` items are split as evenly as possible into
/// `parts` groups.
fn even_split_sq(n: u64, parts: u64) -> u64 {
    let (q, r) = (n / parts, n % parts);
    r * (q + 1) * (q + 1) + (parts - r) * q * q
}

/// FLOPs of one transformer block: `8ND² + 4N²D + 16ND²` with global
/// attention, the `N²` term replaced by `N·w²` with windows of `w²` tokens.
pub fn attention_flops(n: usize, d: usize, window: Option<usize>) -> u64 {
    let (n, d) = (n as u64, d as u64);
    let sq = match window {
        None => n * n,
        Some(w) => n * (w as u64 * w as u64).min(n),
    };
    block_flops(n, d, sq)
}

fn backbone_block_flops(shape: &PipelineShape, kind: BlockKind, n: usize) -> u64 {
    let (n, v, d) = (n as u64, shape.views as u64, shape.backbone_dim as u64);
    let sq = match kind {
        BlockKind::Global => even_split_sq(n, v),
        BlockKind::Window => {
            let per_view = n.div_ceil(v);
            n * (shape.window as u64 * shape.window as u64).min(per_view)
        }
    };
    block_flops(n, d, sq)
}

/// One decoder layer over `q` queries: self-attention block, deformable
/// cross-attention (offset and weight projections, bilinear sampling,
/// output projection).
pub fn decoder_layer_flops(q: usize, d: usize, samples_per_query: usize) -> u64 {
    let (q, d, lp) = (q as u64, d as u64, samples_per_query as u64);
    block_flops(q, d, q * q) + 2 * q * (7 * lp * d + d * d)
}

/// Decoder FLOPs: the value projection over every key plus `layers`
/// layers at `q` queries.
pub fn decoder_flops(q: usize, keys: usize, d: usize, samples_per_query: usize, layers: usize) -> u64 {
    value_projection_flops(keys, d) + layers as u64 * decoder_layer_flops(q, d, samples_per_query)
}

pub fn value_projection_flops(keys: usize, d: usize) -> u64 {
    2 * keys as u64 * d as u64 * d as u64
}

/// One relevance-head evaluation over `q` queries: context sampling plus
/// the scorer MLP (and the ego MLP on a single row).
pub fn relevance_flops(q: usize, d: usize, samples_per_query: usize, aux: &AuxShape) -> u64 {
    let (q, d, lp, h) = (q as u64, d as u64, samples_per_query as u64, aux.relevance_hidden as u64);
    let e = aux.ego_embed_dim.unwrap_or(0) as u64;
    let ego_mlp = if e > 0 { EGO_INPUTS as u64 * e + e * e } else { 0 };
    2 * (q * 7 * lp * d + q * ((2 * d + e) * h + h * h) + ego_mlp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    QueryInit,
    Backbone,
    Relevance,
    ValueProjection,
    Decoder,
    Heads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFlops {
    pub kind: StageKind,
    /// 1-based layer within its stream, if any.
    pub layer: Option<usize>,
    /// Tokens or queries processed.
    pub active: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub stages: Vec<StageFlops>,
    pub backbone: u64,
    /// Value projection plus decoder layers.
    pub decoder: u64,
    pub relevance: u64,
    /// Query init and detection heads.
    pub other: u64,
    pub total: u64,
    pub dense_total: u64,
    pub ratio: f64,
    /// Mean over backbone layers of the active token fraction.
    pub mean_keep_ratio: f64,
    pub query_mean_keep_ratio: f64,
    /// Peak buffer occupancy (tokens plus queries) under the schedule.
    pub buffer_entries: usize,
    pub buffer_bytes: u64,
    /// Occupancy if each stream ends exactly at its keep target,
    /// `⌊(1−TKR)N⌋ + ⌊(1−TKR)Q⌋`.
    pub nominal_buffer_entries: usize,
    pub nominal_buffer_bytes: u64,
}

pub fn buffer_bytes(entries: usize, dim: usize, bytes_per_element: usize) -> u64 {
    entries as u64 * dim as u64 * bytes_per_element as u64
}

fn check_layers(stage: &StageSchedule, layers: usize, what: &str) -> Result<(), SparsityError> {
    if stage.total_layers != layers {
        return Err(SparsityError::InvalidSchedule(format!("{what} schedule has {} layers, shape has {layers}", stage.total_layers)));
    }
    Ok(())
}

fn stage_list(shape: &PipelineShape, schedule: &ScheduleConfig) -> Vec<StageFlops> {
    let (n0, q0) = (shape.num_tokens(), shape.queries);
    let routed = schedule.image_tkr() < 1.0 || schedule.query_tkr() < 1.0;
    let lp = shape.samples_per_query();
    let mut out = Vec::new();
    let stage = |kind, layer, active, flops| StageFlops { kind, layer, active, flops };

    if let Some(aux) = &shape.aux {
        let (m, d) = (aux.initialized_queries as u64, shape.dim as u64);
        out.push(stage(StageKind::QueryInit, None, aux.initialized_queries, 2 * m * (PE_DIM as u64 * d + d * d)));
    }
    let tok = schedule.backbone.active_counts(schedule.image_tkr(), n0);
    for (i, &kind) in shape.backbone_blocks.iter().enumerate() {
        let l = i + 1;
        if routed && schedule.backbone.pruning_layers.contains(&l) {
            if let Some(aux) = &shape.aux {
                out.push(stage(StageKind::Relevance, Some(l), q0, relevance_flops(q0, shape.dim, lp, aux)));
            }
        }
        out.push(stage(StageKind::Backbone, Some(l), tok[i], backbone_block_flops(shape, kind, tok[i])));
    }
    out.push(stage(StageKind::ValueProjection, None, shape.num_keys(), value_projection_flops(shape.num_keys(), shape.dim)));
    let qry = schedule.decoder.active_counts(schedule.query_tkr(), q0);
    for l in 1..=shape.decoder_layers {
        if routed && schedule.decoder.pruning_layers.contains(&l) {
            if let Some(aux) = &shape.aux {
                let before = if l == 1 { q0 } else { qry[l - 2] };
                out.push(stage(StageKind::Relevance, Some(l), before, relevance_flops(before, shape.dim, lp, aux)));
            }
        }
        let q = qry[l - 1];
        out.push(stage(StageKind::Decoder, Some(l), q, decoder_layer_flops(q, shape.dim, lp)));
    }
    if let Some(aux) = &shape.aux {
        let (q, d) = (q0 as u64, shape.dim as u64);
        out.push(stage(StageKind::Heads, None, q0, 2 * q * 2 * d * (aux.classes + BOX_PARAMS) as u64));
    }
    out
}

/// FLOPs of every stage under `schedule`, against the dense baseline.
pub fn pipeline_flops(shape: &PipelineShape, schedule: &ScheduleConfig) -> Result<FlopReport, SparsityError> {
    shape.validate()?;
    schedule.validate()?;
    check_layers(&schedule.backbone, shape.backbone_blocks.len(), "backbone")?;
    check_layers(&schedule.decoder, shape.decoder_layers, "decoder")?;
    let stages = stage_list(shape, schedule);
    let dense_total = stage_list(shape, &schedule.with_tkr(1.0)).iter().map(|s| s.flops).sum();
    let sum = |kinds: &[StageKind]| stages.iter().filter(|s| kinds.contains(&s.kind)).map(|s| s.flops).sum::<u64>();
    let backbone = sum(&[StageKind::Backbone]);
    let decoder = sum(&[StageKind::ValueProjection, StageKind::Decoder]);
    let relevance = sum(&[StageKind::Relevance]);
    let other = sum(&[StageKind::QueryInit, StageKind::Heads]);
    let total = backbone + decoder + relevance + other;

    let (n0, q0) = (shape.num_tokens(), shape.queries);
    let (itkr, qtkr) = (schedule.image_tkr(), schedule.query_tkr());
    let routed = itkr < 1.0 || qtkr < 1.0;
    let peak = |counts: Vec<usize>, n: usize| n - counts.into_iter().min().unwrap_or(n);
    let (buffer_entries, nominal_buffer_entries) = if routed {
        let nominal = |t: f64, n: usize| ((1.0 - t) * n as f64).floor() as usize;
        (
            peak(schedule.backbone.active_counts(itkr, n0), n0) + peak(schedule.decoder.active_counts(qtkr, q0), q0),
            nominal(itkr, n0) + nominal(qtkr, q0),
        )
    } else {
        (0, 0)
    };
    Ok(FlopReport {
        stages,
        backbone,
        decoder,
        relevance,
        other,
        total,
        dense_total,
        ratio: total as f64 / dense_total as f64,
        mean_keep_ratio: schedule.backbone.mean_keep_ratio(itkr),
        query_mean_keep_ratio: schedule.decoder.mean_keep_ratio(qtkr),
        buffer_entries,
        buffer_bytes: buffer_bytes(buffer_entries, shape.dim, shape.bytes_per_element),
        nominal_buffer_entries,
        nominal_buffer_bytes: buffer_bytes(nominal_buffer_entries, shape.dim, shape.bytes_per_element),
    })
}

/// Normalized sensitivities: relative change of stage FLOPs per relative
/// change of the token or query axis, by central difference at ±10%.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub backbone_tokens: f64,
    pub backbone_queries: f64,
    pub decoder_tokens: f64,
    pub decoder_queries: f64,
}

pub const SENSITIVITY_STEP: f64 = 0.1;

pub fn sensitivity(shape: &PipelineShape) -> Result<Sensitivity, SparsityError> {
    let dense = ScheduleConfig {
        total_keep_ratio: 1.0,
        backbone: StageSchedule {
            pruning_layers: vec![],
            total_layers: shape.backbone_blocks.len(),
            reactivation_layer: shape.backbone_blocks.len(),
        },
        decoder: StageSchedule { pruning_layers: vec![], total_layers: shape.decoder_layers, reactivation_layer: shape.decoder_layers },
        ..ScheduleConfig::default()
    };
    let base = pipeline_flops(shape, &dense)?;
    let h = SENSITIVITY_STEP;
    let diff = |plus: &FlopReport, minus: &FlopReport, pick: fn(&FlopReport) -> u64, base: u64| {
        (pick(plus) as f64 - pick(minus) as f64) / base as f64 / (2.0 * h)
    };
    let (tp, tm) = (pipeline_flops(&shape.scale_tokens(1.0 + h), &dense)?, pipeline_flops(&shape.scale_tokens(1.0 - h), &dense)?);
    let (qp, qm) = (pipeline_flops(&shape.scale_queries(1.0 + h), &dense)?, pipeline_flops(&shape.scale_queries(1.0 - h), &dense)?);
    Ok(Sensitivity {
        backbone_tokens: diff(&tp, &tm, |r| r.backbone, base.backbone),
        backbone_queries: diff(&qp, &qm, |r| r.backbone, base.backbone),
        decoder_tokens: diff(&tp, &tm, |r| r.decoder, base.decoder),
        decoder_queries: diff(&qp, &qm, |r| r.decoder, base.decoder),
    })
}

/// Schedule for [`PipelineShape::large`]: prune before global layers 9,
/// 15 and 21, reactivate at 24; decoder prunes before layers 2..5.
pub fn large_schedule(tkr: f64) -> ScheduleConfig {
    ScheduleConfig {
        total_keep_ratio: tkr,
        backbone: StageSchedule { pruning_layers: vec![9, 15, 21], total_layers: 24, reactivation_layer: 24 },
        decoder: StageSchedule { pruning_layers: vec![2, 3, 4, 5], total_layers: 6, reactivation_layer: 6 },
        ..ScheduleConfig::default()
    }
}

/// Stage table as CSV rows (`kind,layer,active,flops`).
pub fn stages_csv(report: &FlopReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["kind", "layer", "active", "flops"]).expect("in-memory write");
    for s in &report.stages {
        let kind = serde_json::to_value(s.kind).expect("enum").as_str().unwrap_or_default().to_string();
        let layer = s.layer.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([kind, layer, s.active.to_string(), s.flops.to_string()]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
