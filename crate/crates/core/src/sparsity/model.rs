//! Toy detector: configuration, random frozen parameters, transformer
//! blocks, and synthetic image-token rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::ToyCamera;
use super::heads::{encode_box, DetectionHeads, BOX_PARAMS};
use super::relevance::{RelevanceHead, RelevanceKind};
use super::stream::{TokenMeta, TokenStream};
use super::SparsityError;
use crate::dataset::Frame;
use crate::numeric::attention::window_id;
use crate::numeric::encoding::PE_DIM;
use crate::numeric::gumbel::keyed_uniform;
use crate::numeric::{grouped_attention, positional_encoding, DeformableParams, Linear, Mlp, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Window,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub views: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub heads: usize,
    /// Window side in tokens.
    pub window: usize,
    pub backbone_blocks: Vec<BlockKind>,
    pub decoder_layers: usize,
    pub levels: usize,
    pub points: usize,
    /// Anchor grid stride in cells; 1 puts one query on every cell.
    pub anchor_stride: usize,
    pub propagated_queries: usize,
    pub near_range: f64,
    pub max_range: f64,
    /// Fraction of queries whose footprints define token relevance.
    pub topk_fraction: f64,
    pub relevance_kind: RelevanceKind,
    pub relevance_hidden: usize,
    pub ego_embed_dim: usize,
    pub classes: Vec<String>,
    pub block_gain: f64,
    pub token_noise: f64,
    pub max_detections: usize,
    pub nms_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        use BlockKind::*;
        Self {
            views: 2,
            grid_h: 16,
            grid_w: 16,
            dim: 32,
            heads: 2,
            window: 4,
            backbone_blocks: vec![Window, Global, Window, Global, Window, Global],
            decoder_layers: 3,
            levels: 3,
            points: 4,
            anchor_stride: 4,
            propagated_queries: 0,
            near_range: 1.0,
            max_range: 61.0,
            topk_fraction: 0.1,
            relevance_kind: RelevanceKind::Plan,
            relevance_hidden: 32,
            ego_embed_dim: 8,
            classes: vec!["car".into(), "pedestrian".into(), "cyclist".into()],
            block_gain: 0.3,
            token_noise: 0.02,
            max_detections: 300,
            nms_radius: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn camera(&self) -> ToyCamera {
        ToyCamera {
            views: self.views,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            near_range: self.near_range,
            max_range: self.max_range,
        }
    }

    /// Channels holding rendered object codes: box parameters, class
    /// one-hot, objectness.
    pub fn code_dim(&self) -> usize {
        BOX_PARAMS + self.classes.len() + 1
    }

    pub fn num_anchor_queries(&self) -> usize {
        let s = self.anchor_stride.max(1);
        let per = |n: usize| (s / 2..n).step_by(s).count();
        self.views * per(self.grid_h) * per(self.grid_w)
    }

    pub fn num_queries(&self) -> usize {
        self.num_anchor_queries() + self.propagated_queries
    }

    pub fn validate(&self) -> Result<(), SparsityError> {
        let bad = |m: &str| Err(SparsityError::InvalidConfig(m.into()));
        if self.views == 0 || self.grid_h < 2 || self.grid_w < 2 {
            return bad("need at least one view and a 2x2 grid");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.dim < self.code_dim() + 2 {
            return bad("dim too small for the rendered object code");
        }
        if self.window == 0 || self.levels == 0 || self.points == 0 || self.decoder_layers == 0 {
            return bad("window, levels, points and decoder_layers must be positive");
        }
        if self.backbone_blocks.is_empty() {
            return bad("backbone needs at least one block");
        }
        if !(self.near_range >= 0.0 && self.max_range > self.near_range) {
            return bad("range limits");
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return bad("topk_fraction outside (0, 1]");
        }
        if self.classes.is_empty() {
            return bad("class list is empty");
        }
        Ok(())
    }
}

/// Pre-norm residual self-attention block with a ratio-4 GELU MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mlp: Mlp,
}

pub fn layer_norm(x: &Tensor2) -> Tensor2 {
    let c = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let inv = 1.0 / (var + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

impl AttnBlock {
    pub fn random(rng: &mut impl Rng, dim: usize, gain: f64) -> Self {
        Self {
            wq: Linear::random(rng, dim, dim, 1.0),
            wk: Linear::random(rng, dim, dim, 1.0),
            wv: Linear::random(rng, dim, dim, 1.0),
            wo: Linear::random(rng, dim, dim, gain),
            mlp: Mlp::new(vec![Linear::random(rng, dim, 4 * dim, 1.0), Linear::random(rng, 4 * dim, dim, gain)], false)
                .expect("consistent MLP shapes"),
        }
    }

    /// Residual attention restricted to rows sharing a group id.
    pub fn attend(&self, x: &Tensor2, groups: &[u64], heads: usize) -> Result<Tensor2, SparsityError> {
        let h = layer_norm(x);
        let a = grouped_attention(&self.wq.forward(&h)?, &self.wk.forward(&h)?, &self.wv.forward(&h)?, groups, heads)?;
        Ok(x.add(&self.wo.forward(&a)?)?)
    }

    pub fn feed_forward(&self, x: &Tensor2) -> Result<Tensor2, SparsityError> {
        Ok(x.add(&self.mlp.forward(&layer_norm(x))?)?)
    }

    pub fn forward(&self, x: &Tensor2, groups: &[u64], heads: usize) -> Result<Tensor2, SparsityError> {
        self.feed_forward(&self.attend(x, groups, heads)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub block: AttnBlock,
    pub cross: DeformableParams,
    pub cross_out: Linear,
}

/// All model parameters. Everything except the relevance and detection
/// heads stays at its random initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Fixed per-token positional features (tokens × dim), zero on code
    /// channels.
    pub token_position: Tensor2,
    pub backbone: Vec<AttnBlock>,
    pub query_init: Mlp,
    pub value_proj: Linear,
    pub decoder: Vec<DecoderLayer>,
    pub relevance_sampler: DeformableParams,
    pub token_stage_head: RelevanceHead,
    pub query_stage_head: RelevanceHead,
    pub det_heads: DetectionHeads,
}

fn sampler(rng: &mut impl Rng, dim: usize, levels: usize, points: usize) -> DeformableParams {
    let lp = levels * points;
    let mut weight_proj = Linear::random(rng, dim, lp, 0.5);
    // bias the sampling weight toward the finest level
    for p in 0..points {
        weight_proj.bias[p] = 1.5;
    }
    DeformableParams { levels, points, offset_proj: Linear::random(rng, dim, 2 * lp, 0.3), weight_proj }
}

impl ModelParams {
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self, SparsityError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let camera = config.camera();
        let code = config.code_dim();
        let pos_proj = Linear::random(&mut rng, PE_DIM, d - code, 1.0);
        let pe: Vec<Vec<f64>> = (0..camera.num_tokens())
            .map(|i| {
                let c = camera.cell_center(camera.cell_at(i));
                positional_encoding([c.x, c.y, 0.0])
            })
            .collect();
        let pos = pos_proj.forward(&Tensor2::from_rows(&pe)?)?;
        let token_position = Tensor2::from_fn(camera.num_tokens(), d, |r, c| if c < code { 0.0 } else { 0.5 * pos.get(r, c - code) });

        let backbone = (0..config.backbone_blocks.len()).map(|_| AttnBlock::random(&mut rng, d, config.block_gain)).collect();
        let query_init = Mlp::random(&mut rng, &[PE_DIM, d, d], false, 1.0);
        let value_proj = Linear::random(&mut rng, d, d, 1.5);
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayer {
                block: AttnBlock::random(&mut rng, d, config.block_gain),
                cross: sampler(&mut rng, d, config.levels, config.points),
                cross_out: Linear::random(&mut rng, d, d, config.block_gain),
            })
            .collect();
        let relevance_sampler = sampler(&mut rng, d, config.levels, config.points);
        let ego = (config.relevance_kind == RelevanceKind::Plan).then_some(config.ego_embed_dim);
        let token_stage_head = RelevanceHead::random(&mut rng, 2 * d, config.relevance_hidden, ego, 1.0);
        let query_stage_head = RelevanceHead::random(&mut rng, 2 * d, config.relevance_hidden, ego, 1.0);
        let det_heads = DetectionHeads::zeros(2 * d, config.classes.len());
        Ok(Self {
            config: config.clone(),
            token_position,
            backbone,
            query_init,
            value_proj,
            decoder,
            relevance_sampler,
            token_stage_head,
            query_stage_head,
            det_heads,
        })
    }

    pub fn camera(&self) -> ToyCamera {
        self.config.camera()
    }

    /// Attention group of a token for a block kind: its view for global
    /// blocks, its (view, window) for windowed blocks.
    pub fn token_groups(&self, meta: &[TokenMeta], kind: BlockKind) -> Vec<u64> {
        let c = &self.config;
        let per_view = (c.grid_h.div_ceil(c.window) * c.grid_w.div_ceil(c.window)) as u64;
        meta.iter()
            .map(|m| match kind {
                BlockKind::Global => m.view as u64,
                BlockKind::Window => m.view as u64 * per_view + window_id(m.row, m.col, c.grid_w, c.window),
            })
            .collect()
    }
}

fn frame_key(frame_id: &str) -> u64 {
    frame_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// An object rendered into a token cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedObject {
    pub gt_index: usize,
    pub cell: TokenMeta,
}

/// Render a frame's ground truth into the initial token stream. Each cell
/// holds at most one object (the one nearest the cell center), encoded as
/// box parameters relative to the cell center, class one-hot and an
/// objectness flag, on top of fixed positional features and a little
/// deterministic noise.
pub fn render_tokens(params: &ModelParams, frame: &Frame) -> Result<(TokenStream, Vec<RenderedObject>), SparsityError> {
    let cfg = &params.config;
    let camera = params.camera();
    let n = camera.num_tokens();
    let to_ego = frame.ego_pose.inverse();
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; n];
    for (gi, g) in frame.gt_boxes.iter().enumerate() {
        if cfg.classes.iter().all(|c| c != &g.class_name) {
            continue;
        }
        let p = to_ego.apply(g.bbox.center());
        if let Some(cell) = camera.cell_of(p) {
            let idx = camera.token_index(cell);
            let d = p.distance(camera.cell_center(cell));
            if owner[idx].map_or(true, |(_, od)| d < od) {
                owner[idx] = Some((gi, d));
            }
        }
    }
    let key = frame_key(&frame.frame_id);
    let code = cfg.code_dim();
    let mut emb = params.token_position.clone();
    let mut rendered = Vec::new();
    for i in 0..n {
        let row = emb.row_mut(i);
        for (c, v) in row.iter_mut().enumerate().take(code) {
            *v += cfg.token_noise * (2.0 * keyed_uniform(key, i as u64, c as u64) - 1.0);
        }
        if let Some((gi, _)) = owner[i] {
            let cell = camera.cell_at(i);
            let g = &frame.gt_boxes[gi];
            let anchor = camera.cell_center(cell);
            let b = encode_box(g, &frame.ego_pose, [anchor.x, anchor.y]);
            for (k, v) in b.iter().enumerate() {
                row[k] += v * CODE_SCALE[k];
            }
            let cls = cfg.classes.iter().position(|c| c == &g.class_name).expect("filtered above");
            row[BOX_PARAMS + cls] += 1.0;
            row[code - 1] += 1.0;
            rendered.push(RenderedObject { gt_index: gi, cell });
        }
    }
    let stream = TokenStream {
        embeddings: emb,
        original_index: (0..n).collect(),
        meta: (0..n).map(|i| camera.cell_at(i)).collect(),
        level: 0,
    };
    Ok((stream, rendered))
}

/// Per-parameter scale of rendered box codes.
pub const CODE_SCALE: [f64; BOX_PARAMS] = [0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.2, 0.2];
