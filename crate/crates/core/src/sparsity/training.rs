//! Fitting detection and relevance heads on features from the frozen model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::heads::{encode_box, fit_ridge, DetectionHeads, BOX_PARAMS};
use super::model::{render_tokens, ModelParams};
use super::pipeline::{frame_queries, run_pipeline, token_pyramids, PipelineOptions, RunMode};
use super::relevance::{query_relevance, RelevanceHead};
use super::schedule::{training_keep_ratio, ScheduleConfig};
use super::stream::{BufferKind, QuerySet, Stream};
use super::SparsityError;
use crate::assignment::{hungarian, CostMatrix};
use crate::corridor::FrameLabels;
use crate::dataset::{EgoState, Frame};
use crate::losses::{clamp_prob, gaussian_focal_loss, relevance_targets};
use crate::numeric::gumbel::{gumbel_topk, GumbelTopkConfig, TopkMode};
use crate::numeric::Tensor2;
use crate::sparsity::schedule::keep_count;

/// Hungarian match of query reference points to ground-truth centers (ego
/// frame); pairs farther apart than `gate` are dropped. Returns
/// `(query, gt index)` sorted by query.
pub fn match_queries(queries: &QuerySet, frame: &Frame, classes: &[String], gate: f64) -> Vec<(usize, usize)> {
    let to_ego = frame.ego_pose.inverse();
    let gts: Vec<(usize, [f64; 2])> = frame
        .gt_boxes
        .iter()
        .enumerate()
        .filter(|(_, g)| classes.contains(&g.class_name))
        .map(|(i, g)| {
            let c = to_ego.apply(g.bbox.center());
            (i, [c.x, c.y])
        })
        .collect();
    let dist = |r: &[f64; 3], c: &[f64; 2]| (r[0] - c[0]).hypot(r[1] - c[1]);
    // only queries within the gate of some ground truth can end up matched
    let cand: Vec<usize> = (0..queries.reference_points.len())
        .filter(|&i| gts.iter().any(|(_, c)| dist(&queries.reference_points[i], c) <= gate))
        .collect();
    if gts.is_empty() || cand.is_empty() {
        return Vec::new();
    }
    let costs: Vec<f64> = cand.iter().flat_map(|&i| gts.iter().map(move |(_, c)| dist(&queries.reference_points[i], c))).collect();
    let m = CostMatrix::new(cand.len(), gts.len(), costs.clone()).expect("finite costs");
    let mut pairs: Vec<(usize, usize)> = hungarian(&m)
        .pairs
        .into_iter()
        .filter(|&(i, j)| costs[i * gts.len() + j] <= gate)
        .map(|(i, j)| (cand[i], gts[j].0))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadFitConfig {
    pub ridge_lambda: f64,
    pub match_gate: f64,
}

impl Default for HeadFitConfig {
    fn default() -> Self {
        Self { ridge_lambda: 1e-2, match_gate: 4.0 }
    }
}

/// Dense-run head inputs and matches for one frame.
struct FrameFit {
    features: Tensor2,
    cls: Tensor2,
    boxes: Vec<(usize, [f64; BOX_PARAMS])>,
}

/// Fit class and box heads by ridge regression on the `[q ‖ c]` features
/// of runs under `schedule` (dense when every keep ratio is 1): one-hot
/// class targets on matched queries (zeros elsewhere), box targets on
/// matched queries only.
pub fn fit_detection_heads(
    params: &ModelParams,
    frames: &[&Frame],
    schedule: &ScheduleConfig,
    cfg: &HeadFitConfig,
) -> Result<DetectionHeads, SparsityError> {
    let mc = &params.config;
    let mode = if schedule.image_tkr() == 1.0 && schedule.query_tkr() == 1.0 { RunMode::Dense } else { RunMode::SparseEval };
    let fits: Vec<FrameFit> = frames
        .par_iter()
        .map(|f| {
            let (tokens, _) = render_tokens(params, f)?;
            let (queries, _) = frame_queries(params, f, None)?;
            let out = run_pipeline(params, tokens, queries, &f.ego_state, schedule, &PipelineOptions::new(mode))?;
            let pairs = match_queries(&out.queries, f, &mc.classes, cfg.match_gate);
            let mut cls = Tensor2::zeros(out.queries.len(), mc.classes.len());
            let mut boxes = Vec::with_capacity(pairs.len());
            for &(q, g) in &pairs {
                let gt = &f.gt_boxes[g];
                let k = mc.classes.iter().position(|c| c == &gt.class_name).expect("matched classes are known");
                cls.set(q, k, 1.0);
                let r = out.queries.reference_points[q];
                boxes.push((q, encode_box(gt, &f.ego_pose, [r[0], r[1]])));
            }
            Ok(FrameFit { features: out.head_features, cls, boxes })
        })
        .collect::<Result<_, SparsityError>>()?;
    let mut x = Tensor2::zeros(0, 2 * mc.dim);
    let mut y = Tensor2::zeros(0, mc.classes.len());
    let mut bx = Tensor2::zeros(0, 2 * mc.dim);
    let mut by = Tensor2::zeros(0, BOX_PARAMS);
    for f in &fits {
        for r in 0..f.features.rows() {
            x.push_row(f.features.row(r))?;
            y.push_row(f.cls.row(r))?;
        }
        for (q, b) in &f.boxes {
            bx.push_row(f.features.row(*q))?;
            by.push_row(b)?;
        }
    }
    if by.rows() == 0 {
        return Err(SparsityError::InvalidInput("no query matched any ground truth".into()));
    }
    Ok(DetectionHeads { class: fit_ridge(&x, &y, cfg.ridge_lambda)?, boxes: fit_ridge(&bx, &by, cfg.ridge_lambda)? })
}

/// Relevance-head inputs of one frame with plan targets and the corridor
/// label of every matched, covered agent.
#[derive(Debug, Clone)]
pub struct RelevanceSample {
    pub frame_id: String,
    pub features: Tensor2,
    pub ego: EgoState,
    pub targets: Vec<f64>,
    /// `(row, relevant)` for matched agents with a covered label.
    pub agents: Vec<(usize, bool)>,
}

/// Which relevance head a sample set feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadStage {
    Token,
    Query,
}

/// Relevance-head inputs at the first pruning stage of `stage` in a dense
/// run, with the queries they belong to. The token stage only runs the
/// backbone blocks before that stage.
pub fn stage_features(params: &ModelParams, frame: &Frame, stage: HeadStage) -> Result<(Tensor2, QuerySet), SparsityError> {
    let mc = &params.config;
    let schedule = ScheduleConfig::dense_for(mc);
    let (mut tokens, _) = render_tokens(params, frame)?;
    let (queries, _) = frame_queries(params, frame, None)?;
    let ego = params.token_stage_head.ego.is_some().then_some(&frame.ego_state);
    match stage {
        HeadStage::Token => {
            let l = *schedule
                .backbone
                .pruning_layers
                .first()
                .ok_or_else(|| SparsityError::InvalidSchedule("no backbone pruning stage".into()))?;
            for (block, &kind) in params.backbone.iter().zip(&mc.backbone_blocks).take(l - 1) {
                let groups = params.token_groups(&tokens.meta, kind);
                tokens.embeddings = block.forward(&tokens.embeddings, &groups, mc.heads)?;
            }
            let camera = params.camera();
            let pyr = token_pyramids(&tokens, &camera, mc.levels);
            let rel = query_relevance(&queries, &pyr, &params.relevance_sampler, &camera, &params.token_stage_head, ego, mc.relevance_kind)?;
            Ok((rel.features, queries))
        }
        HeadStage::Query => {
            let opts = PipelineOptions { collect_features: true, ..PipelineOptions::new(RunMode::Dense) };
            let out = run_pipeline(params, tokens, queries, &frame.ego_state, &schedule, &opts)?;
            let rel = out
                .relevance
                .into_iter()
                .find(|r| r.stream == BufferKind::Query)
                .ok_or_else(|| SparsityError::InvalidSchedule("no decoder pruning stage".into()))?;
            Ok((rel.features, out.queries))
        }
    }
}

/// Heatmap-style training targets. Each relevant agent's center is snapped
/// to its matched query, which becomes a positive (target 1); every other
/// query gets the agent's Gaussian evaluated from that peak, so near misses
/// are down-weighted negatives. Plan targets of matched queries are kept
/// where larger.
pub fn heatmap_targets(queries: &QuerySet, frame: &Frame, labels: &FrameLabels, pairs: &[(usize, usize)], plan: &[f64]) -> Vec<f64> {
    let mut t = plan.to_vec();
    for &(qi, gi) in pairs {
        let g = &frame.gt_boxes[gi];
        if !labels.get(&g.agent_id).is_some_and(|l| l.relevant) {
            continue;
        }
        let peak = queries.reference_points[qi];
        let sigma = 0.5 * g.bbox.length().hypot(g.bbox.width());
        for (j, r) in queries.reference_points.iter().enumerate() {
            let d2 = (r[0] - peak[0]).powi(2) + (r[1] - peak[1]).powi(2);
            t[j] = t[j].max((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    t
}

/// Features at the first pruning stage of `stage` from a dense run. Rows
/// are all queries matched to a ground truth plus up to `negatives_per_frame`
/// unmatched queries spread evenly over the rest.
pub fn relevance_samples(
    params: &ModelParams,
    frames: &[(&Frame, &FrameLabels)],
    stage: HeadStage,
    negatives_per_frame: usize,
    match_gate: f64,
) -> Result<Vec<RelevanceSample>, SparsityError> {
    let mc = &params.config;
    frames
        .par_iter()
        .map(|(f, labels)| {
            let (features, queries) = stage_features(params, f, stage)?;
            let pairs = match_queries(&queries, f, &mc.classes, match_gate);
            let plan = relevance_targets(&queries, f, Some(labels), &pairs, mc.relevance_kind)
                .map_err(|e| SparsityError::InvalidInput(e.to_string()))?;
            let all_targets = heatmap_targets(&queries, f, labels, &pairs, &plan);
            let matched: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let unmatched: Vec<usize> = (0..queries.len()).filter(|q| !matched.contains(q)).collect();
            let step = (unmatched.len() as f64 / negatives_per_frame.max(1) as f64).max(1.0);
            let negatives: Vec<usize> =
                (0..negatives_per_frame.min(unmatched.len())).map(|k| unmatched[(k as f64 * step) as usize]).collect();
            let mut rows: Vec<usize> = matched.iter().chain(&negatives).copied().collect();
            rows.sort_unstable();
            let agents = pairs
                .iter()
                .filter_map(|&(q, g)| {
                    let l = labels.get(&f.gt_boxes[g].agent_id)?;
                    (!l.uncovered).then(|| (rows.binary_search(&q).expect("matched rows kept"), l.relevant))
                })
                .collect();
            Ok(RelevanceSample {
                frame_id: f.frame_id.clone(),
                features: features.select_rows(&rows),
                ego: f.ego_state,
                targets: rows.iter().map(|&r| all_targets[r]).collect(),
                agents,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelevanceTrainConfig {
    pub iterations: u64,
    pub learning_rate: f64,
    pub gaussian_alpha: f64,
    pub gaussian_beta: f64,
    pub temperature: f64,
    /// L2 penalty on head parameters.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for RelevanceTrainConfig {
    fn default() -> Self {
        Self { iterations: 500, learning_rate: 1e-2, gaussian_alpha: 2.0, gaussian_beta: 4.0, temperature: 1.0, weight_decay: 1.0, seed: 0 }
    }
}

/// One logged training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub iteration: u64,
    pub loss: f64,
    /// Keep ratio of the warmup schedule at this iteration.
    pub keep_ratio: f64,
    /// Rows the straight-through selection kept, summed over frames.
    pub kept: usize,
}

/// Mean Gaussian-focal loss over frames and its gradient w.r.t. head
/// parameters. Inputs are detached, so nothing flows past the head.
pub fn relevance_loss_and_grad(head: &RelevanceHead, samples: &[RelevanceSample], alpha: f64, beta: f64) -> Result<(f64, Vec<f64>), SparsityError> {
    let (loss, grad, _) = loss_grad_scores(head, samples, alpha, beta)?;
    Ok((loss, grad))
}

type LossGradScores = (f64, Vec<f64>, Vec<Vec<f64>>);

fn loss_grad_scores(head: &RelevanceHead, samples: &[RelevanceSample], alpha: f64, beta: f64) -> Result<LossGradScores, SparsityError> {
    let per: Vec<(f64, Vec<f64>, Vec<f64>)> = samples
        .par_iter()
        .map(|s| {
            let ego = head.ego.as_ref().map(|_| &s.ego);
            let (scores, cache) = head.forward(&s.features, ego)?;
            let p: Vec<f64> = scores.iter().map(|&v| clamp_prob(v)).collect();
            let l = gaussian_focal_loss(&p, &s.targets, alpha, beta).map_err(|e| SparsityError::InvalidInput(e.to_string()))?;
            // clamp is flat outside its range
            let g: Vec<f64> = l.grad.iter().zip(&scores).map(|(g, &v)| if clamp_prob(v) == v { *g } else { 0.0 }).collect();
            let (flat, _) = head.backward(&cache, &g)?;
            Ok((l.value, flat, scores))
        })
        .collect::<Result<_, SparsityError>>()?;
    let n = samples.len().max(1) as f64;
    let mut grad = vec![0.0; head.num_params()];
    let mut loss = 0.0;
    let mut all_scores = Vec::with_capacity(per.len());
    for (l, g, sc) in per {
        loss += l / n;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b / n;
        }
        all_scores.push(sc);
    }
    Ok((loss, grad, all_scores))
}

/// AdamW on the relevance head. Each iteration also runs
/// the warmup-scheduled straight-through selection over every frame's rows
/// and logs how many it kept.
pub fn train_relevance_head(
    head: &mut RelevanceHead,
    samples: &[RelevanceSample],
    schedule: &ScheduleConfig,
    cfg: &RelevanceTrainConfig,
) -> Result<Vec<TrainStep>, SparsityError> {
    let mut log = Vec::with_capacity(cfg.iterations as usize);
    let tkr = schedule.query_tkr();
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; head.num_params()];
    let mut v = vec![0.0; head.num_params()];
    for it in 0..cfg.iterations {
        let (loss, grad, all_scores) = loss_grad_scores(head, samples, cfg.gaussian_alpha, cfg.gaussian_beta)?;
        let keep_ratio = training_keep_ratio(it, schedule.warmup, tkr);
        let mut kept = 0;
        for (fi, scores) in all_scores.iter().enumerate() {
            if scores.is_empty() {
                continue;
            }
            let k = keep_count(keep_ratio, scores.len());
            let sel = gumbel_topk(
                scores,
                &GumbelTopkConfig {
                    k,
                    temperature: cfg.temperature,
                    seed: cfg.seed ^ it,
                    stage: fi as u64,
                    mode: TopkMode::StraightThroughTrain,
                },
            )?;
            kept += sel.kept.len();
        }
        let mut theta = head.to_flat();
        let step = it as i32 + 1;
        let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
        for (i, t) in theta.iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            *t -= cfg.learning_rate * ((m[i] / c1) / ((v[i] / c2).sqrt() + eps) + cfg.weight_decay * *t);
        }
        head.set_flat(&theta);
        log.push(TrainStep { iteration: it, loss, keep_ratio, kept });
    }
    Ok(log)
}

/// Head scores and labels of every covered matched agent in `samples`.
pub fn agent_scores(head: &RelevanceHead, samples: &[RelevanceSample]) -> Result<(Vec<f64>, Vec<bool>), SparsityError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        let ego = head.ego.as_ref().map(|_| &s.ego);
        let (r, _) = head.forward(&s.features, ego)?;
        for &(row, rel) in &s.agents {
            scores.push(r[row]);
            labels.push(rel);
        }
    }
    Ok((scores, labels))
}

/// ROC-AUC by the rank-sum statistic; tied scores share their mean rank.
/// `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[idx[k]]).count() as f64 * mean_rank;
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}
