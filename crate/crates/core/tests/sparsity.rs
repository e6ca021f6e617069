use proptest::prelude::*;
use relsparse::dataset::Frame;
use relsparse::geometry::SE2Pose;
use relsparse::sparsity::pipeline::{frame_queries, PropagationState};
use relsparse::sparsity::stream::{BufferKind, QueryOrigin, Stream};
use relsparse::sparsity::*;
use relsparse::synthetic::{gen_synthetic, SyntheticSpec};

fn toy_frame(seed: u64) -> Frame {
    let ds = gen_synthetic(&SyntheticSpec { scenes: 1, duration: 1.0, seed, ..SyntheticSpec::default() });
    ds.scenes[0].frames[0].clone()
}

fn split_config() -> ModelConfig {
    ModelConfig { views: 4, grid_h: 7, grid_w: 23, anchor_stride: 1, propagated_queries: 256, ..ModelConfig::default() }
}

fn origins(q: &QuerySet) -> (usize, usize) {
    let p = q.origin.iter().filter(|o| **o == QueryOrigin::Propagated).count();
    (q.origin.len() - p, p)
}

#[test]
fn anchor_and_propagated_split() {
    let cfg = split_config();
    assert_eq!(cfg.num_anchor_queries(), 644);
    assert_eq!(cfg.num_queries(), 900);
    let params = ModelParams::random(&cfg, 0).unwrap();
    let frame = toy_frame(0);

    // first frame: the propagated slots are topped up with fresh queries
    let (q, _) = frame_queries(&params, &frame, None).unwrap();
    assert_eq!(q.len(), 900);
    assert_eq!(origins(&q), (900, 0));
    assert_eq!(q.original_index, (0..900).collect::<Vec<_>>());

    let carried = q.select(&(0..300).collect::<Vec<_>>());
    let state = PropagationState { queries: carried.clone(), ego_pose: SE2Pose::identity() };
    let (q, _) = frame_queries(&params, &frame, Some(&state)).unwrap();
    assert_eq!(q.len(), 900);
    assert_eq!(origins(&q), (644, 256));

    let state = PropagationState { queries: carried.select(&(0..100).collect::<Vec<_>>()), ego_pose: SE2Pose::identity() };
    let (q, _) = frame_queries(&params, &frame, Some(&state)).unwrap();
    assert_eq!(q.len(), 900);
    assert_eq!(origins(&q), (800, 100));
    assert!(q.origin[644..744].iter().all(|o| *o == QueryOrigin::Propagated));
}

#[test]
fn toy_pipeline_finite_across_keep_ratios() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.backbone_blocks.len(), 6);
    assert_eq!(cfg.num_queries(), 32);
    let params = ModelParams::random(&cfg, 1).unwrap();
    let frame = toy_frame(1);
    let mut image_rows = Vec::new();
    for tkr in [0.1, 0.25, 0.5, 0.75, 1.0] {
        let sch = ScheduleConfig::for_model(&cfg, tkr);
        let out = run_frame(&params, &frame, None, &sch, &PipelineOptions::new(RunMode::SparseEval)).unwrap().output;
        assert!(out.class_probs.data().iter().all(|v| v.is_finite()), "tkr {tkr}");
        assert!(out.boxes.data().iter().all(|v| v.is_finite()), "tkr {tkr}");
        assert_eq!(out.class_probs.rows(), 32);
        image_rows.push((out.trace.processed_rows(BufferKind::Image), out.trace.macs.backbone));
    }
    for w in image_rows.windows(2) {
        assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1, "{image_rows:?}");
    }
}

#[test]
fn sparse_train_trace_reproducible() {
    let cfg = ModelConfig::default();
    let params = ModelParams::random(&cfg, 2).unwrap();
    let frame = toy_frame(2);
    let sch = ScheduleConfig::for_model(&cfg, 0.25);
    let opts = PipelineOptions { seed: 11, temperature: 0.7, record_indices: true, ..PipelineOptions::new(RunMode::SparseTrain) };
    let a = run_frame(&params, &frame, None, &sch, &opts).unwrap().output;
    let b = run_frame(&params, &frame, None, &sch, &opts).unwrap().output;
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.class_probs, b.class_probs);
}

#[test]
fn scene_propagates_queries() {
    let cfg = ModelConfig { propagated_queries: 8, ..ModelConfig::default() };
    let params = ModelParams::random(&cfg, 3).unwrap();
    let ds = gen_synthetic(&SyntheticSpec { scenes: 1, duration: 1.5, seed: 3, ..SyntheticSpec::default() });
    let sch = ScheduleConfig::for_model(&cfg, 0.5);
    let results = run_scene(&params, &ds.scenes[0], &sch, &PipelineOptions::new(RunMode::SparseEval)).unwrap();
    assert!(results.len() >= 2);
    assert_eq!(origins(&results[0].output.queries).1, 0);
    for r in &results[1..] {
        assert_eq!(r.output.queries.len(), cfg.num_queries());
        assert_eq!(origins(&r.output.queries).1, 8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn layer_keep_ratio_non_increasing(tkr in 0.01f64..=1.0, total in 2usize..40, l in 0usize..40) {
        prop_assume!(l + 1 <= total);
        let a = layer_keep_ratio(tkr, l, total);
        let b = layer_keep_ratio(tkr, l + 1, total);
        prop_assert!(b <= a + 1e-15);
        prop_assert!(a <= 1.0 && b >= tkr - 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn active_and_buffer_partition_every_stage(tkr in 0.05f64..=1.0, seed in 0u64..1000, train in any::<bool>()) {
        let cfg = ModelConfig::default();
        let params = ModelParams::random(&cfg, seed).unwrap();
        let mode = if train { RunMode::SparseTrain } else { RunMode::SparseEval };
        let opts = PipelineOptions { seed, record_indices: true, ..PipelineOptions::new(mode) };
        let sch = ScheduleConfig::for_model(&cfg, tkr);
        let tr = run_frame(&params, &toy_frame(seed), None, &sch, &opts).unwrap().output.trace;
        for s in &tr.stages {
            let n0 = if s.stream == BufferKind::Image { tr.initial_tokens } else { tr.initial_queries };
            let mut all: Vec<usize> = s.active_indices.iter().chain(&s.buffered_indices).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n0).collect::<Vec<_>>());
            prop_assert_eq!(s.active + s.buffered, n0);
        }
    }
}
