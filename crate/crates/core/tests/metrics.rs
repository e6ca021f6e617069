use proptest::prelude::*;
use relsparse::corridor::{FrameLabels, RelevanceLabel};
use relsparse::dataset::{AgentTrack, DatasetMeta, Frame, GtBox, Scene, SceneDataset, TimedBox};
use relsparse::geometry::{OrientedBoxBEV, Point2, SE2Pose};
use relsparse::metrics::*;

fn gt(agent: &str, x: f64, y: f64) -> GtBox {
    GtBox {
        agent_id: agent.into(),
        class_name: "car".into(),
        bbox: OrientedBoxBEV::new(Point2::new(x, y), 0.0, 4.0, 2.0).unwrap(),
        z: 0.0,
        height: 1.5,
        velocity: Some([1.0, 0.0]),
        attribute: Some("moving".into()),
    }
}

fn still(id: &str) -> AgentTrack {
    let b = OrientedBoxBEV::new(Point2::new(0.0, 0.0), 0.0, 4.0, 2.0).unwrap();
    AgentTrack::new(id, "car", vec![TimedBox { t: 0.0, bbox: b }, TimedBox { t: 30.0, bbox: b }]).unwrap()
}

/// One scene, frames f0..fn, each with the given GT centers.
fn dataset(frames: &[Vec<(f64, f64)>]) -> SceneDataset {
    let frames = frames
        .iter()
        .enumerate()
        .map(|(i, spots)| Frame {
            frame_id: format!("f{i}"),
            timestamp: i as f64 * 0.5,
            ego_pose: SE2Pose::identity(),
            ego_state: Default::default(),
            gt_boxes: spots.iter().enumerate().map(|(k, &(x, y))| gt(&format!("a{k}"), x, y)).collect(),
        })
        .collect();
    let scene = Scene { scene_id: "s".into(), ego: still("ego"), agents: Vec::new(), frames };
    SceneDataset { meta: DatasetMeta { classes: vec!["car".into()], ..Default::default() }, scenes: vec![scene] }
}

fn det(frame: usize, x: f64, y: f64, score: f64) -> Detection {
    Detection::from_gt(&format!("f{frame}"), &gt("d", x, y), score)
}

fn single_threshold(t: f64) -> MetricsConfig {
    MetricsConfig { center_thresholds: vec![t], tp_threshold: t, ..MetricsConfig::default() }
}

#[test]
fn one_gt_two_dets_example() {
    let ds = dataset(&[vec![(10.0, 0.0)]]);
    let dets = vec![det(0, 10.2, 0.0, 0.9), det(0, 40.0, 0.0, 0.8)];
    let r = evaluate(&ds, &dets, None, &single_threshold(0.5)).unwrap();
    // precision 1 up to recall 1, then 0.5 at the duplicate recall point
    let expected = (89.0 * 0.9 + 0.4) / (90.0 * 0.9);
    assert!((r.map - expected).abs() < 1e-12, "{} vs {expected}", r.map);
    assert_eq!(r.all.counts, Counts { tp: 1, fp: 1, gt: 1, det: 2 });
}

#[test]
fn nds_half_example() {
    let e = TpErrors { ate: 0.5, ase: 0.5, aoe: 0.5, ave: 0.5, aae: 0.5 };
    assert!((nds(0.5, &e) - 0.5).abs() < 1e-15);
}

#[test]
fn distant_false_positives_favor_ra() {
    let ds = dataset(&[vec![(10.0, 0.0), (0.0, 8.0)], vec![(-12.0, 3.0)]]);
    let dets = vec![
        det(0, 10.1, 0.0, 0.5),
        det(0, 0.0, 8.3, 0.4),
        det(1, -12.0, 3.2, 0.45),
        det(0, 45.0, 10.0, 0.95),
        det(1, -50.0, 0.0, 0.9),
    ];
    let r = evaluate(&ds, &dets, None, &MetricsConfig::default()).unwrap();
    assert!(r.map_ra >= r.map);
    assert_eq!(r.map_ra, 1.0);
}

#[test]
fn missing_labels_disable_rm_with_note() {
    let ds = dataset(&[vec![(10.0, 0.0)]]);
    let dets = vec![det(0, 10.0, 0.0, 0.9)];
    let r = evaluate(&ds, &dets, Some(&[]), &MetricsConfig::default()).unwrap();
    assert!(r.rm.is_none());
    assert!(r.metadata.notes.iter().any(|n| n.contains("RM")));
}

#[test]
fn unknown_frame_rejected() {
    let ds = dataset(&[vec![(10.0, 0.0)]]);
    let err = evaluate(&ds, &[det(7, 0.0, 0.0, 0.5)], None, &MetricsConfig::default());
    assert!(matches!(err, Err(MetricsError::UnknownFrame(_))));
}

#[test]
fn no_gt_class_is_excluded() {
    let ds = dataset(&[vec![(10.0, 0.0)]]);
    let cfg = MetricsConfig { classes: vec!["car".into(), "bus".into()], ..MetricsConfig::default() };
    let r = evaluate(&ds, &[det(0, 10.0, 0.0, 0.9)], None, &cfg).unwrap();
    assert_eq!(r.all.excluded_classes, vec!["bus".to_string()]);
    assert_eq!(r.map, 1.0);
}

/// Random scene: GT on a ring, detections near some of them plus clutter.
fn scenario() -> impl Strategy<Value = (SceneDataset, Vec<Detection>)> {
    (
        prop::collection::vec(prop::collection::vec((-40.0f64..40.0, -40.0f64..40.0), 1..5), 1..4),
        prop::collection::vec((0usize..4, 0usize..5, -3.0f64..3.0, -3.0f64..3.0, 0.01f64..1.0), 0..14),
    )
        .prop_map(|(frames, raw)| {
            let ds = dataset(&frames);
            let dets = raw
                .into_iter()
                .map(|(f, k, dx, dy, s)| {
                    let f = f % frames.len();
                    let spots = &frames[f];
                    let (x, y) = spots[k % spots.len()];
                    det(f, x + dx, y + dy, s)
                })
                .collect();
            (ds, dets)
        })
}

fn frame_labels(ds: &SceneDataset, mask: &[bool]) -> Vec<FrameLabels> {
    ds.frames()
        .map(|(_, f)| FrameLabels {
            frame_id: f.frame_id.clone(),
            labels: f
                .gt_boxes
                .iter()
                .enumerate()
                .map(|(k, g)| RelevanceLabel { agent_id: g.agent_id.clone(), relevant: mask[k % mask.len()], closest_distance: 0.0, uncovered: false })
                .collect(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn prepending_false_positive_never_raises_ap(flags in prop::collection::vec(any::<bool>(), 1..30), extra in 0usize..10) {
        let num_gt = flags.iter().filter(|f| **f).count() + extra;
        prop_assume!(num_gt > 0);
        let base = ap_from_tp_flags(&flags, num_gt, 0.1, 0.1);
        let mut worse = vec![false];
        worse.extend(&flags);
        prop_assert!(ap_from_tp_flags(&worse, num_gt, 0.1, 0.1) <= base + 1e-12);
    }

    #[test]
    fn ap_monotone_in_threshold((ds, dets) in scenario()) {
        let cfg = MetricsConfig::default();
        let r = evaluate(&ds, &dets, None, &cfg).unwrap();
        let aps = &r.all.per_class_ap["car"];
        let vals: Vec<f64> = cfg.center_thresholds.iter().map(|t| aps[&format!("{t:.1}")]).collect();
        for w in vals.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{vals:?}");
        }
    }

    #[test]
    fn frame_and_detection_order_irrelevant((ds, dets) in scenario()) {
        let cfg = MetricsConfig::default();
        let a = evaluate(&ds, &dets, None, &cfg).unwrap();
        let mut rev_ds = ds.clone();
        rev_ds.scenes[0].frames.reverse();
        let rev: Vec<Detection> = dets.iter().rev().cloned().collect();
        let b = evaluate(&rev_ds, &rev, None, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn nds_bounded(map in 0.0f64..=1.0, e in prop::array::uniform5(0.0f64..10.0), mask in prop::array::uniform5(any::<bool>())) {
        let t = TpErrors { ate: e[0], ase: e[1], aoe: e[2], ave: e[3], aae: e[4] };
        let v = nds_masked(map, &t, mask);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn ra_and_rm_filters_commute((ds, dets) in scenario(), mask in prop::collection::vec(any::<bool>(), 1..5), radius in 5.0f64..50.0) {
        let labels = frame_labels(&ds, &mask);
        for ((_, f), l) in ds.frames().zip(&labels) {
            let ef = EvalFrame {
                frame_id: &f.frame_id,
                ego_center: f.ego_center(),
                dets: dets.iter().filter(|d| d.frame_id == f.frame_id).collect(),
                gts: f.gt_boxes.iter().collect(),
            };
            let ra_then_rm = apply_rm_filter(&apply_ra_filter(&ef, radius), l, 4.0).unwrap();
            let rm_then_ra = apply_ra_filter(&apply_rm_filter(&ef, l, 4.0).unwrap(), radius);
            let ids = |e: &EvalFrame<'_>| e.gts.iter().map(|g| g.agent_id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&ra_then_rm), ids(&rm_then_ra));
            // the RA-side GT set is the intersection of both filters
            for g in &ra_then_rm.gts {
                prop_assert!(g.bbox.center().distance(ef.ego_center) <= radius);
                prop_assert!(l.get(&g.agent_id).unwrap().relevant);
            }
        }
    }
}
