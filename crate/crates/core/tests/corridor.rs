use proptest::prelude::*;
use relsparse::corridor::*;
use relsparse::dataset::{AgentTrack, TimedBox};
use relsparse::geometry::{polygon_distance, OrientedBoxBEV, Point2};
use relsparse::synthetic::{crossing_scenario, gen_synthetic, SyntheticSpec};

fn track(x: f64, y: f64, yaw: f64, v: f64, w: f64) -> AgentTrack {
    let dt = 0.01;
    let (mut px, mut py, mut h) = (x, y, yaw);
    let boxes = (0..=600)
        .map(|k| {
            let b = TimedBox { t: k as f64 * dt, bbox: OrientedBoxBEV::new(Point2::new(px, py), h, 4.5, 1.9).unwrap() };
            px += v * dt * h.cos();
            py += v * dt * h.sin();
            h += w * dt;
            b
        })
        .collect();
    AgentTrack::new("a", "car", boxes).unwrap()
}

#[test]
fn rotating_agent_corridor_covers_every_sample() {
    // quarter turn over the 5 s horizon while translating
    let a = track(0.0, 0.0, 0.0, 3.0, std::f64::consts::FRAC_PI_2 / 5.0);
    let cfg = RelevanceConfig { step_dt: 0.01, ..RelevanceConfig::default() };
    let poly = swept_corridor(&a, 0.0, &cfg).unwrap();
    for k in 0..=500 {
        let b = a.box_at(k as f64 * 0.01).unwrap();
        assert!(poly.area() >= b.area());
        for c in b.corners() {
            assert!(poly.contains(c, 1e-9), "corner {c:?} at step {k}");
        }
    }
}

#[test]
fn crossing_agent_is_labeled_relevant() {
    let ds = crossing_scenario();
    let labels = label_dataset(&ds, &RelevanceConfig::default());
    assert!(labels[0].labels.iter().any(|l| l.relevant));
}

#[test]
fn labels_deterministic() {
    let ds = gen_synthetic(&SyntheticSpec { scenes: 1, ..SyntheticSpec::default() });
    let cfg = RelevanceConfig::default();
    let a = serde_json::to_string(&label_dataset(&ds, &cfg)).unwrap();
    let b = serde_json::to_string(&label_dataset(&ds, &cfg)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn synthetic_density_sanity() {
    // mean relevant agents per frame stays in a plausible band around a few
    let ds = gen_synthetic(&SyntheticSpec { scenes: 6, seed: 1, ..SyntheticSpec::default() });
    let cfg = RelevanceConfig::default();
    let cal = calibrate_dmin(&ds, &cfg).unwrap();
    let labels = relabel(&label_dataset(&ds, &cfg), cal.d_min);
    let per_frame: Vec<usize> = labels.iter().map(|f| f.labels.iter().filter(|l| l.relevant).count()).collect();
    let mean = per_frame.iter().sum::<usize>() as f64 / per_frame.len() as f64;
    assert!(mean > 0.2 && mean < 10.0, "mean relevant per frame {mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hull_bounds_sampled_distance(
        ax in -20.0f64..20.0, ay in -20.0f64..20.0, ayaw in -3.1f64..3.1, av in 0.0f64..10.0, aw in -0.5f64..0.5,
        eyaw in -3.1f64..3.1, ev in 0.0f64..10.0, ew in -0.5f64..0.5,
    ) {
        let a = track(ax, ay, ayaw, av, aw);
        let e = track(0.0, 0.0, eyaw, ev, ew);
        let cfg = RelevanceConfig { step_dt: 0.01, ..RelevanceConfig::default() };
        let d = relevance_label(&a, &e, 0.0, &cfg).unwrap().closest_distance;
        let pa = swept_corridor(&a, 0.0, &cfg).unwrap();
        let pe = swept_corridor(&e, 0.0, &cfg).unwrap();
        prop_assert_eq!(d, polygon_distance(&pa, &pe));
        // every sampled box lies in its hull, so no box pair is closer
        for k in (0..=500).step_by(25) {
            let ba = footprint(&a, k);
            for j in (0..=500).step_by(25) {
                let be = footprint(&e, j);
                prop_assert!(d <= polygon_distance(&ba, &be) + 1e-9);
            }
        }
    }

    #[test]
    fn relevant_set_monotone_in_dmin(d1 in 0.0f64..5.0, d2 in 0.0f64..5.0) {
        let ds = gen_synthetic(&SyntheticSpec { scenes: 1, duration: 8.0, ..SyntheticSpec::default() });
        let base = label_dataset(&ds, &RelevanceConfig::default());
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (a, b) = (relabel(&base, lo), relabel(&base, hi));
        for (fa, fb) in a.iter().zip(&b) {
            for (la, lb) in fa.labels.iter().zip(&fb.labels) {
                prop_assert!(!la.relevant || lb.relevant);
            }
        }
    }

    #[test]
    fn longer_horizon_contains_shorter(steps in 5u32..50, x in -10.0f64..10.0, v in 0.0f64..10.0, w in -0.6f64..0.6) {
        let a = track(x, 2.0, 0.3, v, w);
        // horizons on the same sampling grid
        let short = RelevanceConfig { horizon: steps as f64 * 0.1, ..RelevanceConfig::default() };
        let long = RelevanceConfig { horizon: 5.0, ..RelevanceConfig::default() };
        let ps = swept_corridor(&a, 0.0, &short).unwrap();
        let pl = swept_corridor(&a, 0.0, &long).unwrap();
        for v in ps.vertices() {
            prop_assert!(pl.contains(*v, 1e-9));
        }
    }
}

fn footprint(t: &AgentTrack, k: usize) -> relsparse::geometry::ConvexPolygon {
    relsparse::geometry::ConvexPolygon::from_box(&t.box_at(k as f64 * 0.01).unwrap())
}
