use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relsparse::geometry::*;

fn pt() -> impl Strategy<Value = Point2> {
    (-50.0f64..50.0, -50.0f64..50.0).prop_map(|(x, y)| Point2::new(x, y))
}

fn hull() -> impl Strategy<Value = ConvexPolygon> {
    prop::collection::vec(pt(), 3..24).prop_filter_map("degenerate", |p| convex_hull(&p).ok())
}

#[test]
fn disc_points_inside_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = 10.0;
    let pts: Vec<Point2> = (0..1000)
        .map(|_| {
            let (a, s): (f64, f64) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..1.0));
            Point2::new(r * s.sqrt() * a.cos(), r * s.sqrt() * a.sin())
        })
        .collect();
    let h = convex_hull(&pts).unwrap();
    assert!(h.area() <= std::f64::consts::PI * r * r);
    assert!(pts.iter().all(|&p| h.contains(p, 1e-9)));
}

proptest! {
    #[test]
    fn hull_idempotent_and_contains_inputs(p in prop::collection::vec(pt(), 3..40)) {
        if let Ok(h) = convex_hull(&p) {
            let again = convex_hull(h.vertices()).unwrap();
            prop_assert_eq!(again.vertices(), h.vertices());
            for q in &p {
                prop_assert!(h.contains(*q, 1e-9));
            }
        }
    }

    #[test]
    fn distance_symmetric_and_bounded(a in hull(), b in hull()) {
        let d = polygon_distance(&a, &b);
        prop_assert_eq!(d, polygon_distance(&b, &a));
        for u in a.vertices() {
            for v in b.vertices() {
                prop_assert!(d <= u.distance(*v) + 1e-12);
            }
        }
    }

    #[test]
    fn distance_translation_equivariant(a in hull(), b in hull(), t in pt()) {
        let d = polygon_distance(&a, &b);
        let dt = polygon_distance(&a.translate(t), &b.translate(t));
        prop_assert!((d - dt).abs() <= 1e-9);
    }

    #[test]
    fn zero_distance_iff_no_separating_axis(a in hull(), b in hull()) {
        let d = polygon_distance(&a, &b);
        prop_assert_eq!(d == 0.0, !has_separating_axis(&a, &b));
    }
}
