//! Convex BEV geometry: oriented boxes, SE(2) poses, convex hulls and
//! polygon-polygon distance.
//!
//! All coordinates are meters in a right-handed BEV frame, yaw measured
//! counter-clockwise from +x. Polygons are stored counter-clockwise with no
//! three collinear vertices.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative collinearity tolerance; scaled by the squared coordinate scale of
/// the input before comparing against a cross product.
pub const COLLINEAR_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn distance(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Rotate about the origin.
    pub fn rotate(self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// Wrap an angle into (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Signed shortest-arc difference `b - a` in (-π, π].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(b - a)
}

/// A BEV footprint. Construct through [`OrientedBoxBEV::new`] so that yaw is
/// normalized and dimensions are validated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct OrientedBoxBEV {
    center: Point2,
    yaw: f64,
    length: f64,
    width: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x: f64,
    y: f64,
    yaw: f64,
    length: f64,
    width: f64,
}

impl TryFrom<RawBox> for OrientedBoxBEV {
    type Error = GeometryError;
    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        OrientedBoxBEV::new(Point2::new(r.x, r.y), r.yaw, r.length, r.width)
    }
}

impl From<OrientedBoxBEV> for RawBox {
    fn from(b: OrientedBoxBEV) -> Self {
        RawBox { x: b.center.x, y: b.center.y, yaw: b.yaw, length: b.length, width: b.width }
    }
}

impl OrientedBoxBEV {
    pub fn new(center: Point2, yaw: f64, length: f64, width: f64) -> Result<Self, GeometryError> {
        if !center.is_finite() || !yaw.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if !(length > 0.0 && length.is_finite()) || !(width > 0.0 && width.is_finite()) {
            return Err(GeometryError::InvalidBox(format!(
                "dimensions must be positive, got length={length} width={width}"
            )));
        }
        Ok(Self { center, yaw: normalize_angle(yaw), length, width })
    }

    pub fn center(&self) -> Point2 {
        self.center
    }
    pub fn yaw(&self) -> f64 {
        self.yaw
    }
    pub fn length(&self) -> f64 {
        self.length
    }
    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Corners in CCW order, starting at front-left.
    pub fn corners(&self) -> [Point2; 4] {
        box_corners(self)
    }
}

/// Corners of `b` in counter-clockwise order (front-left, rear-left,
/// rear-right, front-right).
pub fn box_corners(b: &OrientedBoxBEV) -> [Point2; 4] {
    let hl = 0.5 * b.length;
    let hw = 0.5 * b.width;
    let local = [
        Point2::new(hl, hw),
        Point2::new(-hl, hw),
        Point2::new(-hl, -hw),
        Point2::new(hl, -hw),
    ];
    local.map(|p| p.rotate(b.yaw) + b.center)
}

/// Rigid BEV transform: rotate by `rotation` then translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SE2Pose {
    pub translation: Point2,
    rotation: f64,
}

impl Default for SE2Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE2Pose {
    pub fn new(translation: Point2, rotation: f64) -> Self {
        Self { translation, rotation: normalize_angle(rotation) }
    }

    pub fn identity() -> Self {
        Self { translation: Point2::default(), rotation: 0.0 }
    }

    pub fn rotation(&self) -> f64 {
        self.rotation
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        p.rotate(self.rotation) + self.translation
    }

    pub fn inverse(&self) -> SE2Pose {
        let r = -self.rotation;
        SE2Pose::new((self.translation * -1.0).rotate(r), r)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SE2Pose) -> SE2Pose {
        SE2Pose::new(self.apply(other.translation), self.rotation + other.rotation)
    }
}

pub fn transform_box(pose: &SE2Pose, b: &OrientedBoxBEV) -> OrientedBoxBEV {
    OrientedBoxBEV {
        center: pose.apply(b.center),
        yaw: normalize_angle(b.yaw + pose.rotation),
        length: b.length,
        width: b.width,
    }
}

/// Strictly convex CCW polygon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl ConvexPolygon {
    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn from_box(b: &OrientedBoxBEV) -> ConvexPolygon {
        ConvexPolygon { vertices: box_corners(b).to_vec() }
    }

    /// Shoelace area (positive for CCW).
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut s = 0.0;
        for i in 0..n {
            s += self.vertices[i].cross(self.vertices[(i + 1) % n]);
        }
        0.5 * s
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Inside or on the boundary, within `tol` meters.
    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        self.edges().all(|(a, b)| {
            let e = b - a;
            let len = e.norm();
            // signed distance of p to the left of edge a->b
            e.cross(p - a) / len >= -tol
        })
    }

    pub fn translate(&self, d: Point2) -> ConvexPolygon {
        ConvexPolygon { vertices: self.vertices.iter().map(|&v| v + d).collect() }
    }

    fn project(&self, axis: Point2) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.vertices {
            let d = v.dot(axis);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (lo, hi)
    }
}

/// Monotone-chain convex hull. Collinear boundary points are dropped.
pub fn convex_hull(points: &[Point2]) -> Result<ConvexPolygon, GeometryError> {
    if points.iter().any(|p| !p.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Err(GeometryError::DegenerateInput(format!(
            "need at least 3 distinct points, got {}",
            pts.len()
        )));
    }

    let scale = pts.iter().fold(1.0_f64, |m, p| m.max(p.x.abs()).max(p.y.abs()));
    let tol = COLLINEAR_REL_TOL * scale * scale;
    let turn = |o: Point2, a: Point2, b: Point2| (a - o).cross(b - o);

    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= tol {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= tol {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();

    if hull.len() < 3 {
        return Err(GeometryError::DegenerateInput("all points collinear".into()));
    }
    Ok(ConvexPolygon { vertices: hull })
}

/// Separating-axis test over both polygons' edge normals. Touching polygons
/// (zero gap) are not separated.
pub fn has_separating_axis(p: &ConvexPolygon, q: &ConvexPolygon) -> bool {
    let axes = p.edges().chain(q.edges()).map(|(a, b)| {
        let e = b - a;
        Point2::new(-e.y, e.x)
    });
    for axis in axes {
        let (plo, phi) = p.project(axis);
        let (qlo, qhi) = q.project(axis);
        if phi < qlo || qhi < plo {
            return true;
        }
    }
    false
}

pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Distance between two segments assumed non-intersecting (the caller has
/// already ruled out overlap).
fn segment_segment_distance(a0: Point2, a1: Point2, b0: Point2, b1: Point2) -> f64 {
    point_segment_distance(a0, b0, b1)
        .min(point_segment_distance(a1, b0, b1))
        .min(point_segment_distance(b0, a0, a1))
        .min(point_segment_distance(b1, a0, a1))
}

/// Minimum Euclidean distance between two convex polygons; zero when they
/// overlap or touch.
pub fn polygon_distance(p: &ConvexPolygon, q: &ConvexPolygon) -> f64 {
    if !has_separating_axis(p, q) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for (a0, a1) in p.edges() {
        for (b0, b1) in q.edges() {
            // Evaluate in a fixed argument order so that d(p,q) == d(q,p) bitwise.
            let d = segment_segment_distance(a0, a1, b0, b1).min(segment_segment_distance(b0, b1, a0, a1));
            best = best.min(d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(cx: f64, cy: f64) -> ConvexPolygon {
        ConvexPolygon::from_box(&OrientedBoxBEV::new(Point2::new(cx, cy), 0.0, 1.0, 1.0).unwrap())
    }

    fn as_set(mut v: Vec<Point2>) -> Vec<(i64, i64)> {
        let mut out: Vec<(i64, i64)> =
            v.drain(..).map(|p| ((p.x * 1e6).round() as i64, (p.y * 1e6).round() as i64)).collect();
        out.sort();
        out
    }

    #[test]
    fn axis_aligned_corners() {
        let b = OrientedBoxBEV::new(Point2::new(0.0, 0.0), 0.0, 2.0, 1.0).unwrap();
        let c = box_corners(&b);
        assert_eq!(
            as_set(c.to_vec()),
            as_set(vec![
                Point2::new(1.0, 0.5),
                Point2::new(-1.0, 0.5),
                Point2::new(-1.0, -0.5),
                Point2::new(1.0, -0.5)
            ])
        );
        assert!(ConvexPolygon::from_box(&b).area() > 0.0, "corners must be CCW");
    }

    #[test]
    fn quarter_turn_corners() {
        let b = OrientedBoxBEV::new(Point2::new(0.0, 0.0), PI / 2.0, 2.0, 1.0).unwrap();
        assert_eq!(
            as_set(box_corners(&b).to_vec()),
            as_set(vec![
                Point2::new(0.5, 1.0),
                Point2::new(-0.5, 1.0),
                Point2::new(-0.5, -1.0),
                Point2::new(0.5, -1.0)
            ])
        );
    }

    #[test]
    fn box_validation() {
        assert!(OrientedBoxBEV::new(Point2::new(0.0, 0.0), 0.0, 0.0, 1.0).is_err());
        assert!(OrientedBoxBEV::new(Point2::new(f64::NAN, 0.0), 0.0, 1.0, 1.0).is_err());
        let b = OrientedBoxBEV::new(Point2::new(0.0, 0.0), 3.0 * PI, 1.0, 1.0).unwrap();
        assert!((b.yaw() - PI).abs() < 1e-12);
        let b = OrientedBoxBEV::new(Point2::new(0.0, 0.0), -PI, 1.0, 1.0).unwrap();
        assert_eq!(b.yaw(), PI);
    }

    #[test]
    fn hull_drops_interior_point() {
        let pts = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.5, 0.5),
        ];
        let h = convex_hull(&pts).unwrap();
        assert_eq!(h.vertices().len(), 4);
        assert!((h.area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hull_of_triangle_is_ccw() {
        let pts = [Point2::new(0.0, 0.0), Point2::new(0.0, 1.0), Point2::new(1.0, 0.0)];
        let h = convex_hull(&pts).unwrap();
        assert_eq!(h.vertices().len(), 3);
        assert!(h.area() > 0.0);
    }

    #[test]
    fn hull_rejects_degenerate() {
        let line = [Point2::new(0.0, 0.0), Point2::new(1.0, 1.0), Point2::new(2.0, 2.0)];
        assert!(matches!(convex_hull(&line), Err(GeometryError::DegenerateInput(_))));
        let dup = [Point2::new(0.0, 0.0), Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)];
        assert!(matches!(convex_hull(&dup), Err(GeometryError::DegenerateInput(_))));
    }

    #[test]
    fn hull_removes_collinear_edge_points() {
        let pts = [
            Point2::new(0.0, 0.0),
            Point2::new(0.5, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ];
        assert_eq!(convex_hull(&pts).unwrap().vertices().len(), 4);
    }

    #[test]
    fn distance_examples() {
        assert!((polygon_distance(&sq(0.0, 0.0), &sq(3.0, 0.0)) - 2.0).abs() < 1e-12);
        assert_eq!(polygon_distance(&sq(0.0, 0.0), &sq(0.5, 0.0)), 0.0);
        assert!((polygon_distance(&sq(0.0, 0.0), &sq(3.0, 3.0)) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        // touching
        assert_eq!(polygon_distance(&sq(0.0, 0.0), &sq(1.0, 0.0)), 0.0);
    }

    #[test]
    fn pose_roundtrip() {
        let b = OrientedBoxBEV::new(Point2::new(2.0, -1.0), 0.3, 4.0, 2.0).unwrap();
        assert_eq!(transform_box(&SE2Pose::identity(), &b), b);
        let t = SE2Pose::new(Point2::new(1.0, 0.0), 0.0);
        let o = OrientedBoxBEV::new(Point2::new(0.0, 0.0), 0.0, 1.0, 1.0).unwrap();
        assert_eq!(transform_box(&t, &o).center(), Point2::new(1.0, 0.0));
        let p = SE2Pose::new(Point2::new(3.0, -7.0), 2.5);
        let back = transform_box(&p.inverse(), &transform_box(&p, &b));
        assert!(back.center().distance(b.center()) < 1e-9);
        assert!(angle_diff(back.yaw(), b.yaw()).abs() < 1e-9);
    }

    #[test]
    fn contains_boundary() {
        let s = sq(0.0, 0.0);
        assert!(s.contains(Point2::new(0.5, 0.0), 1e-9));
        assert!(!s.contains(Point2::new(0.6, 0.0), 1e-9));
    }
}
