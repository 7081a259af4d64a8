//! Rotated-rectangle geometry.
//!
//! Boxes are stored normalized to the page and carry an angle; all area work
//! happens in pixel space on convex polygons with positive signed area.
//! Intersections use half-plane (Sutherland-Hodgman) clipping, which is exact
//! for convex inputs. [`rasterized_iou_oracle`] is an independent
//! sample-counting route kept for verification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Areas below this (in squared pixels) are treated as empty.
const AREA_EPS: f64 = 1e-12;

/// Normalized rectangle `(x0, y0, x1, y1)` rotated by `angle` about its center.
///
/// Positive angles rotate counter-clockwise as seen on the page (y grows
/// downwards in pixel space).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub angle: f64,
}

impl RotatedBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, angle: f64) -> Self {
        Self { x0, y0, x1, y1, angle }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1, self.angle].iter().all(|v| v.is_finite());
        if !finite || !(self.x0 < self.x1 && self.y0 < self.y1) {
            return Err(Error::Parameter(format!("degenerate box {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Signed shoelace area; positive for the vertex order used throughout.
pub fn signed_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for (i, p) in poly.iter().enumerate() {
        let q = poly[(i + 1) % poly.len()];
        s += p.x * q.y - q.x * p.y;
    }
    0.5 * s
}

pub fn polygon_area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

/// Corners of `b` in pixel coordinates on a `w x h` page.
///
/// Order is `(x0,y0), (x1,y0), (x1,y1), (x0,y1)` before rotation, which has
/// positive signed area; rotation preserves it.
pub fn box_to_polygon(b: &RotatedBox, w: f64, h: f64) -> [Point; 4] {
    let (cx, cy) = (0.5 * (b.x0 + b.x1) * w, 0.5 * (b.y0 + b.y1) * h);
    let (hw, hh) = (0.5 * b.width() * w, 0.5 * b.height() * h);
    let (s, c) = b.angle.sin_cos();
    [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(dx, dy)| {
        // counter-clockwise on screen with y pointing down
        Point::new(cx + c * dx + s * dy, cy - s * dx + c * dy)
    })
}

/// Clip `subject` to the half-plane left of the directed edge `a -> b`.
fn clip_half_plane(subject: &[Point], a: Point, b: Point, out: &mut Vec<Point>) {
    out.clear();
    let n = subject.len();
    for i in 0..n {
        let cur = subject[i];
        let prev = subject[(i + n - 1) % n];
        let dc = cross(a, b, cur);
        let dp = cross(a, b, prev);
        let cur_in = dc >= 0.0;
        let prev_in = dp >= 0.0;
        if cur_in != prev_in {
            let t = dp / (dp - dc);
            out.push(Point::new(prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)));
        }
        if cur_in {
            out.push(cur);
        }
    }
}

/// `p ∩ q` for convex polygons with positive orientation.
pub fn convex_intersection(p: &[Point], q: &[Point]) -> Vec<Point> {
    if polygon_area(p) <= AREA_EPS || polygon_area(q) <= AREA_EPS {
        return Vec::new();
    }
    let mut cur = p.to_vec();
    let mut next = Vec::with_capacity(p.len() + q.len());
    for (i, &a) in q.iter().enumerate() {
        let b = q[(i + 1) % q.len()];
        clip_half_plane(&cur, a, b, &mut next);
        std::mem::swap(&mut cur, &mut next);
        if cur.is_empty() {
            break;
        }
    }
    cur
}

/// Area of `p ∩ q`; zero when disjoint, touching, or either input is degenerate.
pub fn convex_intersection_area(p: &[Point], q: &[Point]) -> f64 {
    let area = polygon_area(&convex_intersection(p, q));
    if area <= AREA_EPS {
        0.0
    } else {
        area
    }
}

/// `p \ q` as a list of disjoint convex pieces.
pub fn convex_difference(p: &[Point], q: &[Point]) -> Vec<Vec<Point>> {
    if polygon_area(p) <= AREA_EPS {
        return Vec::new();
    }
    if polygon_area(q) <= AREA_EPS {
        return vec![p.to_vec()];
    }
    let mut pieces = Vec::new();
    let mut inside = p.to_vec();
    let mut buf = Vec::new();
    for (i, &a) in q.iter().enumerate() {
        let b = q[(i + 1) % q.len()];
        // part of `inside` on the outer side of this edge
        clip_half_plane(&inside, b, a, &mut buf);
        if polygon_area(&buf) > AREA_EPS {
            pieces.push(buf.clone());
        }
        clip_half_plane(&inside, a, b, &mut buf);
        std::mem::swap(&mut inside, &mut buf);
        if polygon_area(&inside) <= AREA_EPS {
            break;
        }
    }
    pieces
}

/// Area of `p` covered by the union of `others`.
pub fn covered_area(p: &[Point], others: &[Vec<Point>]) -> f64 {
    let total = polygon_area(p);
    if total <= AREA_EPS {
        return 0.0;
    }
    let mut remaining = vec![p.to_vec()];
    for q in others {
        remaining = remaining.iter().flat_map(|piece| convex_difference(piece, q)).collect();
        if remaining.is_empty() {
            break;
        }
    }
    let uncovered: f64 = remaining.iter().map(|r| polygon_area(r)).sum();
    (total - uncovered).clamp(0.0, total)
}

/// Intersection over union of two rotated boxes on a `w x h` page.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox, w: f64, h: f64) -> f64 {
    let pa = box_to_polygon(a, w, h);
    let pb = box_to_polygon(b, w, h);
    let area_a = polygon_area(&pa);
    let area_b = polygon_area(&pb);
    let inter = convex_intersection_area(&pa, &pb);
    let union = area_a + area_b - inter;
    if union <= AREA_EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Horizontal extent of a convex polygon along the line `y`.
fn row_span(poly: &[Point], y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, &a) in poly.iter().enumerate() {
        let b = poly[(i + 1) % poly.len()];
        let (ymin, ymax) = if a.y <= b.y { (a.y, b.y) } else { (b.y, a.y) };
        if y < ymin || y > ymax {
            continue;
        }
        let (l, r) = if b.y == a.y {
            (a.x.min(b.x), a.x.max(b.x))
        } else {
            let x = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
            (x, x)
        };
        lo = lo.min(l);
        hi = hi.max(r);
    }
    (lo <= hi).then_some((lo, hi))
}

/// Number of sample columns `k` (at `x = x_min + (k + 0.5) * step`) inside `[lo, hi]`.
fn samples_in(lo: f64, hi: f64, x_min: f64, step: f64, resolution: usize) -> (i64, i64) {
    let first = ((lo - x_min) / step - 0.5).ceil().max(0.0) as i64;
    let last = (((hi - x_min) / step - 0.5).floor() as i64).min(resolution as i64 - 1);
    (first, last)
}

/// IoU by counting sample points on a `resolution x resolution` grid spanning
/// the joint bounding box of both polygons.
///
/// Each grid row is intersected with both polygons; a sample counts as inside
/// when it falls in the row's span, which is exactly a point-in-convex-polygon
/// test evaluated row by row.
pub fn rasterized_iou_oracle(a: &RotatedBox, b: &RotatedBox, w: f64, h: f64, resolution: usize) -> f64 {
    assert!(resolution >= 100, "oracle resolution must be at least 100");
    let pa = box_to_polygon(a, w, h);
    let pb = box_to_polygon(b, w, h);
    let xs = pa.iter().chain(pb.iter()).map(|p| p.x);
    let ys = pa.iter().chain(pb.iter()).map(|p| p.y);
    let x_min = xs.clone().fold(f64::INFINITY, f64::min);
    let x_max = xs.fold(f64::NEG_INFINITY, f64::max);
    let y_min = ys.clone().fold(f64::INFINITY, f64::min);
    let y_max = ys.fold(f64::NEG_INFINITY, f64::max);
    let sx = (x_max - x_min) / resolution as f64;
    let sy = (y_max - y_min) / resolution as f64;
    if !(sx > 0.0 && sy > 0.0) {
        return 0.0;
    }
    let (mut inter, mut union) = (0i64, 0i64);
    for row in 0..resolution {
        let y = y_min + (row as f64 + 0.5) * sy;
        let ra = row_span(&pa, y).map(|(l, r)| samples_in(l, r, x_min, sx, resolution));
        let rb = row_span(&pb, y).map(|(l, r)| samples_in(l, r, x_min, sx, resolution));
        let count = |(f, l): (i64, i64)| (l - f + 1).max(0);
        match (ra, rb) {
            (Some(sa), Some(sb)) => {
                let both = count((sa.0.max(sb.0), sa.1.min(sb.1)));
                inter += both;
                union += count(sa) + count(sb) - both;
            }
            (Some(s), None) | (None, Some(s)) => union += count(s),
            (None, None) => {}
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Brute-force even-odd point-in-polygon test.
pub fn point_in_polygon(poly: &[Point], p: Point) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use proptest::prelude::*;

    use super::*;

    fn square(x: f64, y: f64, s: f64) -> Vec<Point> {
        vec![
            Point::new(x, y),
            Point::new(x + s, y),
            Point::new(x + s, y + s),
            Point::new(x, y + s),
        ]
    }

    #[test]
    fn identity_polygon() {
        let p = box_to_polygon(&RotatedBox::new(0.0, 0.0, 1.0, 1.0, 0.0), 100.0, 100.0);
        let expect = [(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0)];
        for (v, e) in p.iter().zip(expect) {
            assert!((v.x - e.0).abs() < 1e-12 && (v.y - e.1).abs() < 1e-12);
        }
        assert!(signed_area(&p) > 0.0);
    }

    #[test]
    fn near_vertical_square_angles_agree() {
        let eps = 1e-3;
        let b = |a| RotatedBox::new(0.3, 0.3, 0.5, 0.5, a);
        let p = box_to_polygon(&b(FRAC_PI_2 - eps), 100.0, 100.0);
        let q = box_to_polygon(&b(-FRAC_PI_2 + eps), 100.0, 100.0);
        let diag = 20.0 * 2f64.sqrt();
        for v in p {
            let nearest = q.iter().map(|u| (u.x - v.x).hypot(u.y - v.y)).fold(f64::MAX, f64::min);
            assert!(nearest <= eps * diag, "{nearest}");
        }
    }

    #[test]
    fn square_overlaps() {
        let a = square(0.0, 0.0, 1.0);
        assert!((convex_intersection_area(&a, &a) - 1.0).abs() < 1e-12);
        assert!((convex_intersection_area(&a, &square(0.5, 0.0, 1.0)) - 0.5).abs() < 1e-12);
        assert_eq!(convex_intersection_area(&a, &square(3.0, 3.0, 1.0)), 0.0);
        // shared edge only
        assert_eq!(convex_intersection_area(&a, &square(1.0, 0.0, 1.0)), 0.0);
        let flat = vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(2.0, 0.0)];
        assert_eq!(convex_intersection_area(&a, &flat), 0.0);
    }

    #[test]
    fn analytic_iou() {
        let a = RotatedBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = RotatedBox::new(0.5, 0.0, 1.5, 1.0, 0.0);
        assert!((rotated_iou(&a, &b, 1.0, 1.0) - 1.0 / 3.0).abs() < 1e-9);
        let c = RotatedBox::new(0.2, 0.2, 0.4, 0.3, 0.7);
        assert!((rotated_iou(&c, &c, 640.0, 480.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_trivial_cases() {
        let a = RotatedBox::new(0.1, 0.1, 0.3, 0.2, 0.4);
        assert_eq!(rasterized_iou_oracle(&a, &a, 100.0, 100.0, 200), 1.0);
        let b = RotatedBox::new(0.6, 0.6, 0.9, 0.8, -0.2);
        assert_eq!(rasterized_iou_oracle(&a, &b, 100.0, 100.0, 200), 0.0);
    }

    #[test]
    fn oracle_error_shrinks_with_resolution() {
        let a = RotatedBox::new(0.1, 0.2, 0.6, 0.5, 0.3);
        let b = RotatedBox::new(0.3, 0.25, 0.8, 0.6, -0.5);
        let exact = rotated_iou(&a, &b, 200.0, 150.0);
        let errs: Vec<f64> = [125, 250, 500, 1000, 2000]
            .iter()
            .map(|&r| (rasterized_iou_oracle(&a, &b, 200.0, 150.0, r) - exact).abs())
            .collect();
        // roughly first order: the error at the finest grid is far below the coarsest
        assert!(errs[4] < errs[0] / 4.0, "{errs:?}");
        assert!(errs[4] < 1e-3);
    }

    #[test]
    fn span_counting_matches_point_tests() {
        let a = RotatedBox::new(0.1, 0.2, 0.6, 0.5, 0.3);
        let b = RotatedBox::new(0.3, 0.25, 0.8, 0.6, -0.5);
        let (pa, pb) = (box_to_polygon(&a, 200.0, 150.0), box_to_polygon(&b, 200.0, 150.0));
        let res = 150;
        let pts = pa.iter().chain(pb.iter());
        let x_min = pts.clone().map(|p| p.x).fold(f64::MAX, f64::min);
        let x_max = pts.clone().map(|p| p.x).fold(f64::MIN, f64::max);
        let y_min = pts.clone().map(|p| p.y).fold(f64::MAX, f64::min);
        let y_max = pts.map(|p| p.y).fold(f64::MIN, f64::max);
        let (sx, sy) = ((x_max - x_min) / res as f64, (y_max - y_min) / res as f64);
        let (mut i, mut u) = (0, 0);
        for r in 0..res {
            for c in 0..res {
                let p = Point::new(x_min + (c as f64 + 0.5) * sx, y_min + (r as f64 + 0.5) * sy);
                let (ia, ib) = (point_in_polygon(&pa, p), point_in_polygon(&pb, p));
                i += (ia && ib) as usize;
                u += (ia || ib) as usize;
            }
        }
        let brute = i as f64 / u as f64;
        let spans = rasterized_iou_oracle(&a, &b, 200.0, 150.0, res);
        assert!((brute - spans).abs() < 2e-3, "{brute} vs {spans}");
    }

    #[test]
    fn difference_pieces_cover_complement() {
        let p = square(0.0, 0.0, 2.0);
        let q = square(1.0, 1.0, 2.0);
        let pieces = convex_difference(&p, &q);
        let area: f64 = pieces.iter().map(|x| polygon_area(x)).sum();
        assert!((area - 3.0).abs() < 1e-12);
        assert!((covered_area(&p, std::slice::from_ref(&q)) - 1.0).abs() < 1e-12);
        // overlapping covers are not double counted
        assert!((covered_area(&p, &[q.clone(), square(0.5, 0.5, 2.0)]) - 2.25).abs() < 1e-12);
        assert!((covered_area(&p, &[square(-1.0, -1.0, 4.0)]) - 4.0).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = RotatedBox> {
        (0.0..0.8f64, 0.0..0.8f64, 0.02..0.4f64, 0.02..0.4f64, -1.5..1.5f64)
            .prop_map(|(x, y, w, h, a)| RotatedBox::new(x, y, x + w, y + h, a))
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_box(), b in arb_box(), spin in -3.0..3.0f64) {
            let (w, h) = (320.0, 240.0);
            let ab = rotated_iou(&a, &b, w, h);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - rotated_iou(&b, &a, w, h)).abs() < 1e-12);
            prop_assert!((rotated_iou(&a, &a, w, h) - 1.0).abs() < 1e-12);

            // rotate both about the page center: IoU is a rigid-motion invariant
            let pa = box_to_polygon(&a, w, h);
            let pb = box_to_polygon(&b, w, h);
            let (s, c) = spin.sin_cos();
            let rot = |p: &Point| Point::new(
                160.0 + c * (p.x - 160.0) - s * (p.y - 120.0),
                120.0 + s * (p.x - 160.0) + c * (p.y - 120.0),
            );
            let ra: Vec<Point> = pa.iter().map(rot).collect();
            let rb: Vec<Point> = pb.iter().map(rot).collect();
            let inter = convex_intersection_area(&ra, &rb);
            let rotated = inter / (polygon_area(&ra) + polygon_area(&rb) - inter);
            prop_assert!((rotated - ab).abs() < 1e-9);
        }

        #[test]
        fn intersection_bounded_and_convex(a in arb_box(), b in arb_box()) {
            let pa = box_to_polygon(&a, 100.0, 100.0);
            let pb = box_to_polygon(&b, 100.0, 100.0);
            let clip = convex_intersection(&pa, &pb);
            let area = polygon_area(&clip);
            prop_assert!(area <= polygon_area(&pa).min(polygon_area(&pb)) + 1e-9);
            if area > 1e-9 {
                let n = clip.len();
                for i in 0..n {
                    let turn = cross(clip[i], clip[(i + 1) % n], clip[(i + 2) % n]);
                    prop_assert!(turn >= -1e-9);
                }
            }
        }

        #[test]
        fn polygon_area_is_rotation_free(a in arb_box()) {
            let expect = a.width() * 640.0 * a.height() * 480.0;
            prop_assert!((polygon_area(&box_to_polygon(&a, 640.0, 480.0)) - expect).abs() < 1e-6);
        }
    }
}
