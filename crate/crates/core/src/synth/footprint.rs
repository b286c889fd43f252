//! Convex polygon clipping for box footprint overlap.

use super::Box3D;

pub(crate) type Point = [f64; 2];

/// Signed shoelace area; positive for counter-clockwise vertex order.
pub(crate) fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let [x0, y0] = poly[i];
            let [x1, y1] = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    0.5 * twice
}

fn side(a: Point, b: Point, p: Point) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn intersect(a: Point, b: Point, p: Point, q: Point) -> Point {
    let sp = side(a, b, p);
    let sq = side(a, b, q);
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman: `subject ∩ clip`, with `clip` convex and counter-clockwise.
pub(crate) fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let (p_in, q_in) = (side(a, b, p) >= 0.0, side(a, b, q) >= 0.0);
            if p_in {
                out.push(p);
                if !q_in {
                    out.push(intersect(a, b, p, q));
                }
            } else if q_in {
                out.push(intersect(a, b, p, q));
            }
        }
    }
    out
}

/// Intersection over union of the two yaw-rotated footprint rectangles.
pub fn footprint_iou(a: &Box3D, b: &Box3D) -> f64 {
    let pa = a.footprint();
    let pb = b.footprint();
    let inter = polygon_area(&clip_convex(&pa, &pb)).max(0.0);
    let union = polygon_area(&pa) + polygon_area(&pb) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}
