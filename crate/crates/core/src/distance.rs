//! GJK distance oracle between posed convex primitives.
//!
//! Support-function based and entirely independent of the conic scaling
//! solver; the simulation records this distance alongside `alpha*` so the two
//! paths cross-validate each other.

use nalgebra::Vector3;

use crate::geometry::{support_point, ConvexPrimitive, Pose};

const GJK_TOL: f64 = 1e-12;
const MAX_ITER: usize = 128;

/// Separation distance between two posed primitives.
///
/// Returns `0.0` when the bodies touch or overlap (GJK reports separation
/// only; penetration depth is not computed).
pub fn distance(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
) -> f64 {
    let support = |d: &Vector3<f64>| -> Vector3<f64> {
        support_point(prim_a, pose_a, d) - support_point(prim_b, pose_b, &-d)
    };

    let mut dir = pose_a.position - pose_b.position;
    if dir.norm() < 1e-12 {
        dir = Vector3::x();
    }
    let mut simplex: Vec<Vector3<f64>> = vec![support(&dir)];
    let mut closest = simplex[0];

    for _ in 0..MAX_ITER {
        let dist = closest.norm();
        if dist < GJK_TOL {
            return 0.0;
        }
        let w = support(&-closest);
        // No further progress toward the origin: |v| - v.w/|v| <= tol.
        if dist - closest.dot(&w) / dist <= GJK_TOL * (1.0 + dist) {
            return dist;
        }
        if simplex.iter().any(|p| (p - w).norm() < 1e-14) {
            return dist;
        }
        simplex.push(w);
        let (point, reduced) = closest_point_on_simplex(&simplex);
        simplex = reduced;
        closest = point;
        if simplex.len() == 4 {
            // Origin enclosed by the tetrahedron.
            return 0.0;
        }
    }
    closest.norm()
}

/// Closest point to the origin on the convex hull of up to four points,
/// together with the minimal sub-simplex supporting it.
fn closest_point_on_simplex(points: &[Vector3<f64>]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    match points.len() {
        1 => (points[0], vec![points[0]]),
        2 => closest_on_segment(points[0], points[1]),
        3 => closest_on_triangle(points[0], points[1], points[2]),
        4 => closest_on_tetrahedron(points),
        _ => unreachable!("simplex holds at most 4 points"),
    }
}

fn closest_on_segment(a: Vector3<f64>, b: Vector3<f64>) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let ab = b - a;
    let denom = ab.norm_squared();
    if denom < 1e-30 {
        return (a, vec![a]);
    }
    let t = (-a.dot(&ab) / denom).clamp(0.0, 1.0);
    if t <= 0.0 {
        (a, vec![a])
    } else if t >= 1.0 {
        (b, vec![b])
    } else {
        (a + t * ab, vec![a, b])
    }
}

fn closest_on_triangle(
    a: Vector3<f64>,
    b: Vector3<f64>,
    c: Vector3<f64>,
) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    // Ericson-style barycentric region tests for the origin.
    let ab = b - a;
    let ac = c - a;
    let ap = -a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, vec![a]);
    }
    let bp = -b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, vec![b]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (a + t * ab, vec![a, b]);
    }
    let cp = -c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, vec![c]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (a + t * ac, vec![a, c]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + t * (c - b), vec![b, c]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + v * ab + w * ac, vec![a, b, c])
}

fn closest_on_tetrahedron(points: &[Vector3<f64>]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let (a, b, c, d) = (points[0], points[1], points[2], points[3]);
    // The enclosure shortcut is only valid for a tetrahedron with genuine
    // volume; flat simplices (endemic with box-box contacts) must fall
    // through to the face search or they report phantom intersections.
    let scale = points.iter().map(|p| p.norm()).fold(1e-9, f64::max);
    let vol6 = (b - a).cross(&(c - a)).dot(&(d - a));
    if vol6.abs() > 1e-10 * scale * scale * scale {
        let same_side =
            |p1: Vector3<f64>, p2: Vector3<f64>, p3: Vector3<f64>, p4: Vector3<f64>| {
                let n = (p2 - p1).cross(&(p3 - p1));
                let dot_v4 = n.dot(&(p4 - p1));
                let dot_o = n.dot(&(-p1));
                dot_v4 * dot_o > 0.0 || dot_o.abs() <= 1e-12 * n.norm() * scale
            };
        let inside = same_side(a, b, c, d)
            && same_side(a, b, d, c)
            && same_side(a, c, d, b)
            && same_side(b, c, d, a);
        if inside {
            return (Vector3::zeros(), points.to_vec());
        }
    }
    // Closest point lies on one of the faces; keep the minimal sub-simplex.
    let faces = [[a, b, c], [a, b, d], [a, c, d], [b, c, d]];
    let mut best: Option<(Vector3<f64>, Vec<Vector3<f64>>)> = None;
    for f in faces {
        let (p, s) = closest_on_triangle(f[0], f[1], f[2]);
        if best
            .as_ref()
            .map_or(true, |(bp, _)| p.norm_squared() < bp.norm_squared())
        {
            best = Some((p, s));
        }
    }
    best.expect("tetrahedron has faces")
}

/// The primitive scaled by `alpha` about its body origin, under the same
/// scaling law as the conic program (capsule segments are not scaled).
pub fn scaled_primitive(prim: &ConvexPrimitive, alpha: f64) -> ConvexPrimitive {
    match prim {
        ConvexPrimitive::Sphere { radius } => {
            ConvexPrimitive::sphere(radius * alpha).expect("scaled sphere valid")
        }
        ConvexPrimitive::Polytope {
            normals, offsets, ..
        } => {
            let rows: Vec<(Vector3<f64>, f64)> = normals
                .iter()
                .zip(offsets)
                .map(|(a, b)| (*a, b * alpha))
                .collect();
            ConvexPrimitive::polytope(&rows).expect("scaled polytope valid")
        }
        ConvexPrimitive::Capsule {
            half_length,
            radius,
        } => ConvexPrimitive::capsule(*half_length, radius * alpha).expect("scaled capsule valid"),
    }
}

/// Independent minimum-scaling oracle: bisection on `alpha` with a GJK
/// feasibility check of the two scaled sets' intersection.
///
/// Entirely separate from the conic solver; intended for validation.
pub fn bisection_min_scaling(
    prim_a: &ConvexPrimitive,
    pose_a: &Pose,
    prim_b: &ConvexPrimitive,
    pose_b: &Pose,
) -> f64 {
    let intersects = |alpha: f64| {
        distance(
            &scaled_primitive(prim_a, alpha),
            pose_a,
            &scaled_primitive(prim_b, alpha),
            pose_b,
        ) <= 1e-12
    };
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while !intersects(hi) {
        lo = hi;
        hi *= 2.0;
        assert!(hi < 1e9, "bisection failed to bracket the scaling factor");
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if intersects(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}
