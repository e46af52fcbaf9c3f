//! Cluster outlines as convex hulls of member pixel squares.

use crate::geo::{unproject, Geometry, LatLon, Polygon, Shape, PIXEL_ZOOM};

use super::WeightedPixel;

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain. Returns the hull counterclockwise without
/// repeating the first vertex; collinear points are dropped.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Pixel-space hull of the unit squares of `members`, as `(x, y)` grid
/// corners ordered counterclockwise on the map (y grows southward).
pub fn pixel_hull(points: &[WeightedPixel], members: &[usize]) -> Vec<(i64, i64)> {
    let mut corners = Vec::with_capacity(4 * members.len());
    for &m in members {
        let (x, y) = (points[m].x as i64, points[m].y as i64);
        // flip y so the chain's counterclockwise is the map's
        corners.extend([(x, -y), (x + 1, -y), (x, -y - 1), (x + 1, -y - 1)]);
    }
    convex_hull(&corners).into_iter().map(|(x, ny)| (x, -ny)).collect()
}

/// Closed lon/lat ring of the hull; always a polygon of positive area.
pub fn cluster_polygon(points: &[WeightedPixel], members: &[usize]) -> Geometry {
    let hull = pixel_hull(points, members);
    let mut ring: Vec<LatLon> = hull.iter().map(|&(x, y)| unproject(x as f64, y as f64, PIXEL_ZOOM)).collect();
    ring.push(ring[0]);
    Geometry { shape: Shape::Polygon(Polygon { exterior: ring, holes: Vec::new() }), class_tag: None }
}

/// Shoelace area in squared pixels of a hull from [`pixel_hull`].
pub fn hull_area_px(hull: &[(i64, i64)]) -> f64 {
    let n = hull.len();
    let twice: i64 = (0..n).map(|i| hull[i].0 * -hull[(i + 1) % n].1 - hull[(i + 1) % n].0 * -hull[i].1).sum();
    twice as f64 / 2.0
}
