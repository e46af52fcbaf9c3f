//! Brute-force reference implementations written from the definitions.
//! None of them call the production code paths they check.

use std::collections::BTreeMap;

use trinity_core::geo::LatLon;
use trinity_core::postprocess::{ClusterResult, RoadSegment, WeightedPixel};

const WORLD_PX: f64 = (1u64 << 24) as f64;
const EARTH_CIRCUMFERENCE_M: f64 = 40_075_016.686;

/// Continuous zoom-24 pixel position of a lon/lat.
pub fn pixel_of(p: LatLon) -> (f64, f64) {
    let lat = p.lat.to_radians();
    let x = (p.lon + 180.0) / 360.0 * WORLD_PX;
    let y = (1.0 - (lat.tan() + 1.0 / lat.cos()).ln() / std::f64::consts::PI) / 2.0 * WORLD_PX;
    (x, y)
}

/// Meters per zoom-24 pixel at global pixel row `y`.
pub fn meters_per_pixel_at_row(y: f64) -> f64 {
    let lat = (std::f64::consts::PI * (1.0 - 2.0 * y / WORLD_PX)).sinh().atan();
    EARTH_CIRCUMFERENCE_M * lat.cos() / WORLD_PX
}

/// Even-odd membership of every pixel center of a 256x256 tile, rings
/// given in tile-local pixel coordinates.
pub fn polygon_members(rings: &[Vec<(f64, f64)>]) -> Vec<bool> {
    let mut out = vec![false; 256 * 256];
    for row in 0..256 {
        for col in 0..256 {
            let (xc, yc) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut inside = false;
            for ring in rings {
                for e in ring.windows(2) {
                    let (a, b) = (e[0], e[1]);
                    if (a.1 > yc) != (b.1 > yc) && xc < a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1) {
                        inside = !inside;
                    }
                }
            }
            out[row * 256 + col] = inside;
        }
    }
    out
}

/// Pixels of the digital segment from `a` to `b`: step `t` along the major
/// axis, minor offset `floor((2 t |minor| + n) / 2n)`.
pub fn segment_pixels(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let n = dx.abs().max(dy.abs());
    if n == 0 {
        return vec![a];
    }
    (0..=n)
        .map(|t| {
            if dx.abs() >= dy.abs() {
                let m = (2 * t * dy.abs() + n).div_euclid(2 * n);
                (a.0 + t * dx.signum(), a.1 + m * dy.signum())
            } else {
                let m = (2 * t * dx.abs() + n).div_euclid(2 * n);
                (a.0 + m * dx.signum(), a.1 + t * dy.signum())
            }
        })
        .collect()
}

/// Core flags, then core components ordered by smallest core index;
/// non-core points join the earliest component with a core neighbour.
pub fn reference_dbscan(points: &[WeightedPixel], eps: f64, min_weight: f64) -> ClusterResult {
    let n = points.len();
    let near = |i: usize, j: usize| {
        let dx = points[i].x as f64 - points[j].x as f64;
        let dy = points[i].y as f64 - points[j].y as f64;
        dx * dx + dy * dy <= eps * eps
    };
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).map(|j| points[j].weight).sum::<f64>() >= min_weight).collect();
    let mut comp = vec![usize::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut stack = vec![s];
        comp[s] = id;
        let mut members = vec![];
        while let Some(p) = stack.pop() {
            members.push(p);
            for q in 0..n {
                if core[q] && comp[q] == usize::MAX && near(p, q) {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        comps.push(members);
    }
    let mut noise = vec![];
    for i in 0..n {
        if core[i] {
            continue;
        }
        match (0..comps.len()).find(|&c| comps[c].iter().any(|&q| core[q] && near(i, q))) {
            Some(c) => comps[c].push(i),
            None => noise.push(i),
        }
    }
    for c in &mut comps {
        c.sort_unstable();
    }
    ClusterResult { clusters: comps, noise }
}

/// Textbook DBSCAN with a point count threshold.
pub fn classic_dbscan(points: &[WeightedPixel], eps: f64, min_pts: usize) -> ClusterResult {
    let n = points.len();
    let region = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| {
                let dx = points[i].x as f64 - points[j].x as f64;
                let dy = points[i].y as f64 - points[j].y as f64;
                dx * dx + dy * dy <= eps * eps
            })
            .collect()
    };
    let mut label: Vec<Option<i64>> = vec![None; n];
    let mut c = -1i64;
    for p in 0..n {
        if label[p].is_some() {
            continue;
        }
        let ns = region(p);
        if ns.len() < min_pts {
            label[p] = Some(-1);
            continue;
        }
        c += 1;
        label[p] = Some(c);
        let mut seeds: Vec<usize> = ns.into_iter().filter(|&q| q != p).collect();
        let mut k = 0;
        while k < seeds.len() {
            let q = seeds[k];
            k += 1;
            if label[q] == Some(-1) {
                label[q] = Some(c);
            }
            if label[q].is_some() {
                continue;
            }
            label[q] = Some(c);
            let nq = region(q);
            if nq.len() >= min_pts {
                seeds.extend(nq);
            }
        }
    }
    let mut clusters = vec![vec![]; (c + 1) as usize];
    let mut noise = vec![];
    for (i, l) in label.iter().enumerate() {
        match l.expect("every point is labeled") {
            -1 => noise.push(i),
            k => clusters[k as usize].push(i),
        }
    }
    ClusterResult { clusters, noise }
}

/// Euclidean distance from `p` to a polyline.
pub fn point_to_polyline(p: (f64, f64), line: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ab = (b.0 - a.0, b.1 - a.1);
        let ap = (p.0 - a.0, p.1 - a.1);
        let l2 = ab.0 * ab.0 + ab.1 * ab.1;
        let t = if l2 > 0.0 { ((ap.0 * ab.0 + ap.1 * ab.1) / l2).clamp(0.0, 1.0) } else { 0.0 };
        let d = ((ap.0 - t * ab.0).powi(2) + (ap.1 - t * ab.1).powi(2)).sqrt();
        best = best.min(d);
    }
    best
}

/// All-pairs map matching: every point goes to the nearest segment within
/// `radius_m` (ties to the smaller id); score is assigned weight per pixel
/// of polyline length. Sorted by score descending, then id.
pub fn map_match(points: &[WeightedPixel], network: &[RoadSegment], radius_m: f64, tau: f64) -> Vec<(String, f64)> {
    let lines: Vec<Vec<(f64, f64)>> = network.iter().map(|s| s.polyline.iter().map(|p| pixel_of(*p)).collect()).collect();
    let mut sums: BTreeMap<String, f64> = network.iter().map(|s| (s.segment_id.clone(), 0.0)).collect();
    for p in points {
        let c = (p.x as f64 + 0.5, p.y as f64 + 0.5);
        let mpp = meters_per_pixel_at_row(c.1);
        let mut cands: Vec<(f64, &str)> = lines
            .iter()
            .zip(network)
            .map(|(l, s)| (point_to_polyline(c, l) * mpp, s.segment_id.as_str()))
            .filter(|(d, _)| *d <= radius_m)
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        if let Some((_, id)) = cands.first() {
            *sums.get_mut(*id).expect("segment exists") += p.weight;
        }
    }
    let mut out: Vec<(String, f64)> = lines
        .iter()
        .zip(network)
        .map(|(l, s)| {
            let len: f64 = l.windows(2).map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt()).sum();
            (s.segment_id.clone(), sums[&s.segment_id] / len)
        })
        .filter(|(_, sc)| *sc >= tau)
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// `counts[truth][pred]` over pixels whose truth is not `ignore`.
pub fn confusion(truth: &[u8], pred: &[usize], classes: usize, ignore: u8) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t != ignore {
            m[t as usize][p] += 1;
        }
    }
    m
}

/// Index of the largest value, first one on ties.
pub fn first_argmax(vals: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in vals.iter().enumerate() {
        if *v > vals[best] {
            best = i;
        }
    }
    best
}

/// Mean over pixels of the class entropy divided by `ln(classes)`;
/// `planes[c][pixel]`.
pub fn normalized_entropy(planes: &[&[f32]]) -> f64 {
    let classes = planes.len();
    let n = planes[0].len();
    let mut total = 0.0;
    for p in 0..n {
        for plane in planes {
            let q = plane[p] as f64;
            if q > 0.0 {
                total -= q * q.ln();
            }
        }
    }
    total / (n as f64 * (classes as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_endpoints_and_length() {
        let s = segment_pixels((0, 0), (10, 3));
        assert_eq!(s.len(), 11);
        assert_eq!((s[0], s[10]), ((0, 0), (10, 3)));
        assert_eq!(segment_pixels((5, 5), (5, 5)), vec![(5, 5)]);
        let s = segment_pixels((0, 0), (-2, -7));
        assert_eq!(*s.last().unwrap(), (-2, -7));
    }

    #[test]
    fn equator_resolution() {
        let m = meters_per_pixel_at_row(WORLD_PX / 2.0);
        assert!((m - EARTH_CIRCUMFERENCE_M / WORLD_PX).abs() < 1e-12);
    }
}
