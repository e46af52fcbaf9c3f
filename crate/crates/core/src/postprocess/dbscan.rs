//! Weighted DBSCAN over zoom-24 pixels.
//!
//! A point is core when the weights within Euclidean distance `eps`,
//! itself included, sum to at least `min_weight`. Points are visited in
//! input order and neighbour lists are sorted by index, so cluster ids and
//! border assignment (first-discovered cluster wins) are deterministic.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::WeightedPixel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Member indices per cluster, ascending; clusters in discovery order.
    pub clusters: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

/// Uniform grid with `eps`-sized cells for radius queries.
struct Grid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[WeightedPixel], eps: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, eps)).or_default().push(i);
        }
        Grid { cell: eps, buckets }
    }

    fn key(p: &WeightedPixel, cell: f64) -> (i64, i64) {
        ((p.x as f64 / cell).floor() as i64, (p.y as f64 / cell).floor() as i64)
    }

    fn neighbours(&self, points: &[WeightedPixel], i: usize, eps: f64) -> Vec<usize> {
        let (cx, cy) = Self::key(&points[i], self.cell);
        let eps2 = eps * eps;
        let mut out = Vec::new();
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(b) = self.buckets.get(&(cx + dx, cy + dy)) {
                    out.extend(b.iter().copied().filter(|&j| points[i].dist2(&points[j]) <= eps2));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

pub fn weighted_dbscan(points: &[WeightedPixel], eps: f64, min_weight: f64) -> Result<ClusterResult> {
    if !(eps > 0.0 && eps.is_finite()) || !(min_weight > 0.0 && min_weight.is_finite()) {
        return Err(Error::validation("eps and min_weight must be positive"));
    }
    if points.iter().any(|p| !p.weight.is_finite()) {
        return Err(Error::validation("point weights must be finite"));
    }
    const UNSEEN: usize = usize::MAX;
    const NOISE: usize = usize::MAX - 1;
    let grid = Grid::new(points, eps);
    let weight = |ns: &[usize]| ns.iter().map(|&j| points[j].weight).sum::<f64>();
    let mut label = vec![UNSEEN; points.len()];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..points.len() {
        if label[i] != UNSEEN {
            continue;
        }
        let ns = grid.neighbours(points, i, eps);
        if weight(&ns) < min_weight {
            label[i] = NOISE;
            continue;
        }
        let c = clusters.len();
        clusters.push(Vec::new());
        label[i] = c;
        let mut queue: VecDeque<usize> = ns.into_iter().filter(|&j| j != i).collect();
        while let Some(q) = queue.pop_front() {
            if label[q] == NOISE {
                label[q] = c;
                continue;
            }
            if label[q] != UNSEEN {
                continue;
            }
            label[q] = c;
            let nq = grid.neighbours(points, q, eps);
            if weight(&nq) >= min_weight {
                queue.extend(nq);
            }
        }
    }
    let mut noise = Vec::new();
    for (i, &l) in label.iter().enumerate() {
        if l == NOISE {
            noise.push(i);
        } else {
            clusters[l].push(i);
        }
    }
    Ok(ClusterResult { clusters, noise })
}
