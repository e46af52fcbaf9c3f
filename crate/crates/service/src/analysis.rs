//! Heatmap-level computations behind active learning and golden evaluation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use trinity_core::geo::{parse_wkt, Geometry, TileKey, TILE_PIXELS};
use trinity_core::inference::Heatmap;
use trinity_core::labels::{rasterize_label_set, LabelSet, TaskSpec};
use trinity_core::{Error, Result};

use crate::model::RankedTile;

/// Mean over pixels and tasks of the class entropy divided by ln(classes).
pub fn tile_uncertainty(hm: &Heatmap) -> f64 {
    let mut total = 0.0;
    for (t, &c) in hm.class_counts.iter().enumerate() {
        let norm = (c as f64).ln();
        let mut sum = 0.0;
        for i in 0..TILE_PIXELS {
            let h: f64 = (0..c)
                .map(|k| hm.tasks[t][k * TILE_PIXELS + i] as f64)
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            sum += h / norm;
        }
        total += sum / TILE_PIXELS as f64;
    }
    total / hm.class_counts.len() as f64
}

/// Tiles ordered by uncertainty, highest first; ties by tile key.
pub fn rank_tiles(heatmaps: &[Heatmap], exclude: &BTreeSet<TileKey>) -> Vec<RankedTile> {
    let mut ranked: Vec<RankedTile> = heatmaps
        .iter()
        .filter(|h| !exclude.contains(&h.tile))
        .map(|h| RankedTile { tile: h.tile, uncertainty: tile_uncertainty(h) })
        .collect();
    ranked.sort_by(|a, b| b.uncertainty.total_cmp(&a.uncertainty).then(a.tile.cmp(&b.tile)));
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenReport {
    pub tiles: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

impl GoldenReport {
    pub fn from_counts(tiles: usize, tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        let iou = ratio(tp, tp + fp + fn_);
        GoldenReport { tiles, tp, fp, fn_, tn, precision, recall, f1, iou }
    }
}

/// Pixelwise comparison of `confidence >= tau` against the rasterized
/// golden geometries on every heatmap tile. Every golden geometry counts
/// as foreground regardless of its class tag.
pub fn evaluate_golden(heatmaps: &[Heatmap], golden_wkt: &str, task: usize, class: usize, tau: f64) -> Result<GoldenReport> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation(format!("threshold {tau} outside [0, 1]")));
    }
    let geoms: Vec<Geometry> = parse_wkt(golden_wkt)?
        .into_iter()
        .map(|mut g| {
            g.class_tag = Some(1);
            g
        })
        .collect();
    let tiles: BTreeSet<TileKey> = heatmaps.iter().map(|h| h.tile).collect();
    if !geoms.is_empty() {
        let touches = |g: &Geometry| -> bool {
            trinity_core::geo::tiles_covering(&g.bbox()).is_ok_and(|ts| ts.iter().any(|t| tiles.contains(t)))
        };
        if !geoms.iter().any(touches) {
            return Err(Error::validation("golden geometries do not overlap any predicted tile"));
        }
    }
    let mut set = LabelSet::new("golden", vec![TaskSpec::new("golden", 2)])?;
    set.add_geometries(0, geoms)?;
    set.labeled_regions[0].tiles = tiles;
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for hm in heatmaps {
        if task >= hm.class_counts.len() || class >= hm.class_counts[task] {
            return Err(Error::validation(format!("no class {class} in task {task}")));
        }
        let truth = &rasterize_label_set(&set, hm.tile)?.planes[0];
        let conf = hm.confidence(task, class);
        for (g, &c) in truth.iter().zip(conf) {
            match (c as f64 >= tau, *g == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    Ok(GoldenReport::from_counts(heatmaps.len(), tp, fp, fn_, tn))
}
