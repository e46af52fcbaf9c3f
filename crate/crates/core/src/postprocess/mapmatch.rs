//! Nearest-segment assignment of predicted pixels to a road network.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::WeightedPixel;
use crate::error::{Error, Result};
use crate::geo::{ground_resolution, parse_wkt_line, project, unproject, Geometry, LatLon, Shape, PIXEL_ZOOM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub segment_id: String,
    pub polyline: Vec<LatLon>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl RoadSegment {
    pub fn geometry(&self) -> Geometry {
        Geometry { shape: Shape::LineString(self.polyline.clone()), class_tag: None }
    }

    fn pixels(&self) -> Vec<(f64, f64)> {
        self.polyline.iter().map(|p| project(*p, PIXEL_ZOOM)).collect()
    }

    /// Polyline length in zoom-24 pixels.
    pub fn length_px(&self) -> f64 {
        self.pixels().windows(2).map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt()).sum()
    }
}

/// Parses `LINESTRING (...)\t<segment_id>[\t<key>=<value>...]` lines.
pub fn parse_network(text: &str) -> Result<Vec<RoadSegment>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let (g, suffix) = parse_wkt_line(raw, line)?;
        let Shape::LineString(polyline) = g.shape else {
            return Err(Error::Parse { line, message: "road network lines must be LINESTRINGs".into() });
        };
        let mut fields = suffix.unwrap_or("").split('\t');
        let id = fields.next().unwrap_or("").trim();
        if id.is_empty() {
            return Err(Error::Parse { line, message: "missing segment id after tab".into() });
        }
        let mut attributes = BTreeMap::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, message: format!("attribute '{f}' is not key=value") })?;
            attributes.insert(k.trim().to_string(), v.trim().to_string());
        }
        out.push(RoadSegment { segment_id: id.to_string(), polyline, attributes });
    }
    Ok(out)
}

fn point_segment_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Distance in pixels from a pixel's center to a projected polyline.
pub fn distance_px(p: &WeightedPixel, polyline_px: &[(f64, f64)]) -> f64 {
    let c = (p.x as f64 + 0.5, p.y as f64 + 0.5);
    polyline_px.windows(2).map(|w| point_segment_dist(c, w[0], w[1])).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub segment_id: String,
    pub score: f64,
    pub weight_sum: f64,
}

/// Assigns each point to its nearest segment within `radius_m` (ties to
/// the smallest id) and scores segments by assigned weight per pixel of
/// length. Distances are pixel distances scaled by the ground resolution
/// at the point's latitude.
pub fn map_match(points: &[WeightedPixel], network: &[RoadSegment], radius_m: f64, score_tau: f64) -> Result<Vec<SegmentScore>> {
    if network.is_empty() {
        return Err(Error::validation("road network is empty"));
    }
    if !(radius_m > 0.0) {
        return Err(Error::validation("radius_m must be positive"));
    }
    let mut order: Vec<usize> = (0..network.len()).collect();
    order.sort_by(|&a, &b| network[a].segment_id.cmp(&network[b].segment_id));
    let projected: Vec<Vec<(f64, f64)>> = network.iter().map(RoadSegment::pixels).collect();
    let mut sums = vec![0.0f64; network.len()];
    for p in points {
        let lat = unproject(p.x as f64 + 0.5, p.y as f64 + 0.5, PIXEL_ZOOM).lat;
        let m_per_px = ground_resolution(lat, PIXEL_ZOOM);
        let mut best: Option<(f64, usize)> = None;
        for &s in &order {
            let d = distance_px(p, &projected[s]) * m_per_px;
            if d <= radius_m && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, s));
            }
        }
        if let Some((_, s)) = best {
            sums[s] += p.weight;
        }
    }
    let mut out: Vec<SegmentScore> = network
        .iter()
        .zip(&sums)
        .map(|(seg, &w)| {
            let len = seg.length_px();
            SegmentScore { segment_id: seg.segment_id.clone(), score: if len > 0.0 { w / len } else { 0.0 }, weight_sum: w }
        })
        .filter(|s| s.score >= score_tau)
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.segment_id.cmp(&b.segment_id)));
    Ok(out)
}
