//! Heatmaps to vector artifacts: thresholding, weighted DBSCAN polygons,
//! road-network matching and predicate filtering.

mod dbscan;
mod hull;
mod mapmatch;
mod predicate;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geo::{Geometry, LatLon, Shape, TILE_PIXELS};
use crate::inference::Heatmap;

pub use dbscan::{weighted_dbscan, ClusterResult};
pub use hull::{cluster_polygon, convex_hull, hull_area_px, pixel_hull};
pub use mapmatch::{distance_px, map_match, parse_network, RoadSegment, SegmentScore};
pub use predicate::{predicate_filter, Atom, Op, Predicate};

/// A zoom-24 pixel carrying its predicted confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedPixel {
    pub x: u32,
    pub y: u32,
    pub weight: f64,
}

impl WeightedPixel {
    pub fn dist2(&self, o: &WeightedPixel) -> f64 {
        let dx = self.x as f64 - o.x as f64;
        let dy = self.y as f64 - o.y as f64;
        dx * dx + dy * dy
    }
}

/// Pixels whose confidence for `(task, class)` is at least `tau`, in
/// heatmap order then row-major within each tile.
pub fn threshold_filter(heatmaps: &[Heatmap], task: usize, class: usize, tau: f64) -> Result<Vec<WeightedPixel>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::validation(format!("threshold {tau} outside (0, 1]")));
    }
    let mut out = Vec::new();
    for hm in heatmaps {
        if task >= hm.class_counts.len() || class >= hm.class_counts[task] {
            return Err(Error::validation(format!("no class {class} in task {task}")));
        }
        let plane = hm.confidence(task, class);
        debug_assert_eq!(plane.len(), TILE_PIXELS);
        for (i, &c) in plane.iter().enumerate() {
            if c as f64 >= tau {
                let p = hm.tile.pixel(i);
                out.push(WeightedPixel { x: p.x, y: p.y, weight: c as f64 });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Cluster,
    Segment,
}

/// One vector output. For clusters `area_px` is the member pixel count and
/// `score` the mean member weight; segments carry their match score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorItem {
    pub kind: ItemKind,
    pub id: String,
    pub geometry: Geometry,
    pub score: f64,
    pub weight_sum: f64,
    pub area_px: Option<f64>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl VectorItem {
    pub fn numeric(&self, field: &str) -> Option<f64> {
        match field {
            "score" => Some(self.score),
            "weight_sum" => Some(self.weight_sum),
            "area_px" => self.area_px,
            _ => None,
        }
    }
}

/// One polygon per cluster, in cluster order.
pub fn clusters_to_polygons(result: &ClusterResult, points: &[WeightedPixel]) -> Vec<Geometry> {
    result.clusters.iter().map(|c| cluster_polygon(points, c)).collect()
}

pub fn cluster_items(result: &ClusterResult, points: &[WeightedPixel]) -> Vec<VectorItem> {
    result
        .clusters
        .iter()
        .enumerate()
        .map(|(i, members)| {
            let weight_sum: f64 = members.iter().map(|&m| points[m].weight).sum();
            VectorItem {
                kind: ItemKind::Cluster,
                id: i.to_string(),
                geometry: cluster_polygon(points, members),
                score: weight_sum / members.len() as f64,
                weight_sum,
                area_px: Some(members.len() as f64),
                attributes: BTreeMap::new(),
            }
        })
        .collect()
}

pub fn segment_items(scores: &[SegmentScore], network: &[RoadSegment]) -> Vec<VectorItem> {
    let by_id: BTreeMap<&str, &RoadSegment> = network.iter().map(|s| (s.segment_id.as_str(), s)).collect();
    scores
        .iter()
        .map(|s| {
            let seg = by_id[s.segment_id.as_str()];
            VectorItem {
                kind: ItemKind::Segment,
                id: s.segment_id.clone(),
                geometry: seg.geometry(),
                score: s.score,
                weight_sum: s.weight_sum,
                area_px: None,
                attributes: seg.attributes.clone(),
            }
        })
        .collect()
}

/// Inputs shared by every post-processing method.
pub struct PostInput<'a> {
    pub points: &'a [WeightedPixel],
    pub network: Option<&'a [RoadSegment]>,
}

/// A named method turning thresholded pixels into vector items.
pub trait PostProcessor: Send + Sync {
    fn id(&self) -> &str;
    fn description(&self) -> &str;
    /// `params` is the method's JSON parameter object.
    fn run(&self, input: &PostInput<'_>, params: &Value) -> Result<Vec<VectorItem>>;
}

fn params<T: for<'de> Deserialize<'de>>(method: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::validation(format!("{method} parameters: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorizeParams {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_min_weight")]
    pub min_weight: f64,
}

fn default_eps() -> f64 {
    1.5
}

fn default_min_weight() -> f64 {
    3.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapMatchParams {
    #[serde(default = "default_radius")]
    pub radius_m: f64,
    #[serde(default)]
    pub score_tau: f64,
}

fn default_radius() -> f64 {
    10.0
}

pub struct Vectorize;

impl PostProcessor for Vectorize {
    fn id(&self) -> &str {
        "vectorize"
    }

    fn description(&self) -> &str {
        "weighted DBSCAN clusters as convex hull polygons"
    }

    fn run(&self, input: &PostInput<'_>, v: &Value) -> Result<Vec<VectorItem>> {
        let p: VectorizeParams = params(self.id(), v)?;
        let result = weighted_dbscan(input.points, p.eps, p.min_weight)?;
        Ok(cluster_items(&result, input.points))
    }
}

pub struct MapMatch;

impl PostProcessor for MapMatch {
    fn id(&self) -> &str {
        "mapmatch"
    }

    fn description(&self) -> &str {
        "nearest-segment matching onto a road network"
    }

    fn run(&self, input: &PostInput<'_>, v: &Value) -> Result<Vec<VectorItem>> {
        let p: MapMatchParams = params(self.id(), v)?;
        let network = input.network.ok_or_else(|| Error::validation("mapmatch requires a road network"))?;
        let scores = map_match(input.points, network, p.radius_m, p.score_tau)?;
        Ok(segment_items(&scores, network))
    }
}

#[derive(Clone, Default)]
pub struct PostProcessorRegistry {
    methods: BTreeMap<String, Arc<dyn PostProcessor>>,
}

impl PostProcessorRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Vectorize)).expect("builtin ids are unique");
        r.register(Arc::new(MapMatch)).expect("builtin ids are unique");
        r
    }

    pub fn register(&mut self, method: Arc<dyn PostProcessor>) -> Result<()> {
        let id = method.id().to_string();
        if self.methods.contains_key(&id) {
            return Err(Error::conflict(format!("post-processor '{id}' already registered")));
        }
        self.methods.insert(id, method);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn PostProcessor>> {
        self.methods
            .get(id)
            .cloned()
            .ok_or_else(|| Error::validation(format!("unknown post-processing method '{id}'")))
    }

    pub fn ids(&self) -> Vec<String> {
        self.methods.keys().cloned().collect()
    }

    pub fn describe(&self) -> Vec<(String, String)> {
        self.methods.values().map(|m| (m.id().to_string(), m.description().to_string())).collect()
    }
}

/// Full post-processing request against a finished prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostRequest {
    pub method: String,
    #[serde(default)]
    pub task: usize,
    #[serde(default = "default_class")]
    pub class_index: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "empty_object")]
    pub params: Value,
    #[serde(default)]
    pub predicate: Option<String>,
}

fn default_class() -> usize {
    1
}

fn default_tau() -> f64 {
    0.5
}

fn empty_object() -> Value {
    json!({})
}

/// Threshold, run the method, then apply the optional predicate.
pub fn run_request(
    registry: &PostProcessorRegistry,
    heatmaps: &[Heatmap],
    network: Option<&[RoadSegment]>,
    req: &PostRequest,
) -> Result<Vec<VectorItem>> {
    let method = registry.get(&req.method)?;
    let predicate = Predicate::parse(req.predicate.as_deref().unwrap_or(""))?;
    let points = threshold_filter(heatmaps, req.task, req.class_index, req.tau)?;
    let items = method.run(&PostInput { points: &points, network }, &req.params)?;
    Ok(predicate_filter(items, &predicate))
}

/// One `WKT\t<score>` line per item.
pub fn to_wkt_lines(items: &[VectorItem]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&it.geometry.to_wkt());
        out.push('\t');
        out.push_str(&it.score.to_string());
        out.push('\n');
    }
    out
}

fn ring_json(ring: &[LatLon]) -> Value {
    Value::Array(ring.iter().map(|p| json!([p.lon, p.lat])).collect())
}

fn shape_json(shape: &Shape) -> Value {
    match shape {
        Shape::Point(p) => json!({"type": "Point", "coordinates": [p.lon, p.lat]}),
        Shape::LineString(v) => json!({"type": "LineString", "coordinates": ring_json(v)}),
        Shape::Polygon(p) => {
            json!({"type": "Polygon", "coordinates": p.rings().map(|r| ring_json(r)).collect::<Vec<_>>()})
        }
        Shape::MultiPolygon(ps) => json!({
            "type": "MultiPolygon",
            "coordinates": ps.iter().map(|p| p.rings().map(|r| ring_json(r)).collect::<Vec<_>>()).collect::<Vec<_>>()
        }),
    }
}

pub fn to_geojson(items: &[VectorItem]) -> Value {
    let features: Vec<Value> = items
        .iter()
        .map(|it| {
            let mut props = serde_json::Map::new();
            let key = match it.kind {
                ItemKind::Cluster => "cluster_id",
                ItemKind::Segment => "segment_id",
            };
            props.insert(key.into(), json!(it.id));
            props.insert("score".into(), json!(it.score));
            props.insert("weight_sum".into(), json!(it.weight_sum));
            if let Some(a) = it.area_px {
                props.insert("area_px".into(), json!(a));
            }
            for (k, v) in &it.attributes {
                props.insert(format!("attr.{k}"), json!(v));
            }
            json!({"type": "Feature", "geometry": shape_json(&it.geometry.shape), "properties": props})
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

/// Writes `vectors.wkt`, `vectors.geojson` and `items.json` into `dir`.
pub fn write_outputs(dir: &Path, items: &[VectorItem]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("vectors.wkt"), to_wkt_lines(items))?;
    std::fs::write(dir.join("vectors.geojson"), serde_json::to_vec_pretty(&to_geojson(items))?)?;
    std::fs::write(dir.join("items.json"), serde_json::to_vec_pretty(items)?)?;
    Ok(())
}

pub fn read_items(dir: &Path) -> Result<Vec<VectorItem>> {
    let path = dir.join("items.json");
    let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::not_found(format!("{}", path.display())),
        _ => e.into(),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}
