//! Label sets, label rasters and labeling tasks.

mod raster;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{parse_wkt, tile_range, BBox, Geometry, TileKey, TILE_PIXELS, TILE_ZOOM};
use crate::store::{validate_id, write_atomic};

pub use raster::{check_tag, edge_crossing, effective_tag, local_xy, rasterize, trace_segment, IGNORE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_name: String,
    pub class_count: usize,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, class_count: usize) -> Self {
        TaskSpec { task_name: name.into(), class_count }
    }

    /// Parses `name:classes[,name:classes...]`.
    pub fn parse_list(s: &str) -> Result<Vec<TaskSpec>> {
        s.split(',')
            .map(|part| {
                let (name, n) = part
                    .split_once(':')
                    .ok_or_else(|| Error::validation(format!("task spec '{part}' must be name:classes")))?;
                let n = n.trim().parse().map_err(|_| Error::validation(format!("bad class count in '{part}'")))?;
                Ok(TaskSpec::new(name.trim(), n))
            })
            .collect()
    }
}

pub fn validate_task_specs(specs: &[TaskSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::validation("at least one task is required"));
    }
    let mut names = BTreeSet::new();
    for t in specs {
        validate_id(&t.task_name)?;
        if !names.insert(&t.task_name) {
            return Err(Error::validation(format!("duplicate task name '{}'", t.task_name)));
        }
        if !(2..=255).contains(&t.class_count) {
            return Err(Error::validation(format!("task '{}': class_count must be in [2, 255]", t.task_name)));
        }
    }
    Ok(())
}

/// Where absence of geometry means background rather than "unlabeled".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledRegion {
    #[serde(default)]
    pub bboxes: Vec<BBox>,
    #[serde(default)]
    pub tiles: BTreeSet<TileKey>,
}

impl LabeledRegion {
    pub fn from_bbox(b: BBox) -> Self {
        LabeledRegion { bboxes: vec![b], tiles: BTreeSet::new() }
    }

    pub fn contains(&self, tile: TileKey) -> bool {
        self.tiles.contains(&tile)
            || self.bboxes.iter().any(|b| match tile_range(b, TILE_ZOOM) {
                Ok((xs, ys)) => xs.contains(&tile.x) && ys.contains(&tile.y),
                Err(_) => false,
            })
    }

    /// Every tile of the region, sorted.
    pub fn tiles(&self) -> Result<BTreeSet<TileKey>> {
        let mut out = self.tiles.clone();
        for b in &self.bboxes {
            out.extend(crate::geo::tiles_covering(b)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub label_set_id: String,
    pub task_specs: Vec<TaskSpec>,
    /// Per task, in `task_specs` order.
    pub geometries: Vec<Vec<Geometry>>,
    /// Per task, in `task_specs` order.
    pub labeled_regions: Vec<LabeledRegion>,
}

impl LabelSet {
    pub fn new(label_set_id: &str, task_specs: Vec<TaskSpec>) -> Result<Self> {
        validate_id(label_set_id)?;
        validate_task_specs(&task_specs)?;
        let n = task_specs.len();
        Ok(LabelSet {
            label_set_id: label_set_id.into(),
            task_specs,
            geometries: vec![Vec::new(); n],
            labeled_regions: vec![LabeledRegion::default(); n],
        })
    }

    pub fn validate(&self) -> Result<()> {
        validate_id(&self.label_set_id)?;
        validate_task_specs(&self.task_specs)?;
        let n = self.task_specs.len();
        if self.geometries.len() != n || self.labeled_regions.len() != n {
            return Err(Error::validation("geometries/regions must have one entry per task"));
        }
        for (spec, geoms) in self.task_specs.iter().zip(&self.geometries) {
            for g in geoms {
                check_tag(g, spec.class_count)?;
            }
        }
        Ok(())
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.task_specs
            .iter()
            .position(|t| t.task_name == name)
            .ok_or_else(|| Error::validation(format!("label set {} has no task '{name}'", self.label_set_id)))
    }

    pub fn geometry_count(&self) -> usize {
        self.geometries.iter().map(Vec::len).sum()
    }

    /// Union of every task's labeled tiles, sorted.
    pub fn labeled_tiles(&self) -> Result<BTreeSet<TileKey>> {
        let mut out = BTreeSet::new();
        for r in &self.labeled_regions {
            out.extend(r.tiles()?);
        }
        Ok(out)
    }

    /// Appends geometries to a task after checking their tags.
    pub fn add_geometries(&mut self, task: usize, geoms: Vec<Geometry>) -> Result<()> {
        let spec = &self.task_specs[task];
        for g in &geoms {
            check_tag(g, spec.class_count)?;
        }
        self.geometries[task].extend(geoms);
        Ok(())
    }
}

/// Per-task label planes for one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub tile: TileKey,
    pub planes: Vec<Vec<u8>>,
}

impl LabelRaster {
    pub fn ignore_all(tile: TileKey, tasks: usize) -> Self {
        LabelRaster { tile, planes: vec![vec![IGNORE; TILE_PIXELS]; tasks] }
    }
}

fn touches(g: &Geometry, tile: TileKey) -> bool {
    let gb = g.bbox();
    let tb = tile.bbox();
    gb.min.lon <= tb.max.lon && gb.max.lon >= tb.min.lon && gb.min.lat <= tb.max.lat && gb.max.lat >= tb.min.lat
}

/// One plane per task. A task's plane is rasterized when the tile is inside
/// that task's labeled region or carries some of its geometry; otherwise the
/// plane is all [`IGNORE`].
pub fn rasterize_label_set(set: &LabelSet, tile: TileKey) -> Result<LabelRaster> {
    let mut planes = Vec::with_capacity(set.task_specs.len());
    for ((spec, geoms), region) in set.task_specs.iter().zip(&set.geometries).zip(&set.labeled_regions) {
        let local: Vec<Geometry> = geoms.iter().filter(|g| touches(g, tile)).cloned().collect();
        if !local.is_empty() || region.contains(tile) {
            planes.push(rasterize(&local, tile, spec.class_count)?);
        } else {
            planes.push(vec![IGNORE; TILE_PIXELS]);
        }
    }
    Ok(LabelRaster { tile, planes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrigin {
    Manual,
    ActiveLearning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTask {
    pub task_id: String,
    pub label_set_id: String,
    /// Which task of the label set annotations go to.
    pub target_task: String,
    pub tile_list: Vec<TileKey>,
    pub status: TaskStatus,
    pub origin: TaskOrigin,
}

/// JSON documents under `<root>/<id>.json` and `<root>/tasks/<task_id>.json`.
pub struct LabelStore {
    root: PathBuf,
}

impl LabelStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("tasks"))?;
        Ok(LabelStore { root })
    }

    fn set_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.json"))
    }

    fn task_path(&self, id: &str) -> PathBuf {
        self.root.join("tasks").join(format!("{id}.json"))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.set_path(id).exists()
    }

    pub fn get(&self, id: &str) -> Result<LabelSet> {
        validate_id(id)?;
        read_json(&self.set_path(id)).map_err(|e| match e {
            Error::NotFound(_) => Error::not_found(format!("label set '{id}'")),
            e => e,
        })
    }

    pub fn save(&self, set: &LabelSet) -> Result<()> {
        set.validate()?;
        write_atomic(&self.set_path(&set.label_set_id), &serde_json::to_vec_pretty(set)?)
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for e in fs::read_dir(&self.root)? {
            let name = e?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Creates a label set from WKT text. Geometries go to `task` (default:
    /// the first task) and `labeled_region` becomes that task's region.
    pub fn ingest_wkt_text(
        &self,
        text: &str,
        label_set_id: &str,
        task_specs: Vec<TaskSpec>,
        labeled_region: BBox,
        task: Option<&str>,
    ) -> Result<LabelSet> {
        let mut set = LabelSet::new(label_set_id, task_specs)?;
        labeled_region.validate()?;
        if self.exists(label_set_id) {
            return Err(Error::conflict(format!("label set '{label_set_id}' already exists")));
        }
        let geoms = parse_wkt(text)?;
        let idx = match task {
            Some(name) => set.task_index(name)?,
            None => 0,
        };
        set.add_geometries(idx, geoms)?;
        set.labeled_regions[idx] = LabeledRegion::from_bbox(labeled_region);
        self.save(&set)?;
        Ok(set)
    }

    /// Adds geometries to an existing label set's task and widens that
    /// task's labeled region.
    pub fn append_wkt_text(&self, label_set_id: &str, text: &str, task: Option<&str>, region: Option<BBox>) -> Result<LabelSet> {
        let mut set = self.get(label_set_id)?;
        let idx = match task {
            Some(name) => set.task_index(name)?,
            None => 0,
        };
        let geoms = parse_wkt(text)?;
        set.add_geometries(idx, geoms)?;
        if let Some(b) = region {
            b.validate()?;
            set.labeled_regions[idx].bboxes.push(b);
        }
        self.save(&set)?;
        Ok(set)
    }

    pub fn ingest_wkt_file(
        &self,
        path: &Path,
        label_set_id: &str,
        task_specs: Vec<TaskSpec>,
        labeled_region: BBox,
    ) -> Result<LabelSet> {
        let text = fs::read_to_string(path)?;
        self.ingest_wkt_text(&text, label_set_id, task_specs, labeled_region, None)
    }

    /// Copies a label set under a new id.
    pub fn derive(&self, source_id: &str, new_id: &str) -> Result<LabelSet> {
        let mut set = self.get(source_id)?;
        validate_id(new_id)?;
        if self.exists(new_id) {
            return Err(Error::conflict(format!("label set '{new_id}' already exists")));
        }
        set.label_set_id = new_id.into();
        self.save(&set)?;
        Ok(set)
    }

    pub fn create_labeling_task(
        &self,
        label_set_id: &str,
        target_task: Option<&str>,
        tiles: &[TileKey],
        origin: TaskOrigin,
    ) -> Result<LabelTask> {
        if tiles.is_empty() {
            return Err(Error::validation("a labeling task needs at least one tile"));
        }
        let set = self.get(label_set_id)?;
        let target = match target_task {
            Some(name) => set.task_specs[set.task_index(name)?].task_name.clone(),
            None => set.task_specs[0].task_name.clone(),
        };
        let mut seen = BTreeSet::new();
        let tile_list: Vec<TileKey> = tiles.iter().copied().filter(|t| seen.insert(*t)).collect();
        let task_id = format!("lt-{:04}", self.list_tasks()?.len() + 1);
        let task = LabelTask {
            task_id,
            label_set_id: label_set_id.into(),
            target_task: target,
            tile_list,
            status: TaskStatus::Open,
            origin,
        };
        write_atomic(&self.task_path(&task.task_id), &serde_json::to_vec_pretty(&task)?)?;
        Ok(task)
    }

    pub fn get_task(&self, task_id: &str) -> Result<LabelTask> {
        validate_id(task_id)?;
        read_json(&self.task_path(task_id)).map_err(|e| match e {
            Error::NotFound(_) => Error::state(format!("unknown labeling task '{task_id}'")),
            e => e,
        })
    }

    pub fn list_tasks(&self) -> Result<Vec<LabelTask>> {
        let mut out = Vec::new();
        for e in fs::read_dir(self.root.join("tasks"))? {
            let path = e?.path();
            if path.extension().is_some_and(|x| x == "json") {
                out.push(read_json(&path)?);
            }
        }
        out.sort_by(|a: &LabelTask, b| a.task_id.cmp(&b.task_id));
        Ok(out)
    }

    /// Appends annotations to the task's label set, extends the target
    /// task's labeled region with the task tiles and closes the task.
    pub fn add_annotations(&self, task_id: &str, wkt: &str) -> Result<LabelSet> {
        let mut task = self.get_task(task_id)?;
        if task.status != TaskStatus::Open {
            return Err(Error::state(format!("labeling task '{task_id}' is already completed")));
        }
        let geoms = parse_wkt(wkt)?;
        let mut set = self.get(&task.label_set_id)?;
        let idx = set.task_index(&task.target_task)?;
        set.add_geometries(idx, geoms)?;
        set.labeled_regions[idx].tiles.extend(task.tile_list.iter().copied());
        self.save(&set)?;
        task.status = TaskStatus::Completed;
        write_atomic(&self.task_path(task_id), &serde_json::to_vec_pretty(&task)?)?;
        Ok(set)
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    match fs::read(path) {
        Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::not_found(path.display().to_string())),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{unproject, LatLon, PIXEL_ZOOM};

    const TILE: TileKey = TileKey { x: 10_493, y: 25_432 };

    fn square_wkt(tile: TileKey, x0: f64, y0: f64, x1: f64, y1: f64, tag: u32) -> String {
        let o = tile.origin();
        let p = |x: f64, y: f64| unproject(o.x as f64 + x, o.y as f64 + y, PIXEL_ZOOM);
        let pts = [p(x0, y0), p(x1, y0), p(x1, y1), p(x0, y1), p(x0, y0)];
        let body: Vec<String> = pts.iter().map(|v| format!("{} {}", v.lon, v.lat)).collect();
        format!("POLYGON (({}))\t{tag}", body.join(", "))
    }

    fn store() -> (tempfile::TempDir, LabelStore) {
        let d = tempfile::tempdir().unwrap();
        let s = LabelStore::open(d.path().join("labels")).unwrap();
        (d, s)
    }

    #[test]
    fn multi_task_ignore_semantics() {
        let mut set = LabelSet::new("ls", vec![TaskSpec::new("a", 2), TaskSpec::new("b", 2)]).unwrap();
        set.add_geometries(0, parse_wkt(&square_wkt(TILE, 10.0, 10.0, 50.0, 50.0, 1)).unwrap()).unwrap();
        let r = rasterize_label_set(&set, TILE).unwrap();
        assert_eq!(r.planes.len(), 2);
        assert_eq!(r.planes[0][20 * 256 + 20], 1);
        assert_eq!(r.planes[0][0], 0);
        assert!(r.planes[1].iter().all(|v| *v == IGNORE));
    }

    #[test]
    fn region_without_geometry_is_background() {
        let mut set = LabelSet::new("ls", vec![TaskSpec::new("a", 2)]).unwrap();
        set.labeled_regions[0] = LabeledRegion::from_bbox(TILE.bbox());
        let other = TileKey { x: TILE.x + 5, y: TILE.y };
        set.add_geometries(0, parse_wkt(&square_wkt(other, 1.0, 1.0, 9.0, 9.0, 1)).unwrap()).unwrap();
        let r = rasterize_label_set(&set, TILE).unwrap();
        assert!(r.planes[0].iter().all(|v| *v == 0));
        let far = TileKey { x: TILE.x + 50, y: TILE.y };
        assert!(rasterize_label_set(&set, far).unwrap().planes[0].iter().all(|v| *v == IGNORE));
    }

    #[test]
    fn ingest_and_conflicts() {
        let (d, s) = store();
        let text = [
            square_wkt(TILE, 0.0, 0.0, 10.0, 10.0, 1),
            square_wkt(TILE, 20.0, 20.0, 30.0, 30.0, 1),
            "POINT (-122.03 37.33)\t1".to_string(),
        ]
        .join("\n");
        let path = d.path().join("in.wkt");
        fs::write(&path, &text).unwrap();
        let set = s.ingest_wkt_file(&path, "parking", vec![TaskSpec::new("lots", 2)], TILE.bbox()).unwrap();
        assert_eq!(set.geometry_count(), 3);
        assert_eq!(s.get("parking").unwrap(), set);
        assert!(matches!(
            s.ingest_wkt_file(&path, "parking", vec![TaskSpec::new("lots", 2)], TILE.bbox()),
            Err(Error::Conflict(_))
        ));
        let bad = format!("{}\n", square_wkt(TILE, 0.0, 0.0, 1.0, 1.0, 7));
        assert!(matches!(
            s.ingest_wkt_text(&bad, "other", vec![TaskSpec::new("x", 2)], TILE.bbox(), None),
            Err(Error::Validation(_))
        ));
        let broken = "POINT (1 2)\nPOLYGON ((0 0, 1 0)";
        assert!(matches!(
            s.ingest_wkt_text(broken, "third", vec![TaskSpec::new("x", 2)], TILE.bbox(), None),
            Err(Error::Parse { line: 2, .. })
        ));
        assert_eq!(s.list().unwrap(), vec!["parking".to_string()]);
    }

    #[test]
    fn labeling_task_flow() {
        let (_d, s) = store();
        let set = s.ingest_wkt_text("", "base", vec![TaskSpec::new("lots", 2)], TILE.bbox(), None).unwrap();
        assert!(matches!(s.create_labeling_task("base", None, &[], TaskOrigin::Manual), Err(Error::Validation(_))));
        let tiles: Vec<TileKey> = (0..5).map(|i| TileKey { x: TILE.x + i, y: TILE.y }).collect();
        let mut doubled = tiles.clone();
        doubled.extend(tiles.iter().copied());
        let task = s.create_labeling_task("base", None, &doubled, TaskOrigin::ActiveLearning).unwrap();
        assert_eq!(task.tile_list, tiles);
        assert_eq!(task.status, TaskStatus::Open);
        assert_eq!(s.list_tasks().unwrap(), vec![task.clone()]);

        let t2 = tiles[2];
        let ann = format!("{}\n{}", square_wkt(t2, 0.0, 0.0, 100.0, 100.0, 1), square_wkt(t2, 150.0, 150.0, 200.0, 200.0, 1));
        let updated = s.add_annotations(&task.task_id, &ann).unwrap();
        assert_eq!(updated.geometry_count(), set.geometry_count() + 2);
        assert!(updated.labeled_regions[0].contains(tiles[4]));
        let r = rasterize_label_set(&updated, t2).unwrap();
        let expect = rasterize(&updated.geometries[0], t2, 2).unwrap();
        assert_eq!(r.planes[0], expect);
        assert_eq!(r.planes[0][50 * 256 + 50], 1);
        assert_eq!(r.planes[0][120 * 256 + 120], 0);

        assert!(matches!(s.add_annotations(&task.task_id, &ann), Err(Error::State(_))));
        assert!(matches!(s.add_annotations("lt-9999", &ann), Err(Error::State(_))));
    }

    #[test]
    fn labeled_tiles_union() {
        let mut set = LabelSet::new("u", vec![TaskSpec::new("a", 2), TaskSpec::new("b", 3)]).unwrap();
        let p = LatLon::new(-122.03, 37.33).unwrap();
        set.labeled_regions[0] = LabeledRegion::from_bbox(BBox::new(p, p).unwrap());
        set.labeled_regions[1].tiles.insert(TILE);
        assert_eq!(set.labeled_tiles().unwrap().len(), 2);
    }

    #[test]
    fn geometry_json_round_trip() {
        let mut set = LabelSet::new("j", vec![TaskSpec::new("a", 2)]).unwrap();
        set.add_geometries(0, parse_wkt(&square_wkt(TILE, 1.0, 2.0, 3.0, 4.0, 1)).unwrap()).unwrap();
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.contains("\"wkt\":\"POLYGON"));
        let back: LabelSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }
}
