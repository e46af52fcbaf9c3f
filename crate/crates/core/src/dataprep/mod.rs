//! Dataset assembly: stacking profile channels and label rasters per tile.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{TileKey, TILE_PIXELS, TILE_SIZE};
use crate::kernel::{Example, Tensor3};
use crate::labels::{rasterize_label_set, LabelStore, TaskSpec};
use crate::rng::Lcg64;
use crate::store::{scan_tile_dir, write_atomic, ChannelPlane, ChannelStore, Normalization, ProfileMeta, SparseTileRecord};

pub const DEFAULT_VAL_FRACTION: f64 = 0.30;
pub const TRANSIENT_STATS_FILE: &str = "stats.json";

/// Inclusive ISO date bounds for a temporal profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub profile_ids: Vec<String>,
    /// Keyed by profile id. A temporal profile without an entry aggregates
    /// over all of its dates.
    #[serde(default)]
    pub date_ranges: BTreeMap<String, DateRange>,
    pub label_set_id: String,
    #[serde(default)]
    pub transient_dir: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_val_fraction() -> f64 {
    DEFAULT_VAL_FRACTION
}

impl DatasetSpec {
    pub fn new(profile_ids: &[&str], label_set_id: &str) -> Self {
        DatasetSpec {
            profile_ids: profile_ids.iter().map(|s| s.to_string()).collect(),
            date_ranges: BTreeMap::new(),
            label_set_id: label_set_id.into(),
            transient_dir: None,
            val_fraction: DEFAULT_VAL_FRACTION,
            split_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.profile_ids.is_empty() {
            return Err(Error::validation("dataset needs at least one profile"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::validation(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        for (id, r) in &self.date_ranges {
            if !self.profile_ids.contains(id) {
                return Err(Error::validation(format!("date range given for unselected profile {id}")));
            }
            if r.from > r.to {
                return Err(Error::validation(format!("date range {}..{} is inverted", r.from, r.to)));
            }
        }
        Ok(())
    }
}

/// `(v - mean) / std` element-wise.
pub fn normalize(plane: &ChannelPlane, mean: f64, std: f64) -> Result<ChannelPlane> {
    if !(std > 0.0) {
        return Err(Error::validation(format!("std must be positive, got {std}")));
    }
    let mut out = plane.clone();
    for v in out.values_mut() {
        *v = ((*v as f64 - mean) / std) as f32;
    }
    Ok(out)
}

/// Seeded Fisher-Yates split; both halves come back sorted.
///
/// The validation set has `round(n * val_fraction)` tiles, raised to 1 and
/// capped at `n - 1` when `n >= 2`.
pub fn split_train_val(tiles: &[TileKey], val_fraction: f64, seed: u64) -> Result<(Vec<TileKey>, Vec<TileKey>)> {
    if tiles.is_empty() {
        return Err(Error::validation("cannot split an empty tile list"));
    }
    let n = tiles.len();
    let mut k = (n as f64 * val_fraction).round() as usize;
    if n >= 2 {
        k = k.clamp(1, n - 1);
    } else {
        k = 0;
    }
    let mut order = tiles.to_vec();
    order.sort_unstable();
    Lcg64::new(seed).shuffle(&mut order);
    let mut val = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct TransientStats {
    #[serde(default)]
    channel_names: Vec<String>,
    #[serde(default)]
    normalization: Vec<Normalization>,
}

/// A directory of `.trc` tiles (`16/<x>/<y>.trc`) that contributes channels
/// without being registered in the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransientSource {
    pub dir: PathBuf,
    pub channel_names: Vec<String>,
    pub normalization: Vec<Normalization>,
}

impl TransientSource {
    pub fn tile_path(dir: &Path, tile: TileKey) -> PathBuf {
        dir.join(format!("16/{}/{}.trc", tile.x, tile.y))
    }

    /// Reads the channel count from the first tile and optional names and
    /// normalization from `stats.json` (default: identity).
    pub fn open(dir: &Path) -> Result<Self> {
        let tiles = scan_tile_dir(&dir.join("16"))?;
        let first = tiles
            .first()
            .ok_or_else(|| Error::validation(format!("transient directory {} has no tiles", dir.display())))?;
        let count = Self::read(dir, *first)?.channels.len();
        let stats: TransientStats = match fs::read(dir.join(TRANSIENT_STATS_FILE)) {
            Ok(b) => serde_json::from_slice(&b)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => TransientStats::default(),
            Err(e) => return Err(e.into()),
        };
        let channel_names = if stats.channel_names.is_empty() {
            (0..count).map(|i| format!("transient_{i}")).collect()
        } else {
            stats.channel_names
        };
        let normalization =
            if stats.normalization.is_empty() { vec![Normalization::IDENTITY; count] } else { stats.normalization };
        if channel_names.len() != count || normalization.len() != count {
            return Err(Error::validation(format!(
                "transient stats describe {} channels but tiles carry {count}",
                channel_names.len().max(normalization.len())
            )));
        }
        Ok(TransientSource { dir: dir.to_path_buf(), channel_names, normalization })
    }

    fn read(dir: &Path, tile: TileKey) -> Result<SparseTileRecord> {
        let path = Self::tile_path(dir, tile);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::validation(format!("transient data missing tile {tile}")),
            _ => Error::Io(e),
        })?;
        let rec = SparseTileRecord::decode(&bytes)?;
        if rec.tile != tile {
            return Err(Error::validation(format!("{} holds tile {}", path.display(), rec.tile)));
        }
        Ok(rec)
    }

    pub fn planes(&self, tile: TileKey) -> Result<Vec<ChannelPlane>> {
        let rec = Self::read(&self.dir, tile)?;
        if rec.channels.len() != self.channel_names.len() {
            return Err(Error::validation(format!(
                "transient tile {tile} has {} channels, expected {}",
                rec.channels.len(),
                self.channel_names.len()
            )));
        }
        Ok(rec.to_dense())
    }
}

/// One selected profile as frozen into a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSelection {
    pub profile_id: String,
    pub channel_names: Vec<String>,
    pub normalization: Vec<Normalization>,
    /// Set for temporal profiles.
    pub date_range: Option<DateRange>,
}

/// Everything needed to turn a tile into a normalized model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRecipe {
    pub profiles: Vec<ProfileSelection>,
    pub transient: Option<TransientSource>,
}

impl ChannelRecipe {
    pub fn resolve(store: &ChannelStore, spec: &DatasetSpec) -> Result<Self> {
        let mut profiles = Vec::with_capacity(spec.profile_ids.len());
        for id in &spec.profile_ids {
            let meta: ProfileMeta = store.profile(id)?;
            let date_range = if meta.temporal {
                Some(match spec.date_ranges.get(id) {
                    Some(r) => r.clone(),
                    None => match (meta.dates.first(), meta.dates.last()) {
                        (Some(a), Some(b)) => DateRange { from: a.clone(), to: b.clone() },
                        _ => DateRange { from: String::new(), to: String::new() },
                    },
                })
            } else {
                if spec.date_ranges.contains_key(id) {
                    return Err(Error::validation(format!("profile {id} is not temporal")));
                }
                None
            };
            profiles.push(ProfileSelection {
                profile_id: id.clone(),
                channel_names: meta.channel_names.clone(),
                normalization: meta.normalization.clone(),
                date_range,
            });
        }
        let transient = spec.transient_dir.as_deref().map(TransientSource::open).transpose()?;
        Ok(ChannelRecipe { profiles, transient })
    }

    /// Replaces the date range of every temporal profile.
    pub fn with_date_range(&self, range: &DateRange) -> Self {
        let mut out = self.clone();
        for p in &mut out.profiles {
            if p.date_range.is_some() {
                p.date_range = Some(range.clone());
            }
        }
        out
    }

    pub fn channel_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.profiles.iter().flat_map(|p| p.channel_names.iter().cloned()).collect();
        if let Some(t) = &self.transient {
            names.extend(t.channel_names.iter().cloned());
        }
        names
    }

    pub fn normalization(&self) -> Vec<Normalization> {
        let mut out: Vec<Normalization> = self.profiles.iter().flat_map(|p| p.normalization.iter().copied()).collect();
        if let Some(t) = &self.transient {
            out.extend(t.normalization.iter().copied());
        }
        out
    }

    pub fn channel_count(&self) -> usize {
        self.channel_names().len()
    }

    /// Raw (unnormalized) planes in channel order.
    pub fn raw_planes(&self, store: &ChannelStore, tile: TileKey) -> Result<Vec<ChannelPlane>> {
        let mut planes = Vec::with_capacity(self.channel_count());
        for p in &self.profiles {
            let got = match &p.date_range {
                Some(r) if r.from.is_empty() => vec![ChannelPlane::zeros(); p.channel_names.len()],
                Some(r) => store.aggregate_range(&p.profile_id, tile, &r.from, &r.to)?,
                None => store.get_tile(&p.profile_id, tile, None)?,
            };
            if got.len() != p.channel_names.len() {
                return Err(Error::validation(format!(
                    "profile {} now has {} channels, recipe expects {}",
                    p.profile_id,
                    got.len(),
                    p.channel_names.len()
                )));
            }
            planes.extend(got);
        }
        if let Some(t) = &self.transient {
            planes.extend(t.planes(tile)?);
        }
        Ok(planes)
    }

    /// Normalized `C x 256 x 256` image.
    pub fn image(&self, store: &ChannelStore, tile: TileKey) -> Result<Tensor3<f32>> {
        let planes = self.raw_planes(store, tile)?;
        let mut data = Vec::with_capacity(planes.len() * TILE_PIXELS);
        for (plane, n) in planes.iter().zip(self.normalization()) {
            data.extend_from_slice(normalize(plane, n.mean, n.std)?.values());
        }
        Ok(Tensor3::from_vec(planes.len(), TILE_SIZE, TILE_SIZE, data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub channel_count: usize,
    pub channel_names: Vec<String>,
    pub normalization: Vec<Normalization>,
    pub tasks: Vec<TaskSpec>,
    pub label_set_id: String,
    pub train_tiles: Vec<TileKey>,
    pub val_tiles: Vec<TileKey>,
    pub recipe: ChannelRecipe,
    pub spec: DatasetSpec,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

fn assemble(store: &ChannelStore, recipe: &ChannelRecipe, set: &crate::labels::LabelSet, tiles: &[TileKey]) -> Result<Vec<Example>> {
    tiles
        .par_iter()
        .map(|&tile| {
            let image = recipe.image(store, tile)?;
            let labels = rasterize_label_set(set, tile)?.planes;
            Ok(Example { key: tile.to_string(), image, labels })
        })
        .collect()
}

/// One example per labeled tile, split into train and val.
pub fn build_dataset(store: &ChannelStore, labels: &LabelStore, spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let set = labels.get(&spec.label_set_id)?;
    let recipe = ChannelRecipe::resolve(store, spec)?;
    let tiles: Vec<TileKey> = set.labeled_tiles()?.into_iter().collect();
    if tiles.is_empty() {
        return Err(Error::validation(format!("label set {} has no labeled region", set.label_set_id)));
    }
    let (train_tiles, val_tiles) = split_train_val(&tiles, spec.val_fraction, spec.split_seed)?;
    let train = assemble(store, &recipe, &set, &train_tiles)?;
    let val = assemble(store, &recipe, &set, &val_tiles)?;
    let manifest = DatasetManifest {
        channel_count: recipe.channel_count(),
        channel_names: recipe.channel_names(),
        normalization: recipe.normalization(),
        tasks: set.task_specs.clone(),
        label_set_id: set.label_set_id.clone(),
        train_tiles,
        val_tiles,
        recipe,
        spec: spec.clone(),
    };
    Ok(Dataset { manifest, train, val })
}

/// Appends the transient directory's channels to every example.
pub fn inject_transient(dataset: &mut Dataset, transient_dir: &Path) -> Result<()> {
    if dataset.manifest.recipe.transient.is_some() {
        return Err(Error::validation("dataset already has transient channels"));
    }
    let t = TransientSource::open(transient_dir)?;
    let mut extra = Vec::new();
    for ex in dataset.train.iter().chain(&dataset.val) {
        let tile = parse_tile_key(&ex.key)?;
        let planes = t.planes(tile)?;
        let mut data = Vec::with_capacity(planes.len() * TILE_PIXELS);
        for (plane, n) in planes.iter().zip(&t.normalization) {
            data.extend_from_slice(normalize(plane, n.mean, n.std)?.values());
        }
        extra.push(data);
    }
    for (ex, data) in dataset.train.iter_mut().chain(dataset.val.iter_mut()).zip(extra) {
        ex.image.data.extend(data);
        ex.image.c += t.channel_names.len();
    }
    let m = &mut dataset.manifest;
    m.spec.transient_dir = Some(transient_dir.to_path_buf());
    m.recipe.transient = Some(t);
    m.channel_names = m.recipe.channel_names();
    m.normalization = m.recipe.normalization();
    m.channel_count = m.channel_names.len();
    Ok(())
}

/// Parses the `16/x/y` form used for example keys.
pub fn parse_tile_key(s: &str) -> Result<TileKey> {
    let parts: Vec<&str> = s.split('/').collect();
    match parts.as_slice() {
        ["16", x, y] => match (x.parse(), y.parse()) {
            (Ok(x), Ok(y)) => TileKey::new(x, y),
            _ => Err(Error::validation(format!("bad tile key '{s}'"))),
        },
        _ => Err(Error::validation(format!("bad tile key '{s}'"))),
    }
}

fn example_path(dir: &Path, tile: TileKey) -> PathBuf {
    dir.join(format!("examples/16/{}/{}.bin", tile.x, tile.y))
}

/// Writes `manifest.json` plus one flat binary per tile: C f32 LE planes,
/// then one u8 plane per task.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    for ex in dataset.train.iter().chain(&dataset.val) {
        let tile = parse_tile_key(&ex.key)?;
        let mut bytes = Vec::with_capacity(ex.image.data.len() * 4 + ex.labels.len() * TILE_PIXELS);
        for v in &ex.image.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for plane in &ex.labels {
            bytes.extend_from_slice(plane);
        }
        write_atomic(&example_path(dir, tile), &bytes)?;
    }
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&dataset.manifest)?)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(dir.join("manifest.json")).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::not_found(format!("dataset manifest in {}", dir.display())),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let (c, tasks) = (manifest.channel_count, manifest.tasks.len());
    let load = |tile: &TileKey| -> Result<Example> {
        let bytes = fs::read(example_path(dir, *tile))?;
        let img_len = c * TILE_PIXELS * 4;
        if bytes.len() != img_len + tasks * TILE_PIXELS {
            return Err(Error::validation(format!("example file for {tile} has the wrong size")));
        }
        let data = bytes[..img_len].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let labels = bytes[img_len..].chunks_exact(TILE_PIXELS).map(|p| p.to_vec()).collect();
        Ok(Example { key: tile.to_string(), image: Tensor3::from_vec(c, TILE_SIZE, TILE_SIZE, data), labels })
    };
    let train = manifest.train_tiles.iter().map(load).collect::<Result<_>>()?;
    let val = manifest.val_tiles.iter().map(load).collect::<Result<_>>()?;
    Ok(Dataset { manifest, train, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiles(n: u32) -> Vec<TileKey> {
        (0..n).map(|i| TileKey::new(100 + i, 200).unwrap()).collect()
    }

    #[test]
    fn split_sizes() {
        let (t, v) = split_train_val(&tiles(10), 0.3, 1).unwrap();
        assert_eq!((t.len(), v.len()), (7, 3));
        let (t, v) = split_train_val(&tiles(2), 0.01, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        let (t, v) = split_train_val(&tiles(1), 0.3, 1).unwrap();
        assert_eq!((t.len(), v.len()), (1, 0));
        assert!(split_train_val(&[], 0.3, 1).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        assert_eq!(split_train_val(&tiles(25), 0.3, 9).unwrap(), split_train_val(&tiles(25), 0.3, 9).unwrap());
        assert_ne!(split_train_val(&tiles(25), 0.3, 9).unwrap(), split_train_val(&tiles(25), 0.3, 10).unwrap());
    }

    #[test]
    fn normalize_examples() {
        let mut rng = Lcg64::new(4);
        let p = ChannelPlane::from_values((0..TILE_PIXELS).map(|_| rng.next_f64() as f32 * 10.0).collect()).unwrap();
        assert_eq!(normalize(&p, 0.0, 1.0).unwrap(), p);
        let c = ChannelPlane::from_values(vec![2.5; TILE_PIXELS]).unwrap();
        assert!(normalize(&c, 2.5, 3.0).unwrap().values().iter().all(|v| *v == 0.0));
        let out = normalize(&p, 1.25, 0.5).unwrap();
        for (o, i) in out.values().iter().zip(p.values()) {
            assert_eq!(*o, ((*i as f64 - 1.25) / 0.5) as f32);
        }
        assert!(matches!(normalize(&p, 0.0, 0.0), Err(Error::Validation(_))));
        assert!(normalize(&p, 0.0, -1.0).is_err());
    }

    #[test]
    fn tile_key_parse() {
        assert_eq!(parse_tile_key("16/5/9").unwrap(), TileKey::new(5, 9).unwrap());
        assert!(parse_tile_key("15/5/9").is_err());
        assert!(parse_tile_key("16/a/9").is_err());
    }

    proptest! {
        #[test]
        fn split_partitions(n in 1u32..60, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let all = tiles(n);
            let (t, v) = split_train_val(&all, frac, seed).unwrap();
            let mut union: Vec<TileKey> = t.iter().chain(&v).copied().collect();
            union.sort();
            prop_assert_eq!(union, all);
            prop_assert!(t.iter().all(|x| !v.contains(x)));
            if n >= 2 {
                prop_assert!(!v.is_empty() && !t.is_empty());
            }
        }
    }
}
