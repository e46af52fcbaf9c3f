//! File-backed profile store.
//!
//! Layout under the store root:
//!
//! ```text
//! catalog.json
//! <profile_id>/[<date>/]16/<x>/<y>.trc
//! ```
//!
//! Tiles that were never written read back as all-zero planes.

mod trc;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{TileKey, TILE_PIXELS, TILE_SIZE};

pub use trc::SparseTileRecord;
pub(crate) use trc::Reader;

/// One 256x256 real-valued plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlane(Vec<f32>);

impl ChannelPlane {
    pub fn zeros() -> Self {
        ChannelPlane(vec![0.0; TILE_PIXELS])
    }

    pub fn from_values(values: Vec<f32>) -> Result<Self> {
        if values.len() != TILE_PIXELS {
            return Err(Error::validation(format!("plane has {} values, expected {TILE_PIXELS}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("plane contains non-finite values"));
        }
        Ok(ChannelPlane(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.0[row * TILE_SIZE + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { mean: 0.0, std: 1.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileMeta {
    pub profile_id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub channel_names: Vec<String>,
    pub channel_count: usize,
    #[serde(default)]
    pub temporal: bool,
    #[serde(default)]
    pub dates: Vec<String>,
    pub normalization: Vec<Normalization>,
}

impl ProfileMeta {
    pub fn validate(&self) -> Result<()> {
        validate_id(&self.profile_id)?;
        if self.channel_count == 0 {
            return Err(Error::validation("channel_count must be positive"));
        }
        if self.channel_names.len() != self.channel_count || self.normalization.len() != self.channel_count {
            return Err(Error::validation(format!(
                "profile {}: channel_count {} but {} names and {} normalization entries",
                self.profile_id,
                self.channel_count,
                self.channel_names.len(),
                self.normalization.len()
            )));
        }
        for (i, n) in self.normalization.iter().enumerate() {
            if !n.mean.is_finite() || !n.std.is_finite() || n.std <= 0.0 {
                return Err(Error::validation(format!(
                    "profile {}: channel {i} needs finite mean and std > 0",
                    self.profile_id
                )));
            }
        }
        if self.temporal == self.dates.is_empty() {
            return Err(Error::validation(format!(
                "profile {}: dates must be non-empty exactly when temporal",
                self.profile_id
            )));
        }
        for d in &self.dates {
            NaiveDate::parse_from_str(d, "%Y-%m-%d")
                .map_err(|_| Error::validation(format!("bad ISO-8601 date '{d}'")))?;
        }
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(format!("profile {}: dates not strictly increasing", self.profile_id)));
        }
        Ok(())
    }
}

/// Identifiers used as path components: `[a-z0-9_-]+`.
pub fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-') {
        return Err(Error::validation(format!("identifier '{id}' must match [a-z0-9_-]+")));
    }
    Ok(())
}

/// Writes `bytes` to `path` via a temporary file in the same directory and
/// an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().ok_or_else(|| Error::validation("path has no parent"))?;
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub struct ChannelStore {
    root: PathBuf,
    catalog: RwLock<Vec<ProfileMeta>>,
}

impl ChannelStore {
    /// Opens (or initializes) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let path = root.join("catalog.json");
        let mut catalog: Vec<ProfileMeta> = if path.exists() {
            serde_json::from_slice(&fs::read(&path)?)?
        } else {
            Vec::new()
        };
        let mut ids = BTreeSet::new();
        for m in &catalog {
            m.validate()?;
            if !ids.insert(m.profile_id.clone()) {
                return Err(Error::validation(format!("catalog lists profile '{}' twice", m.profile_id)));
            }
        }
        catalog.sort_by(|a, b| a.profile_id.cmp(&b.profile_id));
        Ok(ChannelStore { root, catalog: RwLock::new(catalog) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn register_profile(&self, meta: ProfileMeta) -> Result<String> {
        meta.validate()?;
        let mut catalog = self.catalog.write().unwrap();
        if catalog.iter().any(|m| m.profile_id == meta.profile_id) {
            return Err(Error::conflict(format!("profile '{}' already registered", meta.profile_id)));
        }
        let id = meta.profile_id.clone();
        let mut next = catalog.clone();
        next.push(meta);
        next.sort_by(|a, b| a.profile_id.cmp(&b.profile_id));
        write_atomic(&self.root.join("catalog.json"), &serde_json::to_vec_pretty(&next)?)?;
        *catalog = next;
        Ok(id)
    }

    /// All profiles, sorted by id.
    pub fn list_profiles(&self) -> Vec<ProfileMeta> {
        self.catalog.read().unwrap().clone()
    }

    pub fn profile(&self, profile_id: &str) -> Result<ProfileMeta> {
        self.catalog
            .read()
            .unwrap()
            .iter()
            .find(|m| m.profile_id == profile_id)
            .cloned()
            .ok_or_else(|| Error::not_found(format!("profile '{profile_id}'")))
    }

    pub fn tile_path(&self, profile_id: &str, date: Option<&str>, tile: TileKey) -> PathBuf {
        let mut p = self.root.join(profile_id);
        if let Some(d) = date {
            p.push(d);
        }
        p.join("16").join(tile.x.to_string()).join(format!("{}.trc", tile.y))
    }

    fn check_date(meta: &ProfileMeta, date: Option<&str>) -> Result<()> {
        match (meta.temporal, date) {
            (true, Some(d)) if meta.dates.iter().any(|x| x == d) => Ok(()),
            (true, Some(d)) => Err(Error::validation(format!("profile {} has no date {d}", meta.profile_id))),
            (true, None) => Err(Error::validation(format!("profile {} is temporal; a date is required", meta.profile_id))),
            (false, Some(_)) => Err(Error::validation(format!("profile {} is not temporal", meta.profile_id))),
            (false, None) => Ok(()),
        }
    }

    pub fn put_tile(&self, profile_id: &str, date: Option<&str>, record: &SparseTileRecord) -> Result<()> {
        let meta = self.profile(profile_id)?;
        Self::check_date(&meta, date)?;
        if record.channels.len() != meta.channel_count {
            return Err(Error::validation(format!(
                "record has {} channels, profile {profile_id} has {}",
                record.channels.len(),
                meta.channel_count
            )));
        }
        let bytes = record.encode()?;
        write_atomic(&self.tile_path(profile_id, date, record.tile), &bytes)
    }

    /// The stored record, if any.
    pub fn get_record(&self, profile_id: &str, tile: TileKey, date: Option<&str>) -> Result<Option<SparseTileRecord>> {
        let meta = self.profile(profile_id)?;
        Self::check_date(&meta, date)?;
        let path = self.tile_path(profile_id, date, tile);
        match fs::read(&path) {
            Ok(bytes) => {
                let rec = SparseTileRecord::decode(&bytes)?;
                if rec.tile != tile || rec.channels.len() != meta.channel_count {
                    return Err(Error::validation(format!("{} does not match its key", path.display())));
                }
                Ok(Some(rec))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Dense planes in catalog channel order; absent tiles are all zeros.
    pub fn get_tile(&self, profile_id: &str, tile: TileKey, date: Option<&str>) -> Result<Vec<ChannelPlane>> {
        let meta = self.profile(profile_id)?;
        Ok(match self.get_record(profile_id, tile, date)? {
            Some(rec) => rec.to_dense(),
            None => vec![ChannelPlane::zeros(); meta.channel_count],
        })
    }

    /// Element-wise sum over every catalog date in `[from, to]`, accumulated
    /// in f64 in date order.
    pub fn aggregate_range(&self, profile_id: &str, tile: TileKey, from: &str, to: &str) -> Result<Vec<ChannelPlane>> {
        let meta = self.profile(profile_id)?;
        if !meta.temporal {
            return Err(Error::validation(format!("profile {profile_id} is not temporal")));
        }
        if from > to {
            return Err(Error::validation(format!("date range {from}..{to} is inverted")));
        }
        let mut acc = vec![vec![0.0f64; TILE_PIXELS]; meta.channel_count];
        for date in meta.dates.iter().filter(|d| d.as_str() >= from && d.as_str() <= to) {
            if let Some(rec) = self.get_record(profile_id, tile, Some(date))? {
                for (sum, entries) in acc.iter_mut().zip(&rec.channels) {
                    for &(i, v) in entries {
                        sum[i as usize] += v as f64;
                    }
                }
            }
        }
        Ok(acc
            .into_iter()
            .map(|s| ChannelPlane(s.into_iter().map(|v| v as f32).collect()))
            .collect())
    }

    /// Tiles with a stored record for the profile (and date), sorted.
    pub fn stored_tiles(&self, profile_id: &str, date: Option<&str>) -> Result<Vec<TileKey>> {
        let meta = self.profile(profile_id)?;
        Self::check_date(&meta, date)?;
        let mut dir = self.root.join(profile_id);
        if let Some(d) = date {
            dir.push(d);
        }
        scan_tile_dir(&dir.join("16"))
    }
}

impl ChannelStore {
    /// Registers `<dir>/profile.json` and copies its tiles, laid out as
    /// `[<date>/]16/<x>/<y>.trc` like the store itself. Every record is
    /// decoded and checked against the profile before anything is written.
    pub fn ingest_profile_dir(&self, dir: &Path) -> Result<ProfileMeta> {
        let meta: ProfileMeta = crate::labels::read_json(&dir.join("profile.json"))?;
        meta.validate()?;
        if self.profile(&meta.profile_id).is_ok() {
            return Err(Error::conflict(format!("profile '{}' already registered", meta.profile_id)));
        }
        let dates: Vec<Option<&str>> = if meta.temporal { meta.dates.iter().map(|d| Some(d.as_str())).collect() } else { vec![None] };
        let mut records = Vec::new();
        for date in dates {
            let base = match date {
                Some(d) => dir.join(d),
                None => dir.to_path_buf(),
            };
            for tile in scan_tile_dir(&base.join("16"))? {
                let path = base.join("16").join(tile.x.to_string()).join(format!("{}.trc", tile.y));
                let rec = SparseTileRecord::decode(&fs::read(&path)?)?;
                if rec.tile != tile || rec.channels.len() != meta.channel_count {
                    return Err(Error::validation(format!("{} does not match its key or the profile", path.display())));
                }
                records.push((date, rec));
            }
        }
        self.register_profile(meta.clone())?;
        for (date, rec) in &records {
            self.put_tile(&meta.profile_id, *date, rec)?;
        }
        Ok(meta)
    }
}

/// Lists `<x>/<y>.<ext>` entries below a zoom-16 directory, sorted.
pub fn scan_tile_dir(dir: &Path) -> Result<Vec<TileKey>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for x_entry in entries {
        let x_entry = x_entry?;
        let Some(x) = x_entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        for y_entry in fs::read_dir(x_entry.path())? {
            let y_entry = y_entry?;
            let name = y_entry.file_name();
            let Some(y) = name.to_str().and_then(|s| s.split('.').next()).and_then(|s| s.parse::<u32>().ok()) else {
                continue;
            };
            if let Ok(t) = TileKey::new(x, y) {
                out.push(t);
            }
        }
    }
    out.sort();
    Ok(out)
}
