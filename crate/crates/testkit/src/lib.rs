//! A synthetic world of bright discs on a noisy background, written in the
//! layouts the platform ingests: a profile directory and WKT labels.

pub mod oracle;

use std::fmt::Write;
use std::fs;
use std::path::Path;

use trinity_core::geo::{unproject, BBox, LatLon, TileKey, PIXEL_ZOOM, TILE_PIXELS, TILE_SIZE};
use trinity_core::rng::Lcg64;
use trinity_core::store::{ChannelPlane, Normalization, ProfileMeta, SparseTileRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disc {
    /// Center in global zoom-24 pixel coordinates.
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

#[derive(Debug, Clone)]
pub struct DiscWorld {
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
    pub discs: Vec<Disc>,
    pub seed: u64,
}

/// Vertices used for a disc's WKT polygon.
pub const DISC_VERTICES: usize = 48;

impl DiscWorld {
    /// `w * h` tiles starting at tile `(x0, y0)`, one disc per tile.
    pub fn new(x0: u32, y0: u32, w: u32, h: u32, seed: u64) -> Self {
        let mut rng = Lcg64::new(seed);
        let mut discs = Vec::new();
        for t in tiles(x0, y0, w, h) {
            let o = t.origin();
            let r = 35.0 + 30.0 * rng.next_f64();
            let cx = o.x as f64 + r + 4.0 + (256.0 - 2.0 * r - 8.0) * rng.next_f64();
            let cy = o.y as f64 + r + 4.0 + (256.0 - 2.0 * r - 8.0) * rng.next_f64();
            discs.push(Disc { cx, cy, r });
        }
        DiscWorld { x0, y0, w, h, discs, seed }
    }

    pub fn tiles(&self) -> Vec<TileKey> {
        tiles(self.x0, self.y0, self.w, self.h)
    }

    pub fn region(&self) -> BBox {
        region(self.x0, self.y0, self.w, self.h)
    }

    /// Whether the pixel center lies in some disc.
    pub fn inside(&self, x: u32, y: u32) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        self.discs.iter().any(|d| (px - d.cx).powi(2) + (py - d.cy).powi(2) <= d.r * d.r)
    }

    /// Channel 0 is +1 inside discs and -1 outside, both with noise;
    /// channels 1 and 2 are pure noise.
    pub fn tile_record(&self, tile: TileKey) -> SparseTileRecord {
        let mut rng = Lcg64::derive(self.seed, ((tile.y as u64) << 32) | tile.x as u64);
        let o = tile.origin();
        let mut planes = vec![vec![0f32; TILE_PIXELS]; 3];
        for i in 0..TILE_PIXELS {
            let (x, y) = (o.x + (i % TILE_SIZE) as u32, o.y + (i / TILE_SIZE) as u32);
            let base = if self.inside(x, y) { 1.0 } else { -1.0 };
            planes[0][i] = (base + 0.3 * (2.0 * rng.next_f64() - 1.0)) as f32;
            planes[1][i] = rng.next_f64() as f32;
            planes[2][i] = (2.0 * rng.next_f64() - 1.0) as f32;
        }
        let planes: Vec<ChannelPlane> = planes.into_iter().map(|p| ChannelPlane::from_values(p).unwrap()).collect();
        SparseTileRecord::from_dense(tile, &planes)
    }

    pub fn profile_meta(&self, profile_id: &str) -> ProfileMeta {
        ProfileMeta {
            profile_id: profile_id.into(),
            name: format!("{profile_id} discs"),
            description: "synthetic disc imagery".into(),
            channel_names: vec!["signal".into(), "noise_a".into(), "noise_b".into()],
            channel_count: 3,
            temporal: false,
            dates: vec![],
            normalization: vec![Normalization::IDENTITY; 3],
        }
    }

    /// Writes `profile.json` and `16/x/y.trc` for every tile.
    pub fn write_profile_dir(&self, dir: &Path, profile_id: &str) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("profile.json"), serde_json::to_vec_pretty(&self.profile_meta(profile_id)).unwrap()).unwrap();
        for t in self.tiles() {
            let p = dir.join(format!("16/{}/{}.trc", t.x, t.y));
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, self.tile_record(t).encode().unwrap()).unwrap();
        }
    }

    /// One polygon per disc, optionally restricted to some tiles' discs.
    pub fn labels_wkt(&self, only: Option<&[TileKey]>) -> String {
        let mut out = String::new();
        for (t, d) in self.tiles().iter().zip(&self.discs) {
            if only.is_some_and(|o| !o.contains(t)) {
                continue;
            }
            out.push_str(&disc_wkt(d));
            out.push('\n');
        }
        out
    }
}

pub fn disc_wkt(d: &Disc) -> String {
    let mut s = String::from("POLYGON ((");
    for k in 0..=DISC_VERTICES {
        let a = 2.0 * std::f64::consts::PI * (k % DISC_VERTICES) as f64 / DISC_VERTICES as f64;
        let p = unproject(d.cx + d.r * a.cos(), d.cy - d.r * a.sin(), PIXEL_ZOOM);
        if k > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{} {}", p.lon, p.lat);
    }
    s.push_str("))");
    s
}

pub fn tiles(x0: u32, y0: u32, w: u32, h: u32) -> Vec<TileKey> {
    (y0..y0 + h).flat_map(|y| (x0..x0 + w).map(move |x| TileKey::new(x, y).unwrap())).collect()
}

/// Bbox spanning exactly the given block of tiles.
pub fn region(x0: u32, y0: u32, w: u32, h: u32) -> BBox {
    let a = TileKey::new(x0, y0).unwrap().bbox();
    let b = TileKey::new(x0 + w - 1, y0 + h - 1).unwrap().bbox();
    BBox::new(LatLon::new(a.min.lon, b.min.lat).unwrap(), LatLon::new(b.max.lon, a.max.lat).unwrap()).unwrap()
}

/// `min_lon,min_lat,max_lon,max_lat` as the CLI and upload form expect.
pub fn bbox_arg(b: &BBox) -> String {
    format!("{},{},{},{}", b.min.lon, b.min.lat, b.max.lon, b.max.lat)
}
