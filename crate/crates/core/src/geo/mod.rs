//! Web Mercator addressing and vector geometry.
//!
//! The platform works on a fixed grid: zoom-24 pixels (about 2.39 m at the
//! equator) grouped into zoom-16 tiles of 256x256 pixels. Every raster in the
//! system (channels, labels, heatmaps) is one tile's worth of pixels.

mod mercator;
mod wkt;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mercator::{
    ground_resolution, lonlat_to_pixel, pixel_to_lonlat, pixel_to_tile, project, tile_range,
    tiles_covering, unproject,
};
pub use wkt::{parse_wkt, parse_wkt_line, serialize_wkt};

pub const PIXEL_ZOOM: u8 = 24;
pub const TILE_ZOOM: u8 = 16;
pub const TILE_SIZE: usize = 256;
pub const TILE_PIXELS: usize = TILE_SIZE * TILE_SIZE;
pub const MAX_LAT: f64 = 85.05112878;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lon: f64,
    pub lat: f64,
}

impl LatLon {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        let p = LatLon { lon, lat };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lon.is_finite() || !self.lat.is_finite() {
            return Err(Error::Domain(format!("non-finite coordinate {self}")));
        }
        if !(-180.0..=180.0).contains(&self.lon) || !(-MAX_LAT..=MAX_LAT).contains(&self.lat) {
            return Err(Error::Domain(format!("coordinate {self} outside Web Mercator bounds")));
        }
        Ok(())
    }
}

impl fmt::Display for LatLon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lon, self.lat)
    }
}

/// A zoom-24 pixel, origin top-left, y growing southwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelCoord {
    pub x: u32,
    pub y: u32,
}

/// A zoom-16 tile. Ordered row-major (by `y`, then `x`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileKey {
    pub x: u32,
    pub y: u32,
}

impl TileKey {
    pub fn new(x: u32, y: u32) -> Result<Self> {
        if x >= 1 << TILE_ZOOM || y >= 1 << TILE_ZOOM {
            return Err(Error::Domain(format!("tile ({x}, {y}) outside the zoom-16 grid")));
        }
        Ok(TileKey { x, y })
    }

    /// Top-left zoom-24 pixel of the tile.
    pub fn origin(&self) -> PixelCoord {
        PixelCoord { x: self.x * TILE_SIZE as u32, y: self.y * TILE_SIZE as u32 }
    }

    /// Global pixel for a row-major local index.
    pub fn pixel(&self, local_index: usize) -> PixelCoord {
        let o = self.origin();
        PixelCoord {
            x: o.x + (local_index % TILE_SIZE) as u32,
            y: o.y + (local_index / TILE_SIZE) as u32,
        }
    }

    /// Lon/lat rectangle covered by the tile.
    pub fn bbox(&self) -> BBox {
        let nw = unproject(self.x as f64, self.y as f64, TILE_ZOOM);
        let se = unproject((self.x + 1) as f64, (self.y + 1) as f64, TILE_ZOOM);
        BBox { min: LatLon { lon: nw.lon, lat: se.lat }, max: LatLon { lon: se.lon, lat: nw.lat } }
    }
}

impl Ord for TileKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for TileKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for TileKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "16/{}/{}", self.x, self.y)
    }
}

/// Lon/lat rectangle; `min` is the south-west corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: LatLon,
    pub max: LatLon,
}

impl BBox {
    pub fn new(min: LatLon, max: LatLon) -> Result<Self> {
        let b = BBox { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        self.min.validate()?;
        self.max.validate()?;
        if self.min.lon > self.max.lon || self.min.lat > self.max.lat {
            return Err(Error::Domain(format!("inverted bbox {} .. {}", self.min, self.max)));
        }
        Ok(())
    }

    /// Parses `lon_min,lat_min,lon_max,lat_max`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::validation(format!("bad bbox '{s}': {e}")))?;
        if parts.len() != 4 {
            return Err(Error::validation(format!("bbox '{s}' needs 4 numbers")));
        }
        BBox::new(LatLon { lon: parts[0], lat: parts[1] }, LatLon { lon: parts[2], lat: parts[3] })
    }
}

/// A closed ring plus optional holes.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Vec<LatLon>,
    pub holes: Vec<Vec<LatLon>>,
}

impl Polygon {
    pub fn rings(&self) -> impl Iterator<Item = &Vec<LatLon>> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Point(LatLon),
    LineString(Vec<LatLon>),
    Polygon(Polygon),
    MultiPolygon(Vec<Polygon>),
}

impl Shape {
    pub fn kind(&self) -> &'static str {
        match self {
            Shape::Point(_) => "point",
            Shape::LineString(_) => "linestring",
            Shape::Polygon(_) => "polygon",
            Shape::MultiPolygon(_) => "multipolygon",
        }
    }

    pub fn vertices(&self) -> Box<dyn Iterator<Item = &LatLon> + '_> {
        match self {
            Shape::Point(p) => Box::new(std::iter::once(p)),
            Shape::LineString(v) => Box::new(v.iter()),
            Shape::Polygon(p) => Box::new(p.rings().flatten()),
            Shape::MultiPolygon(ps) => Box::new(ps.iter().flat_map(|p| p.rings().flatten())),
        }
    }
}

/// A shape with an optional class tag. Serialized as `{"wkt", "class_tag"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryDoc", into = "GeometryDoc")]
pub struct Geometry {
    pub shape: Shape,
    pub class_tag: Option<u32>,
}

impl Geometry {
    pub fn new(shape: Shape, class_tag: Option<u32>) -> Result<Self> {
        let g = Geometry { shape, class_tag };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for v in self.shape.vertices() {
            v.validate()?;
        }
        match &self.shape {
            Shape::Point(_) => Ok(()),
            Shape::LineString(v) if v.len() < 2 => {
                Err(Error::validation("linestring needs at least 2 vertices"))
            }
            Shape::LineString(_) => Ok(()),
            Shape::Polygon(p) => validate_polygon(p),
            Shape::MultiPolygon(ps) if ps.is_empty() => {
                Err(Error::validation("multipolygon has no polygons"))
            }
            Shape::MultiPolygon(ps) => ps.iter().try_for_each(validate_polygon),
        }
    }

    pub fn to_wkt(&self) -> String {
        serialize_wkt(&self.shape)
    }

    /// Lon/lat bounding box of all vertices.
    pub fn bbox(&self) -> BBox {
        let mut min = LatLon { lon: f64::INFINITY, lat: f64::INFINITY };
        let mut max = LatLon { lon: f64::NEG_INFINITY, lat: f64::NEG_INFINITY };
        for v in self.shape.vertices() {
            min.lon = min.lon.min(v.lon);
            min.lat = min.lat.min(v.lat);
            max.lon = max.lon.max(v.lon);
            max.lat = max.lat.max(v.lat);
        }
        BBox { min, max }
    }
}

fn validate_polygon(p: &Polygon) -> Result<()> {
    for ring in p.rings() {
        if ring.len() < 2 || ring.first() != ring.last() {
            return Err(Error::validation("polygon ring is not closed"));
        }
        let mut distinct: Vec<(u64, u64)> =
            ring[..ring.len() - 1].iter().map(|v| (v.lon.to_bits(), v.lat.to_bits())).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(Error::validation("polygon ring needs at least 3 distinct vertices"));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GeometryDoc {
    wkt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_tag: Option<u32>,
}

impl TryFrom<GeometryDoc> for Geometry {
    type Error = Error;

    fn try_from(doc: GeometryDoc) -> Result<Self> {
        let (g, _) = parse_wkt_line(&doc.wkt, 1)?;
        Geometry::new(g.shape, doc.class_tag)
    }
}

impl From<Geometry> for GeometryDoc {
    fn from(g: Geometry) -> Self {
        GeometryDoc { wkt: g.to_wkt(), class_tag: g.class_tag }
    }
}
