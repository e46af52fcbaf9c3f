use std::f64::consts::PI;
use std::ops::RangeInclusive;

use super::{BBox, LatLon, PixelCoord, TileKey, PIXEL_ZOOM, TILE_SIZE, TILE_ZOOM};
use crate::error::{Error, Result};

const EQUATOR_M: f64 = 40_075_016.686;

// Inverse projection followed by forward projection can land a hair below an
// integer grid line; anything this close (in grid cells) snaps onto it.
const SNAP: f64 = 1e-6;

fn snap_floor(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v.floor()
    }
}

fn snap_ceil(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v.ceil()
    }
}

fn check_zoom(zoom: u8) -> Result<()> {
    if zoom > PIXEL_ZOOM {
        return Err(Error::Domain(format!("zoom {zoom} outside [0, 24]")));
    }
    Ok(())
}

/// Continuous grid coordinates at `zoom` (unfloored, unclamped).
pub fn project(p: LatLon, zoom: u8) -> (f64, f64) {
    let n = (1u64 << zoom) as f64;
    let phi = p.lat.to_radians();
    let x = (p.lon + 180.0) / 360.0 * n;
    let y = (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0 * n;
    (x, y)
}

/// Inverse of [`project`] for continuous grid coordinates.
pub fn unproject(x: f64, y: f64, zoom: u8) -> LatLon {
    let n = (1u64 << zoom) as f64;
    let lon = x * 360.0 / n - 180.0;
    let lat = (PI * (1.0 - 2.0 * y / n)).sinh().atan().to_degrees();
    LatLon { lon, lat }
}

pub fn lonlat_to_pixel(p: LatLon, zoom: u8) -> Result<PixelCoord> {
    check_zoom(zoom)?;
    p.validate()?;
    let max = ((1u64 << zoom) - 1) as f64;
    let (x, y) = project(p, zoom);
    Ok(PixelCoord {
        x: snap_floor(x).clamp(0.0, max) as u32,
        y: snap_floor(y).clamp(0.0, max) as u32,
    })
}

/// Lon/lat of the pixel's top-left corner.
pub fn pixel_to_lonlat(px: PixelCoord, zoom: u8) -> Result<LatLon> {
    check_zoom(zoom)?;
    let n = 1u64 << zoom;
    if px.x as u64 >= n || px.y as u64 >= n {
        return Err(Error::Domain(format!("pixel ({}, {}) outside zoom {zoom} grid", px.x, px.y)));
    }
    Ok(unproject(px.x as f64, px.y as f64, zoom))
}

/// Zoom-24 pixel to its zoom-16 tile and row-major index inside the tile.
pub fn pixel_to_tile(px: PixelCoord) -> (TileKey, usize) {
    let s = TILE_SIZE as u32;
    let tile = TileKey { x: px.x / s, y: px.y / s };
    let local = (px.y % s) as usize * TILE_SIZE + (px.x % s) as usize;
    (tile, local)
}

/// Inclusive x and y cell ranges at `zoom` touched by `bbox`. The east and
/// south edges are exclusive when they fall exactly on a cell boundary, so
/// a bbox equal to one cell's extent covers only that cell.
pub fn tile_range(bbox: &BBox, zoom: u8) -> Result<(RangeInclusive<u32>, RangeInclusive<u32>)> {
    check_zoom(zoom)?;
    bbox.validate()?;
    let max = ((1u64 << zoom) - 1) as f64;
    let (x0, y0) = project(LatLon { lon: bbox.min.lon, lat: bbox.max.lat }, zoom);
    let (x1, y1) = project(LatLon { lon: bbox.max.lon, lat: bbox.min.lat }, zoom);
    let axis = |lo: f64, hi: f64| {
        let a = snap_floor(lo).clamp(0.0, max);
        let b = if hi > lo { (snap_ceil(hi) - 1.0).clamp(0.0, max) } else { a };
        a as u32..=b.max(a) as u32
    };
    Ok((axis(x0, x1), axis(y0, y1)))
}

/// All zoom-16 tiles intersecting `bbox`, row-major.
pub fn tiles_covering(bbox: &BBox) -> Result<Vec<TileKey>> {
    let (xs, ys) = tile_range(bbox, TILE_ZOOM)?;
    Ok(ys.flat_map(|y| xs.clone().map(move |x| TileKey { x, y })).collect())
}

/// Meters per grid cell at the given latitude.
pub fn ground_resolution(lat: f64, zoom: u8) -> f64 {
    EQUATOR_M * lat.to_radians().cos() / (1u64 << zoom) as f64
}
