//! Geometry to label-plane rasterization.
//!
//! Membership rules, all in tile-local zoom-24 pixel space:
//! - point: the pixel containing it;
//! - linestring: the 8-connected digital trace between each segment's
//!   endpoint pixels;
//! - polygon: pixels whose center is inside by the even-odd rule over all
//!   rings (holes subtract).
//!
//! Later geometries overwrite earlier ones.

use crate::error::{Error, Result};
use crate::geo::{lonlat_to_pixel, project, Geometry, LatLon, PixelCoord, Polygon, Shape, TileKey, PIXEL_ZOOM, TILE_PIXELS, TILE_SIZE};

pub const IGNORE: u8 = 255;

/// Class index a geometry paints with. Untagged geometries are foreground (1).
pub fn effective_tag(g: &Geometry) -> u32 {
    g.class_tag.unwrap_or(1)
}

pub fn check_tag(g: &Geometry, class_count: usize) -> Result<u8> {
    let tag = effective_tag(g);
    if tag == 0 || tag as usize >= class_count {
        return Err(Error::validation(format!(
            "class tag {tag} outside [1, {}] for a {class_count}-class task",
            class_count - 1
        )));
    }
    Ok(tag as u8)
}

/// Rasterizes `geometries` onto one 256x256 plane for `tile`.
pub fn rasterize(geometries: &[Geometry], tile: TileKey, class_count: usize) -> Result<Vec<u8>> {
    if !(2..=255).contains(&class_count) {
        return Err(Error::validation(format!("class_count {class_count} outside [2, 255]")));
    }
    let tags = geometries.iter().map(|g| check_tag(g, class_count)).collect::<Result<Vec<_>>>()?;
    let mut plane = vec![0u8; TILE_PIXELS];
    for (g, tag) in geometries.iter().zip(tags) {
        paint(&mut plane, &g.shape, tile, tag)?;
    }
    Ok(plane)
}

fn paint(plane: &mut [u8], shape: &Shape, tile: TileKey, tag: u8) -> Result<()> {
    match shape {
        Shape::Point(p) => {
            let px = lonlat_to_pixel(*p, PIXEL_ZOOM)?;
            if let Some(i) = local_index(px, tile) {
                plane[i] = tag;
            }
        }
        Shape::LineString(vertices) => {
            let pixels = vertices
                .iter()
                .map(|v| lonlat_to_pixel(*v, PIXEL_ZOOM))
                .collect::<Result<Vec<_>>>()?;
            for w in pixels.windows(2) {
                trace_segment(w[0], w[1], tile, |i| plane[i] = tag);
            }
        }
        Shape::Polygon(p) => fill_polygon(plane, p, tile, tag),
        Shape::MultiPolygon(ps) => {
            for p in ps {
                fill_polygon(plane, p, tile, tag);
            }
        }
    }
    Ok(())
}

fn local_index(px: PixelCoord, tile: TileKey) -> Option<usize> {
    let o = tile.origin();
    let dx = px.x.checked_sub(o.x)? as usize;
    let dy = px.y.checked_sub(o.y)? as usize;
    (dx < TILE_SIZE && dy < TILE_SIZE).then_some(dy * TILE_SIZE + dx)
}

/// Tile-local continuous pixel coordinates of a vertex.
pub fn local_xy(v: LatLon, tile: TileKey) -> (f64, f64) {
    let (x, y) = project(v, PIXEL_ZOOM);
    let o = tile.origin();
    (x - o.x as f64, y - o.y as f64)
}

/// Walks the digital line from `a` to `b` (both inclusive) and calls `hit`
/// with the local index of every pixel that falls inside `tile`.
///
/// Step `t` of `n = max(|dx|, |dy|)` moves one pixel along the major axis;
/// the minor offset is `floor((2 t |d_minor| + n) / 2n)`, i.e. the exact
/// line position rounded half up, maintained incrementally.
pub fn trace_segment(a: PixelCoord, b: PixelCoord, tile: TileKey, mut hit: impl FnMut(usize)) {
    let o = tile.origin();
    let (lo_x, hi_x) = (a.x.min(b.x), a.x.max(b.x));
    let (lo_y, hi_y) = (a.y.min(b.y), a.y.max(b.y));
    let s = TILE_SIZE as u32;
    if hi_x < o.x || lo_x >= o.x + s || hi_y < o.y || lo_y >= o.y + s {
        return;
    }
    let dx = b.x as i64 - a.x as i64;
    let dy = b.y as i64 - a.y as i64;
    let n = dx.abs().max(dy.abs());
    let x_major = dx.abs() >= dy.abs();
    let (major_step, minor_step) = if x_major { (dx.signum(), dy.signum()) } else { (dy.signum(), dx.signum()) };
    let minor_len = if x_major { dy.abs() } else { dx.abs() };
    let mut acc = n; // 2 t |d_minor| + n
    let mut minor = 0i64;
    for t in 0..=n {
        if t > 0 {
            acc += 2 * minor_len;
            if acc >= 2 * n {
                acc -= 2 * n;
                minor += 1;
            }
        }
        let (ox, oy) = if x_major { (t * major_step, minor * minor_step) } else { (minor * minor_step, t * major_step) };
        let px = PixelCoord { x: (a.x as i64 + ox) as u32, y: (a.y as i64 + oy) as u32 };
        if let Some(i) = local_index(px, tile) {
            hit(i);
        }
    }
}

fn fill_polygon(plane: &mut [u8], poly: &Polygon, tile: TileKey, tag: u8) {
    let rings: Vec<Vec<(f64, f64)>> =
        poly.rings().map(|r| r.iter().map(|v| local_xy(*v, tile)).collect()).collect();
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(_, y) in rings.iter().flatten() {
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if y_max < 0.0 || y_min > TILE_SIZE as f64 {
        return;
    }
    let mut crossings = Vec::new();
    for row in 0..TILE_SIZE {
        let yc = row as f64 + 0.5;
        if yc < y_min || yc > y_max {
            continue;
        }
        crossings.clear();
        for ring in &rings {
            for e in ring.windows(2) {
                if let Some(x) = edge_crossing(e[0], e[1], yc) {
                    crossings.push(x);
                }
            }
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(f64::total_cmp);
        // A center is inside iff an odd number of crossings lie strictly to
        // its right, i.e. iff it sits in some [c[2k], c[2k+1]).
        for pair in crossings.chunks(2) {
            let [start, end] = [pair[0], *pair.get(1).unwrap_or(&pair[0])];
            let first = (start - 0.5).ceil().max(0.0);
            let mut col = first as usize;
            while col < TILE_SIZE && (col as f64 + 0.5) < end {
                if col as f64 + 0.5 >= start {
                    plane[row * TILE_SIZE + col] = tag;
                }
                col += 1;
            }
        }
    }
}

/// x where edge `a -> b` crosses the horizontal line `y = yc`, using the
/// half-open rule so shared vertices are counted once.
#[inline]
pub fn edge_crossing(a: (f64, f64), b: (f64, f64), yc: f64) -> Option<f64> {
    if (a.1 > yc) != (b.1 > yc) {
        Some(a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1))
    } else {
        None
    }
}
