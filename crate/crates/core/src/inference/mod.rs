//! Region prediction on a worker pool, heatmap files and PNG renders.
//!
//! Output layout below a job directory:
//!
//! ```text
//! heatmaps/16/<x>/<y>.trhm
//! viz/<task>/<class>/16/<x>/<y>.png       grayscale confidence
//! viz/<task>/dominant/16/<x>/<y>.png      argmax class through a palette
//! complete.json                           written last
//! ```

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataprep::{ChannelRecipe, DateRange};
use crate::error::{Error, Result};
use crate::geo::{tiles_covering, BBox, TileKey, TILE_PIXELS, TILE_SIZE, TILE_ZOOM};
use crate::kernel::loss::softmax;
use crate::kernel::metrics::argmax;
use crate::kernel::Model;
use crate::store::{scan_tile_dir, write_atomic, ChannelStore, Normalization, ProfileMeta, SparseTileRecord};
use crate::store::{ChannelPlane, Reader};

pub const MAGIC: &[u8; 4] = b"TRHM";
pub const VERSION: u16 = 1;
pub const COMPLETE_FILE: &str = "complete.json";

/// Per-pixel class confidences for every task of one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub tile: TileKey,
    /// Per task `classes x 65536`, class-major then row-major.
    pub tasks: Vec<Vec<f32>>,
    pub class_counts: Vec<usize>,
}

impl Heatmap {
    pub fn confidence(&self, task: usize, class: usize) -> &[f32] {
        &self.tasks[task][class * TILE_PIXELS..(class + 1) * TILE_PIXELS]
    }

    pub fn encode(&self) -> Vec<u8> {
        let total: usize = self.tasks.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(20 + 2 * self.tasks.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(TILE_ZOOM);
        out.extend_from_slice(&self.tile.x.to_le_bytes());
        out.extend_from_slice(&self.tile.y.to_le_bytes());
        out.extend_from_slice(&(self.tasks.len() as u16).to_le_bytes());
        for c in &self.class_counts {
            out.extend_from_slice(&(*c as u16).to_le_bytes());
        }
        for t in &self.tasks {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::validation("not a heatmap file"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::validation(format!("unsupported heatmap version {version}")));
        }
        if r.u8()? != TILE_ZOOM {
            return Err(Error::validation("heatmap zoom must be 16"));
        }
        let tile = TileKey::new(r.u32()?, r.u32()?)?;
        let n = r.u16()? as usize;
        let class_counts = (0..n).map(|_| r.u16().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let mut tasks = Vec::with_capacity(n);
        for &c in &class_counts {
            tasks.push((0..c * TILE_PIXELS).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::validation("trailing bytes after heatmap"));
        }
        Ok(Heatmap { tile, tasks, class_counts })
    }
}

/// 8-bit grayscale of one class's confidence, `round(255 * c)` half up.
pub fn render_heatmap_png(heatmap: &Heatmap, task: usize, class: usize) -> Result<image::GrayImage> {
    if task >= heatmap.tasks.len() || class >= heatmap.class_counts[task] {
        return Err(Error::validation(format!("no task {task} class {class} in heatmap")));
    }
    let px: Vec<u8> = heatmap.confidence(task, class).iter().map(|&c| gray_level(c)).collect();
    Ok(image::GrayImage::from_raw(TILE_SIZE as u32, TILE_SIZE as u32, px).expect("256x256 buffer"))
}

pub fn gray_level(c: f32) -> u8 {
    (255.0 * c.clamp(0.0, 1.0) as f64 + 0.5).floor() as u8
}

/// Per-pixel argmax class (ties to the lowest index) through `palette`.
pub fn dominant_class_render(heatmap: &Heatmap, task: usize, palette: &[[u8; 3]]) -> Result<RgbImage> {
    let classes = *heatmap
        .class_counts
        .get(task)
        .ok_or_else(|| Error::validation(format!("no task {task} in heatmap")))?;
    if palette.len() != classes {
        return Err(Error::validation(format!("palette has {} colors for {classes} classes", palette.len())));
    }
    let t = &heatmap.tasks[task];
    let mut img = RgbImage::new(TILE_SIZE as u32, TILE_SIZE as u32);
    for p in 0..TILE_PIXELS {
        let k = argmax((0..classes).map(|c| t[c * TILE_PIXELS + p]));
        img.put_pixel((p % TILE_SIZE) as u32, (p / TILE_SIZE) as u32, Rgb(palette[k]));
    }
    Ok(img)
}

/// Black background, then evenly spaced hues.
pub fn default_palette(classes: usize) -> Vec<[u8; 3]> {
    const COLORS: [[u8; 3]; 8] = [
        [0, 0, 0],
        [255, 255, 255],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
    ];
    (0..classes)
        .map(|c| if c < COLORS.len() { COLORS[c] } else { [(c * 53 % 256) as u8, (c * 97 % 256) as u8, (c * 151 % 256) as u8] })
        .collect()
}

/// PNG bytes of an image.
pub fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::validation(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

pub fn heatmap_path(out_dir: &Path, tile: TileKey) -> PathBuf {
    out_dir.join(format!("heatmaps/16/{}/{}.trhm", tile.x, tile.y))
}

pub fn viz_path(out_dir: &Path, task: &str, layer: &str, tile: TileKey) -> PathBuf {
    out_dir.join(format!("viz/{task}/{layer}/16/{}/{}.png", tile.x, tile.y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub tiles: Vec<TileKey>,
    pub task_names: Vec<String>,
    pub class_counts: Vec<usize>,
}

/// Forward pass plus per-pixel softmax for one tile.
pub fn predict_tile(store: &ChannelStore, model: &Model<f32>, recipe: &ChannelRecipe, tile: TileKey) -> Result<Heatmap> {
    let image = recipe.image(store, tile)?;
    let trace = model.forward(&image)?;
    Ok(Heatmap {
        tile,
        class_counts: trace.logits.iter().map(|l| l.c).collect(),
        tasks: trace.logits.iter().map(|l| softmax(l).data).collect(),
    })
}

fn write_tile_outputs(out_dir: &Path, model: &Model<f32>, hm: &Heatmap) -> Result<()> {
    write_atomic(&heatmap_path(out_dir, hm.tile), &hm.encode())?;
    for (t, spec) in model.spec.tasks.iter().enumerate() {
        for c in 0..spec.class_count {
            let img = image::DynamicImage::ImageLuma8(render_heatmap_png(hm, t, c)?);
            write_atomic(&viz_path(out_dir, &spec.task_name, &c.to_string(), hm.tile), &encode_png(&img)?)?;
        }
        let dom = dominant_class_render(hm, t, &default_palette(spec.class_count))?;
        write_atomic(&viz_path(out_dir, &spec.task_name, "dominant", hm.tile), &encode_png(&image::DynamicImage::ImageRgb8(dom))?)?;
    }
    Ok(())
}

/// Predicts every tile covering `region` with `workers` threads.
///
/// Tile `i` of the sorted tile list goes to worker `i % workers`; each
/// tile's output depends only on the tile, so files are identical for any
/// worker count. On failure the job's outputs are removed.
pub fn predict_region(
    store: &ChannelStore,
    model: &Model<f32>,
    recipe: &ChannelRecipe,
    region: &BBox,
    date_override: Option<&DateRange>,
    out_dir: &Path,
    workers: usize,
) -> Result<PredictionSummary> {
    if workers == 0 {
        return Err(Error::validation("workers must be at least 1"));
    }
    region.validate()?;
    if recipe.channel_count() != model.spec.in_channels {
        return Err(Error::validation(format!(
            "channel manifest has {} channels, model expects {}",
            recipe.channel_count(),
            model.spec.in_channels
        )));
    }
    let recipe = match date_override {
        Some(r) => {
            if r.from > r.to {
                return Err(Error::validation("date override is inverted"));
            }
            recipe.with_date_range(r)
        }
        None => recipe.clone(),
    };
    let tiles = tiles_covering(region)?;
    if tiles.is_empty() {
        return Err(Error::validation("region covers no tiles"));
    }

    let result = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (tiles, recipe) = (&tiles, &recipe);
                s.spawn(move || -> Result<()> {
                    for tile in tiles.iter().skip(w).step_by(workers) {
                        let hm = predict_tile(store, model, recipe, *tile)?;
                        write_tile_outputs(out_dir, model, &hm)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::validation("prediction worker panicked"))))
            .collect::<Result<Vec<()>>>()
    });
    let summary = PredictionSummary {
        tiles: tiles.clone(),
        task_names: model.spec.tasks.iter().map(|t| t.task_name.clone()).collect(),
        class_counts: model.spec.tasks.iter().map(|t| t.class_count).collect(),
    };
    let complete = result.and_then(|_| {
        let written = scan_tile_dir(&out_dir.join("heatmaps/16"))?;
        if written != tiles {
            return Err(Error::validation(format!("{} of {} heatmaps written", written.len(), tiles.len())));
        }
        write_atomic(&out_dir.join(COMPLETE_FILE), &serde_json::to_vec_pretty(&summary)?)
    });
    if let Err(e) = complete {
        for sub in ["heatmaps", "viz"] {
            let _ = fs::remove_dir_all(out_dir.join(sub));
        }
        let _ = fs::remove_file(out_dir.join(COMPLETE_FILE));
        return Err(e);
    }
    Ok(summary)
}

/// Summary of a finished prediction, or a state error if it never completed.
pub fn completed_summary(out_dir: &Path) -> Result<PredictionSummary> {
    match fs::read(out_dir.join(COMPLETE_FILE)) {
        Ok(b) => Ok(serde_json::from_slice(&b)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::state(format!("prediction in {} has not completed", out_dir.display())))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn read_heatmap(out_dir: &Path, tile: TileKey) -> Result<Heatmap> {
    let bytes = fs::read(heatmap_path(out_dir, tile)).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::not_found(format!("heatmap for tile {tile}")),
        _ => Error::Io(e),
    })?;
    Heatmap::decode(&bytes)
}

/// Registers a completed prediction as a non-temporal profile with one
/// channel per (task, class), task-major.
pub fn ingest_prediction_as_profile(store: &ChannelStore, out_dir: &Path, new_profile_id: &str) -> Result<String> {
    let summary = completed_summary(out_dir)?;
    let mut names = Vec::new();
    for (t, &c) in summary.task_names.iter().zip(&summary.class_counts) {
        names.extend((0..c).map(|k| format!("{t}.{k}")));
    }
    let meta = ProfileMeta {
        profile_id: new_profile_id.into(),
        name: new_profile_id.into(),
        description: format!("prediction confidences from {}", out_dir.display()),
        channel_count: names.len(),
        normalization: vec![Normalization::IDENTITY; names.len()],
        channel_names: names,
        temporal: false,
        dates: Vec::new(),
    };
    let id = store.register_profile(meta)?;
    for &tile in &summary.tiles {
        let hm = read_heatmap(out_dir, tile)?;
        let planes: Vec<ChannelPlane> = hm
            .tasks
            .iter()
            .flat_map(|t| t.chunks_exact(TILE_PIXELS).map(|c| ChannelPlane::from_values(c.to_vec())))
            .collect::<Result<_>>()?;
        store.put_tile(&id, None, &SparseTileRecord::from_dense(tile, &planes))?;
    }
    Ok(id)
}
