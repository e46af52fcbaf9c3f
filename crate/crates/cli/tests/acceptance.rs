//! Acceptance run: one line per criterion, nonzero exit if any fails.
//! `cargo test -p trinity-cli --test acceptance -- 3 9` runs a subset.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::Utc;
use common::{trinity, Server};
use serde_json::{json, Value};
use trinity_core::dataprep::{ChannelRecipe, DatasetSpec};
use trinity_core::geo::*;
use trinity_core::inference::{heatmap_path, predict_region, read_heatmap, Heatmap, PredictionSummary, COMPLETE_FILE};
use trinity_core::kernel::gradcheck::gradient_check;
use trinity_core::kernel::loss::multi_task_loss;
use trinity_core::kernel::metrics::{evaluate, Confusion, Split, TaskMetrics};
use trinity_core::kernel::*;
use trinity_core::labels::{rasterize, IGNORE};
use trinity_core::labels::TaskSpec;
use trinity_core::postprocess::{map_match, weighted_dbscan, RoadSegment, WeightedPixel};
use trinity_core::rng::Lcg64;
use trinity_core::store::{ChannelStore, Normalization, ProfileMeta, SparseTileRecord};
use trinity_core::Error;
use trinity_service::meta::Collection;
use trinity_service::model::{ExperimentConfig, Job, JobKind, JobStatus};
use trinity_service::service::UploadLabelsRequest;
use trinity_service::state::{Event, ExperimentState};
use trinity_service::{Service, ServiceConfig};
use trinity_testkit::{bbox_arg, oracle, DiscWorld};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    id: u32,
    title: &'static str,
    limit_s: Option<f64>,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, title: "ground resolution at the equator, zoom 24", limit_s: None, run: c01_ground_resolution },
    Criterion { id: 2, title: "pixel to lon/lat to pixel round trip", limit_s: Some(1.0), run: c02_round_trip },
    Criterion { id: 3, title: "sparse tile codec and date aggregation", limit_s: Some(5.0), run: c03_codec },
    Criterion { id: 4, title: "rasterization against per-pixel oracle", limit_s: Some(30.0), run: c04_rasterize },
    Criterion { id: 5, title: "gradient check, fcn_mini and unet_mini", limit_s: Some(120.0), run: c05_gradients },
    Criterion { id: 6, title: "loss on uniform logits and ignored pixels", limit_s: None, run: c06_loss },
    Criterion { id: 7, title: "separable task learned by unet_mini", limit_s: Some(600.0), run: c07_learns },
    Criterion { id: 8, title: "evaluation against brute-force confusion", limit_s: None, run: c08_evaluate },
    Criterion { id: 9, title: "region prediction independent of workers", limit_s: Some(120.0), run: c09_predict },
    Criterion { id: 10, title: "weighted DBSCAN against naive reference", limit_s: None, run: c10_dbscan },
    Criterion { id: 11, title: "map matching against all-pairs reference", limit_s: None, run: c11_map_match },
    Criterion { id: 12, title: "state machine sweep and crash recovery", limit_s: None, run: c12_state_machine },
    Criterion { id: 13, title: "active learning selection and completion", limit_s: None, run: c13_active_learning },
    Criterion { id: 14, title: "AutoML independent of parallelism", limit_s: None, run: c14_automl },
    Criterion { id: 15, title: "full lifecycle through the CLI", limit_s: Some(900.0), run: c15_lifecycle },
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panic: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let result = match (result, c.limit_s) {
            (Ok(_), Some(limit)) if secs > limit => Err(format!("took {secs:.1} s, limit {limit} s")),
            (r, _) => r,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        if result.is_err() {
            failed += 1;
        }
        println!("criterion {:02} {status}  {}  ({detail}; {secs:.2} s)", c.id, c.title);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn c01_ground_resolution() -> Outcome {
    let r = ground_resolution(0.0, 24);
    ensure!((2.37..=2.40).contains(&r), "{r} m/px");
    Ok(format!("{r:.4} m/px"))
}

fn c02_round_trip() -> Outcome {
    let mut rng = Lcg64::new(2);
    let world = 1usize << 24;
    for _ in 0..10_000 {
        let px = PixelCoord { x: rng.below(world) as u32, y: rng.below(world) as u32 };
        let back = lonlat_to_pixel(pixel_to_lonlat(px, 24).map_err(|e| e.to_string())?, 24).map_err(|e| e.to_string())?;
        ensure!(back == px, "{px:?} came back as {back:?}");
    }
    Ok("10000 pixels exact".into())
}

fn random_tile(rng: &mut Lcg64) -> TileKey {
    TileKey::new(1000 + rng.below(60_000) as u32, 1000 + rng.below(60_000) as u32).unwrap()
}

fn random_record(rng: &mut Lcg64, tile: TileKey, kind: usize) -> SparseTileRecord {
    let value = |rng: &mut Lcg64| (rng.next_f64() * 200.0 - 100.0) as f32 + 0.25;
    let channels = (0..3)
        .map(|_| match kind {
            0 => vec![],
            1 => vec![(rng.below(TILE_PIXELS) as u16, value(rng))],
            2 => (0..TILE_PIXELS).map(|i| (i as u16, value(rng))).collect(),
            _ => {
                let density = rng.next_f64();
                let mut out = vec![];
                for i in 0..TILE_PIXELS {
                    if rng.next_f64() < density * 0.2 {
                        out.push((i as u16, value(rng)));
                    }
                }
                out
            }
        })
        .collect();
    SparseTileRecord { tile, channels }
}

fn c03_codec() -> Outcome {
    let mut rng = Lcg64::new(3);
    for i in 0..100 {
        let tile = random_tile(&mut rng);
        let rec = random_record(&mut rng, tile, i % 4);
        let bytes = rec.encode().map_err(|e| e.to_string())?;
        let back = SparseTileRecord::decode(&bytes).map_err(|e| e.to_string())?;
        ensure!(back == rec, "record {i} changed");
        ensure!(back.encode().unwrap() == bytes, "record {i} re-encodes differently");
        let dense = back.to_dense();
        for (plane, entries) in dense.iter().zip(&rec.channels) {
            let nz = plane.values().iter().filter(|v| **v != 0.0).count();
            ensure!(nz == entries.len(), "record {i} dense count");
            for &(p, v) in entries {
                ensure!(plane.values()[p as usize].to_bits() == v.to_bits(), "record {i} value at {p}");
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let store = ChannelStore::open(dir.path()).map_err(|e| e.to_string())?;
    let dates = ["2024-01-01", "2024-02-01", "2024-03-01"];
    store
        .register_profile(ProfileMeta {
            profile_id: "t".into(),
            name: "t".into(),
            description: String::new(),
            channel_names: vec!["a".into(), "b".into(), "c".into()],
            channel_count: 3,
            temporal: true,
            dates: dates.iter().map(|d| d.to_string()).collect(),
            normalization: vec![Normalization::IDENTITY; 3],
        })
        .map_err(|e| e.to_string())?;
    let tiles: Vec<TileKey> = (0..4).map(|_| random_tile(&mut rng)).collect();
    let mut written = vec![vec![None; dates.len()]; tiles.len()];
    for (ti, &tile) in tiles.iter().enumerate() {
        for (di, date) in dates.iter().enumerate() {
            if (ti + di) % 4 == 3 {
                continue;
            }
            let rec = random_record(&mut rng, tile, 1 + (ti + di) % 3);
            store.put_tile("t", Some(date), &rec).map_err(|e| e.to_string())?;
            written[ti][di] = Some(rec.to_dense());
        }
    }
    for (ti, &tile) in tiles.iter().enumerate() {
        for (from, to) in [(0, 2), (1, 2), (0, 0)] {
            let got = store.aggregate_range("t", tile, dates[from], dates[to]).map_err(|e| e.to_string())?;
            for c in 0..3 {
                for p in 0..TILE_PIXELS {
                    let mut sum = 0.0f64;
                    for planes in written[ti][from..=to].iter().flatten() {
                        sum += planes[c].values()[p] as f64;
                    }
                    ensure!(got[c].values()[p].to_bits() == (sum as f32).to_bits(), "tile {ti} channel {c} pixel {p}");
                }
            }
        }
    }
    Ok("100 records, 4 tiles x 3 ranges".into())
}

/// Integer plus a fraction kept away from pixel edges and centers.
fn off_grid(rng: &mut Lcg64, lo: i64, hi: i64) -> f64 {
    let f = 0.1 + 0.3 * rng.next_f64();
    let f = if rng.next_f64() < 0.5 { f } else { f + 0.5 };
    (lo + rng.below((hi - lo) as usize) as i64) as f64 + f
}

fn at(tile: TileKey, x: f64, y: f64) -> LatLon {
    let o = tile.origin();
    unproject(o.x as f64 + x, o.y as f64 + y, PIXEL_ZOOM)
}

fn star(rng: &mut Lcg64, tile: TileKey, cx: f64, cy: f64, r: f64) -> Vec<LatLon> {
    let n = 3 + rng.below(10);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.next_f64() * std::f64::consts::TAU).collect();
    angles.sort_by(f64::total_cmp);
    let mut ring: Vec<LatLon> = angles
        .iter()
        .map(|a| {
            let rr = r * (0.3 + 0.7 * rng.next_f64());
            let x = (cx + rr * a.cos()).floor() as i64;
            let y = (cy + rr * a.sin()).floor() as i64;
            at(tile, off_grid(rng, x, x + 1), off_grid(rng, y, y + 1))
        })
        .collect();
    ring.push(ring[0]);
    ring
}

fn local(tile: TileKey, ring: &[LatLon]) -> Vec<(f64, f64)> {
    let o = tile.origin();
    ring.iter().map(|v| oracle::pixel_of(*v)).map(|(x, y)| (x - o.x as f64, y - o.y as f64)).collect()
}

fn random_shape(rng: &mut Lcg64, tile: TileKey, kind: usize) -> Shape {
    let poly = |rng: &mut Lcg64, holes: bool| {
        let (cx, cy) = (off_grid(rng, -30, 286), off_grid(rng, -30, 286));
        let r = 5.0 + 150.0 * rng.next_f64();
        let exterior = star(rng, tile, cx, cy, r);
        let holes = if holes { vec![star(rng, tile, cx, cy, r * 0.4)] } else { vec![] };
        Polygon { exterior, holes }
    };
    match kind {
        0 => Shape::Polygon(poly(rng, false)),
        1 => Shape::Polygon(poly(rng, true)),
        2 => Shape::MultiPolygon(vec![poly(rng, false), poly(rng, true)]),
        3 => {
            let n = 2 + rng.below(5);
            Shape::LineString((0..n).map(|_| at(tile, off_grid(rng, -40, 296), off_grid(rng, -40, 296))).collect())
        }
        _ => Shape::Point(at(tile, off_grid(rng, 0, 256), off_grid(rng, 0, 256))),
    }
}

fn raster_oracle(shape: &Shape, tile: TileKey) -> Vec<u8> {
    let mut out = vec![0u8; TILE_PIXELS];
    let o = tile.origin();
    let mut mark = |x: i64, y: i64| {
        let (dx, dy) = (x - o.x as i64, y - o.y as i64);
        if (0..256).contains(&dx) && (0..256).contains(&dy) {
            out[(dy * 256 + dx) as usize] = 1;
        }
    };
    let pixel = |v: &LatLon| {
        let (x, y) = oracle::pixel_of(*v);
        (x.floor() as i64, y.floor() as i64)
    };
    let polys: Vec<&Polygon> = match shape {
        Shape::Polygon(p) => vec![p],
        Shape::MultiPolygon(ps) => ps.iter().collect(),
        Shape::LineString(vs) => {
            for w in vs.windows(2) {
                for (x, y) in oracle::segment_pixels(pixel(&w[0]), pixel(&w[1])) {
                    mark(x, y);
                }
            }
            vec![]
        }
        Shape::Point(p) => {
            let (x, y) = pixel(p);
            mark(x, y);
            vec![]
        }
    };
    for p in polys {
        let rings: Vec<Vec<(f64, f64)>> = p.rings().map(|r| local(tile, r)).collect();
        for (i, inside) in oracle::polygon_members(&rings).into_iter().enumerate() {
            if inside {
                out[i] = 1;
            }
        }
    }
    out
}

fn c04_rasterize() -> Outcome {
    let mut rng = Lcg64::new(4);
    let mut filled = 0;
    for i in 0..50 {
        let tile = random_tile(&mut rng);
        let shape = random_shape(&mut rng, tile, i % 5);
        let want = raster_oracle(&shape, tile);
        let got = rasterize(&[Geometry::new(shape.clone(), None).map_err(|e| e.to_string())?], tile, 2).map_err(|e| e.to_string())?;
        let diff = got.iter().zip(&want).filter(|(a, b)| a != b).count();
        ensure!(diff == 0, "geometry {i} ({}) differs on {diff} pixels", shape.kind());
        filled += want.iter().filter(|v| **v == 1).count();
    }
    Ok(format!("50 geometries, {filled} foreground pixels"))
}

fn c05_gradients() -> Outcome {
    let mut worst = Vec::new();
    for arch in ["fcn_mini", "unet_mini"] {
        let spec = ModelSpec::new(arch, 2, vec![TaskSpec::new("a", 2), TaskSpec::new("b", 3)]);
        let r = gradient_check(&spec, 8, 21, 1e-3).map_err(|e| e.to_string())?;
        let params = Model::<f64>::build(&spec, 0).map_err(|e| e.to_string())?.params.count();
        ensure!(r.checked == params, "{arch}: checked {} of {params}", r.checked);
        ensure!(r.worst_relative <= 1e-4, "{arch}: {r:?}");
        worst.push(format!("{arch} {:.1e} over {params}", r.worst_relative));
    }
    Ok(worst.join(", "))
}

fn c06_loss() -> Outcome {
    let mut rng = Lcg64::new(6);
    let logits: Vec<Vec<Tensor3<f64>>> = (0..3).map(|_| vec![Tensor3::zeros(2, 8, 8)]).collect();
    let labels: Vec<Vec<Vec<u8>>> = (0..3).map(|_| vec![(0..64).map(|_| rng.below(2) as u8).collect()]).collect();
    let refs: Vec<&[Vec<u8>]> = labels.iter().map(|l| l.as_slice()).collect();
    let (loss, _, _) = multi_task_loss(&logits, &refs);
    ensure!((loss - std::f64::consts::LN_2).abs() <= 1e-9, "uniform loss {loss}");

    let logits: Vec<Vec<Tensor3<f64>>> =
        (0..3).map(|_| vec![Tensor3::from_vec(2, 8, 8, (0..128).map(|_| rng.next_f64() * 4.0 - 2.0).collect())]).collect();
    let ignored: Vec<Vec<Vec<u8>>> = (0..3).map(|_| vec![vec![IGNORE; 64]]).collect();
    let refs: Vec<&[Vec<u8>]> = ignored.iter().map(|l| l.as_slice()).collect();
    let (loss0, _, grads) = multi_task_loss(&logits, &refs);
    ensure!(loss0 == 0.0, "ignored loss {loss0}");
    ensure!(grads.iter().flatten().all(|g| g.data.iter().all(|v| *v == 0.0)), "nonzero gradient with every pixel ignored");
    Ok(format!("ln 2 error {:.1e}", (loss - std::f64::consts::LN_2).abs()))
}

/// Channel 0 is a smooth field and the label is its sign; channels 1 and 2
/// are noise.
fn separable(n: usize, size: usize, channels: usize, seed: u64) -> Vec<Example> {
    let mut rng = Lcg64::new(seed);
    (0..n)
        .map(|i| {
            let (fx, fy) = (rng.next_f64() * 0.05 + 0.01, rng.next_f64() * 0.05 + 0.01);
            let (px, py) = (rng.next_f64() * 6.28, rng.next_f64() * 6.28);
            let scale = 256.0 / size as f64;
            let plane = size * size;
            let mut img = vec![0f32; channels * plane];
            let mut lab = vec![0u8; plane];
            for p in 0..plane {
                let (x, y) = ((p % size) as f64 * scale, (p / size) as f64 * scale);
                let v = ((fx * x + px).sin() + (fy * y + py).cos()) as f32;
                img[p] = v;
                for c in 1..channels {
                    img[c * plane + p] = rng.next_f64() as f32 - 0.5;
                }
                lab[p] = (img[p] > 0.0) as u8;
            }
            Example { key: format!("tile{i:02}"), image: Tensor3::from_vec(channels, size, size, img), labels: vec![lab] }
        })
        .collect()
}

fn c07_learns() -> Outcome {
    let data = separable(20, 256, 3, 42);
    let hp = Hyperparams::default();
    ensure!(hp.epochs <= 10, "default epochs {}", hp.epochs);
    let spec = ModelSpec::new("unet_mini", 3, vec![TaskSpec::new("fg", 2)]);
    let out = train(&data[..14], &data[14..], &spec, &hp, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let iou = out.final_val().ok_or("no validation metrics")?.tasks[0].iou[1];
    ensure!(iou >= 0.9, "val foreground IoU {iou:.4}");
    Ok(format!("val foreground IoU {iou:.4} after {} epochs", hp.epochs))
}

/// Metrics from raw counts, written from the definitions.
fn metrics_oracle(cm: &[Vec<u64>]) -> (f64, f64, f64, f64, Vec<f64>) {
    let k = cm.len();
    let div = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    let col = |c: usize| (0..k).map(|t| cm[t][c]).sum::<u64>();
    let row = |c: usize| cm[c].iter().sum::<u64>();
    let iou: Vec<f64> = (0..k).map(|c| div(cm[c][c], row(c) + col(c) - cm[c][c])).collect();
    let total: u64 = (0..k).map(row).sum();
    let acc = div((0..k).map(|c| cm[c][c]).sum(), total);
    let p = (1..k).map(|c| div(cm[c][c], col(c))).sum::<f64>() / (k - 1) as f64;
    let r = (1..k).map(|c| div(cm[c][c], row(c))).sum::<f64>() / (k - 1) as f64;
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (acc, p, r, f1, iou)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn c08_evaluate() -> Outcome {
    let mut rng = Lcg64::new(8);
    let classes = [2usize, 3];
    let spec = ModelSpec::new("fcn_mini", 3, classes.iter().enumerate().map(|(i, &k)| TaskSpec::new(&format!("t{i}"), k)).collect());
    let model = Model::<f32>::build(&spec, 17).map_err(|e| e.to_string())?;
    let size = 16;
    let examples: Vec<Example> = (0..20)
        .map(|i| {
            let img = (0..3 * size * size).map(|_| rng.next_f64() as f32 * 2.0 - 1.0).collect();
            let labels = classes
                .iter()
                .map(|&k| (0..size * size).map(|_| if rng.next_f64() < 0.1 { IGNORE } else { rng.below(k) as u8 }).collect())
                .collect();
            Example { key: format!("r{i}"), image: Tensor3::from_vec(3, size, size, img), labels }
        })
        .collect();
    let got = evaluate(&model, &examples, Split::Val, 0).map_err(|e| e.to_string())?;
    for (t, &k) in classes.iter().enumerate() {
        let mut cm = vec![vec![0u64; k]; k];
        for ex in &examples {
            let logits = &model.forward(&ex.image).map_err(|e| e.to_string())?.logits[t];
            let plane = size * size;
            let pred: Vec<usize> =
                (0..plane).map(|p| oracle::first_argmax(&(0..k).map(|c| logits.data[c * plane + p] as f64).collect::<Vec<_>>())).collect();
            let one = oracle::confusion(&ex.labels[t], &pred, k, IGNORE);
            for a in 0..k {
                for b in 0..k {
                    cm[a][b] += one[a][b];
                }
            }
        }
        let (acc, p, r, f1, iou) = metrics_oracle(&cm);
        let m = &got.tasks[t];
        ensure!(close(m.accuracy, acc) && close(m.precision, p) && close(m.recall, r) && close(m.f1, f1), "task {t}: {m:?} vs {acc} {p} {r} {f1}");
        ensure!(m.iou.iter().zip(&iou).all(|(a, b)| close(*a, *b)), "task {t} IoU {:?} vs {iou:?}", m.iou);
    }

    let mut cm = Confusion::new(2);
    for (truth, pred, n) in [(1, 1, 50), (0, 1, 25), (1, 0, 25), (0, 0, 100)] {
        for _ in 0..n {
            cm.add(truth, pred);
        }
    }
    let m = TaskMetrics::from_confusion("fixture", &cm, 0.0);
    ensure!(close(m.iou[1], 0.5) && close(m.f1, 2.0 / 3.0), "fixture IoU {} F1 {}", m.iou[1], m.f1);
    Ok(format!("20 rasters x 2 tasks; fixture IoU {} F1 {:.4}", m.iou[1], m.f1))
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c09_predict() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let world = DiscWorld::new(20_000, 30_000, 4, 3, 9);
    let store = ChannelStore::open(dir.path().join("store")).map_err(|e| e.to_string())?;
    store.register_profile(world.profile_meta("img")).map_err(|e| e.to_string())?;
    for t in world.tiles() {
        store.put_tile("img", None, &world.tile_record(t)).map_err(|e| e.to_string())?;
    }
    let recipe = ChannelRecipe::resolve(&store, &DatasetSpec::new(&["img"], "unused")).map_err(|e| e.to_string())?;
    let model = Model::<f32>::build(&ModelSpec::new("unet_mini", 3, vec![TaskSpec::new("fg", 2), TaskSpec::new("kind", 3)]), 4)
        .map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for workers in [1, 2, 8] {
        let out = dir.path().join(format!("w{workers}"));
        let s = predict_region(&store, &model, &recipe, &world.region(), None, &out, workers).map_err(|e| e.to_string())?;
        ensure!(s.tiles.len() == 12, "{} tiles", s.tiles.len());
        runs.push(files_under(&out));
    }
    ensure!(runs[0] == runs[1] && runs[0] == runs[2], "outputs differ between worker counts");
    let mut worst = 0f32;
    for t in world.tiles() {
        let hm = read_heatmap(&dir.path().join("w1"), t).map_err(|e| e.to_string())?;
        for (task, &k) in hm.class_counts.clone().iter().enumerate() {
            for p in 0..TILE_PIXELS {
                let s: f32 = (0..k).map(|c| hm.confidence(task, c)[p]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    ensure!(worst <= 1e-5, "class sum off by {worst}");
    Ok(format!("{} files identical, worst class sum error {worst:.1e}", runs[0].len()))
}

fn c10_dbscan() -> Outcome {
    let mut rng = Lcg64::new(10);
    let mut clusters = 0;
    for case in 0..100 {
        let n = 1 + rng.below(300);
        let span = 8 + rng.below(60);
        let pts: Vec<WeightedPixel> = (0..n)
            .map(|_| WeightedPixel { x: 5_000_000 + rng.below(span) as u32, y: 6_000_000 + rng.below(span) as u32, weight: 0.05 + 0.95 * rng.next_f64() })
            .collect();
        let eps = 0.8 + 3.0 * rng.next_f64();
        let min_w = 0.5 + 4.0 * rng.next_f64();
        let got = weighted_dbscan(&pts, eps, min_w).map_err(|e| e.to_string())?;
        ensure!(got == oracle::reference_dbscan(&pts, eps, min_w), "weighted case {case}");
        clusters += got.clusters.len();

        let unit: Vec<WeightedPixel> = pts.iter().map(|p| WeightedPixel { weight: 1.0, ..*p }).collect();
        let k = 1 + rng.below(8);
        let got = weighted_dbscan(&unit, eps, k as f64).map_err(|e| e.to_string())?;
        ensure!(got == oracle::classic_dbscan(&unit, eps, k), "unit-weight case {case}");
    }
    Ok(format!("100 + 100 instances, {clusters} weighted clusters"))
}

fn c11_map_match() -> Outcome {
    let (bx, by) = (5_000_000.0, 6_000_000.0);
    let seg = |id: &str, pts: &[(f64, f64)]| RoadSegment {
        segment_id: id.into(),
        polyline: pts.iter().map(|&(x, y)| unproject(bx + x, by + y, PIXEL_ZOOM)).collect(),
        attributes: Default::default(),
    };
    let mut rng = Lcg64::new(11);
    let mut compared = 0;
    for case in 0..20 {
        let network: Vec<RoadSegment> = (0..1 + rng.below(5))
            .map(|s| {
                let n = 2 + rng.below(4);
                let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.next_f64() * 120.0, rng.next_f64() * 120.0)).collect();
                seg(&format!("s{s}"), &pts)
            })
            .collect();
        let mut pts: Vec<WeightedPixel> = (0..200)
            .map(|_| WeightedPixel { x: bx as u32 + rng.below(140) as u32, y: by as u32 + rng.below(140) as u32, weight: 0.1 + 0.9 * rng.next_f64() })
            .collect();
        let radius = 2.0 + 60.0 * rng.next_f64();
        let tau = if case % 3 == 0 { 0.05 } else { 0.0 };
        let near = map_match(&pts, &network, radius, tau).map_err(|e| e.to_string())?;
        let want = oracle::map_match(&pts, &network, radius, tau);
        ensure!(near.len() == want.len(), "case {case}: {} scores vs {}", near.len(), want.len());
        for (g, (id, sc)) in near.iter().zip(&want) {
            ensure!(&g.segment_id == id && (g.score - sc).abs() <= 1e-12 * sc.abs().max(1.0), "case {case}: {} {} vs {id} {sc}", g.segment_id, g.score);
        }
        compared += want.len();

        pts.extend((0..50).map(|i| WeightedPixel { x: bx as u32 + 100_000 + i, y: by as u32 + 100_000, weight: 1.0 }));
        let far = map_match(&pts, &network, radius, tau).map_err(|e| e.to_string())?;
        ensure!(far == near, "case {case}: unreachable points changed scores");
    }
    Ok(format!("20 networks, {compared} segment scores"))
}

const X0: u32 = 21_000;
const Y0: u32 = 31_000;

struct Env {
    _dir: tempfile::TempDir,
    svc: std::sync::Arc<Service>,
    project: String,
}

fn service_env() -> Result<Env, Error> {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::open(ServiceConfig::new(dir.path().join("data")))?;
    let world = DiscWorld::new(X0, Y0, 1, 1, 42);
    world.write_profile_dir(&dir.path().join("src"), "img");
    svc.ingest_profile(&dir.path().join("src"))?;
    svc.upload_labels(&UploadLabelsRequest {
        label_set_id: "discs".into(),
        tasks: Some("disc:2".into()),
        region: Some(world.region()),
        task: None,
        wkt: world.labels_wkt(None),
    })?;
    let project = svc.create_project("acceptance", "")?.project_id;
    Ok(Env { _dir: dir, svc, project })
}

fn exp_config() -> ExperimentConfig {
    serde_json::from_value(json!({"label_set_id": "discs", "profile_ids": ["img"], "architecture_id": "fcn_mini"})).unwrap()
}

fn c12_state_machine() -> Outcome {
    use Event::*;
    use ExperimentState::*;
    let legal = BTreeSet::from([
        (Draft, StartDataprep, DataPrepRunning),
        (DataPrepRunning, DataprepSucceeded, DataReady),
        (DataPrepRunning, DataprepFailed, Failed),
        (DataReady, StartTraining, Training),
        (Training, TrainingSucceeded, Trained),
        (Training, TrainingFailed, Failed),
        (Trained, StartTraining, Training),
        (Failed, Reset, Draft),
    ]);
    let path = |s: ExperimentState| match s {
        Draft => vec![],
        DataPrepRunning => vec![StartDataprep],
        DataReady => vec![StartDataprep, DataprepSucceeded],
        Training => vec![StartDataprep, DataprepSucceeded, StartTraining],
        Trained => vec![StartDataprep, DataprepSucceeded, StartTraining, TrainingSucceeded],
        Failed => vec![StartDataprep, DataprepFailed],
    };
    let e = service_env().map_err(|e| e.to_string())?;
    let mut succeeded = 0;
    for s in ExperimentState::ALL {
        for ev in Event::ALL {
            let id = e.svc.create_experiment(&e.project, exp_config()).map_err(|e| e.to_string())?.experiment_id;
            for step in path(s) {
                e.svc.transition(&id, step).map_err(|e| e.to_string())?;
            }
            let want = legal.iter().find(|(a, b, _)| *a == s && *b == ev).map(|t| t.2);
            match (e.svc.transition(&id, ev), want) {
                (Ok(x), Some(to)) if x.state == to => succeeded += 1,
                (Err(Error::State(_)), None) if e.svc.experiment(&id).unwrap().state == s => {}
                (got, want) => return Err(format!("{s} + {ev}: got {got:?}, want {want:?}")),
            }
        }
    }
    ensure!(succeeded == legal.len(), "{succeeded} legal transitions");

    let (killed, job) = crash_mid_training()?;
    Ok(format!("{succeeded} of 42 pairs legal; killed server during {killed}, job {job} FAILED after restart"))
}

/// Kills a real server while a training job runs, restarts it on the same
/// data directory and checks what the CLI reports.
fn crash_mid_training() -> Result<(String, String), String> {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    let data = home.join("data");
    let mut srv = Server::start(&data, None);
    let tj = |url: &str, args: &[&str]| -> Result<Value, String> {
        let mut a = vec!["--json"];
        a.extend_from_slice(args);
        let r = trinity(url, home, &a);
        if r.code != 0 {
            return Err(format!("trinity {args:?}: {}", r.stderr.trim()));
        }
        Ok(r.json())
    };
    let world = DiscWorld::new(X0, Y0, 2, 1, 12);
    world.write_profile_dir(&home.join("img"), "img");
    std::fs::write(home.join("labels.wkt"), world.labels_wkt(None)).unwrap();
    tj(&srv.url, &["profile", "ingest", s(&home.join("img"))])?;
    tj(&srv.url, &["labels", "upload", s(&home.join("labels.wkt")), "--label-set", "discs", "--tasks", "disc:2", "--region", &bbox_arg(&world.region())])?;
    let p = tj(&srv.url, &["project", "create", "crash"])?["project_id"].as_str().unwrap().to_string();
    let create = ["exp", "create", "--project", &p, "--label-set", "discs", "--profile", "img", "--arch", "unet_mini", "--epochs", "500"];
    let id = tj(&srv.url, &create)?["experiment_id"].as_str().unwrap().to_string();
    let idle = tj(&srv.url, &create)?["experiment_id"].as_str().unwrap().to_string();
    tj(&srv.url, &["exp", "dataprep", &id, "--wait"])?;
    let job = tj(&srv.url, &["exp", "train", &id])?["job_id"].as_str().unwrap().to_string();
    let start = Instant::now();
    loop {
        let j = tj(&srv.url, &["job", "status", &job])?;
        let st = tj(&srv.url, &["exp", "status", &id])?;
        if j["status"] == "RUNNING" && st["experiment"]["state"] == "TRAINING" {
            break;
        }
        ensure!(start.elapsed() < Duration::from_secs(60), "training never started: {j}");
        std::thread::sleep(Duration::from_millis(50));
    }
    std::thread::sleep(Duration::from_millis(500));
    srv.kill();

    let srv = Server::start(&data, None);
    let j = tj(&srv.url, &["job", "status", &job])?;
    ensure!(j["status"] == "FAILED", "job after restart: {j}");
    let exp = tj(&srv.url, &["exp", "status", &id])?;
    ensure!(exp["experiment"]["state"] == "FAILED", "experiment after restart: {}", exp["experiment"]["state"]);
    let names: Vec<&str> = ExperimentState::ALL.iter().map(|s| s.as_str()).collect();
    let all = tj(&srv.url, &["exp", "list"])?;
    for x in all.as_array().ok_or("exp list is not an array")? {
        ensure!(names.contains(&x["state"].as_str().unwrap_or("")), "illegal state {}", x["state"]);
    }
    let untouched = tj(&srv.url, &["exp", "status", &idle])?;
    ensure!(untouched["experiment"]["state"] == "DRAFT", "idle experiment is {}", untouched["experiment"]["state"]);
    let reset = tj(&srv.url, &["exp", "transition", &id, "reset"])?;
    ensure!(reset["state"] == "DRAFT", "reset gave {}", reset["state"]);
    Ok(("TRAINING".into(), job))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three classes; `kind` 0 is uniform, 1 one-hot, otherwise random.
fn synthetic_heatmap(tile: TileKey, kind: usize, rng: &mut Lcg64) -> Heatmap {
    let mut data = vec![0f32; 3 * TILE_PIXELS];
    for p in 0..TILE_PIXELS {
        let probs: [f32; 3] = match kind {
            0 => [1.0 / 3.0; 3],
            1 => [0.0, 0.0, 1.0],
            _ => {
                let r = [rng.next_f64() + 0.05, rng.next_f64() * 3.0, rng.next_f64()];
                let t: f64 = r.iter().sum();
                [(r[0] / t) as f32, (r[1] / t) as f32, (r[2] / t) as f32]
            }
        };
        for c in 0..3 {
            data[c * TILE_PIXELS + p] = probs[c];
        }
    }
    Heatmap { tile, tasks: vec![data], class_counts: vec![3] }
}

fn c13_active_learning() -> Outcome {
    let e = service_env().map_err(|e| e.to_string())?;
    let src = e.svc.create_experiment(&e.project, exp_config()).map_err(|e| e.to_string())?.experiment_id;
    let job = Job {
        job_id: "j-0900".into(),
        kind: JobKind::Prediction,
        experiment_id: src.clone(),
        status: JobStatus::Succeeded,
        idempotency_key: None,
        params: json!({}),
        checkpoint_epoch: Some(1),
        result: None,
        error: None,
        created_at: Utc::now(),
        finished_at: Some(Utc::now()),
    };
    e.svc.meta().write().put(Collection::Jobs, &job.job_id, &job).map_err(|e| e.to_string())?;
    let mut rng = Lcg64::new(13);
    let hms: Vec<Heatmap> = (0..10).map(|i| synthetic_heatmap(TileKey::new(X0 + 1 + i, Y0).unwrap(), i as usize, &mut rng)).collect();
    let out = e.svc.prediction_dir(&job.job_id);
    for hm in &hms {
        let p = heatmap_path(&out, hm.tile);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, hm.encode()).unwrap();
    }
    let summary = PredictionSummary { tiles: hms.iter().map(|h| h.tile).collect(), task_names: vec!["disc".into()], class_counts: vec![3] };
    std::fs::write(out.join(COMPLETE_FILE), serde_json::to_vec(&summary).unwrap()).unwrap();

    let mut want: Vec<(f64, TileKey)> = hms
        .iter()
        .map(|h| {
            let planes: Vec<&[f32]> = h.tasks[0].chunks(TILE_PIXELS).collect();
            (oracle::normalized_entropy(&planes), h.tile)
        })
        .collect();
    want.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for k in [1, 4, 10] {
        let round = e.svc.active_learning_select(&job.job_id, k).map_err(|e| e.to_string())?;
        ensure!(round.selected.len() == k, "k={k}: {} selected", round.selected.len());
        for (g, w) in round.selected.iter().zip(&want) {
            ensure!(g.tile == w.1 && (g.uncertainty - w.0).abs() < 1e-6, "k={k}: {:?} {} vs {:?} {}", g.tile, g.uncertainty, w.1, w.0);
        }
    }
    let all = e.svc.active_learning_select(&job.job_id, 10).map_err(|e| e.to_string())?;
    let (first, last) = (&all.selected[0], all.selected.last().unwrap());
    ensure!(first.tile == hms[0].tile && (first.uncertainty - 1.0).abs() < 1e-6, "first {first:?}");
    ensure!(last.tile == hms[1].tile && last.uncertainty == 0.0, "last {last:?}");

    let round = e.svc.active_learning_select(&job.job_id, 2).map_err(|e| e.to_string())?;
    let task = e.svc.label_tasks().map_err(|e| e.to_string())?.into_iter().find(|t| t.task_id == round.label_task_id).ok_or("no label task")?;
    let t = round.selected[0].tile;
    let disc = trinity_testkit::Disc { cx: t.x as f64 * 256.0 + 128.0, cy: t.y as f64 * 256.0 + 128.0, r: 40.0 };
    e.svc.annotate(&task.task_id, &trinity_testkit::disc_wkt(&disc)).map_err(|e| e.to_string())?;
    let clone = e.svc.active_learning_complete(&round.round_id).map_err(|e| e.to_string())?;
    ensure!(clone.state == ExperimentState::Draft, "clone is {}", clone.state);
    ensure!(clone.parent_id.as_deref() == Some(src.as_str()), "clone parent {:?}", clone.parent_id);
    ensure!(clone.config.label_set_id == round.label_set_id, "clone label set {}", clone.config.label_set_id);
    let grown = e.svc.labels().get(&round.label_set_id).map_err(|e| e.to_string())?.labeled_tiles().map_err(|e| e.to_string())?;
    let base = e.svc.labels().get("discs").map_err(|e| e.to_string())?.labeled_tiles().map_err(|e| e.to_string())?;
    ensure!(grown.len() == base.len() + 2 && round.selected.iter().all(|r| grown.contains(&r.tile)), "augmented set {grown:?}");
    Ok(format!("top-k matches entropy; clone {} on {}", clone.experiment_id, round.label_set_id))
}

fn c14_automl() -> Outcome {
    let data = separable(6, 32, 2, 14);
    let spec = ModelSpec::new("fcn_mini", 2, vec![TaskSpec::new("fg", 2)]);
    let space = SearchSpace { learning_rate: (1e-4, 1e-2), batch_sizes: vec![1, 2, 4] };
    let base = Hyperparams { epochs: 2, ..Hyperparams::default() };
    let run = |parallelism| {
        let opts = SearchOptions { n_trials: 6, parallelism, seed: 2024, checkpoint_every: 5, out_dir: None };
        automl_search(&data[..4], &data[4..], &spec, &base, &space, &opts).map_err(|e| e.to_string())
    };
    let a = run(1)?;
    let b = run(4)?;
    ensure!(a.trials == b.trials, "trial tables differ");
    ensure!(a.best_trial == b.best_trial && a.best == b.best, "winners differ: {} vs {}", a.best_trial, b.best_trial);
    let losses: Vec<f64> = a.trials.iter().map(|t| t.final_val_loss).collect();
    let argmin = (0..losses.len()).fold(0, |best, i| if losses[i] < losses[best] { i } else { best });
    ensure!(a.best_trial == argmin, "winner {} but argmin {argmin}", a.best_trial);
    Ok(format!("6 trials, winner {} (val loss {:.4})", a.best_trial, losses[argmin]))
}

fn c15_lifecycle() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    let srv = Server::start(&home.join("data"), None);
    let tj = |args: &[&str]| -> Result<Value, String> {
        let mut a = vec!["--json"];
        a.extend_from_slice(args);
        let r = trinity(&srv.url, home, &a);
        if r.code != 0 {
            return Err(format!("trinity {args:?}: {}", r.stderr.trim()));
        }
        Ok(r.json())
    };
    let world = DiscWorld::new(X0, Y0, 3, 3, 15);
    world.write_profile_dir(&home.join("img"), "img");
    tj(&["profile", "ingest", s(&home.join("img"))])?;

    let labeled: Vec<TileKey> = world.tiles().into_iter().take(6).collect();
    std::fs::write(home.join("labels.wkt"), world.labels_wkt(Some(&labeled))).unwrap();
    let region = bbox_arg(&trinity_testkit::region(X0, Y0, 3, 2));
    tj(&["labels", "upload", s(&home.join("labels.wkt")), "--label-set", "discs", "--tasks", "disc:2", "--region", &region])?;
    let p = tj(&["project", "create", "discs"])?["project_id"].as_str().unwrap().to_string();
    let exp = tj(&["exp", "create", "--project", &p, "--label-set", "discs", "--profile", "img", "--arch", "unet_mini", "--epochs", "10", "--lr", "0.01", "--batch-size", "1"])?;
    let id = exp["experiment_id"].as_str().unwrap().to_string();
    tj(&["exp", "dataprep", &id, "--wait"])?;
    tj(&["exp", "train", &id, "--wait"])?;
    let pred = tj(&["exp", "predict", &id, "--region", &bbox_arg(&world.region()), "--wait"])?;
    let pj = pred["job_id"].as_str().unwrap().to_string();
    let v = tj(&["post", "vectorize", &pj, "--task", "disc", "--out", s(&home.join("vec"))])?;
    std::fs::write(home.join("golden.wkt"), world.labels_wkt(None)).unwrap();
    let r = tj(&["exp", "evaluate", &pj, "--golden", s(&home.join("golden.wkt"))])?;
    let f1 = r["f1"].as_f64().ok_or("no f1")?;
    ensure!(r["tiles"] == 9, "evaluated {} tiles", r["tiles"]);
    ensure!(f1 >= 0.85, "pixel F1 {f1:.4}");
    Ok(format!("pixel F1 {f1:.4} over 9 tiles, {} vectors", v["count"]))
}
