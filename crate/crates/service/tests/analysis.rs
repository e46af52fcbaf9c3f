use proptest::prelude::*;
use trinity_core::geo::{unproject, TileKey, PIXEL_ZOOM};
use trinity_core::inference::Heatmap;
use trinity_core::Error;
use trinity_service::analysis::{evaluate_golden, GoldenReport};

const TILE: TileKey = TileKey { x: 21_000, y: 31_000 };
const N: usize = 256;

type Rect = (u32, u32, u32, u32);

/// Pixel-aligned rectangle `[x0, x1) x [y0, y1)` in tile-local pixels.
fn rect_wkt(r: Rect) -> String {
    let (gx, gy) = (TILE.x as f64 * 256.0, TILE.y as f64 * 256.0);
    let corners = [(r.0, r.1), (r.2, r.1), (r.2, r.3), (r.0, r.3), (r.0, r.1)];
    let pts: Vec<String> = corners
        .iter()
        .map(|&(x, y)| {
            let p = unproject(gx + x as f64, gy + y as f64, PIXEL_ZOOM);
            format!("{} {}", p.lon, p.lat)
        })
        .collect();
    format!("POLYGON (({}))", pts.join(", "))
}

fn inside(r: Rect, x: usize, y: usize) -> bool {
    (r.0 as usize..r.2 as usize).contains(&x) && (r.1 as usize..r.3 as usize).contains(&y)
}

fn predicted(r: Rect) -> Heatmap {
    let mut d = vec![0f32; 2 * N * N];
    for y in 0..N {
        for x in 0..N {
            let p = if inside(r, x, y) { 0.9 } else { 0.2 };
            d[y * N + x] = 1.0 - p;
            d[N * N + y * N + x] = p;
        }
    }
    Heatmap { tile: TILE, tasks: vec![d], class_counts: vec![2] }
}

fn oracle(pred: Rect, gold: Rect) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for y in 0..N {
        for x in 0..N {
            match (inside(pred, x, y), inside(gold, x, y)) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                (false, false) => c.3 += 1,
            }
        }
    }
    c
}

#[test]
fn identity_scores_one() {
    let r = (10, 20, 60, 100);
    let rep = evaluate_golden(&[predicted(r)], &rect_wkt(r), 0, 1, 0.5).unwrap();
    assert_eq!((rep.tp, rep.fp, rep.fn_), (50 * 80, 0, 0));
    assert_eq!((rep.precision, rep.recall, rep.f1, rep.iou), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn half_overlap_counts() {
    let (p, g) = ((35, 20, 85, 100), (10, 20, 60, 100));
    let rep = evaluate_golden(&[predicted(p)], &rect_wkt(g), 0, 1, 0.5).unwrap();
    assert_eq!((rep.tp, rep.fp, rep.fn_, rep.tn), oracle(p, g));
    assert!((rep.iou - 25.0 / 75.0).abs() < 1e-12);
}

#[test]
fn empty_golden_has_zero_precision() {
    let rep = evaluate_golden(&[predicted((0, 0, 8, 8))], "", 0, 1, 0.5).unwrap();
    assert_eq!(rep.tp, 0);
    assert_eq!(rep.fp, 64);
    assert_eq!(rep.precision, 0.0);
    assert_eq!(rep.f1, 0.0);
}

#[test]
fn fixture_counts() {
    let r = GoldenReport::from_counts(1, 50, 25, 25, 0);
    assert!((r.iou - 0.5).abs() < 1e-12);
    assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn rejects_bad_inputs() {
    let hm = predicted((0, 0, 8, 8));
    assert!(matches!(evaluate_golden(&[hm.clone()], "", 0, 1, 1.5), Err(Error::Validation(_))));
    assert!(matches!(evaluate_golden(&[hm.clone()], "", 0, 2, 0.5), Err(Error::Validation(_))));
    let far = "POLYGON ((10 10, 10.001 10, 10.001 10.001, 10 10))";
    assert!(matches!(evaluate_golden(&[hm], far, 0, 1, 0.5), Err(Error::Validation(_))));
}

fn rect() -> impl Strategy<Value = Rect> {
    (0u32..255, 0u32..255, 1u32..64, 1u32..64).prop_map(|(x, y, w, h)| (x, y, (x + w).min(256), (y + h).min(256)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]
    #[test]
    fn matches_count_oracle(p in rect(), g in rect()) {
        let rep = evaluate_golden(&[predicted(p)], &rect_wkt(g), 0, 1, 0.5).unwrap();
        prop_assert_eq!((rep.tp, rep.fp, rep.fn_, rep.tn), oracle(p, g));
    }
}
