mod common;

use std::collections::BTreeSet;

use chrono::Utc;
use common::*;
use serde_json::json;
use trinity_core::geo::TileKey;
use trinity_core::inference::{heatmap_path, Heatmap, PredictionSummary, COMPLETE_FILE};
use trinity_core::rng::Lcg64;
use trinity_core::Error;
use trinity_service::meta::Collection;
use trinity_service::model::{Job, JobKind, JobStatus};
use trinity_service::state::ExperimentState;

const PIXELS: usize = 65_536;

/// Three classes; `kind` 0 is uniform, 1 one-hot, otherwise random.
fn heatmap(tile: TileKey, kind: usize, rng: &mut Lcg64) -> Heatmap {
    let mut data = vec![0f32; 3 * PIXELS];
    for p in 0..PIXELS {
        let probs: [f32; 3] = match kind {
            0 => [1.0 / 3.0; 3],
            1 => [0.0, 1.0, 0.0],
            _ => {
                let r = [rng.next_f64() + 0.05, rng.next_f64() * 3.0, rng.next_f64()];
                let s: f64 = r.iter().sum();
                [(r[0] / s) as f32, (r[1] / s) as f32, (r[2] / s) as f32]
            }
        };
        for c in 0..3 {
            data[c * PIXELS + p] = probs[c];
        }
    }
    Heatmap { tile, tasks: vec![data], class_counts: vec![3] }
}

fn entropy_oracle(hm: &Heatmap) -> f64 {
    let d = &hm.tasks[0];
    let mut total = 0.0;
    for p in 0..PIXELS {
        for c in 0..3 {
            let q = d[c * PIXELS + p] as f64;
            if q > 0.0 {
                total -= q * q.ln();
            }
        }
    }
    total / (PIXELS as f64 * 3f64.ln())
}

/// A finished prediction job over `hms`, attached to a fresh experiment.
fn fake_prediction(e: &Env, hms: &[Heatmap]) -> (String, String) {
    let exp = e.svc.create_experiment(&e.project, config("fcn_mini", 1)).unwrap().experiment_id;
    let job = Job {
        job_id: "j-0900".into(),
        kind: JobKind::Prediction,
        experiment_id: exp.clone(),
        status: JobStatus::Succeeded,
        idempotency_key: None,
        params: json!({}),
        checkpoint_epoch: Some(1),
        result: None,
        error: None,
        created_at: Utc::now(),
        finished_at: Some(Utc::now()),
    };
    e.svc.meta().write().put(Collection::Jobs, &job.job_id, &job).unwrap();
    let dir = e.svc.prediction_dir(&job.job_id);
    for hm in hms {
        let p = heatmap_path(&dir, hm.tile);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, hm.encode()).unwrap();
    }
    let summary = PredictionSummary { tiles: hms.iter().map(|h| h.tile).collect(), task_names: vec!["disc".into()], class_counts: vec![3] };
    std::fs::write(dir.join(COMPLETE_FILE), serde_json::to_vec(&summary).unwrap()).unwrap();
    (exp, job.job_id)
}

/// Tile (X0, Y0) is labeled; ten more follow it, the first uniform and the
/// second one-hot.
fn ten_tiles(e: &Env) -> Vec<Heatmap> {
    let mut rng = Lcg64::new(5);
    let mut hms = vec![heatmap(TileKey::new(X0, Y0).unwrap(), 0, &mut rng)];
    for i in 0..10 {
        let t = TileKey::new(X0 + 1 + i, Y0).unwrap();
        hms.push(heatmap(t, i as usize, &mut rng));
    }
    assert!(e.svc.labels().get("discs").unwrap().labeled_tiles().unwrap().contains(&hms[0].tile));
    hms
}

#[test]
fn top_k_matches_brute_force_entropy() {
    let e = env(1, 1, 1);
    let hms = ten_tiles(&e);
    let (_, job) = fake_prediction(&e, &hms);
    let mut oracle: Vec<(f64, TileKey)> = hms[1..].iter().map(|h| (entropy_oracle(h), h.tile)).collect();
    oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let all = e.svc.active_learning_select(&job, 10).unwrap();
    assert!(all.warning.is_none());
    assert_eq!(all.selected.len(), 10);
    for (got, want) in all.selected.iter().zip(&oracle) {
        assert_eq!(got.tile, want.1);
        assert!((got.uncertainty - want.0).abs() < 1e-6, "{} vs {}", got.uncertainty, want.0);
    }
    let first = &all.selected[0];
    assert_eq!(first.tile, hms[1].tile);
    assert!((first.uncertainty - 1.0).abs() < 1e-6);
    let last = all.selected.last().unwrap();
    assert_eq!(last.tile, hms[2].tile);
    assert_eq!(last.uncertainty, 0.0);
    assert!(!all.selected.iter().any(|r| r.tile == hms[0].tile), "labeled tile excluded");

    for k in [1, 3, 7] {
        let r = e.svc.active_learning_select(&job, k).unwrap();
        let got: Vec<TileKey> = r.selected.iter().map(|s| s.tile).collect();
        let want: Vec<TileKey> = oracle.iter().take(k).map(|o| o.1).collect();
        assert_eq!(got, want);
    }
    let r = e.svc.active_learning_select(&job, 50).unwrap();
    assert_eq!(r.selected.len(), 10);
    assert!(r.warning.unwrap().contains("50"));
    assert!(matches!(e.svc.active_learning_select(&job, 0), Err(Error::Validation(_))));
}

#[test]
fn completion_clones_with_augmented_labels() {
    let e = env(1, 1, 1);
    let hms = ten_tiles(&e);
    let (src, job) = fake_prediction(&e, &hms);
    let round = e.svc.active_learning_select(&job, 3).unwrap();
    assert!(matches!(e.svc.active_learning_complete(&round.round_id), Err(Error::State(_))));

    let task = e.svc.label_tasks().unwrap().into_iter().find(|t| t.task_id == round.label_task_id).unwrap();
    let picked: Vec<TileKey> = round.selected.iter().map(|r| r.tile).collect();
    assert_eq!(task.tile_list, picked);
    e.svc.annotate(&task.task_id, &trinity_testkit::disc_wkt(&trinity_testkit::Disc { cx: picked[0].x as f64 * 256.0 + 128.0, cy: picked[0].y as f64 * 256.0 + 128.0, r: 40.0 })).unwrap();

    let clone = e.svc.active_learning_complete(&round.round_id).unwrap();
    assert_eq!(clone.state, ExperimentState::Draft);
    assert_eq!(clone.parent_id.as_deref(), Some(src.as_str()));
    assert_eq!(clone.config.label_set_id, round.label_set_id);
    assert_eq!(e.svc.active_learning_complete(&round.round_id).unwrap().experiment_id, clone.experiment_id);

    let base = e.svc.labels().get("discs").unwrap();
    let grown = e.svc.labels().get(&round.label_set_id).unwrap();
    let mut want: BTreeSet<TileKey> = base.labeled_tiles().unwrap();
    want.extend(picked.iter().copied());
    assert_eq!(grown.labeled_tiles().unwrap(), want);
    assert_eq!(grown.geometry_count(), base.geometry_count() + 1);
    assert_eq!(e.svc.experiment(&src).unwrap().config.label_set_id, "discs");
}
