#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use trinity_core::geo::TileKey;
use trinity_service::model::{ExperimentConfig, Job, JobStatus};
use trinity_service::service::UploadLabelsRequest;
use trinity_service::{Service, ServiceConfig};
use trinity_testkit::DiscWorld;

pub const X0: u32 = 21_000;
pub const Y0: u32 = 31_000;

pub struct Env {
    pub dir: tempfile::TempDir,
    pub svc: Arc<Service>,
    pub world: DiscWorld,
    pub project: String,
}

/// A service with an ingested `w x h` disc world, label set `discs`
/// covering the first `labeled` tiles, and one project.
pub fn env(w: u32, h: u32, labeled: usize) -> Env {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::open(ServiceConfig::new(dir.path().join("data"))).unwrap();
    let world = DiscWorld::new(X0, Y0, w, h, 42);
    world.write_profile_dir(&dir.path().join("src"), "img");
    svc.ingest_profile(&dir.path().join("src")).unwrap();
    let tiles: Vec<TileKey> = world.tiles().into_iter().take(labeled).collect();
    let last = tiles.last().unwrap();
    let region = trinity_testkit::region(X0, Y0, last.x - X0 + 1, last.y - Y0 + 1);
    svc.upload_labels(&UploadLabelsRequest {
        label_set_id: "discs".into(),
        tasks: Some("disc:2".into()),
        region: Some(region),
        task: None,
        wkt: world.labels_wkt(Some(&tiles)),
    })
    .unwrap();
    let project = svc.create_project("parking", "lots").unwrap().project_id;
    Env { dir, svc, world, project }
}

pub fn config(arch: &str, epochs: u32) -> ExperimentConfig {
    let mut c: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "label_set_id": "discs",
        "profile_ids": ["img"],
        "architecture_id": arch,
    }))
    .unwrap();
    c.hyperparams.epochs = epochs;
    c.hyperparams.learning_rate = 1e-2;
    c
}

pub fn wait_job(svc: &Service, id: &str) -> Job {
    let start = Instant::now();
    loop {
        let j = svc.job(id).unwrap();
        if !j.status.is_active() {
            return j;
        }
        assert!(start.elapsed() < Duration::from_secs(600), "job {id} did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
}

pub fn ok(job: Job) -> Job {
    assert_eq!(job.status, JobStatus::Succeeded, "{:?}", job.error);
    job
}
