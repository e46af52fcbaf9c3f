//! Experiment management and job orchestration over the core library.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use trinity_core::dataprep::{build_dataset, inject_transient, read_dataset, read_manifest, write_dataset, ChannelRecipe, DatasetSpec, DateRange};
use trinity_core::geo::{BBox, TileKey};
use trinity_core::inference::{completed_summary, predict_region, read_heatmap, render_heatmap_png, encode_png, viz_path, Heatmap};
use trinity_core::kernel::train::checkpoint_path;
use trinity_core::kernel::{automl_search, train, ArchitectureRegistry, Checkpoint, ModelSpec, SearchOptions, SearchSpace, TrainOptions};
use trinity_core::labels::{LabelStore, LabelTask, TaskOrigin, TaskSpec, TaskStatus};
use trinity_core::postprocess::{parse_network, predicate_filter, read_items, run_request, write_outputs, Predicate, PostProcessorRegistry, PostRequest, VectorItem};
use trinity_core::store::{ChannelStore, ProfileMeta};
use trinity_core::{Error, Result};

use crate::analysis::{evaluate_golden, rank_tiles, GoldenReport};
use crate::meta::{Collection, MetaStore, WriteTx};
use crate::model::*;
use crate::state::{prediction_allowed, transition, Event, ExperimentState};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Jobs allowed to run at once.
    pub job_workers: usize,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig { data_dir: data_dir.into(), job_workers: 2 }
    }
}

/// Counting semaphore plus an outstanding-job counter.
#[derive(Default)]
struct Pool {
    state: Mutex<(usize, usize)>,
    cv: Condvar,
}

pub struct Service {
    cfg: ServiceConfig,
    meta: MetaStore,
    store: ChannelStore,
    labels: LabelStore,
    archs: ArchitectureRegistry<f32>,
    post: PostProcessorRegistry,
    /// `(experiment_id, slot)` to running job id.
    active: Mutex<HashMap<(String, &'static str), String>>,
    pool: Pool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataprepRequest {
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    /// Overrides the experiment's epoch count for this run.
    #[serde(default)]
    pub epochs: Option<u32>,
    #[serde(default = "default_every")]
    pub checkpoint_every: u32,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

fn default_every() -> u32 {
    5
}

impl Default for TrainRequest {
    fn default() -> Self {
        TrainRequest { epochs: None, checkpoint_every: default_every(), idempotency_key: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutomlRequest {
    pub n_trials: usize,
    #[serde(default = "one")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    pub space: SearchSpace,
    #[serde(default)]
    pub epochs: Option<u32>,
    #[serde(default = "default_every")]
    pub checkpoint_every: u32,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub region: BBox,
    #[serde(default)]
    pub checkpoint_epoch: Option<u32>,
    #[serde(default)]
    pub date_range: Option<DateRange>,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

/// A task given by index or by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskRef {
    Index(usize),
    Name(String),
}

impl Default for TaskRef {
    fn default() -> Self {
        TaskRef::Index(0)
    }
}

impl TaskRef {
    pub fn parse(s: &str) -> Self {
        s.parse().map(TaskRef::Index).unwrap_or_else(|_| TaskRef::Name(s.to_string()))
    }

    fn resolve(&self, names: &[String]) -> Result<usize> {
        match self {
            TaskRef::Index(i) if *i < names.len() => Ok(*i),
            TaskRef::Name(n) => names.iter().position(|x| x == n).ok_or_else(|| Error::validation(format!("unknown task '{n}'"))),
            TaskRef::Index(i) => Err(Error::validation(format!("task index {i} out of range"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub golden_wkt: String,
    #[serde(default)]
    pub task: TaskRef,
    #[serde(default = "one")]
    pub class_index: usize,
    #[serde(default = "half")]
    pub tau: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessRequest {
    /// `vectorize`, `mapmatch` or `filter`.
    pub method: String,
    #[serde(default)]
    pub task: TaskRef,
    #[serde(default = "one")]
    pub class_index: usize,
    #[serde(default = "half")]
    pub tau: f64,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub predicate: Option<String>,
    /// Road network as WKT text, for `mapmatch`.
    #[serde(default)]
    pub network_wkt: Option<String>,
    /// Earlier output of this prediction to filter, for `filter`.
    #[serde(default)]
    pub source: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostprocessResult {
    pub post_id: String,
    pub method: String,
    pub count: usize,
    pub items: Vec<VectorItem>,
    pub wkt: String,
    pub geojson: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UploadLabelsRequest {
    pub label_set_id: String,
    /// `name:classes` pairs, comma separated; needed for a new label set.
    #[serde(default)]
    pub tasks: Option<String>,
    /// Labeled region; needed for a new label set.
    #[serde(default)]
    pub region: Option<BBox>,
    /// Task receiving the geometries (default: the first).
    #[serde(default)]
    pub task: Option<String>,
    pub wkt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchitectureInfo {
    pub architecture_id: String,
    pub description: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recovery {
    pub failed_jobs: Vec<String>,
    pub failed_experiments: Vec<String>,
}

impl Service {
    /// Opens the data directory and repairs anything a crash left behind.
    pub fn open(cfg: ServiceConfig) -> Result<Arc<Self>> {
        if cfg.job_workers == 0 {
            return Err(Error::validation("job_workers must be positive"));
        }
        let d = &cfg.data_dir;
        fs::create_dir_all(d)?;
        let svc = Service {
            meta: MetaStore::open(d.join("meta"))?,
            store: ChannelStore::open(d.join("store"))?,
            labels: LabelStore::open(d.join("labels"))?,
            archs: ArchitectureRegistry::builtin(),
            post: PostProcessorRegistry::builtin(),
            active: Mutex::new(HashMap::new()),
            pool: Pool::default(),
            cfg,
        };
        let rec = svc.recover()?;
        if !rec.failed_jobs.is_empty() {
            log::warn!("marked {} interrupted job(s) failed", rec.failed_jobs.len());
        }
        Ok(Arc::new(svc))
    }

    pub fn data_dir(&self) -> &Path {
        &self.cfg.data_dir
    }

    pub fn store(&self) -> &ChannelStore {
        &self.store
    }

    pub fn labels(&self) -> &LabelStore {
        &self.labels
    }

    pub fn meta(&self) -> &MetaStore {
        &self.meta
    }

    fn experiment_dir(&self, id: &str) -> PathBuf {
        self.cfg.data_dir.join("experiments").join(id)
    }

    fn dataset_dir(&self, id: &str) -> PathBuf {
        self.experiment_dir(id).join("dataset")
    }

    fn checkpoint_dir(&self, id: &str) -> PathBuf {
        self.experiment_dir(id).join("checkpoints")
    }

    pub fn prediction_dir(&self, job_id: &str) -> PathBuf {
        self.cfg.data_dir.join("predictions").join(job_id)
    }

    // The audit log is written before the experiment document, so it is
    // the journal: replaying it gives the committed state.
    fn recover(&self) -> Result<Recovery> {
        let tx = self.meta.write();
        let audit = self.meta.audit()?;
        let mut replayed: HashMap<&str, ExperimentState> = HashMap::new();
        for e in &audit {
            replayed.insert(e.experiment_id.as_str(), e.to);
        }
        let mut out = Recovery { failed_jobs: vec![], failed_experiments: vec![] };
        for mut exp in self.meta.list::<Experiment>(Collection::Experiments)? {
            if let Some(&s) = replayed.get(exp.experiment_id.as_str()) {
                if s != exp.state {
                    exp.state = s;
                    tx.put(Collection::Experiments, &exp.experiment_id, &exp)?;
                }
            }
            let event = match exp.state {
                ExperimentState::DataPrepRunning => Some(Event::DataprepFailed),
                ExperimentState::Training => Some(Event::TrainingFailed),
                _ => None,
            };
            if let Some(ev) = event {
                self.fire_in(&tx, &exp.experiment_id, ev)?;
                out.failed_experiments.push(exp.experiment_id.clone());
            }
        }
        for mut job in self.meta.list::<Job>(Collection::Jobs)? {
            if job.status.is_active() {
                job.status = JobStatus::Failed;
                job.error = Some("interrupted by a service restart".into());
                job.finished_at = Some(Utc::now());
                tx.put(Collection::Jobs, &job.job_id, &job)?;
                if job.kind == JobKind::Prediction {
                    let _ = fs::remove_dir_all(self.prediction_dir(&job.job_id));
                }
                out.failed_jobs.push(job.job_id);
            }
        }
        Ok(out)
    }

    // ---- projects and experiments ----

    pub fn create_project(&self, name: &str, description: &str) -> Result<Project> {
        if name.trim().is_empty() {
            return Err(Error::validation("project name is empty"));
        }
        let tx = self.meta.write();
        let p = Project {
            project_id: tx.next_id(Collection::Projects)?,
            name: name.into(),
            description: description.into(),
            experiment_ids: vec![],
            created_at: Utc::now(),
        };
        tx.put(Collection::Projects, &p.project_id, &p)?;
        Ok(p)
    }

    pub fn list_projects(&self) -> Result<Vec<Project>> {
        self.meta.list(Collection::Projects)
    }

    pub fn project(&self, id: &str) -> Result<Project> {
        self.meta.project(id)
    }

    pub fn dataset_spec(cfg: &ExperimentConfig) -> DatasetSpec {
        DatasetSpec {
            profile_ids: cfg.profile_ids.clone(),
            date_ranges: cfg.date_ranges.clone(),
            label_set_id: cfg.label_set_id.clone(),
            transient_dir: cfg.transient_dir.clone(),
            val_fraction: cfg.val_fraction,
            split_seed: cfg.split_seed,
        }
    }

    /// Checks every reference and value in a config.
    pub fn validate_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        let as_validation = |e: Error| match e {
            Error::NotFound(m) => Error::Validation(format!("unknown reference: {m}")),
            e => e,
        };
        let spec = Self::dataset_spec(cfg);
        spec.validate()?;
        self.labels.get(&cfg.label_set_id).map_err(as_validation)?;
        ChannelRecipe::resolve(&self.store, &spec).map_err(as_validation)?;
        self.archs.get(&cfg.architecture_id).map_err(as_validation)?;
        cfg.hyperparams.validate()?;
        if let Some(d) = &cfg.transient_dir {
            if !d.is_dir() {
                return Err(Error::validation(format!("transient directory {} does not exist", d.display())));
            }
        }
        Ok(())
    }

    fn insert_experiment(&self, tx: &WriteTx<'_>, project_id: &str, config: ExperimentConfig, parent: Option<String>) -> Result<Experiment> {
        let mut project = self.meta.project(project_id)?;
        let now = Utc::now();
        let exp = Experiment {
            experiment_id: tx.next_id(Collection::Experiments)?,
            project_id: project_id.into(),
            config,
            state: ExperimentState::Draft,
            parent_id: parent,
            checkpoints: vec![],
            prediction_jobs: vec![],
            created_at: now,
            updated_at: now,
        };
        tx.append_audit(&AuditEntry { at: now, experiment_id: exp.experiment_id.clone(), event: None, from: None, to: exp.state })?;
        tx.put(Collection::Experiments, &exp.experiment_id, &exp)?;
        project.experiment_ids.push(exp.experiment_id.clone());
        tx.put(Collection::Projects, project_id, &project)?;
        Ok(exp)
    }

    pub fn create_experiment(&self, project_id: &str, config: ExperimentConfig) -> Result<Experiment> {
        self.meta.project(project_id)?;
        self.validate_config(&config)?;
        let tx = self.meta.write();
        self.insert_experiment(&tx, project_id, config, None)
    }

    pub fn experiment(&self, id: &str) -> Result<Experiment> {
        self.meta.experiment(id)
    }

    pub fn list_experiments(&self) -> Result<Vec<Experiment>> {
        self.meta.list(Collection::Experiments)
    }

    pub fn clone_experiment(&self, id: &str, overrides: &ConfigOverrides) -> Result<Experiment> {
        let src = self.meta.experiment(id)?;
        let config = overrides.apply(&src.config);
        self.validate_config(&config)?;
        let tx = self.meta.write();
        self.insert_experiment(&tx, &src.project_id, config, Some(src.experiment_id))
    }

    /// The experiment followed by its ancestors, nearest first.
    pub fn lineage(&self, id: &str) -> Result<Vec<Experiment>> {
        let mut chain = vec![self.meta.experiment(id)?];
        while let Some(p) = chain.last().and_then(|e| e.parent_id.clone()) {
            if chain.iter().any(|e| e.experiment_id == p) {
                break;
            }
            chain.push(self.meta.experiment(&p)?);
        }
        Ok(chain)
    }

    pub fn patch_experiment(&self, id: &str, patch: &ExperimentPatch) -> Result<Experiment> {
        let tx = self.meta.write();
        let mut exp = self.meta.experiment(id)?;
        if let Some(t) = &patch.tags {
            exp.config.tags = t.clone();
        }
        if let Some(n) = &patch.notes {
            exp.config.notes = n.clone();
        }
        exp.updated_at = Utc::now();
        tx.put(Collection::Experiments, id, &exp)?;
        Ok(exp)
    }

    fn fire_in(&self, tx: &WriteTx<'_>, id: &str, event: Event) -> Result<Experiment> {
        let mut exp = self.meta.experiment(id)?;
        let to = transition(exp.state, event)?;
        let now = Utc::now();
        tx.append_audit(&AuditEntry { at: now, experiment_id: id.into(), event: Some(event), from: Some(exp.state), to })?;
        exp.state = to;
        exp.updated_at = now;
        tx.put(Collection::Experiments, id, &exp)?;
        Ok(exp)
    }

    /// Applies a lifecycle event. Job-driven events are normally fired by
    /// the job runner; this is the manual entry point (e.g. `reset`).
    pub fn transition(&self, id: &str, event: Event) -> Result<Experiment> {
        let tx = self.meta.write();
        self.fire_in(&tx, id, event)
    }

    /// Audit entries of one experiment, oldest first.
    pub fn audit(&self, id: &str) -> Result<Vec<AuditEntry>> {
        self.meta.experiment(id)?;
        Ok(self.meta.audit()?.into_iter().filter(|e| e.experiment_id == id).collect())
    }

    /// Checkpoint epochs on disk, ascending.
    pub fn checkpoint_epochs(&self, id: &str) -> Result<Vec<u32>> {
        let dir = self.checkpoint_dir(id);
        let mut out = Vec::new();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for e in entries {
            let name = e?.file_name().to_string_lossy().into_owned();
            if let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".trnk")) {
                if let Ok(epoch) = n.parse() {
                    out.push(epoch);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// The JSON-lines metric history (empty before training).
    pub fn metrics(&self, id: &str) -> Result<String> {
        self.meta.experiment(id)?;
        match fs::read_to_string(self.checkpoint_dir(id).join("metrics.jsonl")) {
            Ok(t) => Ok(t),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
            Err(e) => Err(e.into()),
        }
    }

    // ---- jobs ----

    pub fn job(&self, id: &str) -> Result<Job> {
        self.meta.job(id)
    }

    pub fn list_jobs(&self, experiment_id: Option<&str>) -> Result<Vec<Job>> {
        let jobs: Vec<Job> = self.meta.list(Collection::Jobs)?;
        Ok(jobs.into_iter().filter(|j| experiment_id.is_none_or(|e| j.experiment_id == e)).collect())
    }

    fn find_idempotent(&self, exp: &str, kind: JobKind, key: Option<&str>) -> Result<Option<Job>> {
        let Some(key) = key else { return Ok(None) };
        Ok(self
            .list_jobs(Some(exp))?
            .into_iter()
            .find(|j| j.kind == kind && j.idempotency_key.as_deref() == Some(key)))
    }

    /// Records a queued job under the writer lock, firing `event` first
    /// when given. Returns `Ok(Err(job))` for an idempotent replay.
    fn enqueue(
        &self,
        exp_id: &str,
        kind: JobKind,
        key: Option<&str>,
        event: Option<Event>,
        params: Value,
        checkpoint_epoch: Option<u32>,
        pre: impl FnOnce(&Experiment) -> Result<()>,
    ) -> Result<std::result::Result<Job, Job>> {
        let tx = self.meta.write();
        let exp = self.meta.experiment(exp_id)?;
        if let Some(j) = self.find_idempotent(exp_id, kind, key)? {
            return Ok(Err(j));
        }
        let mut active = self.active.lock().unwrap();
        if let Some(slot) = kind.slot() {
            if let Some(j) = active.get(&(exp_id.to_string(), slot)) {
                return Err(Error::conflict(format!("experiment {exp_id} already has a running {slot} job ({j})")));
            }
        }
        if let Some(ev) = event {
            transition(exp.state, ev)?;
        }
        pre(&exp)?;
        let job = Job {
            job_id: tx.next_id(Collection::Jobs)?,
            kind,
            experiment_id: exp_id.into(),
            status: JobStatus::Queued,
            idempotency_key: key.map(str::to_string),
            params,
            checkpoint_epoch,
            result: None,
            error: None,
            created_at: Utc::now(),
            finished_at: None,
        };
        tx.put(Collection::Jobs, &job.job_id, &job)?;
        if let Some(ev) = event {
            self.fire_in(&tx, exp_id, ev)?;
        }
        if let Some(slot) = kind.slot() {
            active.insert((exp_id.to_string(), slot), job.job_id.clone());
        }
        Ok(Ok(job))
    }

    fn set_status(&self, job_id: &str, status: JobStatus) -> Result<()> {
        let tx = self.meta.write();
        let mut job = self.meta.job(job_id)?;
        job.status = status;
        tx.put(Collection::Jobs, job_id, &job)
    }

    fn finish(&self, job_id: &str, outcome: Result<Value>) {
        let res = (|| -> Result<()> {
            let tx = self.meta.write();
            let mut job = self.meta.job(job_id)?;
            let ok = outcome.is_ok();
            match outcome {
                Ok(v) => {
                    job.status = JobStatus::Succeeded;
                    job.result = Some(v);
                }
                Err(e) => {
                    job.status = JobStatus::Failed;
                    job.error = Some(e.to_string());
                }
            }
            job.finished_at = Some(Utc::now());
            tx.put(Collection::Jobs, job_id, &job)?;
            let event = match (job.kind, ok) {
                (JobKind::Dataprep, true) => Some(Event::DataprepSucceeded),
                (JobKind::Dataprep, false) => Some(Event::DataprepFailed),
                (JobKind::Training | JobKind::Automl, true) => Some(Event::TrainingSucceeded),
                (JobKind::Training | JobKind::Automl, false) => Some(Event::TrainingFailed),
                (JobKind::Prediction, _) => None,
            };
            if let Some(ev) = event {
                let exp = self.fire_in(&tx, &job.experiment_id, ev)?;
                if job.kind != JobKind::Dataprep {
                    let mut exp = exp;
                    exp.checkpoints = self.checkpoint_epochs(&job.experiment_id)?;
                    if let (true, JobKind::Automl, Some(r)) = (ok, job.kind, &job.result) {
                        if let Ok(hp) = serde_json::from_value(r["best_hyperparams"].clone()) {
                            exp.config.hyperparams = hp;
                        }
                    }
                    tx.put(Collection::Experiments, &exp.experiment_id, &exp)?;
                }
            }
            if let Some(slot) = job.kind.slot() {
                self.active.lock().unwrap().remove(&(job.experiment_id.clone(), slot));
            }
            Ok(())
        })();
        if let Err(e) = res {
            log::error!("could not record the end of job {job_id}: {e}");
        }
    }

    fn spawn(self: &Arc<Self>, job_id: String, work: impl FnOnce(&Service) -> Result<Value> + Send + 'static) {
        {
            let mut s = self.pool.state.lock().unwrap();
            s.1 += 1;
        }
        let svc = Arc::clone(self);
        std::thread::spawn(move || {
            {
                let mut s = svc.pool.state.lock().unwrap();
                while s.0 >= svc.cfg.job_workers {
                    s = svc.pool.cv.wait(s).unwrap();
                }
                s.0 += 1;
            }
            let _ = svc.set_status(&job_id, JobStatus::Running);
            let outcome = catch_unwind(AssertUnwindSafe(|| work(&svc)))
                .unwrap_or_else(|_| Err(Error::state(format!("job {job_id} panicked"))));
            if let Err(e) = &outcome {
                log::warn!("job {job_id} failed: {e}");
            }
            svc.finish(&job_id, outcome);
            let mut s = svc.pool.state.lock().unwrap();
            s.0 -= 1;
            s.1 -= 1;
            svc.pool.cv.notify_all();
        });
    }

    /// Blocks until no job is queued or running.
    pub fn wait_idle(&self) {
        let mut s = self.pool.state.lock().unwrap();
        while s.1 > 0 {
            s = self.pool.cv.wait(s).unwrap();
        }
    }

    pub fn run_dataprep(self: &Arc<Self>, id: &str, req: &DataprepRequest) -> Result<Job> {
        let job = match self.enqueue(id, JobKind::Dataprep, req.idempotency_key.as_deref(), Some(Event::StartDataprep), json!(req), None, |_| Ok(()))? {
            Ok(j) => j,
            Err(existing) => return Ok(existing),
        };
        let exp_id = id.to_string();
        self.spawn(job.job_id.clone(), move |svc| {
            let exp = svc.meta.experiment(&exp_id)?;
            let spec = Self::dataset_spec(&exp.config);
            let mut ds = build_dataset(&svc.store, &svc.labels, &spec)?;
            if let Some(dir) = &spec.transient_dir {
                inject_transient(&mut ds, dir)?;
            }
            let dir = svc.dataset_dir(&exp_id);
            let _ = fs::remove_dir_all(&dir);
            write_dataset(&dir, &ds)?;
            Ok(json!({
                "train_tiles": ds.manifest.train_tiles.len(),
                "val_tiles": ds.manifest.val_tiles.len(),
                "channel_count": ds.manifest.channel_count,
                "channel_names": ds.manifest.channel_names,
            }))
        });
        Ok(job)
    }

    fn model_spec(&self, exp: &Experiment) -> Result<(ModelSpec, trinity_core::dataprep::Dataset)> {
        let ds = read_dataset(&self.dataset_dir(&exp.experiment_id))?;
        let spec = ModelSpec::new(&exp.config.architecture_id, ds.manifest.channel_count, ds.manifest.tasks.clone());
        Ok((spec, ds))
    }

    pub fn run_training(self: &Arc<Self>, id: &str, req: &TrainRequest) -> Result<Job> {
        if req.checkpoint_every == 0 {
            return Err(Error::validation("checkpoint_every must be positive"));
        }
        let mut warm = false;
        let job = match self.enqueue(id, JobKind::Training, req.idempotency_key.as_deref(), Some(Event::StartTraining), json!(req), None, |e| {
            warm = e.state == ExperimentState::Trained;
            Ok(())
        })? {
            Ok(j) => j,
            Err(existing) => return Ok(existing),
        };
        let (exp_id, req) = (id.to_string(), req.clone());
        self.spawn(job.job_id.clone(), move |svc| {
            let exp = svc.meta.experiment(&exp_id)?;
            let (spec, ds) = svc.model_spec(&exp)?;
            let dir = svc.checkpoint_dir(&exp_id);
            let warm_start = match (warm, svc.checkpoint_epochs(&exp_id)?.last()) {
                (true, Some(&e)) => Some(Checkpoint::load(&checkpoint_path(&dir, e))?),
                _ => {
                    let _ = fs::remove_dir_all(&dir);
                    None
                }
            };
            fs::create_dir_all(&dir)?;
            let mut hp = exp.config.hyperparams.clone();
            if let Some(e) = req.epochs {
                hp.epochs = e;
            }
            let opts = TrainOptions { checkpoint_every: req.checkpoint_every, out_dir: Some(dir), warm_start, on_epoch: None };
            let out = train(&ds.train, &ds.val, &spec, &hp, &opts)?;
            Ok(json!({
                "final_epoch": out.last.epoch,
                "checkpoints": out.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(),
                "final_val": out.final_val(),
            }))
        });
        Ok(job)
    }

    pub fn run_automl(self: &Arc<Self>, id: &str, req: &AutomlRequest) -> Result<Job> {
        req.space.validate()?;
        if req.n_trials == 0 || req.parallelism == 0 || req.checkpoint_every == 0 {
            return Err(Error::validation("n_trials, parallelism and checkpoint_every must be positive"));
        }
        let job = match self.enqueue(id, JobKind::Automl, req.idempotency_key.as_deref(), Some(Event::StartTraining), json!(req), None, |_| Ok(()))? {
            Ok(j) => j,
            Err(existing) => return Ok(existing),
        };
        let (exp_id, req, job_id) = (id.to_string(), req.clone(), job.job_id.clone());
        self.spawn(job.job_id.clone(), move |svc| {
            let exp = svc.meta.experiment(&exp_id)?;
            let (spec, ds) = svc.model_spec(&exp)?;
            let mut base = exp.config.hyperparams.clone();
            if let Some(e) = req.epochs {
                base.epochs = e;
            }
            let search_dir = svc.experiment_dir(&exp_id).join("automl").join(&job_id);
            let opts = SearchOptions {
                n_trials: req.n_trials,
                parallelism: req.parallelism,
                seed: req.seed,
                checkpoint_every: req.checkpoint_every,
                out_dir: Some(search_dir.clone()),
            };
            let out = automl_search(&ds.train, &ds.val, &spec, &base, &req.space, &opts)?;
            // the winner becomes the experiment's model
            let dir = svc.checkpoint_dir(&exp_id);
            let _ = fs::remove_dir_all(&dir);
            fs::create_dir_all(&dir)?;
            for e in fs::read_dir(search_dir.join(format!("trial_{}", out.best_trial)))? {
                let e = e?;
                fs::copy(e.path(), dir.join(e.file_name()))?;
            }
            Ok(json!({
                "best_trial": out.best_trial,
                "best_hyperparams": out.best_hyperparams(),
                "trials": out.trials,
            }))
        });
        Ok(job)
    }

    pub fn run_prediction(self: &Arc<Self>, id: &str, req: &PredictRequest) -> Result<Job> {
        req.region.validate()?;
        if req.workers == 0 {
            return Err(Error::validation("workers must be at least 1"));
        }
        let epochs = self.checkpoint_epochs(id)?;
        let epoch = match req.checkpoint_epoch {
            Some(e) if epochs.contains(&e) => Some(e),
            Some(e) => return Err(Error::validation(format!("experiment {id} has no checkpoint for epoch {e}"))),
            None => epochs.last().copied(),
        };
        let job = match self.enqueue(id, JobKind::Prediction, req.idempotency_key.as_deref(), None, json!(req), epoch, |e| {
            if !prediction_allowed(e.state, epoch.is_some()) {
                return Err(Error::state(format!("predictions need a trained model; experiment {id} is {}", e.state)));
            }
            Ok(())
        })? {
            Ok(j) => j,
            Err(existing) => return Ok(existing),
        };
        {
            let tx = self.meta.write();
            let mut exp = self.meta.experiment(id)?;
            exp.prediction_jobs.push(job.job_id.clone());
            tx.put(Collection::Experiments, id, &exp)?;
        }
        let (exp_id, req, job_id) = (id.to_string(), req.clone(), job.job_id.clone());
        let epoch = epoch.expect("checked by prediction_allowed");
        self.spawn(job.job_id.clone(), move |svc| {
            let ck = Checkpoint::load(&checkpoint_path(&svc.checkpoint_dir(&exp_id), epoch))?;
            let model = ck.model()?;
            let manifest = read_manifest(&svc.dataset_dir(&exp_id))?;
            let out = svc.prediction_dir(&job_id);
            let _ = fs::remove_dir_all(&out);
            let summary = predict_region(&svc.store, &model, &manifest.recipe, &req.region, req.date_range.as_ref(), &out, req.workers)?;
            Ok(json!({"checkpoint_epoch": epoch, "tiles": summary.tiles.len(), "summary": summary}))
        });
        Ok(job)
    }

    // ---- predictions ----

    fn finished_prediction(&self, job_id: &str) -> Result<Job> {
        let job = self.meta.job(job_id)?;
        if job.kind != JobKind::Prediction {
            return Err(Error::validation(format!("job {job_id} is not a prediction")));
        }
        if job.status != JobStatus::Succeeded {
            return Err(Error::state(format!("prediction {job_id} is {:?}, not finished", job.status)));
        }
        Ok(job)
    }

    pub fn heatmaps(&self, job_id: &str) -> Result<(Vec<String>, Vec<Heatmap>)> {
        self.finished_prediction(job_id)?;
        let dir = self.prediction_dir(job_id);
        let summary = completed_summary(&dir)?;
        let hms = summary.tiles.iter().map(|t| read_heatmap(&dir, *t)).collect::<Result<Vec<_>>>()?;
        Ok((summary.task_names, hms))
    }

    /// PNG for one heatmap layer; `layer` is a class index or `dominant`.
    pub fn heatmap_png(&self, job_id: &str, task: &TaskRef, layer: &str, tile: TileKey) -> Result<Vec<u8>> {
        self.finished_prediction(job_id)?;
        let dir = self.prediction_dir(job_id);
        let summary = completed_summary(&dir)?;
        let t = task.resolve(&summary.task_names)?;
        if !summary.tiles.contains(&tile) {
            return Err(Error::not_found(format!("tile {tile} in prediction {job_id}")));
        }
        let path = viz_path(&dir, &summary.task_names[t], layer, tile);
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(_) => {
                let class: usize = layer.parse().map_err(|_| Error::validation(format!("bad layer '{layer}'")))?;
                let hm = read_heatmap(&dir, tile)?;
                encode_png(&image_gray(render_heatmap_png(&hm, t, class)?))
            }
        }
    }

    pub fn evaluate(&self, job_id: &str, req: &EvaluateRequest) -> Result<GoldenReport> {
        let (names, hms) = self.heatmaps(job_id)?;
        evaluate_golden(&hms, &req.golden_wkt, req.task.resolve(&names)?, req.class_index, req.tau)
    }

    pub fn postprocess(&self, job_id: &str, req: &PostprocessRequest) -> Result<PostprocessResult> {
        let (names, hms) = self.heatmaps(job_id)?;
        let items = if req.method == "filter" {
            let src = req.source.as_deref().ok_or_else(|| Error::validation("filter needs a source output"))?;
            let items = read_items(&self.post_dir(job_id, src)?)?;
            predicate_filter(items, &Predicate::parse(req.predicate.as_deref().unwrap_or(""))?)
        } else {
            let network = req.network_wkt.as_deref().map(parse_network).transpose()?;
            let params = if req.params.is_null() { json!({}) } else { req.params.clone() };
            let pr = PostRequest {
                method: req.method.clone(),
                task: req.task.resolve(&names)?,
                class_index: req.class_index,
                tau: req.tau,
                params,
                predicate: req.predicate.clone(),
            };
            run_request(&self.post, &hms, network.as_deref(), &pr)?
        };
        let root = self.prediction_dir(job_id).join("post");
        fs::create_dir_all(&root)?;
        let tx = self.meta.write();
        let post_id = format!("pp-{:04}", fs::read_dir(&root)?.count() + 1);
        let dir = root.join(&post_id);
        write_outputs(&dir, &items)?;
        drop(tx);
        Ok(PostprocessResult {
            post_id,
            method: req.method.clone(),
            count: items.len(),
            wkt: trinity_core::postprocess::to_wkt_lines(&items),
            geojson: trinity_core::postprocess::to_geojson(&items),
            items,
        })
    }

    fn post_dir(&self, job_id: &str, post_id: &str) -> Result<PathBuf> {
        if post_id.is_empty() || !post_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(Error::validation(format!("bad output id '{post_id}'")));
        }
        Ok(self.prediction_dir(job_id).join("post").join(post_id))
    }

    pub fn postprocess_methods(&self) -> Vec<(String, String)> {
        self.post.describe()
    }

    // ---- active learning ----

    pub fn active_learning_select(&self, job_id: &str, k: usize) -> Result<ActiveLearningRound> {
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        let job = self.finished_prediction(job_id)?;
        let exp = self.meta.experiment(&job.experiment_id)?;
        let (_, hms) = self.heatmaps(job_id)?;
        let exclude: BTreeSet<TileKey> = self.labels.get(&exp.config.label_set_id)?.labeled_tiles()?;
        let ranked = rank_tiles(&hms, &exclude);
        if ranked.is_empty() {
            return Err(Error::validation("every predicted tile is already labeled"));
        }
        let warning = (k > ranked.len()).then(|| format!("requested {k} tiles but only {} are unlabeled", ranked.len()));
        let selected: Vec<RankedTile> = ranked.into_iter().take(k).collect();
        let tx = self.meta.write();
        let round_id = tx.next_id(Collection::Rounds)?;
        let label_set_id = format!("{}-{round_id}", exp.config.label_set_id);
        self.labels.derive(&exp.config.label_set_id, &label_set_id)?;
        let tiles: Vec<TileKey> = selected.iter().map(|r| r.tile).collect();
        let task = self.labels.create_labeling_task(&label_set_id, None, &tiles, TaskOrigin::ActiveLearning)?;
        let round = ActiveLearningRound {
            round_id: round_id.clone(),
            source_experiment_id: exp.experiment_id,
            prediction_job_id: job_id.into(),
            k,
            selected,
            label_set_id,
            label_task_id: task.task_id,
            clone_experiment_id: None,
            warning,
            created_at: Utc::now(),
        };
        tx.put(Collection::Rounds, &round_id, &round)?;
        Ok(round)
    }

    pub fn round(&self, id: &str) -> Result<ActiveLearningRound> {
        self.meta.round(id)
    }

    pub fn active_learning_complete(&self, round_id: &str) -> Result<Experiment> {
        let round = self.meta.round(round_id)?;
        if let Some(c) = &round.clone_experiment_id {
            return self.meta.experiment(c);
        }
        let task = self.labels.get_task(&round.label_task_id)?;
        if task.status != TaskStatus::Completed {
            return Err(Error::state(format!("labeling task {} is still open", task.task_id)));
        }
        let overrides = ConfigOverrides { label_set_id: Some(round.label_set_id.clone()), ..Default::default() };
        let src = self.meta.experiment(&round.source_experiment_id)?;
        let config = overrides.apply(&src.config);
        self.validate_config(&config)?;
        let tx = self.meta.write();
        // re-read under the lock so concurrent completions agree
        let mut round = self.meta.round(round_id)?;
        if let Some(c) = &round.clone_experiment_id {
            return self.meta.experiment(c);
        }
        let clone = self.insert_experiment(&tx, &src.project_id, config, Some(src.experiment_id.clone()))?;
        round.clone_experiment_id = Some(clone.experiment_id.clone());
        tx.put(Collection::Rounds, round_id, &round)?;
        Ok(clone)
    }

    // ---- catalog and labels ----

    pub fn profiles(&self) -> Vec<ProfileMeta> {
        self.store.list_profiles()
    }

    pub fn ingest_profile(&self, dir: &Path) -> Result<ProfileMeta> {
        self.store.ingest_profile_dir(dir)
    }

    pub fn architectures(&self) -> Vec<ArchitectureInfo> {
        self.archs
            .describe()
            .into_iter()
            .map(|(id, d)| ArchitectureInfo { architecture_id: id.into(), description: d.into() })
            .collect()
    }

    pub fn upload_labels(&self, req: &UploadLabelsRequest) -> Result<Value> {
        let set = if self.labels.exists(&req.label_set_id) {
            if req.tasks.is_some() {
                return Err(Error::conflict(format!("label set '{}' exists; omit tasks to append", req.label_set_id)));
            }
            self.labels.append_wkt_text(&req.label_set_id, &req.wkt, req.task.as_deref(), req.region)?
        } else {
            let tasks = TaskSpec::parse_list(req.tasks.as_deref().ok_or_else(|| Error::validation("a new label set needs tasks"))?)?;
            let region = req.region.ok_or_else(|| Error::validation("a new label set needs a labeled region"))?;
            self.labels.ingest_wkt_text(&req.wkt, &req.label_set_id, tasks, region, req.task.as_deref())?
        };
        Ok(json!({
            "label_set_id": set.label_set_id,
            "task_specs": set.task_specs,
            "geometry_count": set.geometry_count(),
            "labeled_tiles": set.labeled_tiles()?.len(),
        }))
    }

    pub fn label_tasks(&self) -> Result<Vec<LabelTask>> {
        self.labels.list_tasks()
    }

    pub fn annotate(&self, task_id: &str, wkt: &str) -> Result<Value> {
        if wkt.trim().is_empty() {
            return Err(Error::validation("annotation is empty"));
        }
        let set = self.labels.add_annotations(task_id, wkt)?;
        Ok(json!({"task_id": task_id, "label_set_id": set.label_set_id, "geometry_count": set.geometry_count()}))
    }
}

fn image_gray(img: image::GrayImage) -> image::DynamicImage {
    image::DynamicImage::ImageLuma8(img)
}
