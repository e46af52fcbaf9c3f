//! Command-line surface and dispatch.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::client::Client;
use crate::config::{self, CliConfig};
use crate::error::{CliError, CliResult};
use crate::inspect;
use crate::output::{fields, object_table, scalar, Printer};

#[derive(Debug, Parser)]
#[command(name = "trinity", version, about = "Geospatial segmentation experiments from the command line")]
pub struct Cli {
    /// Service base URL (overrides TRINITY_SERVER and the config file).
    #[arg(long, global = true)]
    pub server: Option<String>,
    /// API token (overrides TRINITY_TOKEN and the config file).
    #[arg(long, global = true)]
    pub token: Option<String>,
    /// Config file (default ~/.trinity-lite.toml).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    #[command(subcommand)]
    Catalog(CatalogCmd),
    #[command(subcommand)]
    Profile(ProfileCmd),
    #[command(subcommand)]
    Project(ProjectCmd),
    #[command(subcommand)]
    Labels(LabelsCmd),
    #[command(subcommand)]
    Exp(ExpCmd),
    #[command(subcommand)]
    Job(JobCmd),
    #[command(subcommand)]
    Automl(AutomlCmd),
    #[command(subcommand)]
    Post(PostCmd),
    #[command(subcommand)]
    Al(AlCmd),
    /// Read a local file of one of the on-disk formats.
    Inspect {
        format: Format,
        file: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Port 0 picks a free port; the bound address is printed.
    #[arg(long, default_value = "127.0.0.1:8470")]
    pub addr: SocketAddr,
    /// Concurrent jobs.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum CatalogCmd {
    /// Profiles, architectures and post-processors.
    List {
        #[arg(value_enum, default_value = "all")]
        what: CatalogKind,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CatalogKind {
    All,
    Profiles,
    Architectures,
    Postprocessors,
}

#[derive(Debug, Subcommand)]
pub enum ProfileCmd {
    /// Register a directory holding profile.json and .trc tiles.
    Ingest { dir: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum ProjectCmd {
    Create {
        name: String,
        #[arg(long, default_value = "")]
        description: String,
    },
    List,
    Show { id: String },
}

#[derive(Debug, Subcommand)]
pub enum LabelsCmd {
    /// Upload a WKT file, creating or extending a label set.
    Upload {
        file: PathBuf,
        #[arg(long)]
        label_set: String,
        /// `name:classes` pairs, comma separated (new label sets only).
        #[arg(long)]
        tasks: Option<String>,
        /// `min_lon,min_lat,max_lon,max_lat`.
        #[arg(long, allow_hyphen_values = true)]
        region: Option<String>,
        /// Task receiving the geometries.
        #[arg(long)]
        task: Option<String>,
    },
    /// Labeling tasks.
    Tasks,
    /// Add WKT annotations to an open labeling task and close it.
    Annotate { task_id: String, file: PathBuf },
}

#[derive(Debug, Args)]
pub struct ExpFields {
    /// JSON experiment config; flags below override its fields.
    #[arg(long = "config-file")]
    pub config_file: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub label_set: Option<String>,
    #[arg(long = "profile")]
    pub profiles: Vec<String>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub transient_dir: Option<PathBuf>,
    #[arg(long = "tag")]
    pub tags: Vec<String>,
    #[arg(long)]
    pub notes: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum ExpCmd {
    Create {
        #[arg(long)]
        project: String,
        #[command(flatten)]
        fields: ExpFields,
    },
    List,
    Status { id: String },
    /// New DRAFT experiment from an existing one.
    Clone {
        id: String,
        #[command(flatten)]
        fields: ExpFields,
    },
    Lineage { id: String },
    Audit { id: String },
    /// Fire a state-machine event, e.g. `reset`.
    Transition { id: String, event: String },
    /// Replace tags and notes.
    Patch {
        id: String,
        #[arg(long = "tag")]
        tags: Vec<String>,
        #[arg(long)]
        notes: Option<String>,
    },
    Dataprep {
        id: String,
        #[command(flatten)]
        job: JobFlags,
    },
    Train {
        id: String,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long, default_value_t = 5)]
        checkpoint_every: u32,
        #[command(flatten)]
        job: JobFlags,
    },
    Predict {
        id: String,
        #[arg(long, allow_hyphen_values = true)]
        region: String,
        #[arg(long)]
        epoch: Option<u32>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        job: JobFlags,
    },
    /// Training history as JSON lines.
    Metrics { id: String },
    /// Pixel metrics of a prediction against golden WKT.
    Evaluate {
        prediction: String,
        #[arg(long)]
        golden: PathBuf,
        #[arg(long, default_value = "0")]
        task: String,
        #[arg(long, default_value_t = 1)]
        class: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
}

#[derive(Debug, Args)]
pub struct JobFlags {
    /// Block until the job finishes.
    #[arg(long)]
    pub wait: bool,
    #[arg(long)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum JobCmd {
    Status { id: String },
    Wait { id: String },
    List {
        #[arg(long)]
        experiment: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AutomlCmd {
    Run {
        id: String,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr_min: f64,
        #[arg(long, default_value_t = 1e-2)]
        lr_max: f64,
        #[arg(long, value_delimiter = ',', default_value = "2,4")]
        batch_sizes: Vec<usize>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long, default_value_t = 5)]
        checkpoint_every: u32,
        #[command(flatten)]
        job: JobFlags,
    },
}

#[derive(Debug, Args)]
pub struct PostFlags {
    /// Prediction job id.
    pub prediction: String,
    #[arg(long, default_value = "0")]
    pub task: String,
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// e.g. `score >= 0.8 and area_px > 100`.
    #[arg(long)]
    pub predicate: Option<String>,
    /// Also write vectors.wkt and vectors.geojson here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PostCmd {
    Vectorize {
        #[command(flatten)]
        flags: PostFlags,
        #[arg(long, default_value_t = 1.5)]
        eps: f64,
        #[arg(long, default_value_t = 3.0)]
        min_weight: f64,
    },
    Mapmatch {
        #[command(flatten)]
        flags: PostFlags,
        /// Road network: `LINESTRING (...)<TAB>segment_id` lines.
        #[arg(long)]
        network: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        radius_m: f64,
        #[arg(long, default_value_t = 0.0)]
        score_tau: f64,
    },
    /// Re-filter an earlier output with a predicate.
    Filter {
        #[command(flatten)]
        flags: PostFlags,
        #[arg(long)]
        source: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum AlCmd {
    /// Rank a prediction's unlabeled tiles and open a labeling task.
    Select {
        prediction: String,
        #[arg(long)]
        k: usize,
    },
    Status { round: String },
    /// Clone the source experiment onto the augmented label set.
    Complete { round: String },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Trc,
    Trhm,
    Trnk,
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn abs(path: &Path) -> CliResult<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn task_value(s: &str) -> Value {
    s.parse::<usize>().map(Value::from).unwrap_or_else(|_| Value::from(s))
}

/// Config fields set on the command line, merged over `base`.
fn merge_fields(mut base: Map<String, Value>, f: &ExpFields) -> CliResult<Map<String, Value>> {
    if let Some(p) = &f.config_file {
        let text = read_text(p)?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
        match v {
            Value::Object(m) => base.extend(m),
            _ => return Err(CliError::validation(format!("{} must hold a JSON object", p.display()))),
        }
    }
    let mut set = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            base.insert(k.into(), v);
        }
    };
    set("name", f.name.clone().map(Value::from));
    set("label_set_id", f.label_set.clone().map(Value::from));
    set("architecture_id", f.arch.clone().map(Value::from));
    set("val_fraction", f.val_fraction.map(Value::from));
    set("split_seed", f.split_seed.map(Value::from));
    set("notes", f.notes.clone().map(Value::from));
    set("profile_ids", (!f.profiles.is_empty()).then(|| json!(f.profiles)));
    set("tags", (!f.tags.is_empty()).then(|| json!(f.tags)));
    if let Some(d) = &f.transient_dir {
        base.insert("transient_dir".into(), json!(abs(d)?));
    }
    let hp_flags = [
        ("epochs", f.epochs.map(Value::from)),
        ("learning_rate", f.lr.map(Value::from)),
        ("batch_size", f.batch_size.map(Value::from)),
        ("init_seed", f.init_seed.map(Value::from)),
    ];
    if hp_flags.iter().any(|(_, v)| v.is_some()) {
        let hp = base.entry("hyperparams").or_insert_with(|| json!({}));
        let hp = hp.as_object_mut().ok_or_else(|| CliError::validation("hyperparams must be an object"))?;
        for (k, v) in hp_flags {
            if let Some(v) = v {
                hp.insert(k.into(), v);
            }
        }
    }
    Ok(base)
}

fn job_line(j: &Value) -> String {
    format!("{}  {}  {}", scalar(&j["job_id"]), scalar(&j["kind"]), scalar(&j["status"]))
}

const EXP_FIELDS: &[&str] = &[
    "experiment_id",
    "project_id",
    "name",
    "state",
    "architecture_id",
    "label_set_id",
    "profile_ids",
    "hyperparams.epochs",
    "hyperparams.learning_rate",
    "hyperparams.batch_size",
    "checkpoints",
    "parent_id",
    "prediction_jobs",
    "tags",
];

const JOB_FIELDS: &[&str] = &["job_id", "kind", "experiment_id", "status", "checkpoint_epoch", "error"];

pub struct Ctx {
    pub client: Client,
    pub out: Printer,
}

impl Ctx {
    /// Prints a submitted job, or waits for it and prints the final state.
    fn job(&self, job: Value, wait: bool) -> CliResult<()> {
        let job = if wait {
            let id = scalar(&job["job_id"]);
            self.client.wait_job(&id, |j| eprintln!("{}", job_line(j)))?
        } else {
            job
        };
        self.out.emit(&job, |j| if wait { fields(j, JOB_FIELDS) } else { scalar(&j["job_id"]) });
        Ok(())
    }

    fn post(&self, path: &str, body: Value, out: Option<&Path>) -> CliResult<()> {
        let v = self.client.post(path, &body)?;
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("vectors.wkt"), scalar(&v["wkt"]))?;
            std::fs::write(dir.join("vectors.geojson"), serde_json::to_string_pretty(&v["geojson"]).unwrap_or_default())?;
        }
        self.out.emit(&v, |v| {
            let head = format!("{}  {}  {} items", scalar(&v["post_id"]), scalar(&v["method"]), scalar(&v["count"]));
            format!("{head}\n{}", object_table(&v["items"], &["kind", "id", "score", "weight_sum", "area_px"]))
        });
        Ok(())
    }
}

fn post_body(f: &PostFlags, method: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("method".into(), json!(method));
    m.insert("task".into(), task_value(&f.task));
    m.insert("class_index".into(), json!(f.class));
    m.insert("tau".into(), json!(f.tau));
    if let Some(p) = &f.predicate {
        m.insert("predicate".into(), json!(p));
    }
    m
}

/// Runs the HTTP service until interrupted.
pub fn serve(args: &ServeArgs, token: Option<String>) -> CliResult<()> {
    let mut cfg = trinity_service::ServiceConfig::new(&args.data_dir);
    cfg.job_workers = args.workers;
    let svc = trinity_service::Service::open(cfg)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::server(format!("runtime: {e}")))?;
    rt.block_on(trinity_service::http::serve(svc, args.addr, token, |addr| {
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
    }))
    .map_err(|e| CliError::connectivity(format!("cannot serve on {}: {e}", args.addr)))
}

pub fn resolve_config(cli: &Cli) -> CliResult<CliConfig> {
    let path = cli.config.clone().or_else(config::default_path);
    config::resolve(path.as_deref(), cli.server.as_deref(), cli.token.as_deref(), |k| std::env::var(k).ok())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli)?;
    let out = Printer { json: cli.json };
    match &cli.command {
        Command::Serve(args) => return serve(args, cfg.token),
        Command::Inspect { format, file } => {
            let v = match format {
                Format::Trc => inspect::trc(file)?,
                Format::Trhm => inspect::trhm(file)?,
                Format::Trnk => inspect::trnk(file)?,
            };
            out.emit(&v, |v| {
                let keys: Vec<&str> = v.as_object().map(|m| m.keys().map(String::as_str).filter(|k| *k != "metrics" && *k != "tensors").collect()).unwrap_or_default();
                fields(v, &keys)
            });
            return Ok(());
        }
        _ => {}
    }
    let ctx = Ctx { client: Client::new(&cfg)?, out };
    let c = &ctx.client;
    match cli.command {
        Command::Serve(_) | Command::Inspect { .. } => unreachable!("handled above"),
        Command::Catalog(CatalogCmd::List { what }) => {
            let want = |k: CatalogKind| matches!(what, CatalogKind::All) || std::mem::discriminant(&what) == std::mem::discriminant(&k);
            let mut v = Map::new();
            if want(CatalogKind::Profiles) {
                v.insert("profiles".into(), c.get("/api/catalog/profiles")?);
            }
            if want(CatalogKind::Architectures) {
                v.insert("architectures".into(), c.get("/api/catalog/architectures")?);
            }
            if want(CatalogKind::Postprocessors) {
                v.insert("postprocessors".into(), c.get("/api/catalog/postprocessors")?);
            }
            let v = Value::Object(v);
            ctx.out.emit(&v, |v| {
                let mut parts = Vec::new();
                if v.get("profiles").is_some() {
                    parts.push(object_table(&v["profiles"], &["profile_id", "temporal", "channel_names", "dates"]));
                }
                if v.get("architectures").is_some() {
                    parts.push(object_table(&v["architectures"], &["architecture_id", "description"]));
                }
                if v.get("postprocessors").is_some() {
                    parts.push(object_table(&v["postprocessors"], &["method", "description"]));
                }
                parts.join("\n\n")
            });
        }
        Command::Profile(ProfileCmd::Ingest { dir }) => {
            let v = c.post("/api/catalog/profiles/ingest", &json!({"dir": abs(&dir)?}))?;
            ctx.out.emit(&v, |v| fields(v, &["profile_id", "temporal", "channel_names", "dates"]));
        }
        Command::Project(cmd) => match cmd {
            ProjectCmd::Create { name, description } => {
                let v = c.post("/api/projects", &json!({"name": name, "description": description}))?;
                ctx.out.emit(&v, |v| scalar(&v["project_id"]));
            }
            ProjectCmd::List => {
                let v = c.get("/api/projects")?;
                ctx.out.emit(&v, |v| object_table(v, &["project_id", "name", "experiment_ids"]));
            }
            ProjectCmd::Show { id } => {
                let v = c.get(&format!("/api/projects/{id}"))?;
                ctx.out.emit(&v, |v| {
                    format!("{}\n\n{}", fields(&v["project"], &["project_id", "name", "description"]), object_table(&v["experiments"], &["experiment_id", "name", "state", "architecture_id"]))
                });
            }
        },
        Command::Labels(cmd) => match cmd {
            LabelsCmd::Upload { file, label_set, tasks, region, task } => {
                let mut form = vec![("label_set_id", label_set), ("file", read_text(&file)?)];
                form.extend(tasks.map(|t| ("tasks", t)));
                form.extend(region.map(|r| ("region", r)));
                form.extend(task.map(|t| ("task", t)));
                let v = c.post_form("/api/labels/upload", form)?;
                ctx.out.emit(&v, |v| fields(v, &["label_set_id", "geometry_count", "labeled_tiles"]));
            }
            LabelsCmd::Tasks => {
                let v = c.get("/api/labels/tasks")?;
                ctx.out.emit(&v, |v| object_table(v, &["task_id", "label_set_id", "target_task", "status", "origin", "tile_list"]));
            }
            LabelsCmd::Annotate { task_id, file } => {
                let v = c.post(&format!("/api/labels/tasks/{task_id}/annotations"), &json!({"wkt": read_text(&file)?}))?;
                ctx.out.emit(&v, |v| fields(v, &["task_id", "label_set_id", "geometry_count"]));
            }
        },
        Command::Exp(cmd) => match cmd {
            ExpCmd::Create { project, fields: f } => {
                let body = merge_fields(Map::new(), &f)?;
                let v = c.post(&format!("/api/projects/{project}/experiments"), &Value::Object(body))?;
                ctx.out.emit(&v, |v| scalar(&v["experiment_id"]));
            }
            ExpCmd::List => {
                let v = c.get("/api/experiments")?;
                ctx.out.emit(&v, |v| object_table(v, &["experiment_id", "project_id", "name", "state", "architecture_id", "parent_id"]));
            }
            ExpCmd::Status { id } => {
                let exp = c.get(&format!("/api/experiments/{id}"))?;
                let jobs = c.get(&format!("/api/jobs?experiment={id}"))?;
                let v = json!({"experiment": exp, "jobs": jobs});
                ctx.out.emit(&v, |v| format!("{}\n\n{}", fields(&v["experiment"], EXP_FIELDS), object_table(&v["jobs"], &["job_id", "kind", "status", "checkpoint_epoch"])));
            }
            ExpCmd::Clone { id, fields: f } => {
                let mut body = merge_fields(Map::new(), &f)?;
                // partial hyperparameters are completed from the parent
                if let Some(hp) = body.get_mut("hyperparams") {
                    let parent = c.get(&format!("/api/experiments/{id}"))?;
                    let mut full = parent["hyperparams"].as_object().cloned().unwrap_or_default();
                    full.extend(hp.as_object().cloned().unwrap_or_default());
                    *hp = Value::Object(full);
                }
                let v = c.post(&format!("/api/experiments/{id}/clone"), &Value::Object(body))?;
                ctx.out.emit(&v, |v| scalar(&v["experiment_id"]));
            }
            ExpCmd::Lineage { id } => {
                let v = c.get(&format!("/api/experiments/{id}/lineage"))?;
                ctx.out.emit(&v, |v| object_table(v, &["experiment_id", "state", "label_set_id", "parent_id"]));
            }
            ExpCmd::Audit { id } => {
                let v = c.get(&format!("/api/experiments/{id}/audit"))?;
                ctx.out.emit(&v, |v| object_table(v, &["at", "event", "from", "to"]));
            }
            ExpCmd::Transition { id, event } => {
                let v = c.post(&format!("/api/experiments/{id}/transition"), &json!({"event": event}))?;
                ctx.out.emit(&v, |v| format!("{}  {}", scalar(&v["experiment_id"]), scalar(&v["state"])));
            }
            ExpCmd::Patch { id, tags, notes } => {
                let mut body = Map::new();
                if !tags.is_empty() {
                    body.insert("tags".into(), json!(tags));
                }
                if let Some(n) = notes {
                    body.insert("notes".into(), json!(n));
                }
                let v = c.patch(&format!("/api/experiments/{id}"), &Value::Object(body))?;
                ctx.out.emit(&v, |v| fields(v, EXP_FIELDS));
            }
            ExpCmd::Dataprep { id, job } => {
                let v = c.post(&format!("/api/experiments/{id}/dataprep"), &json!({"idempotency_key": job.idempotency_key}))?;
                ctx.job(v, job.wait)?;
            }
            ExpCmd::Train { id, epochs, checkpoint_every, job } => {
                let body = json!({"epochs": epochs, "checkpoint_every": checkpoint_every, "idempotency_key": job.idempotency_key});
                let v = c.post(&format!("/api/experiments/{id}/train"), &body)?;
                ctx.job(v, job.wait)?;
            }
            ExpCmd::Predict { id, region, epoch, workers, job } => {
                let b = trinity_service::http::parse_bbox(&region)?;
                let body = json!({"region": b, "checkpoint_epoch": epoch, "workers": workers, "idempotency_key": job.idempotency_key});
                let v = c.post(&format!("/api/experiments/{id}/predict"), &body)?;
                ctx.job(v, job.wait)?;
            }
            ExpCmd::Metrics { id } => {
                let text = c.get_text(&format!("/api/experiments/{id}/metrics"))?;
                if ctx.out.json {
                    let rows: Vec<Value> = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>().map_err(|e| CliError::server(format!("bad metrics line: {e}")))?;
                    ctx.out.emit(&Value::Array(rows), |_| String::new());
                } else {
                    print!("{text}");
                }
            }
            ExpCmd::Evaluate { prediction, golden, task, class, tau } => {
                let body = json!({"golden_wkt": read_text(&golden)?, "task": task_value(&task), "class_index": class, "tau": tau});
                let v = c.post(&format!("/api/predictions/{prediction}/evaluate"), &body)?;
                ctx.out.emit(&v, |v| fields(v, &["tiles", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "iou"]));
            }
        },
        Command::Job(cmd) => match cmd {
            JobCmd::Status { id } => {
                let v = c.get(&format!("/api/jobs/{id}"))?;
                ctx.out.emit(&v, |v| fields(v, JOB_FIELDS));
            }
            JobCmd::Wait { id } => ctx.job(json!({"job_id": id}), true)?,
            JobCmd::List { experiment } => {
                let path = match experiment {
                    Some(e) => format!("/api/jobs?experiment={e}"),
                    None => "/api/jobs".into(),
                };
                let v = c.get(&path)?;
                ctx.out.emit(&v, |v| object_table(v, &["job_id", "kind", "experiment_id", "status", "checkpoint_epoch"]));
            }
        },
        Command::Automl(AutomlCmd::Run { id, trials, parallelism, seed, lr_min, lr_max, batch_sizes, epochs, checkpoint_every, job }) => {
            let body = json!({
                "n_trials": trials,
                "parallelism": parallelism,
                "seed": seed,
                "space": {"learning_rate": [lr_min, lr_max], "batch_sizes": batch_sizes},
                "epochs": epochs,
                "checkpoint_every": checkpoint_every,
                "idempotency_key": job.idempotency_key,
            });
            let v = c.post(&format!("/api/experiments/{id}/automl"), &body)?;
            ctx.job(v, job.wait)?;
        }
        Command::Post(cmd) => {
            let (flags, body) = match &cmd {
                PostCmd::Vectorize { flags, eps, min_weight } => {
                    let mut b = post_body(flags, "vectorize");
                    b.insert("params".into(), json!({"eps": eps, "min_weight": min_weight}));
                    (flags, b)
                }
                PostCmd::Mapmatch { flags, network, radius_m, score_tau } => {
                    let mut b = post_body(flags, "mapmatch");
                    b.insert("params".into(), json!({"radius_m": radius_m, "score_tau": score_tau}));
                    b.insert("network_wkt".into(), json!(read_text(network)?));
                    (flags, b)
                }
                PostCmd::Filter { flags, source } => {
                    let mut b = post_body(flags, "filter");
                    b.insert("source".into(), json!(source));
                    (flags, b)
                }
            };
            ctx.post(&format!("/api/predictions/{}/postprocess", flags.prediction), Value::Object(body), flags.out.as_deref())?;
        }
        Command::Al(cmd) => {
            let render = |v: &Value| {
                let head = fields(v, &["round_id", "prediction_job_id", "k", "label_set_id", "label_task_id", "clone_experiment_id", "warning"]);
                format!("{head}\n\n{}", object_table(&v["selected"], &["tile.x", "tile.y", "uncertainty"]))
            };
            match cmd {
                AlCmd::Select { prediction, k } => {
                    let v = c.post(&format!("/api/predictions/{prediction}/active-learning"), &json!({"k": k}))?;
                    if let Some(w) = v["warning"].as_str() {
                        eprintln!("warning: {w}");
                    }
                    ctx.out.emit(&v, render);
                }
                AlCmd::Status { round } => {
                    let v = c.get(&format!("/api/active-learning/{round}"))?;
                    ctx.out.emit(&v, render);
                }
                AlCmd::Complete { round } => {
                    let v = c.post(&format!("/api/active-learning/{round}/complete"), &json!({}))?;
                    ctx.out.emit(&v, |v| scalar(&v["experiment_id"]));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_merge_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"label_set_id": "a", "hyperparams": {"epochs": 3, "batch_size": 2}}"#).unwrap();
        let cli = Cli::try_parse_from(["trinity", "exp", "create", "--project", "p-0001", "--config-file", p.to_str().unwrap(), "--label-set", "b", "--epochs", "7", "--profile", "x", "--profile", "y"]).unwrap();
        let Command::Exp(ExpCmd::Create { fields: f, .. }) = cli.command else { panic!() };
        let m = merge_fields(Map::new(), &f).unwrap();
        assert_eq!(m["label_set_id"], "b");
        assert_eq!(m["hyperparams"], json!({"epochs": 7, "batch_size": 2}));
        assert_eq!(m["profile_ids"], json!(["x", "y"]));
    }

    #[test]
    fn negative_region_parses() {
        let cli = Cli::try_parse_from(["trinity", "exp", "predict", "e-0001", "--region", "-122.1,37.3,-122.0,37.4"]).unwrap();
        let Command::Exp(ExpCmd::Predict { region, .. }) = cli.command else { panic!() };
        assert!(trinity_service::http::parse_bbox(&region).is_ok());
    }
}
