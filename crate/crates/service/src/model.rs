//! Persisted metadata documents.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use trinity_core::dataprep::{DateRange, DEFAULT_VAL_FRACTION};
use trinity_core::geo::TileKey;
use trinity_core::kernel::Hyperparams;

use crate::state::{Event, ExperimentState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub project_id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub experiment_ids: Vec<String>,
    pub created_at: DateTime<Utc>,
}

fn default_val_fraction() -> f64 {
    DEFAULT_VAL_FRACTION
}

/// User-chosen experiment definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub label_set_id: String,
    pub profile_ids: Vec<String>,
    #[serde(default)]
    pub date_ranges: BTreeMap<String, DateRange>,
    pub architecture_id: String,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub transient_dir: Option<PathBuf>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub experiment_id: String,
    pub project_id: String,
    #[serde(flatten)]
    pub config: ExperimentConfig,
    pub state: ExperimentState,
    #[serde(default)]
    pub parent_id: Option<String>,
    /// Epochs with a saved checkpoint, ascending.
    #[serde(default)]
    pub checkpoints: Vec<u32>,
    #[serde(default)]
    pub prediction_jobs: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// Fields a clone may replace; everything else is copied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub name: Option<String>,
    pub label_set_id: Option<String>,
    pub profile_ids: Option<Vec<String>>,
    pub date_ranges: Option<BTreeMap<String, DateRange>>,
    pub architecture_id: Option<String>,
    pub hyperparams: Option<Hyperparams>,
    pub val_fraction: Option<f64>,
    pub split_seed: Option<u64>,
    pub transient_dir: Option<PathBuf>,
    pub tags: Option<Vec<String>>,
    pub notes: Option<String>,
}

impl ConfigOverrides {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        take!(name, label_set_id, profile_ids, date_ranges, architecture_id, hyperparams, val_fraction, split_seed, tags, notes);
        if let Some(t) = &self.transient_dir {
            c.transient_dir = Some(t.clone());
        }
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPatch {
    pub tags: Option<Vec<String>>,
    pub notes: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Dataprep,
    Training,
    Automl,
    Prediction,
}

impl JobKind {
    /// Jobs of the same slot may not run concurrently on one experiment.
    pub fn slot(self) -> Option<&'static str> {
        match self {
            JobKind::Dataprep => Some("dataprep"),
            JobKind::Training | JobKind::Automl => Some("training"),
            JobKind::Prediction => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn is_active(self) -> bool {
        matches!(self, JobStatus::Queued | JobStatus::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub experiment_id: String,
    pub status: JobStatus,
    #[serde(default)]
    pub idempotency_key: Option<String>,
    pub params: Value,
    /// Checkpoint epoch a prediction is bound to.
    #[serde(default)]
    pub checkpoint_epoch: Option<u32>,
    #[serde(default)]
    pub result: Option<Value>,
    #[serde(default)]
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: DateTime<Utc>,
    pub experiment_id: String,
    /// `None` for the creation entry.
    pub event: Option<Event>,
    pub from: Option<ExperimentState>,
    pub to: ExperimentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTile {
    pub tile: TileKey,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveLearningRound {
    pub round_id: String,
    pub source_experiment_id: String,
    pub prediction_job_id: String,
    pub k: usize,
    /// Selected tiles, most uncertain first.
    pub selected: Vec<RankedTile>,
    /// Label set holding the source labels plus the round's annotations.
    pub label_set_id: String,
    pub label_task_id: String,
    #[serde(default)]
    pub clone_experiment_id: Option<String>,
    #[serde(default)]
    pub warning: Option<String>,
    pub created_at: DateTime<Utc>,
}
