//! File-backed document store: one JSON file per document, written by
//! temp-file-and-rename, plus an append-only audit log. All mutations go
//! through [`MetaStore::write`], which serializes writers.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::de::DeserializeOwned;
use serde::Serialize;
use trinity_core::store::write_atomic;
use trinity_core::{Error, Result};

use crate::model::{ActiveLearningRound, AuditEntry, Experiment, Job, Project};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collection {
    Projects,
    Experiments,
    Jobs,
    Rounds,
}

impl Collection {
    fn dir(self) -> &'static str {
        match self {
            Collection::Projects => "projects",
            Collection::Experiments => "experiments",
            Collection::Jobs => "jobs",
            Collection::Rounds => "rounds",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Collection::Projects => "p",
            Collection::Experiments => "e",
            Collection::Jobs => "j",
            Collection::Rounds => "al",
        }
    }

    fn noun(self) -> &'static str {
        match self {
            Collection::Projects => "project",
            Collection::Experiments => "experiment",
            Collection::Jobs => "job",
            Collection::Rounds => "active learning round",
        }
    }
}

pub struct MetaStore {
    root: PathBuf,
    writer: Mutex<()>,
}

/// Held while mutating; proves the caller is the single writer.
pub struct WriteTx<'a> {
    store: &'a MetaStore,
    _guard: MutexGuard<'a, ()>,
}

impl MetaStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for c in [Collection::Projects, Collection::Experiments, Collection::Jobs, Collection::Rounds] {
            fs::create_dir_all(root.join(c.dir()))?;
        }
        Ok(MetaStore { root, writer: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, c: Collection, id: &str) -> Result<PathBuf> {
        let ok = !id.is_empty() && id.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_');
        if !ok {
            return Err(Error::not_found(format!("{} '{id}'", c.noun())));
        }
        Ok(self.root.join(c.dir()).join(format!("{id}.json")))
    }

    pub fn write(&self) -> WriteTx<'_> {
        WriteTx { store: self, _guard: self.writer.lock().unwrap_or_else(|p| p.into_inner()) }
    }

    pub fn get<T: DeserializeOwned>(&self, c: Collection, id: &str) -> Result<T> {
        match fs::read(self.path(c, id)?) {
            Ok(b) => Ok(serde_json::from_slice(&b)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::not_found(format!("{} '{id}'", c.noun()))),
            Err(e) => Err(e.into()),
        }
    }

    /// Every document in the collection, ordered by id.
    pub fn list<T: DeserializeOwned>(&self, c: Collection) -> Result<Vec<T>> {
        let mut paths: Vec<PathBuf> = fs::read_dir(self.root.join(c.dir()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Ok(serde_json::from_slice(&fs::read(p)?)?)).collect()
    }

    pub fn project(&self, id: &str) -> Result<Project> {
        self.get(Collection::Projects, id)
    }

    pub fn experiment(&self, id: &str) -> Result<Experiment> {
        self.get(Collection::Experiments, id)
    }

    pub fn job(&self, id: &str) -> Result<Job> {
        self.get(Collection::Jobs, id)
    }

    pub fn round(&self, id: &str) -> Result<ActiveLearningRound> {
        self.get(Collection::Rounds, id)
    }

    pub fn audit(&self) -> Result<Vec<AuditEntry>> {
        let text = match fs::read_to_string(self.root.join("audit.jsonl")) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        // a torn final line from a crash mid-append is ignored
        Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
    }
}

impl WriteTx<'_> {
    /// Next free id in the collection, e.g. `e-0003`.
    pub fn next_id(&self, c: Collection) -> Result<String> {
        let n = fs::read_dir(self.store.root.join(c.dir()))?.count();
        let mut i = n + 1;
        loop {
            let id = format!("{}-{i:04}", c.prefix());
            if !self.store.path(c, &id)?.exists() {
                return Ok(id);
            }
            i += 1;
        }
    }

    pub fn put<T: Serialize>(&self, c: Collection, id: &str, doc: &T) -> Result<()> {
        write_atomic(&self.store.path(c, id)?, &serde_json::to_vec_pretty(doc)?)
    }

    pub fn append_audit(&self, entry: &AuditEntry) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.store.root.join("audit.jsonl"))?;
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }
}
