//! Mini-batch Adam training loop.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::adam::{AdamConfig, AdamState};
use super::arch::{Model, ModelSpec, ParamSet};
use super::checkpoint::{append_history, Checkpoint};
use super::loss::multi_task_loss;
use super::metrics::{evaluate, MetricsRecord, Split};
use super::{Example, Hyperparams};
use crate::error::{Error, Result};
use crate::rng::Lcg64;

/// Stream index for the per-epoch shuffle, derived from the init seed.
const SHUFFLE_STREAM: u64 = 1;

pub struct TrainOptions<'a> {
    pub checkpoint_every: u32,
    /// Checkpoints and `metrics.jsonl` go here when set.
    pub out_dir: Option<PathBuf>,
    pub warm_start: Option<Checkpoint>,
    /// Called after each epoch with that epoch's train and val records.
    pub on_epoch: Option<&'a (dyn Fn(u32, &[MetricsRecord]) + Sync)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions { checkpoint_every: 5, out_dir: None, warm_start: None, on_epoch: None }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// `(epoch, path)` of every persisted checkpoint.
    pub checkpoints: Vec<(u32, PathBuf)>,
    pub history: Vec<MetricsRecord>,
    pub last: Checkpoint,
}

impl TrainOutcome {
    pub fn final_val(&self) -> Option<&MetricsRecord> {
        self.history.iter().rev().find(|r| r.split == Split::Val)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: u32) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.trnk"))
}

fn check_examples(spec: &ModelSpec, examples: &[Example]) -> Result<()> {
    for ex in examples {
        if ex.image.c != spec.in_channels {
            return Err(Error::validation(format!(
                "example '{}' has {} channels, model expects {}",
                ex.key, ex.image.c, spec.in_channels
            )));
        }
        if ex.labels.len() != spec.tasks.len() || ex.labels.iter().any(|l| l.len() != ex.image.plane_len()) {
            return Err(Error::validation(format!("example '{}' label planes do not match the tasks", ex.key)));
        }
    }
    Ok(())
}

fn compatible(a: &ModelSpec, b: &ModelSpec) -> Result<()> {
    if a.architecture_id != b.architecture_id || a.tasks != b.tasks || a.in_channels != b.in_channels {
        return Err(Error::validation(format!(
            "warm start checkpoint ({}, {} channels, {} tasks) is incompatible with ({}, {} channels, {} tasks)",
            b.architecture_id,
            b.in_channels,
            b.tasks.len(),
            a.architecture_id,
            a.in_channels,
            a.tasks.len()
        )));
    }
    Ok(())
}

/// One optimizer step over `batch` (indices into `train`, any order).
fn step(model: &mut Model<f32>, opt: &mut AdamState, cfg: &AdamConfig, train: &[Example], batch: &mut [usize]) -> Result<()> {
    batch.sort_unstable();
    let traces = batch.par_iter().map(|&i| model.forward(&train[i].image)).collect::<Result<Vec<_>>>()?;
    let logits: Vec<_> = traces.iter().map(|t| t.logits.clone()).collect();
    let labels: Vec<&[Vec<u8>]> = batch.iter().map(|&i| train[i].labels.as_slice()).collect();
    let (_, _, upstream) = multi_task_loss(&logits, &labels);
    drop(logits);
    let per_example: Vec<ParamSet<f32>> = traces
        .par_iter()
        .zip(upstream.par_iter())
        .map(|(t, g)| {
            let mut acc = model.zero_grads();
            model.backward(t, g, &mut acc);
            acc
        })
        .collect();
    let mut grads = model.zero_grads();
    for g in &per_example {
        for (a, b) in grads.tensors.iter_mut().zip(&g.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }
    opt.step(&mut model.params, &grads, cfg);
    Ok(())
}

/// Trains `spec` on `train`, evaluating `train` and `val` after every epoch.
///
/// With a warm start the parameters and optimizer state come from the
/// checkpoint and epoch numbering continues from it; `hp.epochs` further
/// epochs are run (zero re-evaluates the checkpoint).
pub fn train(train: &[Example], val: &[Example], spec: &ModelSpec, hp: &Hyperparams, opts: &TrainOptions<'_>) -> Result<TrainOutcome> {
    spec.validate()?;
    hp.validate()?;
    if opts.checkpoint_every == 0 {
        return Err(Error::validation("checkpoint_every must be positive"));
    }
    if train.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    check_examples(spec, train)?;
    check_examples(spec, val)?;

    let (mut model, mut opt, start) = match &opts.warm_start {
        Some(ck) => {
            compatible(spec, &ck.spec)?;
            let model = ck.model()?;
            let opt = ck.optimizer.clone().unwrap_or_else(|| AdamState::new(&model.layout()));
            (model, opt, ck.epoch)
        }
        None => {
            let model = Model::<f32>::build(spec, hp.init_seed)?;
            let opt = AdamState::new(&model.layout());
            (model, opt, 0)
        }
    };
    for ex in train.iter().chain(val) {
        model.check_input(&ex.image)?;
    }

    let cfg = hp.adam();
    let mut rng = Lcg64::derive(hp.init_seed, SHUFFLE_STREAM);
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let history_path = opts.out_dir.as_ref().map(|d| d.join("metrics.jsonl"));

    let snapshot = |model: &Model<f32>, epoch: u32| -> Result<Vec<MetricsRecord>> {
        Ok(vec![evaluate(model, train, Split::Train, epoch)?, evaluate(model, val, Split::Val, epoch)?])
    };

    let mut last_metrics = match (&opts.warm_start, hp.epochs) {
        (Some(_), 0) => snapshot(&model, start)?,
        _ => Vec::new(),
    };
    let end = start + hp.epochs;
    for epoch in start + 1..=end {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks_mut(hp.batch_size) {
            step(&mut model, &mut opt, &cfg, train, chunk)?;
        }
        last_metrics = snapshot(&model, epoch)?;
        if let Some(p) = &history_path {
            append_history(p, &last_metrics)?;
        }
        history.extend(last_metrics.iter().cloned());
        if let Some(cb) = opts.on_epoch {
            cb(epoch, &last_metrics);
        }
        if epoch % opts.checkpoint_every == 0 && epoch != end {
            if let Some(dir) = &opts.out_dir {
                let ck = Checkpoint::of_model(&model, Some(opt.clone()), epoch, last_metrics.clone());
                let path = checkpoint_path(dir, epoch);
                ck.save(&path)?;
                checkpoints.push((epoch, path));
            }
        }
    }
    if hp.epochs == 0 {
        history.extend(last_metrics.iter().cloned());
    }
    let last = Checkpoint::of_model(&model, Some(opt), end, last_metrics);
    if let Some(dir) = &opts.out_dir {
        let path = checkpoint_path(dir, end);
        last.save(&path)?;
        checkpoints.push((end, path));
    }
    Ok(TrainOutcome { checkpoints, history, last })
}
