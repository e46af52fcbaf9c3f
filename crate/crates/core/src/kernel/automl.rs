//! Random hyperparameter search.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::ModelSpec;
use super::checkpoint::Checkpoint;
use super::train::{train, TrainOptions};
use super::{Example, Hyperparams};
use crate::error::{Error, Result};
use crate::rng::Lcg64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Inclusive bounds, sampled log-uniformly.
    pub learning_rate: (f64, f64),
    pub batch_sizes: Vec<usize>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::validation(format!("learning rate range ({lo}, {hi}) is empty or non-positive")));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::validation("batch size set must be non-empty and positive"));
        }
        Ok(())
    }

    /// Draws one configuration from `rng`: learning rate, batch size, init seed.
    pub fn sample(&self, rng: &mut Lcg64) -> (f64, usize, u64) {
        let (lo, hi) = self.learning_rate;
        let lr = (lo.ln() + rng.next_f64() * (hi.ln() - lo.ln())).exp();
        let batch = self.batch_sizes[rng.below(self.batch_sizes.len())];
        (lr, batch, rng.next_u64())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub hyperparams: Hyperparams,
    pub final_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best_trial: usize,
    pub best: Checkpoint,
    pub trials: Vec<TrialRecord>,
}

impl SearchOutcome {
    pub fn best_hyperparams(&self) -> &Hyperparams {
        &self.trials[self.best_trial].hyperparams
    }
}

/// Index of the smallest loss; NaN counts as +inf and ties go low.
pub fn select_best(losses: &[f64]) -> usize {
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if key(l) < key(losses[best]) {
            best = i;
        }
    }
    best
}

pub struct SearchOptions {
    pub n_trials: usize,
    pub parallelism: usize,
    pub seed: u64,
    pub checkpoint_every: u32,
    /// Trial `i` writes under `<out_dir>/trial_<i>` when set.
    pub out_dir: Option<PathBuf>,
}

/// Each trial draws its hyperparameters from its own stream
/// `Lcg64::derive(seed, trial)`, so results do not depend on parallelism.
/// `base` supplies the epoch count and Adam constants.
pub fn automl_search(
    train_set: &[Example],
    val_set: &[Example],
    spec: &ModelSpec,
    base: &Hyperparams,
    space: &SearchSpace,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    space.validate()?;
    if opts.n_trials == 0 || opts.parallelism == 0 {
        return Err(Error::validation("n_trials and parallelism must be positive"));
    }
    let plans: Vec<Hyperparams> = (0..opts.n_trials)
        .map(|i| {
            let (learning_rate, batch_size, init_seed) = space.sample(&mut Lcg64::derive(opts.seed, i as u64));
            Hyperparams { learning_rate, batch_size, init_seed, ..base.clone() }
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism)
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    let results = pool.install(|| {
        plans
            .par_iter()
            .enumerate()
            .map(|(i, hp)| {
                let topts = TrainOptions {
                    checkpoint_every: opts.checkpoint_every,
                    out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("trial_{i}"))),
                    ..TrainOptions::default()
                };
                train(train_set, val_set, spec, hp, &topts)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let trials: Vec<TrialRecord> = results
        .iter()
        .zip(&plans)
        .enumerate()
        .map(|(i, (r, hp))| TrialRecord {
            trial: i,
            hyperparams: hp.clone(),
            final_val_loss: r.final_val().map_or(f64::NAN, |m| m.total_loss()),
        })
        .collect();
    let losses: Vec<f64> = trials.iter().map(|t| t.final_val_loss).collect();
    let best_trial = select_best(&losses);
    let best = results.into_iter().nth(best_trial).expect("trial exists").last;
    Ok(SearchOutcome { best_trial, best, trials })
}
