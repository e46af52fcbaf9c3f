//! Experiment lifecycle states and the legal transition table.

use std::fmt;

use serde::{Deserialize, Serialize};
use trinity_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExperimentState {
    Draft,
    DataPrepRunning,
    DataReady,
    Training,
    Trained,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    StartDataprep,
    DataprepSucceeded,
    DataprepFailed,
    StartTraining,
    TrainingSucceeded,
    TrainingFailed,
    Reset,
}

impl ExperimentState {
    pub const ALL: [ExperimentState; 6] = [
        ExperimentState::Draft,
        ExperimentState::DataPrepRunning,
        ExperimentState::DataReady,
        ExperimentState::Training,
        ExperimentState::Trained,
        ExperimentState::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentState::Draft => "DRAFT",
            ExperimentState::DataPrepRunning => "DATA_PREP_RUNNING",
            ExperimentState::DataReady => "DATA_READY",
            ExperimentState::Training => "TRAINING",
            ExperimentState::Trained => "TRAINED",
            ExperimentState::Failed => "FAILED",
        }
    }
}

impl Event {
    pub const ALL: [Event; 7] = [
        Event::StartDataprep,
        Event::DataprepSucceeded,
        Event::DataprepFailed,
        Event::StartTraining,
        Event::TrainingSucceeded,
        Event::TrainingFailed,
        Event::Reset,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Event::StartDataprep => "start_dataprep",
            Event::DataprepSucceeded => "dataprep_succeeded",
            Event::DataprepFailed => "dataprep_failed",
            Event::StartTraining => "start_training",
            Event::TrainingSucceeded => "training_succeeded",
            Event::TrainingFailed => "training_failed",
            Event::Reset => "reset",
        }
    }
}

impl fmt::Display for ExperimentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The target state, or `None` when `event` is illegal from `state`.
pub fn next_state(state: ExperimentState, event: Event) -> Option<ExperimentState> {
    use Event::*;
    use ExperimentState::*;
    match (state, event) {
        (Draft, StartDataprep) => Some(DataPrepRunning),
        (DataPrepRunning, DataprepSucceeded) => Some(DataReady),
        (DataPrepRunning, DataprepFailed) => Some(Failed),
        (DataReady, StartTraining) | (Trained, StartTraining) => Some(Training),
        (Training, TrainingSucceeded) => Some(Trained),
        (Training, TrainingFailed) => Some(Failed),
        (Failed, Reset) => Some(Draft),
        _ => None,
    }
}

pub fn transition(state: ExperimentState, event: Event) -> Result<ExperimentState> {
    next_state(state, event).ok_or_else(|| Error::state(format!("event {event} is not allowed in state {state}")))
}

/// Predictions need a trained model, or a checkpoint while training.
pub fn prediction_allowed(state: ExperimentState, has_checkpoint: bool) -> bool {
    state == ExperimentState::Trained || (state == ExperimentState::Training && has_checkpoint)
}
