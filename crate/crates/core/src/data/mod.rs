//! Trajectory ingestion, chronological splitting, sample construction and
//! synthetic trace generation.

mod csv;
mod grid;
mod samples;
mod split;
mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::csv::{dataset_fingerprint, parse_trajectory_csv, read_trajectories, write_trajectory_csv};
pub use grid::GridSpec;
pub use samples::{build_samples, build_all_samples, PredictionSample};
pub use split::{chronological_split, DaySplit, Split, SplitSamples, DEFAULT_RATIOS};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticConfig, SyntheticDataset, UserRoutine};

/// Half-hour slots per day.
pub const SLOTS_PER_DAY: usize = 48;
/// Days of context before each target day.
pub const HISTORY_DAYS: usize = 7;
/// History window length in slots.
pub const HISTORY_LEN: usize = HISTORY_DAYS * SLOTS_PER_DAY;
/// Prediction horizon in slots (one day).
pub const HORIZON: usize = SLOTS_PER_DAY;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed row ({reason})")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate observation for uid {uid} on day {day}, slot {slot}")]
    DuplicateObservation { uid: u64, day: u32, slot: u32 },
    #[error("line {line}: cell outside the grid")]
    OutOfGridRow { line: usize },
    #[error("cell ({x}, {y}) outside the {width}x{height} grid")]
    OutOfGrid { x: u32, y: u32, width: u32, height: u32 },
    #[error("location id {0} outside the grid vocabulary")]
    UnknownLocation(u32),
    #[error("trajectory for uid {uid} is not strictly increasing in (day, slot)")]
    Unsorted { uid: u64 },
    #[error("split {0} would receive zero days")]
    EmptySplit(&'static str),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("noise must lie in [0, 1], got {0}")]
    InvalidNoise(f64),
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Day-of-week index with day 0 taken as Monday.
pub fn day_of_week(day: u32) -> u32 {
    day % 7
}

pub fn is_weekend(day: u32) -> bool {
    day_of_week(day) >= 5
}

/// A (day, slot) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    pub day: u32,
    pub slot: u32,
}

impl Timestamp {
    pub fn dow(self) -> u32 {
        day_of_week(self.day)
    }
}

/// One observed grid cell at a half-hour slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub day: u32,
    pub slot: u32,
    pub x: u32,
    pub y: u32,
}

impl Observation {
    pub fn timestamp(&self) -> Timestamp {
        Timestamp { day: self.day, slot: self.slot }
    }
}

/// A user's observations, strictly increasing by (day, slot).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: u64,
    observations: Vec<Observation>,
}

impl Trajectory {
    pub fn new(user_id: u64, observations: Vec<Observation>) -> Result<Self, DataError> {
        for o in &observations {
            if o.slot as usize >= SLOTS_PER_DAY {
                return Err(DataError::InvalidConfig(format!("slot {} out of range", o.slot)));
            }
        }
        if observations.windows(2).any(|w| w[0].timestamp() >= w[1].timestamp()) {
            return Err(DataError::Unsorted { uid: user_id });
        }
        Ok(Self { user_id, observations })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// One past the last observed day; zero when empty.
    pub fn num_days(&self) -> u32 {
        self.observations.last().map_or(0, |o| o.day + 1)
    }

    /// Observations falling on `day`, in slot order.
    pub fn day(&self, day: u32) -> &[Observation] {
        let start = self.observations.partition_point(|o| o.day < day);
        let end = self.observations.partition_point(|o| o.day <= day);
        &self.observations[start..end]
    }
}

/// Number of days covered by a dataset (one past the latest observed day).
pub fn dataset_days(trajectories: &[Trajectory]) -> u32 {
    trajectories.iter().map(Trajectory::num_days).max().unwrap_or(0)
}
