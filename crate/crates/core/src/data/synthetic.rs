//! Routine-driven synthetic traces with controllable noise and sparsity.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{is_weekend, write_trajectory_csv, DataError, GridSpec, Observation, Trajectory, SLOTS_PER_DAY};

/// Chebyshev radius of the noise neighborhood.
pub const NOISE_RADIUS: i64 = 5;

const WORK_SLOTS: std::ops::Range<usize> = 18..34;
const LEISURE_SLOTS: std::ops::Range<usize> = 20..36;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: u32,
    pub days: u32,
    pub noise: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub seed: u64,
    #[serde(default)]
    pub grid: GridSpec,
}

fn default_dropout() -> f64 {
    0.3
}

impl SyntheticConfig {
    pub fn new(users: u32, days: u32, noise: f64, seed: u64) -> Self {
        Self { users, days, noise, dropout: default_dropout(), seed, grid: GridSpec::default() }
    }

    fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(DataError::InvalidNoise(self.noise));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(DataError::InvalidConfig(format!("dropout must lie in [0, 1], got {}", self.dropout)));
        }
        if self.users == 0 {
            return Err(DataError::InvalidConfig("users must be at least 1".into()));
        }
        if self.days < 8 {
            return Err(DataError::InvalidConfig(format!("days must be at least 8, got {}", self.days)));
        }
        if self.grid.vocabulary_size() < 3 {
            return Err(DataError::InvalidConfig("grid needs at least 3 cells".into()));
        }
        Ok(())
    }
}

/// A user's anchor cells and the per-slot cell it visits on each day type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRoutine {
    pub user_id: u64,
    pub home: (u32, u32),
    pub work: (u32, u32),
    pub leisure: (u32, u32),
    pub weekday: Vec<(u32, u32)>,
    pub weekend: Vec<(u32, u32)>,
}

impl UserRoutine {
    fn new(user_id: u64, home: (u32, u32), work: (u32, u32), leisure: (u32, u32)) -> Self {
        let weekday = (0..SLOTS_PER_DAY).map(|s| if WORK_SLOTS.contains(&s) { work } else { home }).collect();
        let weekend = (0..SLOTS_PER_DAY).map(|s| if LEISURE_SLOTS.contains(&s) { leisure } else { home }).collect();
        Self { user_id, home, work, leisure, weekday, weekend }
    }

    /// Routine cell for a (day, slot).
    pub fn cell(&self, day: u32, slot: u32) -> (u32, u32) {
        let table = if is_weekend(day) { &self.weekend } else { &self.weekday };
        table[slot as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub routines: Vec<UserRoutine>,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

fn random_cell(rng: &mut ChaCha8Rng, grid: &GridSpec) -> (u32, u32) {
    (rng.random_range(1..=grid.width), rng.random_range(1..=grid.height))
}

/// Uniform in-grid cell within the noise radius, excluding the center.
fn random_neighbor(rng: &mut ChaCha8Rng, grid: &GridSpec, center: (u32, u32)) -> (u32, u32) {
    loop {
        let dx = rng.random_range(-NOISE_RADIUS..=NOISE_RADIUS);
        let dy = rng.random_range(-NOISE_RADIUS..=NOISE_RADIUS);
        if dx == 0 && dy == 0 {
            continue;
        }
        let (x, y) = (center.0 as i64 + dx, center.1 as i64 + dy);
        if x >= 1 && y >= 1 && x <= grid.width as i64 && y <= grid.height as i64 {
            return (x as u32, y as u32);
        }
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset, DataError> {
    config.validate()?;
    let grid = config.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut routines = Vec::with_capacity(config.users as usize);
    let mut trajectories = Vec::with_capacity(config.users as usize);
    for uid in 0..config.users as u64 {
        let home = random_cell(&mut rng, &grid);
        let work = loop {
            let c = random_cell(&mut rng, &grid);
            if c != home {
                break c;
            }
        };
        let leisure = loop {
            let c = random_cell(&mut rng, &grid);
            if c != home && c != work {
                break c;
            }
        };
        let routine = UserRoutine::new(uid, home, work, leisure);
        let mut observations = Vec::new();
        for day in 0..config.days {
            for slot in 0..SLOTS_PER_DAY as u32 {
                let mut cell = routine.cell(day, slot);
                if rng.random_bool(config.noise) {
                    cell = random_neighbor(&mut rng, &grid, cell);
                }
                if !rng.random_bool(config.dropout) {
                    observations.push(Observation { day, slot, x: cell.0, y: cell.1 });
                }
            }
        }
        trajectories.push(Trajectory::new(uid, observations)?);
        routines.push(routine);
    }
    Ok(SyntheticDataset { config: config.clone(), routines, trajectories })
}

/// Writes `trajectories.csv` and the `synthetic.json` sidecar into `dir`.
pub fn write_synthetic(dir: &Path, dataset: &SyntheticDataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_owned(), source })?;
    write_trajectory_csv(&dir.join("trajectories.csv"), &dataset.trajectories)?;
    let sidecar = dir.join("synthetic.json");
    let json = serde_json::to_string_pretty(dataset)?;
    fs::write(&sidecar, json).map_err(|source| DataError::Io { path: sidecar, source })
}
