use serde::{Deserialize, Serialize};

use super::{build_samples, dataset_days, DataError, GridSpec, PredictionSample, Trajectory};

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.2, 0.1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

/// Day boundaries: train `[0, train_end)`, val `[train_end, val_end)`,
/// test `[val_end, total)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaySplit {
    pub train_end: u32,
    pub val_end: u32,
    pub total: u32,
}

impl DaySplit {
    pub fn new(total_days: u32, ratios: (f64, f64, f64)) -> Result<Self, DataError> {
        let (a, b, c) = ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidRatios(ratios));
        }
        let d = total_days as f64;
        // Tiny slack so 0.7 * 10 lands on 7 rather than 6.999...
        let train = (a * d + 1e-9).floor() as u32;
        let val = (b * d + 1e-9).floor() as u32;
        if train == 0 {
            return Err(DataError::EmptySplit("train"));
        }
        if val == 0 {
            return Err(DataError::EmptySplit("val"));
        }
        if train + val >= total_days {
            return Err(DataError::EmptySplit("test"));
        }
        Ok(Self { train_end: train, val_end: train + val, total: total_days })
    }

    pub fn split_of(&self, day: u32) -> Split {
        if day < self.train_end {
            Split::Train
        } else if day < self.val_end {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SplitSamples {
    pub train: Vec<PredictionSample>,
    pub val: Vec<PredictionSample>,
    pub test: Vec<PredictionSample>,
}

impl SplitSamples {
    pub fn get(&self, split: Split) -> &[PredictionSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Builds samples for every trajectory and routes each by the day it
/// predicts.
pub fn chronological_split(
    trajectories: &[Trajectory],
    grid: &GridSpec,
    ratios: (f64, f64, f64),
) -> Result<(DaySplit, SplitSamples), DataError> {
    let days = DaySplit::new(dataset_days(trajectories), ratios)?;
    let mut out = SplitSamples::default();
    for t in trajectories {
        for s in build_samples(t, grid)? {
            match days.split_of(s.target_day) {
                Split::Train => out.train.push(s),
                Split::Val => out.val.push(s),
                Split::Test => out.test.push(s),
            }
        }
    }
    Ok((days, out))
}

#[cfg(test)]
mod tests {
    use super::super::Observation;
    use super::*;

    #[test]
    fn seventy_five_days() {
        let s = DaySplit::new(75, DEFAULT_RATIOS).unwrap();
        assert_eq!((s.train_end, s.val_end, s.total), (52, 67, 75));
        assert_eq!(s.split_of(51), Split::Train);
        assert_eq!(s.split_of(52), Split::Val);
        assert_eq!(s.split_of(66), Split::Val);
        assert_eq!(s.split_of(67), Split::Test);
    }

    #[test]
    fn ten_days() {
        let s = DaySplit::new(10, DEFAULT_RATIOS).unwrap();
        assert_eq!((s.train_end, s.val_end - s.train_end, s.total - s.val_end), (7, 2, 1));
    }

    #[test]
    fn empty_splits_rejected() {
        assert!(matches!(DaySplit::new(4, DEFAULT_RATIOS), Err(DataError::EmptySplit("val"))));
        assert!(matches!(DaySplit::new(1, DEFAULT_RATIOS), Err(DataError::EmptySplit("train"))));
        assert!(matches!(DaySplit::new(10, (0.5, 0.5, 0.1)), Err(DataError::InvalidRatios(_))));
    }

    #[test]
    fn future_days_are_ordered_and_cover_everything() {
        let grid = GridSpec::default();
        let trajectories: Vec<Trajectory> = (0..3)
            .map(|u| {
                let obs = (0..30).map(|d| Observation { day: d, slot: (d + u) % 48, x: 1, y: 1 }).collect();
                Trajectory::new(u as u64, obs).unwrap()
            })
            .collect();
        let (days, s) = chronological_split(&trajectories, &grid, DEFAULT_RATIOS).unwrap();
        let max_train = s.train.iter().map(|x| x.target_day).max().unwrap();
        let min_val = s.val.iter().map(|x| x.target_day).min().unwrap();
        let max_val = s.val.iter().map(|x| x.target_day).max().unwrap();
        let min_test = s.test.iter().map(|x| x.target_day).min().unwrap();
        assert!(max_train < min_val && max_val < min_test);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 3 * (30 - 7));
        let mut covered: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).map(|x| x.target_day).collect();
        covered.sort();
        covered.dedup();
        assert_eq!(covered, (7..days.total).collect::<Vec<_>>());
    }
}
