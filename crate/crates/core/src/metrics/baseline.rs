use std::collections::{BTreeMap, HashMap};

use crate::data::{is_weekend, PredictionSample, Timestamp, Trajectory};

use super::{RankedPrediction, SampleOutcome};

type Counts = BTreeMap<u32, usize>;

/// Per-user modal-location predictor keyed by slot of day and
/// weekday/weekend, falling back to the user's overall counts and then to
/// the global counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrequencyBaseline {
    slot_counts: HashMap<(u64, u32, bool), Counts>,
    user_counts: HashMap<u64, Counts>,
    global_counts: Counts,
}

fn ordered(counts: &Counts) -> impl Iterator<Item = u32> + '_ {
    let mut v: Vec<(&u32, &usize)> = counts.iter().collect();
    v.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    v.into_iter().map(|(id, _)| *id)
}

impl FrequencyBaseline {
    /// Counts every observation on days before `until_day`.
    pub fn fit(trajectories: &[Trajectory], grid: &crate::data::GridSpec, until_day: u32) -> Self {
        let mut model = Self::default();
        for t in trajectories {
            for o in t.observations().iter().take_while(|o| o.day < until_day) {
                let Ok(id) = grid.location_id(o.x, o.y) else { continue };
                *model.slot_counts.entry((t.user_id, o.slot, is_weekend(o.day))).or_default().entry(id).or_default() += 1;
                *model.user_counts.entry(t.user_id).or_default().entry(id).or_default() += 1;
                *model.global_counts.entry(id).or_default() += 1;
            }
        }
        model
    }

    /// Up to `k` ids, most frequent first, ties by ascending id.
    pub fn rank(&self, user_id: u64, time: Timestamp, k: usize) -> Vec<u32> {
        let empty = Counts::new();
        let levels = [
            self.slot_counts.get(&(user_id, time.slot, is_weekend(time.day))).unwrap_or(&empty),
            self.user_counts.get(&user_id).unwrap_or(&empty),
            &self.global_counts,
        ];
        let mut out = Vec::with_capacity(k);
        for level in levels {
            for id in ordered(level) {
                if out.len() == k {
                    return out;
                }
                if !out.contains(&id) {
                    out.push(id);
                }
            }
        }
        out
    }

    pub fn outcomes(&self, samples: &[PredictionSample], k: usize) -> Vec<SampleOutcome> {
        samples
            .iter()
            .map(|s| SampleOutcome {
                user_id: s.user_id,
                target_day: s.target_day,
                slots: s
                    .future_times
                    .iter()
                    .zip(&s.targets)
                    .map(|(&time, &target)| RankedPrediction { time, target, ranking: self.rank(s.user_id, time, k) })
                    .collect(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chronological_split, generate_synthetic, GridSpec, SyntheticConfig, DEFAULT_RATIOS};
    use crate::metrics::accuracy_at_k;

    fn baseline_acc(noise: f64, seed: u64) -> f64 {
        let grid = GridSpec::new(20, 20).unwrap();
        let cfg = SyntheticConfig { grid, ..SyntheticConfig::new(20, 30, noise, seed) };
        let data = generate_synthetic(&cfg).unwrap();
        let (days, split) = chronological_split(&data.trajectories, &grid, DEFAULT_RATIOS).unwrap();
        let base = FrequencyBaseline::fit(&data.trajectories, &grid, days.train_end);
        let preds: Vec<RankedPrediction> = base.outcomes(&split.test, 10).into_iter().flat_map(|o| o.slots).collect();
        accuracy_at_k(&preds, 1).unwrap()
    }

    #[test]
    fn noiseless_routines_are_recovered_exactly() {
        assert_eq!(baseline_acc(0.0, 3), 1.0);
    }

    #[test]
    fn noisy_routines_score_near_one_minus_noise() {
        let acc = baseline_acc(0.3, 5);
        assert!((acc - 0.7).abs() <= 0.03, "{acc}");
    }

    #[test]
    fn unseen_user_uses_global_counts() {
        let grid = GridSpec::new(4, 4).unwrap();
        let t = Trajectory::new(
            1,
            vec![
                crate::data::Observation { day: 0, slot: 3, x: 1, y: 1 },
                crate::data::Observation { day: 1, slot: 3, x: 1, y: 1 },
                crate::data::Observation { day: 1, slot: 4, x: 2, y: 1 },
            ],
        )
        .unwrap();
        let base = FrequencyBaseline::fit(&[t], &grid, 10);
        assert_eq!(base.rank(99, Timestamp { day: 5, slot: 0 }, 5), vec![0, 4]);
        assert_eq!(base.rank(1, Timestamp { day: 2, slot: 4 }, 5), vec![4, 0]);
        assert_eq!(base.rank(1, Timestamp { day: 2, slot: 3 }, 1), vec![0]);
    }
}
