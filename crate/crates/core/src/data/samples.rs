use serde::{Deserialize, Serialize};

use super::{DataError, GridSpec, Timestamp, Trajectory, HISTORY_DAYS, HISTORY_LEN, HORIZON, SLOTS_PER_DAY};

/// One day-ahead prediction unit: seven days of history and the next day's
/// 48 slots. `None` marks an unobserved slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSample {
    pub user_id: u64,
    pub target_day: u32,
    pub history: Vec<Option<u32>>,
    pub history_times: Vec<Timestamp>,
    pub future_times: Vec<Timestamp>,
    pub targets: Vec<Option<u32>>,
}

impl PredictionSample {
    pub fn observed_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    /// First day of the history window.
    pub fn history_start(&self) -> u32 {
        self.target_day - HISTORY_DAYS as u32
    }
}

/// One sample per target day `d` in `[7, D)`, where `D` is the
/// trajectory's day span.
pub fn build_samples(trajectory: &Trajectory, grid: &GridSpec) -> Result<Vec<PredictionSample>, DataError> {
    let days = trajectory.num_days() as usize;
    if days <= HISTORY_DAYS {
        return Ok(Vec::new());
    }
    let mut table: Vec<Option<u32>> = vec![None; days * SLOTS_PER_DAY];
    for o in trajectory.observations() {
        table[o.day as usize * SLOTS_PER_DAY + o.slot as usize] = Some(grid.location_id(o.x, o.y)?);
    }
    let times = |start_day: usize, n: usize| -> Vec<Timestamp> {
        (0..n)
            .map(|i| Timestamp { day: (start_day + i / SLOTS_PER_DAY) as u32, slot: (i % SLOTS_PER_DAY) as u32 })
            .collect()
    };
    Ok((HISTORY_DAYS..days)
        .map(|d| {
            let h0 = (d - HISTORY_DAYS) * SLOTS_PER_DAY;
            let f0 = d * SLOTS_PER_DAY;
            PredictionSample {
                user_id: trajectory.user_id,
                target_day: d as u32,
                history: table[h0..h0 + HISTORY_LEN].to_vec(),
                history_times: times(d - HISTORY_DAYS, HISTORY_LEN),
                future_times: times(d, HORIZON),
                targets: table[f0..f0 + HORIZON].to_vec(),
            }
        })
        .collect())
}

/// Samples of every trajectory, in trajectory order.
pub fn build_all_samples(trajectories: &[Trajectory], grid: &GridSpec) -> Result<Vec<PredictionSample>, DataError> {
    let mut out = Vec::new();
    for t in trajectories {
        out.extend(build_samples(t, grid)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::Observation;
    use super::*;

    fn full_trajectory(days: u32) -> Trajectory {
        let obs = (0..days)
            .flat_map(|d| (0..48).map(move |s| Observation { day: d, slot: s, x: 1 + s % 7, y: 1 + d % 5 }))
            .collect();
        Trajectory::new(3, obs).unwrap()
    }

    #[test]
    fn eight_full_days_give_one_sample() {
        let s = build_samples(&full_trajectory(8), &GridSpec::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].history.iter().filter(|h| h.is_some()).count(), 336);
        assert_eq!(s[0].targets.len(), 48);
        assert_eq!(s[0].observed_targets(), 48);
        assert_eq!(s[0].history_times[0], Timestamp { day: 0, slot: 0 });
        assert_eq!(s[0].history_times[335], Timestamp { day: 6, slot: 47 });
        assert_eq!(s[0].future_times[0], Timestamp { day: 7, slot: 0 });
        assert_eq!(s[0].future_times[47], Timestamp { day: 7, slot: 47 });
    }

    #[test]
    fn seventy_five_days_give_sixty_eight_samples() {
        assert_eq!(build_samples(&full_trajectory(75), &GridSpec::default()).unwrap().len(), 68);
        assert!(build_samples(&full_trajectory(7), &GridSpec::default()).unwrap().is_empty());
    }

    #[test]
    fn unobserved_slots_are_missing() {
        let obs = vec![
            Observation { day: 0, slot: 3, x: 2, y: 2 },
            Observation { day: 7, slot: 5, x: 4, y: 4 },
        ];
        let t = Trajectory::new(1, obs).unwrap();
        let s = &build_samples(&t, &GridSpec::default()).unwrap()[0];
        assert_eq!(s.history.iter().filter(|h| h.is_some()).count(), 1);
        assert_eq!(s.history[3], Some(GridSpec::default().location_id(2, 2).unwrap()));
        assert_eq!(s.history[4], None);
        assert_eq!(s.observed_targets(), 1);
        assert_eq!(s.targets[5], Some(GridSpec::default().location_id(4, 4).unwrap()));
    }
}
