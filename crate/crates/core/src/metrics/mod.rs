//! Ranking accuracy, sequence similarity, temporal breakdowns and a
//! frequency baseline.

mod baseline;
mod sequence;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, GridSpec, Timestamp, SLOTS_PER_DAY};

pub use baseline::FrequencyBaseline;
pub use sequence::{bleu, dtw, Cell};

/// Stored ranking length unless configured otherwise.
pub const DEFAULT_TOP_K: usize = 10;
pub const BLEU_MAX_N: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no observed targets to score")]
    NoObservedTargets,
    #[error("empty sequence")]
    EmptySequence,
    #[error("k must be at least 1, got {0}")]
    InvalidK(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One scored future slot: the true cell, if observed, and the predicted
/// cells in descending probability order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub time: Timestamp,
    pub target: Option<u32>,
    pub ranking: Vec<u32>,
}

impl RankedPrediction {
    /// 1-based position of the target in the stored ranking.
    pub fn rank(&self) -> Option<usize> {
        let t = self.target?;
        self.ranking.iter().position(|&id| id == t).map(|p| p + 1)
    }
}

/// The `k` highest-scoring ids, descending, ties by ascending id.
pub fn top_k_ranking(scores: &[f64], k: usize) -> Vec<u32> {
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(ids.len());
    if k < ids.len() && k > 0 {
        ids.select_nth_unstable_by(k - 1, by_score);
        ids.truncate(k);
    }
    ids.sort_unstable_by(by_score);
    ids.truncate(k);
    ids.into_iter().map(|i| i as u32).collect()
}

fn observed(preds: &[RankedPrediction]) -> impl Iterator<Item = &RankedPrediction> {
    preds.iter().filter(|p| p.target.is_some())
}

/// Fraction of observed slots whose target is among the first `k` ids.
pub fn accuracy_at_k(preds: &[RankedPrediction], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK(k));
    }
    let (mut hits, mut n) = (0usize, 0usize);
    for p in observed(preds) {
        n += 1;
        if p.rank().is_some_and(|r| r <= k) {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoObservedTargets);
    }
    Ok(hits as f64 / n as f64)
}

/// Mean reciprocal rank over observed slots; a target missing from the
/// stored ranking contributes 0.
pub fn mrr(preds: &[RankedPrediction]) -> Result<f64, MetricsError> {
    let (mut total, mut n) = (0.0, 0usize);
    for p in observed(preds) {
        n += 1;
        total += p.rank().map_or(0.0, |r| 1.0 / r as f64);
    }
    if n == 0 {
        return Err(MetricsError::NoObservedTargets);
    }
    Ok(total / n as f64)
}

/// Acc@1 for one bin; `acc1` is `None` when the bin received no data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub count: usize,
    pub hits: usize,
    pub acc1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalBreakdown {
    pub by_slot: Vec<Bin>,
    pub by_day_of_week: Vec<Bin>,
}

pub fn temporal_breakdown(preds: &[RankedPrediction]) -> TemporalBreakdown {
    let mut slot = vec![(0usize, 0usize); SLOTS_PER_DAY];
    let mut dow = vec![(0usize, 0usize); 7];
    for p in observed(preds) {
        let hit = usize::from(p.rank() == Some(1));
        for (bins, key) in [(&mut slot, p.time.slot as usize), (&mut dow, p.time.dow() as usize)] {
            bins[key].0 += 1;
            bins[key].1 += hit;
        }
    }
    let finish = |bins: Vec<(usize, usize)>| {
        bins.into_iter()
            .map(|(count, hits)| Bin { count, hits, acc1: (count > 0).then(|| hits as f64 / count as f64) })
            .collect()
    };
    TemporalBreakdown { by_slot: finish(slot), by_day_of_week: finish(dow) }
}

/// Predictions for one user-day.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub user_id: u64,
    pub target_day: u32,
    pub slots: Vec<RankedPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub samples: usize,
    pub observed_slots: usize,
    pub acc1: f64,
    pub acc3: f64,
    pub acc5: f64,
    pub mrr: f64,
    /// Mean per-sample DTW between observed and top-1 cell sequences.
    pub dtw: f64,
    /// Mean per-sample BLEU between observed and top-1 id sequences.
    pub bleu: f64,
    pub bleu_mode: String,
    pub top_k: usize,
    pub breakdown: TemporalBreakdown,
}

/// Aggregates metrics over samples; sequence metrics compare, per sample,
/// the observed targets with the top-1 predictions at the same slots.
pub fn summarize(outcomes: &[SampleOutcome], grid: &GridSpec, top_k: usize) -> Result<MetricSummary, MetricsError> {
    let all: Vec<RankedPrediction> = outcomes.iter().flat_map(|o| o.slots.iter().cloned()).collect();
    let (mut dtw_sum, mut bleu_sum, mut scored) = (0.0, 0.0, 0usize);
    for o in outcomes {
        let pairs: Vec<(u32, u32)> = o
            .slots
            .iter()
            .filter_map(|p| Some((p.target?, *p.ranking.first()?)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let truth: Vec<u32> = pairs.iter().map(|p| p.0).collect();
        let guess: Vec<u32> = pairs.iter().map(|p| p.1).collect();
        let cells = |ids: &[u32]| ids.iter().map(|&id| grid.inverse_location_id(id)).collect::<Result<Vec<_>, _>>();
        dtw_sum += dtw(&cells(&truth)?, &cells(&guess)?)?;
        bleu_sum += bleu(&truth, &guess, BLEU_MAX_N)?;
        scored += 1;
    }
    if scored == 0 {
        return Err(MetricsError::NoObservedTargets);
    }
    Ok(MetricSummary {
        samples: outcomes.len(),
        observed_slots: observed(&all).count(),
        acc1: accuracy_at_k(&all, 1)?,
        acc3: accuracy_at_k(&all, 3)?,
        acc5: accuracy_at_k(&all, 5)?,
        mrr: mrr(&all)?,
        dtw: dtw_sum / scored as f64,
        bleu: bleu_sum / scored as f64,
        bleu_mode: "per-sequence mean".into(),
        top_k,
        breakdown: temporal_breakdown(&all),
    })
}
