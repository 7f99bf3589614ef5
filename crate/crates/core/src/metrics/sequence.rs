use std::collections::HashMap;

use super::MetricsError;

/// Grid cell as `(x, y)`.
pub type Cell = (u32, u32);

fn distance(a: Cell, b: Cell) -> f64 {
    let dx = f64::from(a.0) - f64::from(b.0);
    let dy = f64::from(a.1) - f64::from(b.1);
    (dx * dx + dy * dy).sqrt()
}

/// Dynamic time warping cost with Euclidean distance between cell centers,
/// in grid units.
pub fn dtw(a: &[Cell], b: &[Cell]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = best + distance(ai, bj);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Sentence BLEU with uniform weights over `1..=max_n`, clipped counts and
/// no smoothing: any zero precision gives 0.
pub fn bleu(reference: &[u32], hypothesis: &[u32], max_n: usize) -> Result<f64, MetricsError> {
    if reference.is_empty() || hypothesis.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    if max_n == 0 {
        return Err(MetricsError::InvalidK(0));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        if hypothesis.len() < n {
            return Ok(0.0);
        }
        let mut ref_counts: HashMap<&[u32], usize> = HashMap::new();
        for g in reference.windows(n) {
            *ref_counts.entry(g).or_default() += 1;
        }
        let mut hyp_counts: HashMap<&[u32], usize> = HashMap::new();
        for g in hypothesis.windows(n) {
            *hyp_counts.entry(g).or_default() += 1;
        }
        let clipped: usize = hyp_counts.iter().map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        let total = hypothesis.len() - n + 1;
        log_sum += (clipped as f64 / total as f64).ln() / max_n as f64;
    }
    let (r, h) = (reference.len() as f64, hypothesis.len() as f64);
    let bp = if h >= r { 1.0 } else { (1.0 - r / h).exp() };
    Ok(bp * log_sum.exp())
}
