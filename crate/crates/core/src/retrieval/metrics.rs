//! Ranking metrics. A ranking is the relevance of each gallery item in retrieved order.

use crate::error::{Error, Result};

/// Mean over queries of average precision over the full ranking.
/// Queries without any relevant item are left out; their count is returned alongside.
pub fn mean_average_precision(rankings: &[Vec<bool>]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for r in rankings {
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, &rel) in r.iter().enumerate() {
            if rel {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        if hits == 0 {
            skipped += 1;
            continue;
        }
        sum += ap / hits as f64;
        used += 1;
    }
    if skipped > 0 {
        log::warn!("{skipped} queries without relevant items excluded from mAP");
    }
    (if used == 0 { 0.0 } else { sum / used as f64 }, skipped)
}

/// Mean over queries of the relevant fraction of the top `k`.
pub fn precision_at_k(rankings: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("precision cutoff must be positive".into()));
    }
    if let Some(r) = rankings.iter().find(|r| r.len() < k) {
        return Err(Error::Contract(format!("cutoff {k} exceeds gallery size {}", r.len())));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = rankings.iter().map(|r| r[..k].iter().filter(|&&x| x).count() as f64 / k as f64).sum();
    Ok(total / rankings.len() as f64)
}

/// Fraction of queries whose true match is within the first `q` positions (ranks are 1-based).
pub fn accuracy_at_q(ranks: &[usize], q: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= q).count() as f64 / ranks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankStats {
    pub r_avg: f64,
    pub v_avg: f64,
    /// Photos with a single rank, left out of `v_avg`.
    pub skipped_variance: usize,
}

/// Mean per-photo rank and mean per-photo population variance of ranks across styles.
pub fn rank_stats(groups: &[Vec<usize>]) -> Result<RankStats> {
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Contract("every photo needs at least one rank".into()));
    }
    let mut r_sum = 0.0;
    let mut v_sum = 0.0;
    let mut v_n = 0;
    for g in groups {
        let n = g.len() as f64;
        let mean = g.iter().map(|&r| r as f64).sum::<f64>() / n;
        r_sum += mean;
        if g.len() >= 2 {
            v_sum += g.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
            v_n += 1;
        }
    }
    let skipped = groups.len() - v_n;
    if skipped > 0 {
        log::warn!("{skipped} photos with a single style excluded from rank variance");
    }
    Ok(RankStats {
        r_avg: if groups.is_empty() { 0.0 } else { r_sum / groups.len() as f64 },
        v_avg: if v_n == 0 { 0.0 } else { v_sum / v_n as f64 },
        skipped_variance: skipped,
    })
}
