use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored sequence with its ground-truth novelty label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub index: usize,
    pub score: f64,
    pub novel: bool,
}

fn split(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (pos, neg): (Vec<_>, Vec<_>) = records.iter().partition(|r| r.novel);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    Ok((
        pos.iter().map(|r| r.score).collect(),
        neg.iter().map(|r| r.score).collect(),
    ))
}

/// Probability that a random novel example outscores a random base one, ties
/// counted half. Computed by sorting; agrees exactly with the pairwise count.
pub fn auroc(records: &[ScoreRecord]) -> Result<f64> {
    let (pos, mut neg) = split(records)?;
    neg.sort_by(f64::total_cmp);
    // u2 = 2 * U, kept integral so the result matches pairwise counting bit for bit.
    let mut u2: u128 = 0;
    for p in &pos {
        let below = neg.partition_point(|n| n < p);
        let not_above = neg.partition_point(|n| n <= p);
        u2 += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = pos.len() as u128 * neg.len() as u128;
    Ok(u2 as f64 / (2 * pairs) as f64)
}

/// Fraction of base examples scoring at or above the threshold that keeps
/// 95% of novel examples.
pub fn fpr95(records: &[ScoreRecord]) -> Result<f64> {
    let (mut pos, neg) = split(records)?;
    pos.sort_by(|a, b| b.total_cmp(a));
    let k = (95 * pos.len()).div_ceil(100);
    let t = pos[k - 1];
    Ok(neg.iter().filter(|&&n| n >= t).count() as f64 / neg.len() as f64)
}
