//! Step-wise plan change rate: normalised token edit distance between
//! consecutive plan strings.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdbError};

pub const DEFAULT_WINDOW: usize = 9;

/// Token-level Levenshtein distance with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `lev(next, prev) / max(|next|, |prev|, 1)` over whitespace tokens.
pub fn change_rate(prev: &str, next: &str) -> f64 {
    let a: Vec<&str> = prev.split_whitespace().collect();
    let b: Vec<&str> = next.split_whitespace().collect();
    levenshtein(&b, &a) as f64 / a.len().max(b.len()).max(1) as f64
}

/// Rates between each pair of consecutive steps of one episode.
pub fn spcr(plans: &[String]) -> Result<Vec<f64>> {
    if plans.len() < 2 {
        return Err(SdbError::TooFewSteps(plans.len()));
    }
    Ok(plans.windows(2).map(|w| change_rate(&w[0], &w[1])).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpcrReport {
    /// Per-episode rates; `None` for episodes with fewer than two steps.
    pub rates: Vec<Option<Vec<f64>>>,
    pub window: usize,
    /// Mean and population standard deviation of all rates whose step index is below `window`.
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Aggregate over a plan log; episodes with fewer than two steps are skipped.
pub fn spcr_log(log: &[Vec<String>], window: usize) -> Result<SpcrReport> {
    let rates: Vec<Option<Vec<f64>>> = log.iter().map(|p| spcr(p).ok()).collect();
    let pooled: Vec<f64> = rates.iter().flatten().flat_map(|r| r.iter().take(window).copied()).collect();
    if pooled.is_empty() {
        return Err(SdbError::TooFewSteps(log.iter().map(Vec::len).max().unwrap_or(0)));
    }
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let std = (pooled.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(SpcrReport { rates, window, mean, std, count: pooled.len() })
}

#[derive(Deserialize)]
struct PlanLine {
    plans: Vec<String>,
}

/// Read a JSONL plan log: one object per line with a `plans` array of strings.
pub fn read_plan_log(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str::<PlanLine>(&line)?.plans);
    }
    Ok(out)
}
