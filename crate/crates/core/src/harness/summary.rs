//! Aggregates the per-rank commit statistics a run leaves behind.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::client::{read_stats_csv, CommitStats};
use crate::error::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Agg {
    pub mean: f64,
    /// Nearest-rank 95th percentile.
    pub p95: f64,
}

pub fn aggregate(values: &[u64]) -> Agg {
    if values.is_empty() {
        return Agg::default();
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = (0.95 * v.len() as f64).ceil() as usize;
    Agg {
        mean: v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64,
        p95: v[rank.clamp(1, v.len()) - 1] as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub ranks: usize,
    pub commits: usize,
    /// ASYNC, SYNC, MIXED, or empty without commits.
    pub mode: String,
    pub t_copy_us: Agg,
    pub t_blocked_us: Agg,
    pub t_transfer_us: Agg,
}

impl Summary {
    pub fn from_stats(per_rank: &[Vec<CommitStats>]) -> Self {
        let all: Vec<&CommitStats> = per_rank.iter().flatten().collect();
        let pick = |f: fn(&CommitStats) -> u64| aggregate(&all.iter().map(|s| f(s)).collect::<Vec<_>>());
        let mut modes: Vec<String> = all.iter().map(|s| s.mode.to_string()).collect();
        modes.dedup();
        modes.sort();
        modes.dedup();
        let mode = match modes.len() {
            0 => String::new(),
            1 => modes.remove(0),
            _ => "MIXED".into(),
        };
        Self {
            ranks: per_rank.len(),
            commits: all.len(),
            mode,
            t_copy_us: pick(|s| s.t_copy_us),
            t_blocked_us: pick(|s| s.t_blocked_us),
            t_transfer_us: pick(|s| s.t_transfer_us),
        }
    }
}

/// Reads every `rank*.csv` in a run directory.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("rank") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    let per_rank = files.iter().map(|f| read_stats_csv(f)).collect::<Result<Vec<_>>>()?;
    Ok(Summary::from_stats(&per_rank))
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ranks {} commits {} mode {}", self.ranks, self.commits, self.mode)?;
        writeln!(f, "{:<14}{:>14}{:>14}", "metric", "mean_us", "p95_us")?;
        for (name, a) in [
            ("t_blocked", self.t_blocked_us),
            ("t_copy", self.t_copy_us),
            ("t_transfer", self.t_transfer_us),
        ] {
            writeln!(f, "{name:<14}{:>14.1}{:>14.1}", a.mean, a.p95)?;
        }
        Ok(())
    }
}

/// Paired comparison of two runs of the same workload, typically
/// asynchronous against synchronous.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub a: Summary,
    pub b: Summary,
    /// Mean blocked time of `a` over that of `b`.
    pub blocked_ratio: f64,
}

impl Comparison {
    pub fn new(a: Summary, b: Summary) -> Self {
        let blocked_ratio = if b.t_blocked_us.mean > 0.0 {
            a.t_blocked_us.mean / b.t_blocked_us.mean
        } else {
            f64::NAN
        };
        Self { a, b, blocked_ratio }
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "first run:\n{}", self.a)?;
        writeln!(f, "second run:\n{}", self.b)?;
        writeln!(f, "blocked time ratio (first / second): {:.3}", self.blocked_ratio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<u64> = (1..=100).collect();
        let a = aggregate(&v);
        assert_eq!(a.p95, 95.0);
        assert_eq!(a.mean, 50.5);
        assert_eq!(aggregate(&[7]).p95, 7.0);
        let twenty: Vec<u64> = (1..=20).collect();
        assert_eq!(aggregate(&twenty).p95, 19.0);
        assert_eq!(aggregate(&[]), Agg::default());
    }
}
