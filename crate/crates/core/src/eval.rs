//! Full-catalog ranking metrics, time-segment breakdowns and a throughput
//! harness.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{segment_test_by_time, Example};
use crate::tensor::pairwise_sum;

/// Metrics of one example at cutoff `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub rank: usize,
    pub recall: f64,
    pub rr: f64,
    pub ndcg: f64,
}

/// 1-based rank of `target`: items with a strictly greater logit, or an
/// equal logit and a lower index, rank ahead of it.
pub fn rank_of(logits: &[f64], target: usize) -> usize {
    let t = logits[target];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count()
}

pub fn rank_metrics(logits: &[f64], target: usize, k: usize) -> RankMetrics {
    let rank = rank_of(logits, target);
    if rank > k {
        return RankMetrics {
            rank,
            recall: 0.0,
            rr: 0.0,
            ndcg: 0.0,
        };
    }
    RankMetrics {
        rank,
        recall: 1.0,
        rr: 1.0 / rank as f64,
        ndcg: 1.0 / ((rank + 1) as f64).log2(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub count: usize,
    pub recall: f64,
    pub mrr: f64,
    pub ndcg: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<MetricsReport>,
}

impl MetricsReport {
    /// Means over `per_example` using pairwise summation.
    pub fn from_examples(per_example: &[RankMetrics], k: usize) -> Self {
        let n = per_example.len();
        let mean = |f: fn(&RankMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                pairwise_sum(&per_example.iter().map(f).collect::<Vec<_>>()) / n as f64
            }
        };
        Self {
            k,
            count: n,
            recall: mean(|m| m.recall),
            mrr: mean(|m| m.rr),
            ndcg: mean(|m| m.ndcg),
            segments: Vec::new(),
        }
    }
}

/// Per-segment reports of `eval_fn` over `test` cut into `k_segments` time
/// segments.
pub fn segment_analysis<F>(test: &[Example], k_segments: usize, k: usize, mut eval_fn: F) -> Result<Vec<MetricsReport>>
where
    F: FnMut(&[Example]) -> Result<Vec<RankMetrics>>,
{
    segment_test_by_time(test, k_segments)?
        .iter()
        .map(|seg| Ok(MetricsReport::from_examples(&eval_fn(seg)?, k)))
        .collect()
}

/// NDCG, recall and MRR differences `b − a` per segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentDelta {
    pub segment: usize,
    pub ndcg: f64,
    pub recall: f64,
    pub mrr: f64,
}

pub fn segment_deltas(a: &[MetricsReport], b: &[MetricsReport]) -> Vec<SegmentDelta> {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(segment, (a, b))| SegmentDelta {
            segment,
            ndcg: b.ndcg - a.ndcg,
            recall: b.recall - a.recall,
            mrr: b.mrr - a.mrr,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub iterations_per_second: f64,
    pub batch_size: usize,
    pub adaptation: bool,
    pub warmup: usize,
    pub reps: usize,
    /// Seconds per timed repetition, in run order.
    pub rep_seconds: Vec<f64>,
}

/// Median iterations per second of `f` over `batches`. Each repetition
/// runs every batch once; the first `warmup` repetitions are discarded.
pub fn throughput<B, F>(
    mut f: F,
    batches: &[B],
    warmup: usize,
    reps: usize,
    batch_size: usize,
    adaptation: bool,
) -> Result<ThroughputReport>
where
    F: FnMut(&B) -> Result<()>,
{
    if reps == 0 || batches.is_empty() {
        return Err(Error::Invalid("throughput needs at least one repetition and one batch".into()));
    }
    let mut rep_seconds = Vec::with_capacity(reps);
    for rep in 0..warmup + reps {
        let start = Instant::now();
        for b in batches {
            f(b)?;
        }
        if rep >= warmup {
            rep_seconds.push(start.elapsed().as_secs_f64());
        }
    }
    let mut rates: Vec<f64> = rep_seconds.iter().map(|s| batches.len() as f64 / s.max(1e-12)).collect();
    rates.sort_by(f64::total_cmp);
    let mid = rates.len() / 2;
    let median = if rates.len() % 2 == 1 {
        rates[mid]
    } else {
        (rates[mid - 1] + rates[mid]) / 2.0
    };
    Ok(ThroughputReport {
        iterations_per_second: median,
        batch_size,
        adaptation,
        warmup,
        reps,
        rep_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_rank() {
        let m = rank_metrics(&[0.1, 0.9, 0.3], 1, 10);
        assert_eq!((m.recall, m.rr, m.ndcg), (1.0, 1.0, 1.0));
    }

    #[test]
    fn rank_three() {
        let m = rank_metrics(&[5.0, 4.0, 3.0, 1.0], 2, 10);
        assert_eq!(m.rank, 3);
        assert_eq!(m.ndcg, 0.5);
        assert_eq!(m.rr, 1.0 / 3.0);
    }

    #[test]
    fn beyond_cutoff() {
        let logits: Vec<f64> = (0..20).map(|i| -(i as f64)).collect();
        let m = rank_metrics(&logits, 10, 10);
        assert_eq!(m.rank, 11);
        assert_eq!((m.recall, m.rr, m.ndcg), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ties_favour_lower_index() {
        let z = [0.0; 5];
        assert_eq!(rank_of(&z, 0), 1);
        assert_eq!(rank_of(&z, 4), 5);
    }

    #[test]
    fn report_means() {
        let per = [rank_metrics(&[1.0, 0.0], 0, 1), rank_metrics(&[1.0, 0.0], 1, 1)];
        let r = MetricsReport::from_examples(&per, 1);
        assert_eq!((r.count, r.recall, r.mrr, r.ndcg), (2, 0.5, 0.5, 0.5));
    }

    #[test]
    fn throughput_discards_warmup() {
        let mut calls = 0;
        let r = throughput(
            |_: &u8| {
                calls += 1;
                Ok(())
            },
            &[0u8, 1],
            2,
            3,
            1,
            false,
        )
        .unwrap();
        assert_eq!(calls, 10);
        assert_eq!(r.rep_seconds.len(), 3);
        assert!(r.iterations_per_second > 0.0);
    }
}
