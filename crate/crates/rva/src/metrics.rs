//! Retrieval metrics: mean rank, MRR, R@k, and graded-relevance NDCG.
//! Ranks are 1-based everywhere.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty record set")]
    Empty,
    #[error("record {index}: ranking is not a permutation")]
    NotAPermutation { index: usize },
    #[error("record {index}: ground-truth index {gt} missing from ranking")]
    MissingGroundTruth { index: usize, gt: usize },
    #[error("record {index}: relevance {value} outside [0, 1]")]
    BadRelevance { index: usize, value: f64 },
    #[error("k = {k} exceeds candidate count {count}")]
    KTooLarge { k: usize, count: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("ndcg requires relevances on every record")]
    MissingRelevances,
}

/// One evaluated question: candidate indices in rank order (rank 1
/// first), the ground-truth index, and optional graded relevances.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub ranking: Vec<usize>,
    pub gt: usize,
    pub relevances: Option<Vec<f64>>,
}

impl EvalRecord {
    fn validate(&self, index: usize) -> Result<(), MetricsError> {
        let n = self.ranking.len();
        let mut seen = vec![false; n];
        for &c in &self.ranking {
            if c >= n || seen[c] {
                return Err(MetricsError::NotAPermutation { index });
            }
            seen[c] = true;
        }
        if self.gt >= n {
            return Err(MetricsError::MissingGroundTruth { index, gt: self.gt });
        }
        if let Some(rel) = &self.relevances {
            for &v in rel {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MetricsError::BadRelevance { index, value: v });
                }
            }
        }
        Ok(())
    }

    /// 1-based rank of the ground-truth candidate.
    pub fn gt_rank(&self) -> usize {
        self.ranking.iter().position(|&c| c == self.gt).unwrap() + 1
    }
}

fn validated(records: &[EvalRecord]) -> Result<(), MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (i, r) in records.iter().enumerate() {
        r.validate(i)?;
    }
    Ok(())
}

pub fn mean_rank(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    validated(records)?;
    let total: usize = records.iter().map(|r| r.gt_rank()).sum();
    Ok(total as f64 / records.len() as f64)
}

pub fn mrr(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    validated(records)?;
    let total: f64 = records.iter().map(|r| 1.0 / r.gt_rank() as f64).sum();
    Ok(total / records.len() as f64)
}

pub fn recall_at_k(records: &[EvalRecord], k: usize) -> Result<f64, MetricsError> {
    validated(records)?;
    if k == 0 {
        return Err(MetricsError::KZero);
    }
    for r in records {
        if k > r.ranking.len() {
            return Err(MetricsError::KTooLarge {
                k,
                count: r.ranking.len(),
            });
        }
    }
    let hits = records.iter().filter(|r| r.gt_rank() <= k).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Per-record NDCG truncated at the number of candidates with positive
/// relevance, averaged over records; all-zero-relevance records count
/// as 0.
pub fn ndcg(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    validated(records)?;
    let mut total = 0.0;
    for r in records {
        let rel = r
            .relevances
            .as_ref()
            .ok_or(MetricsError::MissingRelevances)?;
        total += single_ndcg(&r.ranking, rel);
    }
    Ok(total / records.len() as f64)
}

fn single_ndcg(ranking: &[usize], rel: &[f64]) -> f64 {
    let k = rel.iter().filter(|&&v| v > 0.0).count();
    if k == 0 {
        return 0.0;
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2(); // i is 0-based rank
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &c)| rel[c] * discount(i))
        .sum();
    let mut ideal: Vec<f64> = rel.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &v)| v * discount(i)).sum();
    dcg / idcg
}

/// The full report with stable key names.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mrr: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean: f64,
    pub ndcg: f64,
    pub records: usize,
}

pub fn report(records: &[EvalRecord]) -> Result<MetricsReport, MetricsError> {
    let count = records
        .first()
        .map(|r| r.ranking.len())
        .ok_or(MetricsError::Empty)?;
    let r_at = |k: usize| {
        if k <= count {
            recall_at_k(records, k)
        } else {
            Ok(1.0)
        }
    };
    let ndcg_val = if records.iter().all(|r| r.relevances.is_some()) {
        ndcg(records)?
    } else {
        0.0
    };
    Ok(MetricsReport {
        mrr: mrr(records)?,
        r_at_1: r_at(1)?,
        r_at_5: r_at(5)?,
        r_at_10: r_at(10)?,
        mean: mean_rank(records)?,
        ndcg: ndcg_val,
        records: records.len(),
    })
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        format!(
            "mrr {:.6}\nr_at_1 {:.6}\nr_at_5 {:.6}\nr_at_10 {:.6}\nmean {:.6}\nndcg {:.6}\nrecords {}\n",
            self.mrr, self.r_at_1, self.r_at_5, self.r_at_10, self.mean, self.ndcg, self.records
        )
    }
}
