//! Average-rank selection over a candidates × metrics score table.

use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RankingError {
    #[error("ranking table has no candidates")]
    NoCandidates,
    #[error("ranking table has no metrics")]
    NoMetrics,
    #[error("candidate {candidate} has {got} scores, expected {expected}")]
    Shape {
        candidate: String,
        got: usize,
        expected: usize,
    },
    #[error("score for candidate {candidate} on {metric} is not finite")]
    NonFinite { candidate: String, metric: String },
    #[error("duplicate candidate id {0}")]
    DuplicateCandidate(String),
    #[error("{got} iteration ids for {expected} candidates")]
    IterationIds { got: usize, expected: usize },
}

/// Scores are oriented so higher is better on every metric.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingTable {
    candidates: Vec<String>,
    metrics: Vec<String>,
    scores: Vec<Vec<f64>>,
    ranks: Vec<Vec<f64>>,
    rank_sums: Vec<f64>,
}

/// Fractional ranking, rank 1 = highest value; tied values share the mean
/// of the positions they occupy.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    ranks
}

impl RankingTable {
    /// `scores[c][m]` is candidate `c` on metric `m`.
    pub fn new(candidates: Vec<String>, metrics: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self, RankingError> {
        if candidates.is_empty() {
            return Err(RankingError::NoCandidates);
        }
        if metrics.is_empty() {
            return Err(RankingError::NoMetrics);
        }
        if scores.len() != candidates.len() {
            return Err(RankingError::Shape {
                candidate: "<table>".into(),
                got: scores.len(),
                expected: candidates.len(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for (c, row) in candidates.iter().zip(&scores) {
            if !seen.insert(c.as_str()) {
                return Err(RankingError::DuplicateCandidate(c.clone()));
            }
            if row.len() != metrics.len() {
                return Err(RankingError::Shape {
                    candidate: c.clone(),
                    got: row.len(),
                    expected: metrics.len(),
                });
            }
            if let Some(m) = row.iter().position(|v| !v.is_finite()) {
                return Err(RankingError::NonFinite {
                    candidate: c.clone(),
                    metric: metrics[m].clone(),
                });
            }
        }
        let mut ranks = vec![vec![0.0; metrics.len()]; candidates.len()];
        for m in 0..metrics.len() {
            let column: Vec<f64> = scores.iter().map(|row| row[m]).collect();
            for (c, r) in fractional_ranks(&column).into_iter().enumerate() {
                ranks[c][m] = r;
            }
        }
        // ranks are multiples of 0.5, so these sums are exact
        let rank_sums = ranks.iter().map(|row| row.iter().sum()).collect();
        Ok(Self {
            candidates,
            metrics,
            scores,
            ranks,
            rank_sums,
        })
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn ranks(&self) -> &[Vec<f64>] {
        &self.ranks
    }

    pub fn mean_ranks(&self) -> Vec<f64> {
        let m = self.metrics.len() as f64;
        self.rank_sums.iter().map(|s| s / m).collect()
    }

    /// Compares mean ranks through the exact rank sums.
    pub fn cmp_candidates(&self, a: usize, b: usize) -> Ordering {
        self.rank_sums[a].total_cmp(&self.rank_sums[b])
    }
}

/// Index of the candidate with the lowest mean rank; ties go to the lowest
/// iteration id.
pub fn average_rank_select_index(table: &RankingTable, iteration_ids: &[u32]) -> Result<usize, RankingError> {
    if iteration_ids.len() != table.candidates.len() {
        return Err(RankingError::IterationIds {
            got: iteration_ids.len(),
            expected: table.candidates.len(),
        });
    }
    let best = (0..table.candidates.len())
        .min_by(|&a, &b| {
            table
                .cmp_candidates(a, b)
                .then(iteration_ids[a].cmp(&iteration_ids[b]))
        })
        .ok_or(RankingError::NoCandidates)?;
    Ok(best)
}

pub fn average_rank_select<'t>(table: &'t RankingTable, iteration_ids: &[u32]) -> Result<&'t str, RankingError> {
    average_rank_select_index(table, iteration_ids).map(|i| table.candidates[i].as_str())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: &[&[f64]]) -> RankingTable {
        let candidates = (0..rows.len()).map(|i| format!("c{i}")).collect();
        let metrics = (0..rows[0].len()).map(|j| format!("m{j}")).collect();
        RankingTable::new(candidates, metrics, rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn worked_example_ties_to_earliest() {
        let t = table(&[&[0.9, 0.8], &[0.5, 0.9], &[0.1, 0.2]]);
        assert_eq!(t.ranks(), [vec![1.0, 2.0], vec![2.0, 1.0], vec![3.0, 3.0]]);
        assert_eq!(t.mean_ranks(), [1.5, 1.5, 3.0]);
        assert_eq!(average_rank_select(&t, &[0, 1, 2]).unwrap(), "c0");
        // earliest iteration, not table position, breaks the tie
        assert_eq!(average_rank_select(&t, &[5, 1, 2]).unwrap(), "c1");
    }

    #[test]
    fn single_and_all_equal() {
        let t = table(&[&[0.3]]);
        assert_eq!(average_rank_select(&t, &[0]).unwrap(), "c0");
        let t = table(&[&[0.4, 0.4], &[0.4, 0.4], &[0.4, 0.4], &[0.4, 0.4]]);
        assert!(t.mean_ranks().iter().all(|&r| r == 2.5));
        assert_eq!(average_rank_select(&t, &[3, 0, 1, 2]).unwrap(), "c1");
    }

    #[test]
    fn malformed_tables() {
        assert_eq!(RankingTable::new(vec![], vec!["m".into()], vec![]).unwrap_err(), RankingError::NoCandidates);
        assert_eq!(
            RankingTable::new(vec!["a".into()], vec![], vec![vec![]]).unwrap_err(),
            RankingError::NoMetrics
        );
        assert!(RankingTable::new(vec!["a".into(), "a".into()], vec!["m".into()], vec![vec![1.0], vec![2.0]]).is_err());
        assert!(RankingTable::new(vec!["a".into()], vec!["m".into()], vec![vec![f64::NAN]]).is_err());
        let t = table(&[&[1.0]]);
        assert!(average_rank_select(&t, &[0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn ranks_sum_to_triangular_number(v in prop::collection::vec(0u8..5, 1..12)) {
            let values: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let r = fractional_ranks(&values);
            let n = values.len() as f64;
            prop_assert_eq!(r.iter().sum::<f64>(), n * (n + 1.0) / 2.0);
            for i in 0..values.len() {
                let above = values.iter().filter(|&&x| x > values[i]).count() as f64;
                let tied = values.iter().filter(|&&x| x == values[i]).count() as f64;
                prop_assert_eq!(r[i], above + (tied + 1.0) / 2.0);
            }
        }
    }
}
