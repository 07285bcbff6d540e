//! Retrieval and classification metrics: similarity matrices, PR-AUC,
//! best-threshold F1, and Recall@N.
//!
//! The PR curve uses a descending-score sweep with tied scores grouped and
//! step interpolation (no linear segments), so the area equals
//! `sum_k (R_k - R_{k-1}) * P_k` over distinct thresholds.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("labels are degenerate: need at least one positive and one negative")]
    DegenerateLabels,
    #[error("scores and labels differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("similarity {0} outside [-1, 1]")]
    OutOfRange(f64),
    #[error("n must be >= 1")]
    BadN,
}

/// Dense query-by-map cosine similarity matrix. Queries are identified by
/// (variant index, place id); map columns by place id.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub query_ids: Vec<(usize, u32)>,
    pub map_ids: Vec<u32>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds from similarity rows; entries must lie in [-1, 1] up to float
    /// noise, which is clamped.
    pub fn new(
        query_ids: Vec<(usize, u32)>,
        map_ids: Vec<u32>,
        mut values: Vec<f64>,
    ) -> Result<Self, MetricsError> {
        if values.len() != query_ids.len() * map_ids.len() {
            return Err(MetricsError::LengthMismatch(
                values.len(),
                query_ids.len() * map_ids.len(),
            ));
        }
        for v in values.iter_mut() {
            if !v.is_finite() || v.abs() > 1.0 + 1e-9 {
                return Err(MetricsError::OutOfRange(*v));
            }
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(Self { query_ids, map_ids, values })
    }

    /// Cosine matrix of two embedding families given as plain vectors
    /// (unit-norm or zero).
    pub fn from_vectors(
        query_ids: Vec<(usize, u32)>,
        map_ids: Vec<u32>,
        queries: &[Vec<f64>],
        maps: &[Vec<f64>],
    ) -> Result<Self, MetricsError> {
        let mut values = Vec::with_capacity(queries.len() * maps.len());
        for q in queries {
            for m in maps {
                values.push(q.iter().zip(m).map(|(a, b)| a * b).sum());
            }
        }
        Self::new(query_ids, map_ids, values)
    }

    pub fn n_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn n_maps(&self) -> usize {
        self.map_ids.len()
    }

    pub fn get(&self, q: usize, m: usize) -> f64 {
        self.values[q * self.map_ids.len() + m]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.values[q * self.map_ids.len()..(q + 1) * self.map_ids.len()]
    }
}

/// Area under the precision-recall curve.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let (order, n_pos) = prepare(scores, labels)?;
    let mut auc = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall_prev = 0.0;
    let mut i = 0;
    while i < order.len() {
        // Group tied scores into one operating point.
        let s = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j;
    }
    Ok(auc)
}

/// Maximum F1 over all distinct-score thresholds (predict positive when
/// score >= threshold). Ties on F1 resolve to the lowest threshold.
pub fn f1_best(scores: &[f64], labels: &[bool]) -> Result<(f64, f64), MetricsError> {
    let (order, n_pos) = prepare(scores, labels)?;
    let mut best_f1 = 0.0;
    let mut best_thr = f64::INFINITY;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let fn_ = n_pos - tp;
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        if f1 >= best_f1 {
            best_f1 = f1;
            best_thr = s;
        }
        i = j;
    }
    Ok((best_f1, best_thr))
}

/// Fraction of queries whose top-n map places (by descending similarity,
/// ascending map id on ties) intersect their positive set. Queries with an
/// empty positive set count as misses.
pub fn recall_at_n(
    sim: &SimilarityMatrix,
    positives: &[BTreeSet<u32>],
    n: usize,
) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::BadN);
    }
    if positives.len() != sim.n_queries() {
        return Err(MetricsError::LengthMismatch(positives.len(), sim.n_queries()));
    }
    if sim.n_queries() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (q, pos) in positives.iter().enumerate() {
        let row = sim.row(q);
        let mut order: Vec<usize> = (0..sim.n_maps()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("similarities are finite")
                .then(sim.map_ids[a].cmp(&sim.map_ids[b]))
        });
        if order
            .iter()
            .take(n)
            .any(|&m| pos.contains(&sim.map_ids[m]))
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / sim.n_queries() as f64)
}

/// Pooled evaluation of a similarity matrix against per-query positives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub pr_auc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub n_queries: usize,
    pub n_positive_pairs: usize,
}

pub fn evaluate(sim: &SimilarityMatrix, positives: &[BTreeSet<u32>]) -> Result<EvalReport, MetricsError> {
    if positives.len() != sim.n_queries() {
        return Err(MetricsError::LengthMismatch(positives.len(), sim.n_queries()));
    }
    let mut scores = Vec::with_capacity(sim.n_queries() * sim.n_maps());
    let mut labels = Vec::with_capacity(scores.capacity());
    let mut n_positive_pairs = 0;
    for (q, pos) in positives.iter().enumerate() {
        let row = sim.row(q);
        for (m, &id) in sim.map_ids.iter().enumerate() {
            scores.push(row[m]);
            let label = pos.contains(&id);
            labels.push(label);
            n_positive_pairs += label as usize;
        }
    }
    let auc = pr_auc(&scores, &labels)?;
    let (f1, threshold) = f1_best(&scores, &labels)?;
    Ok(EvalReport {
        pr_auc: auc,
        f1,
        threshold,
        recall_at_1: recall_at_n(sim, positives, 1)?,
        recall_at_5: recall_at_n(sim, positives, 5)?,
        recall_at_10: recall_at_n(sim, positives, 10)?,
        n_queries: sim.n_queries(),
        n_positive_pairs,
    })
}

fn prepare(scores: &[f64], labels: &[bool]) -> Result<(Vec<usize>, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(MetricsError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores are finite"));
    Ok((order, n_pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent PR-AUC oracle: enumerate distinct thresholds and rescan
    /// the whole dataset for each confusion count.
    pub(crate) fn pr_auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&l| l).count();
        let mut auc = 0.0;
        let mut recall_prev = 0.0;
        for &t in &thresholds {
            let mut tp = 0;
            let mut fp = 0;
            for (s, &l) in scores.iter().zip(labels) {
                if *s >= t {
                    if l {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let recall = tp as f64 / n_pos as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            auc += (recall - recall_prev) * precision;
            recall_prev = recall;
        }
        auc
    }

    pub(crate) fn f1_best_oracle(scores: &[f64], labels: &[bool]) -> (f64, f64) {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&l| l).count();
        let mut best = (0.0f64, f64::INFINITY);
        for &t in &thresholds {
            let mut tp = 0;
            let mut fp = 0;
            for (s, &l) in scores.iter().zip(labels) {
                if *s >= t {
                    if l {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let f1 = 2.0 * tp as f64 / (2 * tp + fp + (n_pos - tp)) as f64;
            if f1 >= best.0 {
                best = (f1, t);
            }
        }
        best
    }

    #[test]
    fn perfect_separation_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(pr_auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(f1_best(&scores, &labels).unwrap().0, 1.0);
    }

    #[test]
    fn degenerate_labels_error() {
        assert!(pr_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(pr_auc(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn random_scores_approach_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.1).collect();
        let auc = pr_auc(&scores, &labels).unwrap();
        let prevalence = labels.iter().filter(|&&l| l).count() as f64 / n as f64;
        assert!((auc - prevalence).abs() < 0.01, "auc {auc} vs prevalence {prevalence}");
    }

    #[test]
    fn matches_oracles_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..50 {
            let n = rng.random_range(10..=200);
            // Quantised scores to force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.3).collect();
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            let fast = pr_auc(&scores, &labels).unwrap();
            let slow = pr_auc_oracle(&scores, &labels);
            assert_eq!(fast, slow, "case {case}: pr_auc {fast} vs oracle {slow}");
            let (f1, thr) = f1_best(&scores, &labels).unwrap();
            let (of1, othr) = f1_best_oracle(&scores, &labels);
            assert_eq!(f1, of1, "case {case}");
            assert_eq!(thr, othr, "case {case}");
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.random_range(10..=100);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..15) as f64) / 15.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.4).collect();
            labels[0] = true;
            labels[1] = false;
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 2.0).collect();
            let a = pr_auc(&scores, &labels).unwrap();
            let b = pr_auc(&transformed, &labels).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_equal_scores_half_positive() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [true, false, true, false];
        let (f1, _) = f1_best(&scores, &labels).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    fn toy_matrix() -> (SimilarityMatrix, Vec<BTreeSet<u32>>) {
        // 5 queries x 4 map places, hand-checkable.
        let sim = SimilarityMatrix::new(
            vec![(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)],
            vec![10, 11, 12, 13],
            vec![
                0.9, 0.1, 0.2, 0.3, // q0: best 10
                0.2, 0.8, 0.1, 0.0, // q1: best 11
                0.5, 0.6, 0.4, 0.3, // q2: best 11
                0.1, 0.1, 0.1, 0.1, // q3: all tied -> id order
                0.0, 0.2, 0.3, 0.9, // q4: best 13
            ],
        )
        .unwrap();
        let positives = vec![
            BTreeSet::from([10]),
            BTreeSet::from([11]),
            BTreeSet::from([12]),
            BTreeSet::from([13]),
            BTreeSet::new(),
        ];
        (sim, positives)
    }

    #[test]
    fn recall_matches_hand_enumeration() {
        let (sim, positives) = toy_matrix();
        // q0 hit@1, q1 hit@1, q2 top1=11 miss, q3 ties -> top1 = id 10 miss,
        // q4 has no positives -> always miss.
        assert_eq!(recall_at_n(&sim, &positives, 1).unwrap(), 2.0 / 5.0);
        // q2 top2 = {11, 10} miss; q3 top2 = {10, 11} miss.
        assert_eq!(recall_at_n(&sim, &positives, 2).unwrap(), 2.0 / 5.0);
        // Saturation: every query with a positive at all is a hit.
        assert_eq!(recall_at_n(&sim, &positives, 4).unwrap(), 4.0 / 5.0);
        assert_eq!(recall_at_n(&sim, &positives, 100).unwrap(), 4.0 / 5.0);
    }

    #[test]
    fn recall_non_decreasing_in_n() {
        let (sim, positives) = toy_matrix();
        let mut prev = 0.0;
        for n in 1..=6 {
            let r = recall_at_n(&sim, &positives, n).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn identical_embedding_scores_one() {
        let e = vec![0.6, 0.8];
        let sim = SimilarityMatrix::from_vectors(vec![(0, 0)], vec![1], &[e.clone()], &[e]).unwrap();
        assert!((sim.get(0, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(SimilarityMatrix::new(vec![(0, 0)], vec![1], vec![1.5]).is_err());
    }
}
