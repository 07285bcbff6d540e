//! Analysis driver: owns the scenes, ego caches, and trained parameters,
//! and runs every post-hoc study against them with no retraining.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribution::{
    explain, AttributionResult, Coalition, ExplainOptions, ExplainerKind, PairId,
};
use crate::encoder::EncoderParams;
use crate::introspect::{
    charact_value, jsd, score_histogram, validate_grid, ClassAblationRow, FidelityCurve,
    IntrospectError, JsdShiftRow,
};
use crate::metrics::EvalReport;
use crate::pipeline::{evaluate_matrix, extract_egos, similarity_learned};
use crate::scene::{DatasetSplit, EgoGraph, SceneGraph};

/// A trained model bound to a map, its evaluation variants, and a split.
pub struct Analysis {
    map: SceneGraph,
    variants: Vec<SceneGraph>,
    split: DatasetSplit,
    params: EncoderParams,
    hops: usize,
    map_egos: BTreeMap<u32, EgoGraph>,
    variant_egos: Vec<BTreeMap<u32, EgoGraph>>,
}

impl Analysis {
    pub fn new(
        map: SceneGraph,
        variants: Vec<SceneGraph>,
        split: DatasetSplit,
        params: EncoderParams,
        hops: usize,
    ) -> Result<Self, IntrospectError> {
        let map_egos = extract_egos(&map, hops)?;
        let variant_egos = variants
            .iter()
            .map(|v| extract_egos(v, hops))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { map, variants, split, params, hops, map_egos, variant_egos })
    }

    pub fn map(&self) -> &SceneGraph {
        &self.map
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn n_variants(&self) -> usize {
        self.variants.len()
    }

    /// Place-query pairs for attribution studies: each query place paired
    /// with its own map place (its nearest positive), shuffled with the
    /// seed and capped.
    pub fn select_pairs(&self, places: &[u32], max_pairs: usize, seed: u64) -> Vec<PairId> {
        let mut pairs: Vec<PairId> = Vec::new();
        for v in 0..self.variants.len() {
            for &p in places {
                pairs.push(PairId { variant: v, query_place: p, map_place: p });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pairs.shuffle(&mut rng);
        pairs.truncate(max_pairs);
        pairs
    }

    fn graphs_for(&self, pair: &PairId) -> (&EgoGraph, &EgoGraph) {
        (
            &self.map_egos[&pair.map_place],
            &self.variant_egos[pair.variant][&pair.query_place],
        )
    }

    /// Pooled evaluation of the given query places over every variant.
    pub fn evaluate(&self, places: &[u32]) -> Result<EvalReport, IntrospectError> {
        let queries: Vec<(usize, u32)> = (0..self.variants.len())
            .flat_map(|v| places.iter().map(move |&p| (v, p)))
            .collect();
        let sim = similarity_learned(&self.map, &self.map_egos, &self.variant_egos, &queries, &self.params)?;
        Ok(evaluate_matrix(&sim, &self.split)?)
    }

    /// The same analysis with every instance of `label` removed from the
    /// map and the query variants. The trained parameters are untouched.
    pub fn without_class(&self, label: u32) -> Result<Analysis, IntrospectError> {
        Analysis::new(
            self.map.remove_class(label),
            self.variants.iter().map(|v| v.remove_class(label)).collect(),
            self.split.clone(),
            self.params.clone(),
            self.hops,
        )
    }

    /// Leave-one-class-out ablation over the given query places: per class,
    /// the PR-AUC with and without its instances and the frequency
    /// normalised drop. Classes with zero instances are skipped.
    pub fn class_ablation(&self, places: &[u32]) -> Result<Vec<ClassAblationRow>, IntrospectError> {
        let full = self.evaluate(places)?;
        let histogram = self.map.class_histogram();
        let mut rows = Vec::new();
        for class in self.map.taxonomy().classes() {
            let instances = histogram.get(&class.label).copied().unwrap_or(0);
            if instances == 0 {
                continue;
            }
            let without = self.without_class(class.label)?.evaluate(places)?;
            let drop = full.pr_auc - without.pr_auc;
            rows.push(ClassAblationRow {
                label: class.label,
                code: class.code.clone(),
                instances,
                pr_auc_full: full.pr_auc,
                pr_auc_without: without.pr_auc,
                drop,
                normalised_drop: drop / instances as f64,
            });
        }
        Ok(rows)
    }

    /// Attribution results for one explainer over a pair set. Seeded
    /// explainers derive a per-pair seed from the base seed and pair index
    /// so results do not depend on evaluation order.
    pub fn attributions(
        &self,
        kind: ExplainerKind,
        pairs: &[PairId],
        opts: &ExplainOptions,
    ) -> Result<Vec<AttributionResult>, IntrospectError> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, pair)| {
                let (p, q) = self.graphs_for(pair);
                let pair_opts = ExplainOptions {
                    seed: opts.seed.wrapping_add(i as u64),
                    ..*opts
                };
                explain(kind, p, q, &self.params, self.map.taxonomy(), &pair_opts)
                    .map(|r| r.with_pair(*pair))
                    .map_err(IntrospectError::from)
            })
            .collect()
    }

    fn attribution_histogram(results: &[AttributionResult]) -> Result<[f64; super::JSD_BINS], IntrospectError> {
        let scores: Vec<f64> = results
            .iter()
            .flat_map(|r| r.normalised.iter().copied())
            .collect();
        if scores.is_empty() {
            return Err(IntrospectError::EmptyAttributions);
        }
        Ok(score_histogram(scores))
    }

    /// JSD between the attribution-score distributions before and after
    /// removing each class, normalised by the class instance count.
    pub fn jsd_shifts(
        &self,
        kind: ExplainerKind,
        pairs: &[PairId],
        opts: &ExplainOptions,
    ) -> Result<Vec<JsdShiftRow>, IntrospectError> {
        let pre = Self::attribution_histogram(&self.attributions(kind, pairs, opts)?)?;
        let histogram = self.map.class_histogram();
        let mut rows = Vec::new();
        for class in self.map.taxonomy().classes() {
            let instances = histogram.get(&class.label).copied().unwrap_or(0);
            if instances == 0 {
                continue;
            }
            let removed = self.without_class(class.label)?;
            let post = Self::attribution_histogram(&removed.attributions(kind, pairs, opts)?)?;
            let raw = jsd(&pre, &post);
            rows.push(JsdShiftRow {
                explainer: kind,
                label: class.label,
                code: class.code.clone(),
                instances,
                raw_jsd: raw,
                freq_normalised_jsd: raw / instances as f64,
            });
        }
        Ok(rows)
    }

    /// Mean fidelity curves for one explainer: per pair, object nodes are
    /// ranked by the explainer, the top `ceil(rho * n)` are kept (s_keep)
    /// or removed (s_drop) with places retained, and the absolute
    /// similarity changes are averaged over pairs.
    pub fn fidelity_curves(
        &self,
        kind: ExplainerKind,
        pairs: &[PairId],
        grid: &[f64],
        opts: &ExplainOptions,
    ) -> Result<FidelityCurve, IntrospectError> {
        validate_grid(grid)?;
        let mut s_keep = vec![0.0; grid.len()];
        let mut s_drop = vec![0.0; grid.len()];
        let mut delta_plus = vec![0.0; grid.len()];
        let mut delta_minus = vec![0.0; grid.len()];
        let mut used = 0usize;
        let mut skipped = 0usize;

        for (i, pair) in pairs.iter().enumerate() {
            let (p, q) = self.graphs_for(pair);
            let n = q.object_count();
            if n == 0 {
                skipped += 1;
                continue;
            }
            let pair_opts = ExplainOptions { seed: opts.seed.wrapping_add(i as u64), ..*opts };
            let result = explain(kind, p, q, &self.params, self.map.taxonomy(), &pair_opts)?;
            let ranking = result.ranking();
            let mut coalition = Coalition::new(p, q, &self.params, self.map.taxonomy())?;
            let full_mask = if n == 128 { u128::MAX } else { (1u128 << n) - 1 };
            let s_full = coalition.value(full_mask)?;
            for (gi, rho) in grid.iter().enumerate() {
                let k = ((rho * n as f64).ceil() as usize).min(n);
                let mut top_mask: u128 = 0;
                for &j in ranking.iter().take(k) {
                    top_mask |= 1u128 << j;
                }
                let keep = coalition.value(top_mask)?;
                let drop = coalition.value(full_mask & !top_mask)?;
                s_keep[gi] += keep;
                s_drop[gi] += drop;
                delta_plus[gi] += (drop - s_full).abs();
                delta_minus[gi] += (s_full - keep).abs();
            }
            used += 1;
        }

        if used > 0 {
            for v in [&mut s_keep, &mut s_drop, &mut delta_plus, &mut delta_minus] {
                for x in v.iter_mut() {
                    *x /= used as f64;
                }
            }
        }
        Ok(FidelityCurve {
            explainer: kind,
            rho: grid.to_vec(),
            s_keep,
            s_drop,
            delta_plus,
            delta_minus,
            pairs: used,
            skipped_empty: skipped,
        })
    }

    /// Per-pair fidelity samples at a single budget, for bootstrap
    /// comparisons between explainers.
    pub fn pair_fidelity_at(
        &self,
        kind: ExplainerKind,
        pairs: &[PairId],
        rho_star: f64,
        opts: &ExplainOptions,
    ) -> Result<Vec<PairFidelity>, IntrospectError> {
        let mut out = Vec::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            let (p, q) = self.graphs_for(pair);
            let n = q.object_count();
            if n == 0 {
                continue;
            }
            let pair_opts = ExplainOptions { seed: opts.seed.wrapping_add(i as u64), ..*opts };
            let result = explain(kind, p, q, &self.params, self.map.taxonomy(), &pair_opts)?;
            let ranking = result.ranking();
            let mut coalition = Coalition::new(p, q, &self.params, self.map.taxonomy())?;
            let full_mask = if n == 128 { u128::MAX } else { (1u128 << n) - 1 };
            let s_full = coalition.value(full_mask)?;
            let k = ((rho_star * n as f64).ceil() as usize).min(n);
            let mut top_mask: u128 = 0;
            for &j in ranking.iter().take(k) {
                top_mask |= 1u128 << j;
            }
            let keep = coalition.value(top_mask)?;
            let drop = coalition.value(full_mask & !top_mask)?;
            out.push(PairFidelity {
                delta_plus: (drop - s_full).abs(),
                delta_minus: (s_full - keep).abs(),
            });
        }
        Ok(out)
    }
}

/// Fidelity deltas of one pair at a fixed budget.
#[derive(Debug, Clone, Copy)]
pub struct PairFidelity {
    pub delta_plus: f64,
    pub delta_minus: f64,
}

/// Characterisation score from a set of per-pair samples: the harmonic
/// aggregate of the mean deltas.
pub fn charact_of_samples(samples: &[PairFidelity], w_plus: f64, w_minus: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let n = samples.len() as f64;
    let dp = samples.iter().map(|s| s.delta_plus).sum::<f64>() / n;
    let dm = samples.iter().map(|s| s.delta_minus).sum::<f64>() / n;
    charact_value(dp, dm, w_plus, w_minus).0
}

/// Percentile bootstrap over pairs for the difference between an
/// explainer's characterisation score and the mean of a family of
/// random-baseline scores. Returns (observed difference, CI lower bound at
/// the given confidence).
pub fn bootstrap_separation(
    explainer: &[PairFidelity],
    baselines: &[Vec<PairFidelity>],
    w_plus: f64,
    w_minus: f64,
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> (f64, f64) {
    assert!(!explainer.is_empty());
    assert!(baselines.iter().all(|b| b.len() == explainer.len()));
    let observed = charact_of_samples(explainer, w_plus, w_minus)
        - baselines
            .iter()
            .map(|b| charact_of_samples(b, w_plus, w_minus))
            .sum::<f64>()
            / baselines.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = explainer.len();
    let mut diffs = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let idx: Vec<usize> = (0..n)
            .map(|_| rand::RngExt::random_range(&mut rng, 0..n))
            .collect();
        let ex: Vec<PairFidelity> = idx.iter().map(|&i| explainer[i]).collect();
        let base_mean = baselines
            .iter()
            .map(|b| {
                let bs: Vec<PairFidelity> = idx.iter().map(|&i| b[i]).collect();
                charact_of_samples(&bs, w_plus, w_minus)
            })
            .sum::<f64>()
            / baselines.len() as f64;
        diffs.push(charact_of_samples(&ex, w_plus, w_minus) - base_mean);
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let lo_index = (((1.0 - confidence) * resamples as f64).floor() as usize).min(resamples - 1);
    (observed, diffs[lo_index])
}

/// Convenience: a coalition mask over all `n` objects.
pub(crate) fn full_mask(n: usize) -> u128 {
    if n == 128 {
        u128::MAX
    } else {
        (1u128 << n) - 1
    }
}
