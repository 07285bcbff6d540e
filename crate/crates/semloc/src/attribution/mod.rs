//! Per-object-node importance for a place-query pair under four explainers:
//! Saliency, Integrated Gradients, Shapley Value Sampling, and Attention
//! Weights, plus a random-ranking baseline for fidelity comparisons.
//!
//! The attributed objective is always the cosine similarity between the
//! embeddings of the map place graph `P` and the query graph `Q` — the
//! quantity localisation actually ranks by. Gradient methods differentiate
//! it with respect to `Q`'s input features; perturbation methods remove
//! object nodes (with their visibility edges) from `Q`, keeping the place
//! skeleton.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::encoder::{
    embed, forward_on_tape, node_features, Embedding, EncoderError, EncoderParams, FeatureSource,
    StagedParams,
};
use crate::scene::{EgoGraph, Taxonomy};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("integrated gradients needs at least one step")]
    BadSteps,
    #[error("shapley sampling needs at least one permutation")]
    BadPermutations,
    #[error("baseline shape {0:?} does not match the feature matrix {1:?}")]
    BadBaseline(Vec<usize>, Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerKind {
    Saliency,
    IntegratedGradients,
    ShapleySampling,
    Attention,
    Random,
}

impl ExplainerKind {
    pub fn id(&self) -> &'static str {
        match self {
            Self::Saliency => "saliency",
            Self::IntegratedGradients => "integrated_gradients",
            Self::ShapleySampling => "shapley_sampling",
            Self::Attention => "attention",
            Self::Random => "random",
        }
    }

    /// The four real explainers, in reporting order.
    pub fn all() -> [ExplainerKind; 4] {
        [
            Self::Saliency,
            Self::IntegratedGradients,
            Self::ShapleySampling,
            Self::Attention,
        ]
    }
}

impl std::str::FromStr for ExplainerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "saliency" => Ok(Self::Saliency),
            "ig" | "integrated_gradients" => Ok(Self::IntegratedGradients),
            "shapley" | "shapley_sampling" => Ok(Self::ShapleySampling),
            "attention" => Ok(Self::Attention),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown explainer '{other}'")),
        }
    }
}

/// Identity of the place-query pair being explained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairId {
    pub variant: usize,
    pub query_place: u32,
    pub map_place: u32,
}

/// Importance scores for the object nodes of one query graph.
#[derive(Debug, Clone)]
pub struct AttributionResult {
    pub explainer: ExplainerKind,
    pub pair: Option<PairId>,
    /// Object ids in the query graph's local object order.
    pub object_ids: Vec<u32>,
    pub object_labels: Vec<u32>,
    pub raw: Vec<f64>,
    /// `|raw| / sum |raw|`: in [0,1], sums to 1 when any raw score is
    /// nonzero, invariant under positive rescaling of the raw scores.
    pub normalised: Vec<f64>,
    /// Mean normalised score per class label, over that class's instances.
    pub per_class: BTreeMap<u32, f64>,
    /// Completeness residual, integrated gradients only.
    pub residual: Option<f64>,
}

impl AttributionResult {
    fn build(
        explainer: ExplainerKind,
        q: &EgoGraph,
        raw: Vec<f64>,
        residual: Option<f64>,
    ) -> Self {
        let total: f64 = raw.iter().map(|r| r.abs()).sum();
        let normalised: Vec<f64> = if total > 0.0 {
            raw.iter().map(|r| r.abs() / total).collect()
        } else {
            vec![0.0; raw.len()]
        };
        let mut per_class: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (j, &label) in q.object_labels.iter().enumerate() {
            let e = per_class.entry(label).or_insert((0.0, 0));
            e.0 += normalised[j];
            e.1 += 1;
        }
        let per_class = per_class
            .into_iter()
            .map(|(label, (sum, n))| (label, sum / n as f64))
            .collect();
        Self {
            explainer,
            pair: None,
            object_ids: q.objects.clone(),
            object_labels: q.object_labels.clone(),
            raw,
            normalised,
            per_class,
            residual,
        }
    }

    pub fn with_pair(mut self, pair: PairId) -> Self {
        self.pair = Some(pair);
        self
    }

    /// Object local indices ranked by descending raw score; ties break by
    /// ascending object id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.raw.len()).collect();
        order.sort_by(|&a, &b| {
            self.raw[b]
                .partial_cmp(&self.raw[a])
                .expect("scores are finite")
                .then(self.object_ids[a].cmp(&self.object_ids[b]))
        });
        order
    }
}

/// Cosine similarity of the two graph embeddings: the scalar every
/// explainer attributes.
pub fn target_scalar(
    p: &EgoGraph,
    q: &EgoGraph,
    params: &EncoderParams,
    taxonomy: &Taxonomy,
) -> Result<f64, AttributionError> {
    let (zp, _) = embed(p, params, taxonomy)?;
    let (zq, _) = embed(q, params, taxonomy)?;
    Ok(zp.cosine(&zq))
}

/// Gradient of the pair similarity with respect to `Q`'s feature matrix,
/// evaluated at `features` (or at the graph's own features when `None`).
fn feature_gradient(
    p_emb: &Embedding,
    q: &EgoGraph,
    params: &EncoderParams,
    taxonomy: &Taxonomy,
    features: Option<&Tensor>,
) -> Result<(Tensor, f64), AttributionError> {
    let mut tape = Tape::new();
    let staged = StagedParams::constants(&mut tape, params);
    let source = match features {
        Some(f) => FeatureSource::Node(tape.input(f.clone())),
        None => FeatureSource::Input,
    };
    let out = forward_on_tape(&mut tape, q, source, params, &staged, taxonomy, false)?;
    let p_node = tape.constant(Tensor::vector(p_emb.0.clone()));
    let target = tape.dot(p_node, out.embedding_node)?;
    let value = tape.value(target).item();
    let grads = tape.backward(target)?;
    let feature_node = out.feature_node.expect("feature leaf exists");
    let grad = grads.wrt(feature_node)?.clone();
    Ok((grad, value))
}

/// Saliency: the L2 norm of the similarity gradient over each object
/// node's input feature row.
pub fn saliency(
    p: &EgoGraph,
    q: &EgoGraph,
    params: &EncoderParams,
    taxonomy: &Taxonomy,
) -> Result<AttributionResult, AttributionError> {
    let (zp, _) = embed(p, params, taxonomy)?;
    let (grad, _) = feature_gradient(&zp, q, params, taxonomy, None)?;
    let raw: Vec<f64> = (0..q.object_count())
        .map(|j| {
            let row = grad.row(q.object_row(j));
            row.iter().map(|g| g * g).sum::<f64>().sqrt()
        })
        .collect();
    Ok(AttributionResult::build(ExplainerKind::Saliency, q, raw, None))
}

/// The all-zero-object-rows baseline: class evidence fully absent, place
/// rows kept.
pub fn zero_object_baseline(q: &EgoGraph, taxonomy: &Taxonomy) -> Result<Tensor, AttributionError> {
    let mut x0 = node_features(q, taxonomy)?;
    for j in 0..q.object_count() {
        let row = q.object_row(j);
        for v in x0.row_mut(row) {
            *v = 0.0;
        }
    }
    Ok(x0)
}

/// Integrated gradients along the straight path from the baseline, using
/// the midpoint rule with `steps` evaluations. Node scores are the sums of
/// their rows' attributions (signed); the completeness residual
/// `|sum(IG) - (f(x) - f(x0))|` is reported on the result.
pub fn integrated_gradients(
    p: &EgoGraph,
    q: &EgoGraph,
    params: &EncoderParams,
    taxonomy: &Taxonomy,
    steps: usize,
    baseline: Option<&Tensor>,
) -> Result<AttributionResult, AttributionError> {
    if steps == 0 {
        return Err(AttributionError::BadSteps);
    }
    let (zp, _) = embed(p, params, taxonomy)?;
    let x = node_features(q, taxonomy)?;
    let x0 = match baseline {
        Some(b) => {
            if b.shape() != x.shape() {
                return Err(AttributionError::BadBaseline(
                    b.shape().to_vec(),
                    x.shape().to_vec(),
                ));
            }
            b.clone()
        }
        None => zero_object_baseline(q, taxonomy)?,
    };

    let mut mean_grad = vec![0.0; x.len()];
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let mut point = x0.clone();
        for (pv, (xv, x0v)) in point
            .values_mut()
            .iter_mut()
            .zip(x.values().iter().zip(x0.values()))
        {
            *pv = x0v + alpha * (xv - x0v);
        }
        let (grad, _) = feature_gradient(&zp, q, params, taxonomy, Some(&point))?;
        for (m, g) in mean_grad.iter_mut().zip(grad.values()) {
            *m += g / steps as f64;
        }
    }

    let attributions: Vec<f64> = mean_grad
        .iter()
        .zip(x.values().iter().zip(x0.values()))
        .map(|(m, (xv, x0v))| m * (xv - x0v))
        .collect();

    let (_, f_x) = feature_gradient(&zp, q, params, taxonomy, Some(&x))?;
    let (_, f_x0) = feature_gradient(&zp, q, params, taxonomy, Some(&x0))?;
    let total: f64 = attributions.iter().sum();
    let residual = (total - (f_x - f_x0)).abs();

    let cols = x.cols();
    let raw: Vec<f64> = (0..q.object_count())
        .map(|j| {
            let row = q.object_row(j);
            attributions[row * cols..(row + 1) * cols].iter().sum()
        })
        .collect();
    Ok(AttributionResult::build(
        ExplainerKind::IntegratedGradients,
        q,
        raw,
        Some(residual),
    ))
}

/// Characteristic function for coalition methods: the pair similarity with
/// `Q` restricted to a subset of its object nodes (places always kept).
pub struct Coalition<'a> {
    p_emb: Embedding,
    q: &'a EgoGraph,
    params: &'a EncoderParams,
    taxonomy: &'a Taxonomy,
    cache: HashMap<u128, f64>,
}

impl<'a> Coalition<'a> {
    pub fn new(
        p: &EgoGraph,
        q: &'a EgoGraph,
        params: &'a EncoderParams,
        taxonomy: &'a Taxonomy,
    ) -> Result<Self, AttributionError> {
        assert!(
            q.object_count() <= 128,
            "coalition masks are limited to 128 object nodes"
        );
        let (p_emb, _) = embed(p, params, taxonomy)?;
        Ok(Self { p_emb, q, params, taxonomy, cache: HashMap::new() })
    }

    /// v(S) for the coalition given as a bitmask over local object indices.
    /// Memoised: repeated prefixes across permutations cost one embed.
    pub fn value(&mut self, mask: u128) -> Result<f64, AttributionError> {
        if let Some(&v) = self.cache.get(&mask) {
            return Ok(v);
        }
        let keep: BTreeSet<usize> = (0..self.q.object_count())
            .filter(|j| mask & (1u128 << j) != 0)
            .collect();
        let restricted = self.q.with_objects(&keep);
        let (z, _) = embed(&restricted, self.params, self.taxonomy)?;
        let v = self.p_emb.cosine(&z);
        self.cache.insert(mask, v);
        Ok(v)
    }

    pub fn n_objects(&self) -> usize {
        self.q.object_count()
    }
}

/// Shapley value sampling: marginal contributions averaged over `k`
/// sampled permutations of the object nodes. Deterministic for a fixed
/// seed; an empty result when the query has no objects.
pub fn shapley_sampling(
    p: &EgoGraph,
    q: &EgoGraph,
    params: &EncoderParams,
    taxonomy: &Taxonomy,
    permutations: usize,
    seed: u64,
) -> Result<AttributionResult, AttributionError> {
    if permutations == 0 {
        return Err(AttributionError::BadPermutations);
    }
    let n = q.object_count();
    if n == 0 {
        return Ok(AttributionResult::build(ExplainerKind::ShapleySampling, q, vec![], None));
    }
    let mut coalition = Coalition::new(p, q, params, taxonomy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let mut mask: u128 = 0;
        let mut prev = coalition.value(mask)?;
        for &j in &order {
            mask |= 1u128 << j;
            let with = coalition.value(mask)?;
            scores[j] += with - prev;
            prev = with;
        }
    }
    for s in scores.iter_mut() {
        *s /= permutations as f64;
    }
    Ok(AttributionResult::build(ExplainerKind::ShapleySampling, q, scores, None))
}

/// Attention importance: per object node, the mean over heads of the
/// attention coefficients its visibility edges carry into place nodes,
/// summed over the receiving places.
pub fn attention_importance(
    _p: &EgoGraph,
    q: &EgoGraph,
    params: &EncoderParams,
    taxonomy: &Taxonomy,
) -> Result<AttributionResult, AttributionError> {
    let (_, attention) = embed(q, params, taxonomy)?;
    let n_places = q.places.len();
    let n_heads = attention.heads.len().max(1);
    let mut raw = vec![0.0; q.object_count()];
    for head in &attention.heads {
        for &(src, dst, alpha) in head {
            if src >= n_places && dst < n_places {
                raw[src - n_places] += alpha;
            }
        }
    }
    for r in raw.iter_mut() {
        *r /= n_heads as f64;
    }
    Ok(AttributionResult::build(ExplainerKind::Attention, q, raw, None))
}

/// Random-ranking baseline: uniform scores, seeded.
pub fn random_attribution(q: &EgoGraph, seed: u64) -> AttributionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..q.object_count()).map(|_| rng.random_range(0.0..1.0)).collect();
    AttributionResult::build(ExplainerKind::Random, q, raw, None)
}

/// Explainer-independent options for the dispatcher.
#[derive(Debug, Clone, Copy)]
pub struct ExplainOptions {
    pub ig_steps: usize,
    pub shapley_permutations: usize,
    pub seed: u64,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self { ig_steps: 64, shapley_permutations: 64, seed: 0 }
    }
}

/// Runs one explainer on a pair.
pub fn explain(
    kind: ExplainerKind,
    p: &EgoGraph,
    q: &EgoGraph,
    params: &EncoderParams,
    taxonomy: &Taxonomy,
    opts: &ExplainOptions,
) -> Result<AttributionResult, AttributionError> {
    match kind {
        ExplainerKind::Saliency => saliency(p, q, params, taxonomy),
        ExplainerKind::IntegratedGradients => {
            integrated_gradients(p, q, params, taxonomy, opts.ig_steps, None)
        }
        ExplainerKind::ShapleySampling => {
            shapley_sampling(p, q, params, taxonomy, opts.shapley_permutations, opts.seed)
        }
        ExplainerKind::Attention => attention_importance(p, q, params, taxonomy),
        ExplainerKind::Random => Ok(random_attribution(q, opts.seed)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderHyperparams};
    use crate::scene::{Object, Place, SceneGraph};

    fn test_scene() -> SceneGraph {
        SceneGraph::new(
            Taxonomy::office(),
            vec![
                Place { id: 0, x: 0.0, y: 0.0 },
                Place { id: 1, x: 1.0, y: 0.0 },
                Place { id: 2, x: 2.0, y: 0.0 },
            ],
            vec![
                Object { id: 10, x: 0.5, y: 0.5, label: 5 },
                Object { id: 11, x: 1.0, y: 0.5, label: 10 },
                Object { id: 12, x: 1.5, y: 0.5, label: 18 },
                Object { id: 13, x: 2.0, y: 0.5, label: 8 },
            ],
            vec![(0, 1), (1, 2)],
            vec![(0, 10), (1, 10), (1, 11), (1, 12), (2, 12), (2, 13)],
        )
        .unwrap()
    }

    fn small_params() -> EncoderParams {
        let hyper = EncoderHyperparams {
            hidden_dim: 8,
            attention_heads: 2,
            embedding_dim: 6,
            ..EncoderHyperparams::standard(6)
        };
        init_params(&hyper, 3)
    }

    #[test]
    fn target_is_cosine_and_one_for_identical() {
        let scene = test_scene();
        let params = small_params();
        let q = scene.ego_graph(1, 2).unwrap();
        let t = target_scalar(&q, &q, &params, scene.taxonomy()).unwrap();
        assert!((t - 1.0).abs() < 1e-9);
        let p = scene.ego_graph(0, 1).unwrap();
        let t = target_scalar(&p, &q, &params, scene.taxonomy()).unwrap();
        assert!((-1.0..=1.0).contains(&t));
    }

    #[test]
    fn saliency_gradient_matches_finite_differences() {
        let scene = test_scene();
        let params = small_params();
        let tax = scene.taxonomy().clone();
        let p = scene.ego_graph(0, 1).unwrap();
        let q = scene.ego_graph(2, 1).unwrap();
        let (zp, _) = embed(&p, &params, &tax).unwrap();
        let (grad, _) = feature_gradient(&zp, &q, &params, &tax, None).unwrap();

        let x = node_features(&q, &tax).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.values_mut()[i] += h;
            let mut minus = x.clone();
            minus.values_mut()[i] -= h;
            let (_, fp) = feature_gradient(&zp, &q, &params, &tax, Some(&plus)).unwrap();
            let (_, fm) = feature_gradient(&zp, &q, &params, &tax, Some(&minus)).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.values()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        assert!(worst < 1e-4, "feature gradient error {worst}");
    }

    #[test]
    fn saliency_scores_are_nonnegative_and_cover_objects() {
        let scene = test_scene();
        let params = small_params();
        let q = scene.ego_graph(1, 1).unwrap();
        let p = scene.ego_graph(0, 1).unwrap();
        let r = saliency(&p, &q, &params, scene.taxonomy()).unwrap();
        assert_eq!(r.raw.len(), q.object_count());
        assert!(r.raw.iter().all(|s| *s >= 0.0));
        // Objects absent from Q get no entry.
        assert_eq!(r.object_ids, q.objects);
    }

    #[test]
    fn ig_completeness_and_linearity() {
        let scene = test_scene();
        let params = small_params();
        let tax = scene.taxonomy().clone();
        let p = scene.ego_graph(0, 2).unwrap();
        let q = scene.ego_graph(2, 2).unwrap();
        let r = integrated_gradients(&p, &q, &params, &tax, 256, None).unwrap();
        assert!(r.residual.unwrap() < 1e-3, "residual {}", r.residual.unwrap());
    }

    #[test]
    fn ig_steps_matter_on_nonlinear_encoder() {
        let scene = test_scene();
        let params = small_params();
        let tax = scene.taxonomy().clone();
        let p = scene.ego_graph(0, 2).unwrap();
        let q = scene.ego_graph(2, 2).unwrap();
        let r1 = integrated_gradients(&p, &q, &params, &tax, 1, None).unwrap();
        let r256 = integrated_gradients(&p, &q, &params, &tax, 256, None).unwrap();
        let diff: f64 = r1
            .raw
            .iter()
            .zip(&r256.raw)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "integration must actually integrate, diff {diff}");
    }

    #[test]
    fn shapley_single_object_is_marginal() {
        let scene = SceneGraph::new(
            Taxonomy::office(),
            vec![Place { id: 0, x: 0.0, y: 0.0 }],
            vec![Object { id: 1, x: 0.1, y: 0.0, label: 5 }],
            vec![],
            vec![(0, 1)],
        )
        .unwrap();
        let params = small_params();
        let tax = scene.taxonomy().clone();
        let q = scene.ego_graph(0, 0).unwrap();
        let p = q.clone();
        let r = shapley_sampling(&p, &q, &params, &tax, 5, 0).unwrap();
        let mut coalition = Coalition::new(&p, &q, &params, &tax).unwrap();
        let expected = coalition.value(1).unwrap() - coalition.value(0).unwrap();
        assert!((r.raw[0] - expected).abs() < 1e-12, "single node is exact for any k");
    }

    #[test]
    fn shapley_empty_objects_is_empty() {
        let scene = SceneGraph::new(
            Taxonomy::office(),
            vec![Place { id: 0, x: 0.0, y: 0.0 }],
            vec![],
            vec![],
            vec![],
        )
        .unwrap();
        let params = small_params();
        let q = scene.ego_graph(0, 0).unwrap();
        let r = shapley_sampling(&q.clone(), &q, &params, scene.taxonomy(), 3, 0).unwrap();
        assert!(r.raw.is_empty());
    }

    #[test]
    fn attention_importance_bounded_and_deterministic() {
        let scene = test_scene();
        let params = small_params();
        let q = scene.ego_graph(1, 1).unwrap();
        let p = scene.ego_graph(0, 1).unwrap();
        let a = attention_importance(&p, &q, &params, scene.taxonomy()).unwrap();
        let b = attention_importance(&p, &q, &params, scene.taxonomy()).unwrap();
        assert_eq!(a.raw, b.raw);
        // Per head per receiving node coefficients sum to 1, so an object's
        // aggregate is bounded by the number of receiving places.
        for (j, &score) in a.raw.iter().enumerate() {
            let receiving = q.vis_edges.iter().filter(|&&(_, o)| o == j).count();
            assert!(score >= 0.0 && score <= receiving as f64 + 1e-9);
        }
    }

    #[test]
    fn single_object_single_place_attention_is_one() {
        let scene = SceneGraph::new(
            Taxonomy::office(),
            vec![Place { id: 0, x: 0.0, y: 0.0 }],
            vec![Object { id: 1, x: 0.1, y: 0.0, label: 12 }],
            vec![],
            vec![(0, 1)],
        )
        .unwrap();
        let params = small_params();
        let q = scene.ego_graph(0, 0).unwrap();
        let r = attention_importance(&q.clone(), &q, &params, scene.taxonomy()).unwrap();
        // The place's in-neighbourhood is {object, self}; the object's
        // coefficient is softmax over those two, not 1. With the self-loop
        // excluded from object scores the bound is still (0, 1).
        assert!(r.raw[0] > 0.0 && r.raw[0] < 1.0);
    }

    #[test]
    fn normalisation_invariant_under_positive_rescaling() {
        let scene = test_scene();
        let params = small_params();
        let q = scene.ego_graph(1, 2).unwrap();
        let p = scene.ego_graph(0, 2).unwrap();
        let r = saliency(&p, &q, &params, scene.taxonomy()).unwrap();
        let sum: f64 = r.normalised.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let rescaled = AttributionResult::build(
            ExplainerKind::Saliency,
            &q,
            r.raw.iter().map(|v| v * 37.5).collect(),
            None,
        );
        for (a, b) in r.normalised.iter().zip(&rescaled.normalised) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_breaks_ties_by_ascending_id() {
        let scene = test_scene();
        let q = scene.ego_graph(1, 2).unwrap();
        let r = AttributionResult::build(
            ExplainerKind::Random,
            &q,
            vec![0.5; q.object_count()],
            None,
        );
        let ranking = r.ranking();
        let ids: Vec<u32> = ranking.iter().map(|&j| r.object_ids[j]).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted);
    }
}
