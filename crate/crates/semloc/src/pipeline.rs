//! Shared orchestration: ego-graph caches, bulk embedding, and the
//! evaluation protocol used by training, the CLI, and the analyses.

use std::collections::{BTreeMap, BTreeSet};

use crate::encoder::{bow_embed, embed, Embedding, EncoderError, EncoderParams};
use crate::metrics::{evaluate, EvalReport, MetricsError, SimilarityMatrix};
use crate::scene::{DatasetSplit, EgoGraph, SceneError, SceneGraph};

/// Ego graphs for every place of a scene, extracted once and reused.
pub fn extract_egos(scene: &SceneGraph, hops: usize) -> Result<BTreeMap<u32, EgoGraph>, SceneError> {
    let mut egos = BTreeMap::new();
    for p in scene.places() {
        egos.insert(p.id, scene.ego_graph(p.id, hops)?);
    }
    Ok(egos)
}

/// Inference embeddings for the given place ids.
pub fn embed_places(
    egos: &BTreeMap<u32, EgoGraph>,
    ids: &[u32],
    params: &EncoderParams,
    scene: &SceneGraph,
) -> Result<Vec<Embedding>, EncoderError> {
    ids.iter()
        .map(|id| embed(&egos[id], params, scene.taxonomy()).map(|(e, _)| e))
        .collect()
}

/// Which split partition queries are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySet {
    Val,
    Test,
}

/// Queries as (variant index, place id), covering every variant.
pub fn query_list(split: &DatasetSplit, which: QuerySet, n_variants: usize) -> Vec<(usize, u32)> {
    let ids = match which {
        QuerySet::Val => &split.val,
        QuerySet::Test => &split.test,
    };
    let mut out = Vec::with_capacity(ids.len() * n_variants);
    for v in 0..n_variants {
        for &p in ids {
            out.push((v, p));
        }
    }
    out
}

/// Similarity matrix of learned embeddings: query ego graphs come from the
/// variant scenes, map columns from the map scene.
pub fn similarity_learned(
    map_scene: &SceneGraph,
    map_egos: &BTreeMap<u32, EgoGraph>,
    variant_egos: &[BTreeMap<u32, EgoGraph>],
    queries: &[(usize, u32)],
    params: &EncoderParams,
) -> Result<SimilarityMatrix, PipelineError> {
    let map_ids: Vec<u32> = map_egos.keys().copied().collect();
    let map_embs: Vec<Vec<f64>> = map_ids
        .iter()
        .map(|id| embed(&map_egos[id], params, map_scene.taxonomy()).map(|(e, _)| e.0))
        .collect::<Result<_, _>>()?;
    let query_embs: Vec<Vec<f64>> = queries
        .iter()
        .map(|(v, p)| embed(&variant_egos[*v][p], params, map_scene.taxonomy()).map(|(e, _)| e.0))
        .collect::<Result<_, _>>()?;
    Ok(SimilarityMatrix::from_vectors(
        queries.to_vec(),
        map_ids,
        &query_embs,
        &map_embs,
    )?)
}

/// Similarity matrix of the bag-of-words baseline over the same graphs.
pub fn similarity_bow(
    map_scene: &SceneGraph,
    map_egos: &BTreeMap<u32, EgoGraph>,
    variant_egos: &[BTreeMap<u32, EgoGraph>],
    queries: &[(usize, u32)],
) -> Result<SimilarityMatrix, PipelineError> {
    let tax = map_scene.taxonomy();
    let map_ids: Vec<u32> = map_egos.keys().copied().collect();
    let map_embs: Vec<Vec<f64>> = map_ids.iter().map(|id| bow_embed(&map_egos[id], tax)).collect();
    let query_embs: Vec<Vec<f64>> = queries
        .iter()
        .map(|(v, p)| bow_embed(&variant_egos[*v][p], tax))
        .collect();
    Ok(SimilarityMatrix::from_vectors(
        queries.to_vec(),
        map_ids,
        &query_embs,
        &map_embs,
    )?)
}

/// Per-query positive sets aligned with a similarity matrix's rows.
pub fn positives_for_queries(split: &DatasetSplit, queries: &[(usize, u32)]) -> Vec<BTreeSet<u32>> {
    queries
        .iter()
        .map(|(_, p)| split.positives_of(*p).cloned().unwrap_or_default())
        .collect()
}

/// Full evaluation of a similarity matrix against the split's pairing.
pub fn evaluate_matrix(
    sim: &SimilarityMatrix,
    split: &DatasetSplit,
) -> Result<EvalReport, MetricsError> {
    let positives = positives_for_queries(split, &sim.query_ids);
    evaluate(sim, &positives)
}

/// The experiment protocol: how query variants are derived from a map and
/// how places are split and paired.
///
/// Training and evaluation variants use disjoint perturbation seeds, so
/// evaluation queries come from displacements never seen during training.
#[derive(Debug, Clone)]
pub struct Protocol {
    pub n_variants: usize,
    pub mobility: crate::scene::MobilityProfile,
    pub visibility_range: f64,
    pub ratios: crate::scene::SplitRatios,
    pub radius: f64,
}

impl Protocol {
    /// Two perturbed variants, office mobility, 3 m visibility, 70-20-10
    /// split, 4 m matching radius.
    pub fn standard() -> Self {
        Self {
            n_variants: 2,
            mobility: crate::scene::MobilityProfile::office(),
            visibility_range: 3.0,
            ratios: crate::scene::SplitRatios::standard(),
            radius: 4.0,
        }
    }

    fn variant_seeds(&self, seed: u64, held_out: bool) -> Vec<u64> {
        let base = if held_out { seed.wrapping_add(20_000) } else { seed.wrapping_add(10_000) };
        (0..self.n_variants as u64).map(|v| base.wrapping_add(v)).collect()
    }

    /// Training split: shuffled partition plus the training query variants.
    pub fn train_split(&self, map: &SceneGraph, seed: u64) -> Result<DatasetSplit, SceneError> {
        let variants = self
            .variant_seeds(seed, false)
            .into_iter()
            .map(|s| crate::scene::query_variant(map, &self.mobility, self.visibility_range, s))
            .collect::<Result<Vec<_>, _>>()?;
        crate::scene::split_dataset(map, variants, self.ratios, self.radius, seed)
    }

    /// Evaluation-time query variants from held-out perturbation seeds.
    pub fn eval_variants(&self, map: &SceneGraph, seed: u64) -> Result<Vec<SceneGraph>, SceneError> {
        self.variant_seeds(seed, true)
            .into_iter()
            .map(|s| crate::scene::query_variant(map, &self.mobility, self.visibility_range, s))
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
