//! Class-mobility perturbation, dataset splitting, and positive pairing.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::synthetic::apportion;
use super::{SceneError, SceneGraph, Taxonomy};

/// Per-class displacement scale in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityProfile {
    sigma: BTreeMap<u32, f64>,
}

impl MobilityProfile {
    pub fn new(entries: impl IntoIterator<Item = (u32, f64)>) -> Result<Self, SceneError> {
        let sigma: BTreeMap<u32, f64> = entries.into_iter().collect();
        if sigma.values().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(SceneError::InvalidConfig("mobility scales must be finite and >= 0".into()));
        }
        Ok(Self { sigma })
    }

    /// Default office mobility: strong shifts for highly mobile classes
    /// (trash cans, chairs), near-static couches and paintings.
    pub fn office() -> Self {
        Self::new([
            (5, 0.5),   // chair
            (8, 0.05),  // couch
            (10, 0.2),  // computer
            (11, 0.3),  // plant
            (12, 0.05), // painting
            (18, 0.5),  // trash can
        ])
        .expect("valid defaults")
    }

    /// The same scale for every class of a taxonomy.
    pub fn uniform(taxonomy: &Taxonomy, sigma: f64) -> Result<Self, SceneError> {
        Self::new(taxonomy.classes().iter().map(|c| (c.label, sigma)))
    }

    pub fn sigma(&self, label: u32) -> Option<f64> {
        self.sigma.get(&label).copied()
    }

    pub fn set(&mut self, label: u32, sigma: f64) {
        self.sigma.insert(label, sigma);
    }
}

/// Displaces every object by an isotropic Gaussian offset with its class
/// scale. Places and edges are untouched; deterministic for a fixed seed.
pub fn perturb(scene: &SceneGraph, profile: &MobilityProfile, seed: u64) -> Result<SceneGraph, SceneError> {
    for o in scene.objects() {
        if profile.sigma(o.label).is_none() {
            return Err(SceneError::MissingMobility(o.label));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = scene
        .objects()
        .iter()
        .map(|o| {
            let sigma = profile.sigma(o.label).expect("checked above");
            let mut moved = *o;
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("sigma validated");
                moved.x += normal.sample(&mut rng);
                moved.y += normal.sample(&mut rng);
            }
            moved
        })
        .collect();
    SceneGraph::new(
        scene.taxonomy().clone(),
        scene.places().to_vec(),
        objects,
        scene.trav_edges().to_vec(),
        scene.vis_edges().to_vec(),
    )
}

/// A query variant: objects displaced by class mobility, then visibility
/// re-derived from the new coordinates so the displacement is visible in
/// the graph structure.
pub fn query_variant(
    scene: &SceneGraph,
    profile: &MobilityProfile,
    visibility_range: f64,
    seed: u64,
) -> Result<SceneGraph, SceneError> {
    Ok(perturb(scene, profile, seed)?.rebuild_visibility(visibility_range))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, SceneError> {
        if train <= 0.0 || val <= 0.0 || test <= 0.0 {
            return Err(SceneError::InvalidConfig("split ratios must be positive".into()));
        }
        if ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(SceneError::InvalidConfig("split ratios must sum to 1".into()));
        }
        Ok(Self { train, val, test })
    }

    pub fn standard() -> Self {
        Self { train: 0.7, val: 0.2, test: 0.1 }
    }
}

/// Train/val/test partition of place ids plus the query variants and the
/// radius-based positive pairing.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
    pub query_variants: Vec<SceneGraph>,
    /// For each place id, the set of map place ids within the matching
    /// radius of its ground-truth location.
    pub positives: BTreeMap<u32, BTreeSet<u32>>,
    pub radius: f64,
}

impl DatasetSplit {
    pub fn positives_of(&self, place: u32) -> Option<&BTreeSet<u32>> {
        self.positives.get(&place)
    }
}

/// Shuffles place ids with the seed, partitions them by the ratios, and
/// pairs every query place with all map places within `radius` metres of
/// its ground-truth location (multiple positives allowed).
pub fn split_dataset(
    map: &SceneGraph,
    query_variants: Vec<SceneGraph>,
    ratios: SplitRatios,
    radius: f64,
    seed: u64,
) -> Result<DatasetSplit, SceneError> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(SceneError::InvalidConfig("matching radius must be positive".into()));
    }
    let mut ids: Vec<u32> = map.places().iter().map(|p| p.id).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let counts = apportion(&[ratios.train, ratios.val, ratios.test], ids.len());
    let mut train: Vec<u32> = ids[..counts[0]].to_vec();
    let mut val: Vec<u32> = ids[counts[0]..counts[0] + counts[1]].to_vec();
    let mut test: Vec<u32> = ids[counts[0] + counts[1]..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();

    let mut positives: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for q in map.places() {
        let mut set = BTreeSet::new();
        for m in map.places() {
            let d = ((q.x - m.x).powi(2) + (q.y - m.y).powi(2)).sqrt();
            if d <= radius {
                set.insert(m.id);
            }
        }
        positives.insert(q.id, set);
    }

    Ok(DatasetSplit { train, val, test, query_variants, positives, radius })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic, Object, Place, SyntheticConfig};

    fn line_scene(xs: &[f64]) -> SceneGraph {
        let places: Vec<Place> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| Place { id: i as u32, x, y: 0.0 })
            .collect();
        let trav: Vec<(u32, u32)> = (1..xs.len()).map(|i| (i as u32 - 1, i as u32)).collect();
        SceneGraph::new(Taxonomy::office(), places, vec![], trav, vec![]).unwrap()
    }

    #[test]
    fn radius_threshold_at_four_metres() {
        let scene = line_scene(&[0.0, 3.9, 4.1]);
        let split = split_dataset(&scene, vec![], SplitRatios::standard(), 4.0, 0).unwrap();
        let pos = split.positives_of(0).unwrap();
        assert!(pos.contains(&1));
        assert!(!pos.contains(&2));
        // A place is its own positive for any radius > 0.
        assert!(pos.contains(&0));
    }

    #[test]
    fn split_sizes_on_1000_places() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let scene = line_scene(&xs);
        let split = split_dataset(&scene, vec![], SplitRatios::standard(), 4.0, 1).unwrap();
        assert_eq!(split.train.len(), 700);
        assert_eq!(split.val.len(), 200);
        assert_eq!(split.test.len(), 100);
    }

    #[test]
    fn split_partitions_places() {
        let scene = generate_synthetic(&SyntheticConfig::office(2)).unwrap();
        let split = split_dataset(&scene, vec![], SplitRatios::standard(), 4.0, 3).unwrap();
        let mut all: Vec<u32> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        let mut expected: Vec<u32> = scene.places().iter().map(|p| p.id).collect();
        expected.sort_unstable();
        assert_eq!(all, expected);
        let n = all.len();
        all.dedup();
        assert_eq!(all.len(), n, "splits must be disjoint");
    }

    #[test]
    fn positives_respect_radius_exactly() {
        let scene = generate_synthetic(&SyntheticConfig::office(4)).unwrap();
        let radius = 4.0;
        let split = split_dataset(&scene, vec![], SplitRatios::standard(), radius, 5).unwrap();
        for q in scene.places() {
            let pos = split.positives_of(q.id).unwrap();
            for m in scene.places() {
                let d = ((q.x - m.x).powi(2) + (q.y - m.y).powi(2)).sqrt();
                assert_eq!(pos.contains(&m.id), d <= radius);
            }
        }
    }

    #[test]
    fn zero_sigma_perturb_is_identity() {
        let scene = generate_synthetic(&SyntheticConfig::office(5)).unwrap();
        let profile = MobilityProfile::uniform(scene.taxonomy(), 0.0).unwrap();
        let out = perturb(&scene, &profile, 9).unwrap();
        assert_eq!(out, scene);
    }

    #[test]
    fn perturb_preserves_everything_but_object_coords() {
        let scene = generate_synthetic(&SyntheticConfig::office(6)).unwrap();
        let out = perturb(&scene, &MobilityProfile::office(), 9).unwrap();
        assert_eq!(out.places(), scene.places());
        assert_eq!(out.trav_edges(), scene.trav_edges());
        assert_eq!(out.vis_edges(), scene.vis_edges());
        assert_eq!(out.objects().len(), scene.objects().len());
        for (a, b) in out.objects().iter().zip(scene.objects()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn perturb_missing_class_errors() {
        let scene = generate_synthetic(&SyntheticConfig::office(6)).unwrap();
        let profile = MobilityProfile::new([(5, 0.1)]).unwrap();
        assert!(matches!(perturb(&scene, &profile, 0), Err(SceneError::MissingMobility(_))));
    }

    #[test]
    fn displacement_scale_matches_sigma() {
        // 1000 trash cans, sigma 0.5: the sample standard deviation of the
        // displacement components should land within 10%.
        let places = vec![Place { id: 0, x: 0.0, y: 0.0 }];
        let objects: Vec<Object> = (0..1000)
            .map(|i| Object { id: 1 + i, x: 0.0, y: 0.0, label: 18 })
            .collect();
        let scene = SceneGraph::new(Taxonomy::office(), places, objects, vec![], vec![]).unwrap();
        let profile = MobilityProfile::new([(18, 0.5)]).unwrap();
        let out = perturb(&scene, &profile, 42).unwrap();
        let comps: Vec<f64> = out.objects().iter().flat_map(|o| [o.x, o.y]).collect();
        let mean = comps.iter().sum::<f64>() / comps.len() as f64;
        let var = comps.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (comps.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((sd - 0.5).abs() < 0.05, "sample sd {sd}");
    }

    #[test]
    fn query_variant_rewires_visibility() {
        let scene = generate_synthetic(&SyntheticConfig::office(7)).unwrap();
        let variant = query_variant(&scene, &MobilityProfile::office(), 3.0, 11).unwrap();
        assert_eq!(variant.places(), scene.places());
        assert_ne!(variant.vis_edges(), scene.vis_edges());
    }
}
