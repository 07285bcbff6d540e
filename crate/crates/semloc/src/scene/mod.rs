//! Scene-graph data model: places and objects connected by traversability
//! and visibility edges, plus the ego-graph extraction the encoder consumes.
//!
//! Graphs are immutable after construction and validated eagerly: every edge
//! must reference existing nodes of the right kind, with no self-loops and
//! no duplicates.

mod io;
mod split;
mod synthetic;

pub use io::{load_scene, save_scene};
pub use split::{perturb, query_variant, split_dataset, DatasetSplit, MobilityProfile, SplitRatios};
pub use synthetic::{generate_synthetic, office_profile, SyntheticConfig};

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("taxonomy must be non-empty with unique labels and codes")]
    BadTaxonomy,
    #[error("duplicate node id {0}")]
    DuplicateId(u32),
    #[error("{kind} edge references unknown {role} id {id}")]
    UnknownRef { kind: &'static str, role: &'static str, id: u32 },
    #[error("self-loop on node {0}")]
    SelfLoop(u32),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(u32, u32),
    #[error("object {id} carries label {label}, which is not in the taxonomy")]
    UnknownLabel { id: u32, label: u32 },
    #[error("unknown place id {0}")]
    UnknownPlace(u32),
    #[error("class label {0} has no entry in the mobility profile")]
    MissingMobility(u32),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// One semantic class of the taxonomy, e.g. `(10, "computer", "CP")`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticClass {
    pub label: u32,
    pub name: String,
    pub code: String,
}

/// Ordered set of semantic classes, sorted by label id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    classes: Vec<SemanticClass>,
}

impl Taxonomy {
    pub fn new(mut classes: Vec<SemanticClass>) -> Result<Self, SceneError> {
        if classes.is_empty() {
            return Err(SceneError::BadTaxonomy);
        }
        classes.sort_by_key(|c| c.label);
        let labels: HashSet<u32> = classes.iter().map(|c| c.label).collect();
        let codes: HashSet<&str> = classes.iter().map(|c| c.code.as_str()).collect();
        if labels.len() != classes.len() || codes.len() != classes.len() {
            return Err(SceneError::BadTaxonomy);
        }
        Ok(Self { classes })
    }

    /// The six-class office taxonomy with label ids from the uHumans2
    /// annotation scheme.
    pub fn office() -> Self {
        let mk = |label, name: &str, code: &str| SemanticClass {
            label,
            name: name.to_string(),
            code: code.to_string(),
        };
        Self::new(vec![
            mk(5, "chair", "CH"),
            mk(8, "couch", "CO"),
            mk(10, "computer", "CP"),
            mk(11, "plant", "PL"),
            mk(12, "painting", "PA"),
            mk(18, "trash_can", "TC"),
        ])
        .expect("office taxonomy is valid")
    }

    pub fn classes(&self) -> &[SemanticClass] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Dense index of a label, used as the one-hot feature column.
    pub fn index_of(&self, label: u32) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }

    pub fn by_code(&self, code: &str) -> Option<&SemanticClass> {
        self.classes.iter().find(|c| c.code == code)
    }

    pub fn by_label(&self, label: u32) -> Option<&SemanticClass> {
        self.classes.iter().find(|c| c.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Place {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub label: u32,
}

/// Validated scene graph: the map `M` with places, objects, traversability
/// edges (place-place) and visibility edges (place-object).
#[derive(Debug, Clone)]
pub struct SceneGraph {
    taxonomy: Taxonomy,
    places: Vec<Place>,
    objects: Vec<Object>,
    trav_edges: Vec<(u32, u32)>,
    vis_edges: Vec<(u32, u32)>,
    place_pos: HashMap<u32, usize>,
    object_pos: HashMap<u32, usize>,
    trav_adj: HashMap<u32, Vec<u32>>,
    vis_from_place: HashMap<u32, Vec<u32>>,
}

impl PartialEq for SceneGraph {
    fn eq(&self, other: &Self) -> bool {
        self.taxonomy == other.taxonomy
            && self.places == other.places
            && self.objects == other.objects
            && self.trav_edges == other.trav_edges
            && self.vis_edges == other.vis_edges
    }
}

impl SceneGraph {
    pub fn new(
        taxonomy: Taxonomy,
        places: Vec<Place>,
        objects: Vec<Object>,
        trav_edges: Vec<(u32, u32)>,
        vis_edges: Vec<(u32, u32)>,
    ) -> Result<Self, SceneError> {
        let mut place_pos = HashMap::new();
        let mut object_pos = HashMap::new();
        let mut all_ids = HashSet::new();
        for (i, p) in places.iter().enumerate() {
            if !all_ids.insert(p.id) {
                return Err(SceneError::DuplicateId(p.id));
            }
            place_pos.insert(p.id, i);
        }
        for (i, o) in objects.iter().enumerate() {
            if !all_ids.insert(o.id) {
                return Err(SceneError::DuplicateId(o.id));
            }
            if taxonomy.index_of(o.label).is_none() {
                return Err(SceneError::UnknownLabel { id: o.id, label: o.label });
            }
            object_pos.insert(o.id, i);
        }

        let mut trav_norm = Vec::with_capacity(trav_edges.len());
        let mut seen = HashSet::new();
        for &(a, b) in &trav_edges {
            for id in [a, b] {
                if !place_pos.contains_key(&id) {
                    return Err(SceneError::UnknownRef { kind: "traversability", role: "place", id });
                }
            }
            if a == b {
                return Err(SceneError::SelfLoop(a));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(SceneError::DuplicateEdge(e.0, e.1));
            }
            trav_norm.push(e);
        }
        trav_norm.sort_unstable();

        let mut vis_norm = Vec::with_capacity(vis_edges.len());
        let mut seen = HashSet::new();
        for &(p, o) in &vis_edges {
            if !place_pos.contains_key(&p) {
                return Err(SceneError::UnknownRef { kind: "visibility", role: "place", id: p });
            }
            if !object_pos.contains_key(&o) {
                return Err(SceneError::UnknownRef { kind: "visibility", role: "object", id: o });
            }
            if !seen.insert((p, o)) {
                return Err(SceneError::DuplicateEdge(p, o));
            }
            vis_norm.push((p, o));
        }
        vis_norm.sort_unstable();

        let mut trav_adj: HashMap<u32, Vec<u32>> = HashMap::new();
        for &(a, b) in &trav_norm {
            trav_adj.entry(a).or_default().push(b);
            trav_adj.entry(b).or_default().push(a);
        }
        for v in trav_adj.values_mut() {
            v.sort_unstable();
        }
        let mut vis_from_place: HashMap<u32, Vec<u32>> = HashMap::new();
        for &(p, o) in &vis_norm {
            vis_from_place.entry(p).or_default().push(o);
        }
        for v in vis_from_place.values_mut() {
            v.sort_unstable();
        }

        Ok(Self {
            taxonomy,
            places,
            objects,
            trav_edges: trav_norm,
            vis_edges: vis_norm,
            place_pos,
            object_pos,
            trav_adj,
            vis_from_place,
        })
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn places(&self) -> &[Place] {
        &self.places
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn trav_edges(&self) -> &[(u32, u32)] {
        &self.trav_edges
    }

    pub fn vis_edges(&self) -> &[(u32, u32)] {
        &self.vis_edges
    }

    pub fn place(&self, id: u32) -> Option<&Place> {
        self.place_pos.get(&id).map(|&i| &self.places[i])
    }

    pub fn object(&self, id: u32) -> Option<&Object> {
        self.object_pos.get(&id).map(|&i| &self.objects[i])
    }

    /// Object counts per class, keyed by label id.
    pub fn class_histogram(&self) -> BTreeMap<u32, usize> {
        let mut h: BTreeMap<u32, usize> = BTreeMap::new();
        for c in self.taxonomy.classes() {
            h.insert(c.label, 0);
        }
        for o in &self.objects {
            *h.entry(o.label).or_insert(0) += 1;
        }
        h
    }

    /// Removes all objects of class `label` along with their visibility
    /// edges; removing an absent class is a no-op.
    pub fn remove_class(&self, label: u32) -> SceneGraph {
        let removed: HashSet<u32> = self
            .objects
            .iter()
            .filter(|o| o.label == label)
            .map(|o| o.id)
            .collect();
        let objects: Vec<Object> = self.objects.iter().filter(|o| o.label != label).copied().collect();
        let vis_edges: Vec<(u32, u32)> = self
            .vis_edges
            .iter()
            .filter(|(_, o)| !removed.contains(o))
            .copied()
            .collect();
        SceneGraph::new(
            self.taxonomy.clone(),
            self.places.clone(),
            objects,
            self.trav_edges.clone(),
            vis_edges,
        )
        .expect("removal preserves validity")
    }

    /// Recomputes visibility edges from current coordinates: every object is
    /// linked to every place within `range` metres. This is how object
    /// displacement becomes observable to a coordinate-free encoder — a
    /// moved object drops out of range of some places and into range of
    /// others, exactly as a re-derived map would show.
    pub fn rebuild_visibility(&self, range: f64) -> SceneGraph {
        let mut vis = Vec::new();
        for p in &self.places {
            for o in &self.objects {
                let (dx, dy) = (p.x - o.x, p.y - o.y);
                if (dx * dx + dy * dy).sqrt() <= range {
                    vis.push((p.id, o.id));
                }
            }
        }
        SceneGraph::new(
            self.taxonomy.clone(),
            self.places.clone(),
            self.objects.clone(),
            self.trav_edges.clone(),
            vis,
        )
        .expect("rebuild preserves validity")
    }

    /// Ego graph around `centre`: all places within `hops` traversability
    /// hops, every object visible from one of them, and the induced edges.
    pub fn ego_graph(&self, centre: u32, hops: usize) -> Result<EgoGraph, SceneError> {
        if !self.place_pos.contains_key(&centre) {
            return Err(SceneError::UnknownPlace(centre));
        }
        let mut depth: HashMap<u32, usize> = HashMap::new();
        depth.insert(centre, 0);
        let mut queue = VecDeque::new();
        queue.push_back(centre);
        while let Some(p) = queue.pop_front() {
            let d = depth[&p];
            if d == hops {
                continue;
            }
            if let Some(nbrs) = self.trav_adj.get(&p) {
                for &n in nbrs {
                    if !depth.contains_key(&n) {
                        depth.insert(n, d + 1);
                        queue.push_back(n);
                    }
                }
            }
        }
        let places: Vec<u32> = {
            let mut v: Vec<u32> = depth.keys().copied().collect();
            v.sort_unstable();
            v
        };
        let place_set: HashSet<u32> = places.iter().copied().collect();
        let mut object_set: BTreeSet<u32> = BTreeSet::new();
        for p in &places {
            if let Some(objs) = self.vis_from_place.get(p) {
                object_set.extend(objs.iter().copied());
            }
        }
        let objects: Vec<u32> = object_set.into_iter().collect();
        let object_labels: Vec<u32> = objects
            .iter()
            .map(|id| self.object(*id).expect("validated").label)
            .collect();

        let place_local: HashMap<u32, usize> = places.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let object_local: HashMap<u32, usize> = objects.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let trav_edges: Vec<(usize, usize)> = self
            .trav_edges
            .iter()
            .filter(|(a, b)| place_set.contains(a) && place_set.contains(b))
            .map(|(a, b)| (place_local[a], place_local[b]))
            .collect();
        let vis_edges: Vec<(usize, usize)> = self
            .vis_edges
            .iter()
            .filter(|(p, _)| place_set.contains(p))
            .map(|(p, o)| (place_local[p], object_local[o]))
            .collect();

        Ok(EgoGraph {
            centre_place: centre,
            centre_index: place_local[&centre],
            places,
            objects,
            object_labels,
            trav_edges,
            vis_edges,
        })
    }

    /// Connected components over traversability edges, as place-id sets.
    pub fn traversability_components(&self) -> Vec<Vec<u32>> {
        let mut seen: HashSet<u32> = HashSet::new();
        let mut components = Vec::new();
        for p in &self.places {
            if seen.contains(&p.id) {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([p.id]);
            seen.insert(p.id);
            while let Some(q) = queue.pop_front() {
                comp.push(q);
                if let Some(nbrs) = self.trav_adj.get(&q) {
                    for &n in nbrs {
                        if seen.insert(n) {
                            queue.push_back(n);
                        }
                    }
                }
            }
            comp.sort_unstable();
            components.push(comp);
        }
        components
    }
}

/// Local subgraph around one place: the unit the encoder embeds.
///
/// Node ordering is places first (sorted by id) then objects (sorted by id);
/// a node's position in that order is its input feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoGraph {
    pub centre_place: u32,
    /// Index of the centre within `places` (and within the node order).
    pub centre_index: usize,
    pub places: Vec<u32>,
    pub objects: Vec<u32>,
    /// Class labels parallel to `objects`.
    pub object_labels: Vec<u32>,
    /// Undirected place-place edges as local place indices.
    pub trav_edges: Vec<(usize, usize)>,
    /// Place-object edges as (local place index, local object index).
    pub vis_edges: Vec<(usize, usize)>,
}

impl EgoGraph {
    pub fn node_count(&self) -> usize {
        self.places.len() + self.objects.len()
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    /// Global node index of an object's feature row.
    pub fn object_row(&self, object_local: usize) -> usize {
        self.places.len() + object_local
    }

    /// Restriction to a subset of object nodes (by local object index),
    /// keeping every place. The masking transform behind Shapley coalitions
    /// and fidelity budgets.
    pub fn with_objects(&self, keep: &BTreeSet<usize>) -> EgoGraph {
        let kept: Vec<usize> = (0..self.objects.len()).filter(|i| keep.contains(i)).collect();
        let remap: HashMap<usize, usize> = kept.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        EgoGraph {
            centre_place: self.centre_place,
            centre_index: self.centre_index,
            places: self.places.clone(),
            objects: kept.iter().map(|&i| self.objects[i]).collect(),
            object_labels: kept.iter().map(|&i| self.object_labels[i]).collect(),
            trav_edges: self.trav_edges.clone(),
            vis_edges: self
                .vis_edges
                .iter()
                .filter_map(|&(p, o)| remap.get(&o).map(|&no| (p, no)))
                .collect(),
        }
    }

    /// The place skeleton: every object removed.
    pub fn places_only(&self) -> EgoGraph {
        self.with_objects(&BTreeSet::new())
    }
}
