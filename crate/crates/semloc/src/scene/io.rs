//! Scene file ingestion and export.
//!
//! Format (JSON, UTF-8): a top-level object with `taxonomy` (array of
//! `{label, name, code}`), `places` (`{id, x, y}`), `objects`
//! (`{id, x, y, label}`), `edges_traversability` (`[place_id, place_id]`
//! pairs) and `edges_visibility` (`[place_id, object_id]` pairs). Ids are
//! unique across places and objects jointly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Object, Place, SceneError, SceneGraph, SemanticClass, Taxonomy};

#[derive(Serialize, Deserialize)]
struct SceneFile {
    taxonomy: Vec<SemanticClass>,
    places: Vec<Place>,
    objects: Vec<Object>,
    edges_traversability: Vec<(u32, u32)>,
    edges_visibility: Vec<(u32, u32)>,
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneGraph, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    scene_from_json(&text).map_err(|e| match e {
        SceneError::Parse { detail, .. } => SceneError::Parse {
            path: path.display().to_string(),
            detail,
        },
        other => other,
    })
}

pub fn save_scene(scene: &SceneGraph, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    std::fs::write(path, scene_to_json(scene)).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn scene_from_json(text: &str) -> Result<SceneGraph, SceneError> {
    let file: SceneFile = serde_json::from_str(text).map_err(|e| SceneError::Parse {
        path: "<string>".to_string(),
        detail: format!("line {}, column {}: {e}", e.line(), e.column()),
    })?;
    let taxonomy = Taxonomy::new(file.taxonomy)?;
    SceneGraph::new(
        taxonomy,
        file.places,
        file.objects,
        file.edges_traversability,
        file.edges_visibility,
    )
}

pub fn scene_to_json(scene: &SceneGraph) -> String {
    let file = SceneFile {
        taxonomy: scene.taxonomy().classes().to_vec(),
        places: scene.places().to_vec(),
        objects: scene.objects().to_vec(),
        edges_traversability: scene.trav_edges().to_vec(),
        edges_visibility: scene.vis_edges().to_vec(),
    };
    serde_json::to_string_pretty(&file).expect("scene serialises")
}
