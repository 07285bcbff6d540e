//! Deterministic synthetic office scenes.
//!
//! Rooms sit on a grid served by corridor lines with densely spaced places
//! (mimicking how dense topological maps produce closely spaced place
//! nodes), so a metric matching radius yields multiple positives per query.
//! Objects are dropped into rooms with classes apportioned from a frequency
//! profile; visibility links every object to all places in range, with
//! line of sight ignored.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Object, Place, SceneError, SceneGraph, Taxonomy};

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub rooms_x: usize,
    pub rooms_y: usize,
    /// Side length of each square room, metres.
    pub room_size: f64,
    pub corridor_width: f64,
    /// Spacing of corridor places along a corridor line.
    pub corridor_spacing: f64,
    /// Spacing of the interior place grid inside rooms.
    pub room_spacing: f64,
    pub n_objects: usize,
    /// Class frequency profile as (label, weight) pairs.
    pub profile: Vec<(u32, f64)>,
    pub visibility_range: f64,
    /// Uniform positional jitter applied to every place.
    pub jitter: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Default office scene: a 4x3 room grid and 110 objects with the
    /// canonical office class mix (28 chairs, 11 couches, 35 computers,
    /// 13 plants, 8 paintings, 15 trash cans).
    pub fn office(seed: u64) -> Self {
        Self {
            rooms_x: 4,
            rooms_y: 3,
            room_size: 6.0,
            corridor_width: 2.0,
            corridor_spacing: 1.0,
            room_spacing: 2.0,
            n_objects: 110,
            profile: office_profile(),
            visibility_range: 3.0,
            jitter: 0.25,
            seed,
        }
    }
}

/// Table of office class weights, keyed by label id.
pub fn office_profile() -> Vec<(u32, f64)> {
    vec![
        (5, 28.0),  // chair
        (8, 11.0),  // couch
        (10, 35.0), // computer
        (11, 13.0), // plant
        (12, 8.0),  // painting
        (18, 15.0), // trash can
    ]
}

/// Largest-remainder apportionment of `total` units over `weights`.
/// Ties on the fractional part go to the lower index.
pub(crate) fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(total - assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SceneGraph, SceneError> {
    if config.rooms_x == 0 || config.rooms_y == 0 {
        return Err(SceneError::InvalidConfig("room grid must be at least 1x1".into()));
    }
    if config.room_size <= 0.0 || config.corridor_width <= 0.0 {
        return Err(SceneError::InvalidConfig("extents must be positive".into()));
    }
    if config.corridor_spacing <= 0.0 || config.room_spacing <= 0.0 {
        return Err(SceneError::InvalidConfig("place spacings must be positive".into()));
    }
    if config.n_objects > 0 {
        if config.profile.is_empty() || config.profile.iter().all(|(_, w)| *w <= 0.0) {
            return Err(SceneError::InvalidConfig("class profile has no positive weight".into()));
        }
        if config.room_size < config.room_spacing {
            return Err(SceneError::InvalidConfig(
                "rooms too small to place objects and interior places".into(),
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cw = config.corridor_width;
    let cell = config.room_size + cw;
    let width = cw + config.rooms_x as f64 * cell;
    let height = cw + config.rooms_y as f64 * cell;

    let mut places: Vec<Place> = Vec::new();
    let mut trav: Vec<(u32, u32)> = Vec::new();
    let mut next_id: u32 = 0;
    let jittered = |rng: &mut ChaCha8Rng, x: f64, y: f64| -> (f64, f64) {
        let j = config.jitter;
        (x + rng.random_range(-j..=j), y + rng.random_range(-j..=j))
    };

    // Vertical spine along the left edge.
    let spine_x = cw / 2.0;
    let mut spine_ids: Vec<u32> = Vec::new();
    let mut y = cw / 2.0;
    while y <= height - cw / 2.0 + 1e-9 {
        let (px, py) = jittered(&mut rng, spine_x, y);
        places.push(Place { id: next_id, x: px, y: py });
        if let Some(&prev) = spine_ids.last() {
            trav.push((prev, next_id));
        }
        spine_ids.push(next_id);
        next_id += 1;
        y += config.corridor_spacing;
    }

    // One horizontal corridor line per room row, chained and tied to the
    // nearest spine place.
    let mut row_lines: Vec<Vec<u32>> = Vec::new();
    for ry in 0..config.rooms_y {
        let line_y = ry as f64 * cell + cw / 2.0;
        let mut line_ids: Vec<u32> = Vec::new();
        let mut x = cw / 2.0 + config.corridor_spacing;
        while x <= width - cw / 2.0 + 1e-9 {
            let (px, py) = jittered(&mut rng, x, line_y);
            places.push(Place { id: next_id, x: px, y: py });
            if let Some(&prev) = line_ids.last() {
                trav.push((prev, next_id));
            }
            line_ids.push(next_id);
            next_id += 1;
            x += config.corridor_spacing;
        }
        if let Some(&first) = line_ids.first() {
            let fp = places[first as usize];
            let nearest = nearest_place(&places, &spine_ids, fp.x, fp.y);
            trav.push((nearest, first));
        }
        row_lines.push(line_ids);
    }

    // Room interiors: a place grid with 4-neighbour links and a door edge
    // from a bottom-row place to the row corridor. Room layouts vary --
    // grid dimensions are drawn per room and interior places are randomly
    // thinned -- so the place skeleton carries structure that survives
    // object displacement, the way maps built by a real perception
    // pipeline differ from room to room.
    let mut room_rects: Vec<(f64, f64)> = Vec::new();
    let max_side = ((config.room_size / config.room_spacing).floor() as usize).max(1);
    let min_side = max_side.saturating_sub(1).max(1);
    for ry in 0..config.rooms_y {
        for rx in 0..config.rooms_x {
            let ox = cw + rx as f64 * cell;
            let oy = cw + ry as f64 * cell;
            room_rects.push((ox, oy));
            let side_x = rng.random_range(min_side..=max_side);
            let side_y = rng.random_range(min_side..=max_side);
            let step_x = config.room_size / side_x as f64;
            let step_y = config.room_size / side_y as f64;
            let mut grid: Vec<Vec<Option<u32>>> = Vec::new();
            for gy in 0..side_y {
                let mut row: Vec<Option<u32>> = Vec::new();
                for gx in 0..side_x {
                    // Keep the bottom row intact so the door always exists;
                    // thin the rest.
                    let dropped = gy > 0 && rng.random_range(0.0..1.0) < 0.25;
                    if dropped {
                        row.push(None);
                        continue;
                    }
                    let x = ox + (gx as f64 + 0.5) * step_x;
                    let y = oy + (gy as f64 + 0.5) * step_y;
                    let (px, py) = jittered(&mut rng, x, y);
                    places.push(Place { id: next_id, x: px, y: py });
                    if gx > 0 {
                        if let Some(Some(left)) = row.get(gx - 1) {
                            trav.push((*left, next_id));
                        }
                    }
                    if gy > 0 {
                        if let Some(below) = grid[gy - 1][gx] {
                            trav.push((below, next_id));
                        }
                    }
                    row.push(Some(next_id));
                    next_id += 1;
                }
                grid.push(row);
            }
            let door = grid[0][rng.random_range(0..side_x)].expect("bottom row is never thinned");
            let dp = places[door as usize];
            let line = &row_lines[ry];
            if !line.is_empty() {
                let nearest = nearest_place(&places, line, dp.x, dp.y);
                trav.push((nearest, door));
            }
        }
    }

    // Objects: classes apportioned from the profile. Rooms are assigned
    // archetypes (workstation bay, lounge, meeting room, commons), and each
    // object lands in a room weighted by how typical its class is there.
    // Same-archetype rooms end up with near-identical class mixes -- the
    // aliasing a count histogram cannot resolve -- while global class
    // counts stay exactly at the profile apportionment.
    let mut profile = config.profile.clone();
    profile.sort_by_key(|(label, _)| *label);
    let weights: Vec<f64> = profile.iter().map(|(_, w)| *w).collect();
    let counts = if config.n_objects > 0 {
        apportion(&weights, config.n_objects)
    } else {
        vec![0; weights.len()]
    };
    let office = Taxonomy::office();
    let archetypes = archetype_table();
    let room_archetype: Vec<usize> = (0..room_rects.len())
        .map(|_| rng.random_range(0..archetypes.len()))
        .collect();
    let mut objects: Vec<Object> = Vec::new();
    for ((label, _), count) in profile.iter().zip(&counts) {
        let code = office.by_label(*label).map(|c| c.code.clone());
        for _ in 0..*count {
            let room_weights: Vec<f64> = room_archetype
                .iter()
                .map(|&a| match &code {
                    Some(code) => archetypes[a].get(code.as_str()).copied().unwrap_or(1.0) + 0.02,
                    None => 1.0,
                })
                .collect();
            let room = weighted_pick(&mut rng, &room_weights);
            let (ox, oy) = room_rects[room];
            let x = rng.random_range(ox..ox + config.room_size);
            let y = rng.random_range(oy..oy + config.room_size);
            objects.push(Object { id: next_id, x, y, label: *label });
            next_id += 1;
        }
    }

    // Visibility: every object links to all places within range.
    let mut vis: Vec<(u32, u32)> = Vec::new();
    for p in &places {
        for o in &objects {
            let (dx, dy) = (p.x - o.x, p.y - o.y);
            if (dx * dx + dy * dy).sqrt() <= config.visibility_range {
                vis.push((p.id, o.id));
            }
        }
    }

    let taxonomy = taxonomy_for_profile(&profile);
    let scene = SceneGraph::new(taxonomy, places, objects, trav, vis)?;

    // The layout above is connected by construction; stitch anything the
    // jitter may have stranded, then re-validate.
    let components = scene.traversability_components();
    if components.len() > 1 {
        let mut extra = scene.trav_edges().to_vec();
        let main = &components[0];
        for comp in &components[1..] {
            let stray = scene.place(comp[0]).expect("component place");
            let nearest = main
                .iter()
                .map(|&id| {
                    let p = scene.place(id).expect("component place");
                    let d = ((p.x - stray.x).powi(2) + (p.y - stray.y).powi(2)).sqrt();
                    (id, d)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .map(|(id, _)| id)
                .expect("main component non-empty");
            extra.push((nearest, stray.id));
        }
        return SceneGraph::new(
            scene.taxonomy().clone(),
            scene.places().to_vec(),
            scene.objects().to_vec(),
            extra,
            scene.vis_edges().to_vec(),
        );
    }
    Ok(scene)
}

/// Room archetypes as class-code weights. Classes missing from a table get
/// a small floor weight, so every class can appear anywhere occasionally.
fn archetype_table() -> Vec<std::collections::BTreeMap<&'static str, f64>> {
    let mk = |entries: &[(&'static str, f64)]| entries.iter().copied().collect();
    vec![
        // Workstation bay: computers and chairs dominate.
        mk(&[("CP", 12.0), ("CH", 7.0), ("TC", 1.0), ("PL", 0.1), ("PA", 0.1), ("CO", 0.01)]),
        // Lounge: couches, paintings, plants.
        mk(&[("CO", 8.0), ("PA", 4.0), ("PL", 4.0), ("TC", 0.5), ("CH", 0.2), ("CP", 0.01)]),
        // Meeting room: chairs around little else.
        mk(&[("CH", 10.0), ("CP", 1.0), ("PL", 0.8), ("PA", 0.8), ("TC", 0.5), ("CO", 0.1)]),
    ]
}

fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            return i;
        }
        draw -= w;
    }
    weights.len() - 1
}

fn nearest_place(places: &[Place], candidates: &[u32], x: f64, y: f64) -> u32 {
    candidates
        .iter()
        .map(|&id| {
            let p = places[id as usize];
            let d = ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt();
            (id, d)
        })
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
        .expect("non-empty candidate list")
}

fn taxonomy_for_profile(profile: &[(u32, f64)]) -> Taxonomy {
    let office = Taxonomy::office();
    let classes = profile
        .iter()
        .map(|(label, _)| {
            office.by_label(*label).cloned().unwrap_or(super::SemanticClass {
                label: *label,
                name: format!("class_{label}"),
                code: format!("C{label}"),
            })
        })
        .collect();
    Taxonomy::new(classes).expect("profile labels are unique")
}
