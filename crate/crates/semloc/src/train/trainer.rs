//! The optimisation loop: sampled query/positive/negative batches recorded
//! on one tape per step, Adam updates, per-epoch validation, and best
//! checkpoint selection by validation PR-AUC.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::encoder::{forward_on_tape, init_params, EncoderParams, FeatureSource, StagedParams};
use crate::pipeline::{evaluate_matrix, extract_egos, query_list, similarity_learned, QuerySet};
use crate::scene::{DatasetSplit, EgoGraph, SceneGraph};

use super::losses::{contrastive_on_tape, infonce_on_tape, triplet_batchhard_on_tape};
use super::optimizer::{Adam, GradAccum};
use super::{EpochRow, LossKind, TrainConfig, TrainError, TrainReport};

/// Trains the encoder on the split's query variants and returns the
/// checkpoint with the best validation PR-AUC plus the full trajectory.
/// Deterministic for a fixed config and seed.
pub fn train(
    map: &SceneGraph,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TrainReport), TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if split.val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    if split.query_variants.is_empty() {
        return Err(TrainError::Config("split carries no query variants".into()));
    }

    let tax = map.taxonomy();
    let hyper = cfg.hyperparams(tax.len());
    let mut params = init_params(&hyper, cfg.seed);
    let mut adam = Adam::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let map_egos = extract_egos(map, cfg.ego_hops)?;
    let variant_egos: Vec<BTreeMap<u32, EgoGraph>> = split
        .query_variants
        .iter()
        .map(|v| extract_egos(v, cfg.ego_hops))
        .collect::<Result<_, _>>()?;
    let map_ids: Vec<u32> = map_egos.keys().copied().collect();

    let mut queries: Vec<(usize, u32)> = Vec::new();
    for v in 0..variant_egos.len() {
        for &p in &split.train {
            queries.push((v, p));
        }
    }
    let val_queries = query_list(split, QuerySet::Val, variant_egos.len());

    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_pr_auc = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut excluded_anchors = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = queries.clone();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = run_batch(
                map, split, cfg, &map_egos, &variant_egos, &map_ids, batch, &mut params, &mut adam,
                &mut rng,
            )
            .map_err(|e| match e {
                TrainError::Autodiff(AutodiffError::NumericFault { op }) => TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            loss_sum += step.loss * step.terms as f64;
            loss_count += step.terms;
            excluded_anchors += step.excluded;
        }
        let epoch_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 };
        if !epoch_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                batch: 0,
                detail: format!("epoch loss {epoch_loss}"),
            });
        }

        let sim = similarity_learned(map, &map_egos, &variant_egos, &val_queries, &params)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let val = evaluate_matrix(&sim, split)?;
        if val.pr_auc > best_pr_auc {
            best_pr_auc = val.pr_auc;
            best_epoch = epoch;
            best_params = params.clone();
        }
        rows.push(EpochRow { epoch, loss: epoch_loss, val });
    }

    Ok((
        best_params,
        TrainReport { rows, best_epoch, seed: cfg.seed, excluded_anchors },
    ))
}

struct StepOutcome {
    loss: f64,
    terms: usize,
    excluded: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    map: &SceneGraph,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    map_egos: &BTreeMap<u32, EgoGraph>,
    variant_egos: &[BTreeMap<u32, EgoGraph>],
    map_ids: &[u32],
    batch: &[(usize, u32)],
    params: &mut EncoderParams,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome, TrainError> {
    let tax = map.taxonomy();

    // Sample one positive map place per query, then a shared negative pool
    // for the whole batch. Negatives are masked per query against its
    // positive set, so a sampled positive can never act as a negative.
    let mut sampled_pos: Vec<u32> = Vec::with_capacity(batch.len());
    for (_, p) in batch {
        let pos = split
            .positives_of(*p)
            .filter(|s| !s.is_empty())
            .ok_or(TrainError::Config(format!("place {p} has no positives")))?;
        let members: Vec<u32> = pos.iter().copied().collect();
        sampled_pos.push(members[rng.random_range(0..members.len())]);
    }
    let pool: Vec<u32> = map_ids
        .sample(rng, cfg.negatives.min(map_ids.len()))
        .copied()
        .collect();

    let mut to_embed: BTreeSet<u32> = sampled_pos.iter().copied().collect();
    to_embed.extend(pool.iter().copied());

    // One tape for the whole step: shared staged parameters, every graph's
    // forward pass, and the loss on top.
    let mut tape = Tape::new();
    let staged = StagedParams::inputs(&mut tape, params);
    let mut stats_updates = Vec::new();

    let mut query_nodes: Vec<NodeId> = Vec::with_capacity(batch.len());
    for (v, p) in batch {
        let out = forward_on_tape(
            &mut tape,
            &variant_egos[*v][p],
            FeatureSource::Constant,
            params,
            &staged,
            tax,
            true,
        )?;
        stats_updates.push(out.batch_stats);
        query_nodes.push(out.embedding_node);
    }
    let mut map_nodes: BTreeMap<u32, NodeId> = BTreeMap::new();
    for m in &to_embed {
        let out = forward_on_tape(
            &mut tape,
            &map_egos[m],
            FeatureSource::Constant,
            params,
            &staged,
            tax,
            true,
        )?;
        stats_updates.push(out.batch_stats);
        map_nodes.insert(*m, out.embedding_node);
    }

    let mut terms: Vec<NodeId> = Vec::new();
    let mut excluded = 0usize;
    match cfg.loss {
        LossKind::Infonce => {
            for (i, (_, p)) in batch.iter().enumerate() {
                let positives = split.positives_of(*p).expect("checked above");
                // Every embedded map place that is not a positive of this
                // query serves as a negative: the shared pool plus the other
                // queries' sampled positives, all masked per query.
                let negs: Vec<NodeId> = map_nodes
                    .iter()
                    .filter(|(m, _)| !positives.contains(m))
                    .map(|(_, node)| *node)
                    .collect();
                if negs.is_empty() {
                    excluded += 1;
                    continue;
                }
                let pos_node = map_nodes[&sampled_pos[i]];
                terms.push(infonce_on_tape(&mut tape, query_nodes[i], pos_node, &negs, cfg.temperature)?);
            }
        }
        LossKind::Contrastive => {
            for (i, (_, p)) in batch.iter().enumerate() {
                let positives = split.positives_of(*p).expect("checked above");
                let pos_node = map_nodes[&sampled_pos[i]];
                terms.push(contrastive_on_tape(
                    &mut tape,
                    query_nodes[i],
                    pos_node,
                    true,
                    cfg.margin_value(),
                )?);
                let valid: Vec<u32> = pool.iter().filter(|m| !positives.contains(m)).copied().collect();
                if valid.is_empty() {
                    excluded += 1;
                    continue;
                }
                let neg = valid[rng.random_range(0..valid.len())];
                terms.push(contrastive_on_tape(
                    &mut tape,
                    query_nodes[i],
                    map_nodes[&neg],
                    false,
                    cfg.margin_value(),
                )?);
            }
        }
        LossKind::Triplet => {
            let mut anchor_pos: Vec<Vec<NodeId>> = Vec::new();
            let mut anchor_neg: Vec<Vec<NodeId>> = Vec::new();
            for (_, p) in batch {
                let positives = split.positives_of(*p).expect("checked above");
                let mut pos_nodes = Vec::new();
                let mut neg_nodes = Vec::new();
                for (m, node) in &map_nodes {
                    if positives.contains(m) {
                        pos_nodes.push(*node);
                    } else {
                        neg_nodes.push(*node);
                    }
                }
                anchor_pos.push(pos_nodes);
                anchor_neg.push(neg_nodes);
            }
            let (loss, ex) = triplet_batchhard_on_tape(
                &mut tape,
                &query_nodes,
                &anchor_pos,
                &anchor_neg,
                cfg.margin_value(),
            )?;
            excluded += ex;
            let n_anchors = batch.len() - ex;
            // Fold batch-norm updates before the early return below.
            if n_anchors == 0 {
                apply_bn_updates(params, &stats_updates, cfg);
                return Ok(StepOutcome { loss: 0.0, terms: 0, excluded });
            }
            let grads = tape.backward(loss)?;
            let mut acc = GradAccum::new();
            for (name, id) in &staged.nodes {
                if let Some(g) = grads.get(*id) {
                    acc.add(name, g);
                }
            }
            adam.step(params, &acc);
            apply_bn_updates(params, &stats_updates, cfg);
            return Ok(StepOutcome {
                loss: tape.value(loss).item(),
                terms: n_anchors,
                excluded,
            });
        }
    }

    if terms.is_empty() {
        apply_bn_updates(params, &stats_updates, cfg);
        return Ok(StepOutcome { loss: 0.0, terms: 0, excluded });
    }
    let stacked = tape.concat(&terms)?;
    let total = tape.sum(stacked)?;
    let loss = tape.scale(total, 1.0 / terms.len() as f64)?;

    let grads = tape.backward(loss)?;
    let mut acc = GradAccum::new();
    for (name, id) in &staged.nodes {
        if let Some(g) = grads.get(*id) {
            acc.add(name, g);
        }
    }
    adam.step(params, &acc);
    apply_bn_updates(params, &stats_updates, cfg);

    Ok(StepOutcome {
        loss: tape.value(loss).item(),
        terms: terms.len(),
        excluded,
    })
}

/// Folds the batch statistics collected during the step into the running
/// estimates, in the deterministic order the graphs were embedded.
fn apply_bn_updates(
    params: &mut EncoderParams,
    updates: &[Vec<crate::autodiff::BatchNormStats>],
    cfg: &TrainConfig,
) {
    let momentum = params.hyper.bn_momentum;
    let _ = cfg;
    for per_graph in updates {
        for (layer, stats) in per_graph.iter().enumerate() {
            params.mpnn[layer].bn_stats.update(stats, momentum);
        }
    }
}

/// One architecture variant of the design-choice grid.
#[derive(Debug, Clone, Serialize)]
pub struct GridVariant {
    pub name: String,
    pub mpnn_layers: usize,
    pub hidden_dim: usize,
    pub attention_heads: usize,
}

impl GridVariant {
    pub fn new(name: &str, layers: usize, hidden: usize, heads: usize) -> Self {
        Self {
            name: name.to_string(),
            mpnn_layers: layers,
            hidden_dim: hidden,
            attention_heads: heads,
        }
    }
}

/// The design-choice grid: layer count, hidden width, head count, and the
/// GAT-free variants, around the reference 2-layer/64/3-head model.
pub fn default_grid() -> Vec<GridVariant> {
    vec![
        GridVariant::new("layers_1", 1, 64, 3),
        GridVariant::new("layers_3", 3, 64, 3),
        GridVariant::new("hidden_32", 2, 32, 3),
        GridVariant::new("hidden_128", 2, 128, 3),
        GridVariant::new("heads_1", 2, 64, 1),
        GridVariant::new("heads_2", 2, 64, 2),
        GridVariant::new("no_gat_2_layers", 2, 64, 0),
        GridVariant::new("no_gat_3_layers", 3, 64, 0),
        GridVariant::new("ours", 2, 64, 3),
    ]
}

/// Mean and std of best-validation metrics per variant over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub variant: String,
    pub mpnn_layers: usize,
    pub hidden_dim: usize,
    pub attention_heads: usize,
    pub seeds: usize,
    pub pr_auc_mean: f64,
    pub pr_auc_std: f64,
    pub recall_at_1_mean: f64,
    pub recall_at_1_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every grid variant over the given seeds and aggregates the best
/// validation PR-AUC and Recall@1 per variant.
pub fn run_ablation_grid(
    map: &SceneGraph,
    split: &DatasetSplit,
    base: &TrainConfig,
    grid: &[GridVariant],
    seeds: &[u64],
) -> Result<Vec<GridRow>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Config("empty ablation grid".into()));
    }
    if seeds.is_empty() {
        return Err(TrainError::Config("no seeds for the ablation grid".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for variant in grid {
        let mut pr = Vec::with_capacity(seeds.len());
        let mut r1 = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.mpnn_layers = variant.mpnn_layers;
            cfg.hidden_dim = variant.hidden_dim;
            cfg.attention_heads = variant.attention_heads;
            cfg.seed = seed;
            let (_, report) = train(map, split, &cfg)?;
            pr.push(report.best().val.pr_auc);
            r1.push(report.best().val.recall_at_1);
        }
        let (pm, ps) = mean_std(&pr);
        let (rm, rs) = mean_std(&r1);
        rows.push(GridRow {
            variant: variant.name.clone(),
            mpnn_layers: variant.mpnn_layers,
            hidden_dim: variant.hidden_dim,
            attention_heads: variant.attention_heads,
            seeds: seeds.len(),
            pr_auc_mean: pm,
            pr_auc_std: ps,
            recall_at_1_mean: rm,
            recall_at_1_std: rs,
        });
    }
    Ok(rows)
}

/// Stable CSV schema for the grid table.
pub fn write_grid_csv<W: std::io::Write>(rows: &[GridRow], w: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "variant", "mpnn_layers", "hidden_dim", "attention_heads", "seeds", "pr_auc_mean",
        "pr_auc_std", "recall_at_1_mean", "recall_at_1_std",
    ])?;
    for r in rows {
        wtr.write_record([
            r.variant.clone(),
            r.mpnn_layers.to_string(),
            r.hidden_dim.to_string(),
            r.attention_heads.to_string(),
            r.seeds.to_string(),
            r.pr_auc_mean.to_string(),
            r.pr_auc_std.to_string(),
            r.recall_at_1_mean.to_string(),
            r.recall_at_1_std.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        generate_synthetic, query_variant, split_dataset, MobilityProfile, SplitRatios,
        SyntheticConfig,
    };

    fn tiny_setup() -> (SceneGraph, DatasetSplit) {
        let mut gen = SyntheticConfig::office(0);
        gen.rooms_x = 2;
        gen.rooms_y = 1;
        gen.n_objects = 20;
        let map = generate_synthetic(&gen).unwrap();
        let profile = MobilityProfile::office();
        let variants = vec![
            query_variant(&map, &profile, gen.visibility_range, 100).unwrap(),
            query_variant(&map, &profile, gen.visibility_range, 101).unwrap(),
        ];
        let split = split_dataset(&map, variants, SplitRatios::standard(), 4.0, 0).unwrap();
        (map, split)
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.negatives = 7;
        cfg.hidden_dim = 8;
        cfg.attention_heads = 2;
        cfg
    }

    #[test]
    fn train_is_deterministic() {
        let (map, split) = tiny_setup();
        let cfg = tiny_cfg();
        let (pa, ra) = train(&map, &split, &cfg).unwrap();
        let (pb, rb) = train(&map, &split, &cfg).unwrap();
        assert_eq!(pa, pb);
        let la: Vec<f64> = ra.rows.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = rb.rows.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb, "loss trajectories must be identical");
    }

    #[test]
    fn one_epoch_run_has_one_row() {
        let (map, split) = tiny_setup();
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        let (_, report) = train(&map, &split, &cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn all_losses_run() {
        let (map, split) = tiny_setup();
        for loss in [LossKind::Contrastive, LossKind::Triplet, LossKind::Infonce] {
            let mut cfg = tiny_cfg();
            cfg.epochs = 1;
            cfg.loss = loss;
            let (_, report) = train(&map, &split, &cfg).unwrap();
            assert!(report.rows[0].loss.is_finite(), "{loss} loss must be finite");
        }
    }

    #[test]
    fn grid_row_aggregates_two_seeds() {
        let (map, split) = tiny_setup();
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        let grid = vec![GridVariant::new("no_gat_2_layers", 2, 8, 0)];
        let rows = run_ablation_grid(&map, &split, &cfg, &grid, &[0, 1]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].seeds, 2);
        assert!(rows[0].pr_auc_std >= 0.0);
    }

    #[test]
    fn empty_split_rejected() {
        let (map, mut split) = tiny_setup();
        split.train.clear();
        assert!(matches!(
            train(&map, &split, &tiny_cfg()),
            Err(TrainError::EmptySplit("train"))
        ));
    }

    /// One optimiser step on a single pair must reduce that pair's loss.
    #[test]
    fn single_pair_descent() {
        use crate::encoder::{EncoderHyperparams, StagedParams};

        let (map, split) = tiny_setup();
        let tax = map.taxonomy().clone();
        let hyper = EncoderHyperparams {
            hidden_dim: 8,
            attention_heads: 2,
            ..EncoderHyperparams::standard(tax.len())
        };
        let map_egos = extract_egos(&map, 2).unwrap();
        let var_egos = extract_egos(&split.query_variants[0], 2).unwrap();
        let ids: Vec<u32> = map_egos.keys().copied().collect();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut improved = 0;
        for trial in 0..20 {
            let mut params = init_params(&hyper, trial);
            let q = ids[rng.random_range(0..ids.len())];
            let pos = *split.positives_of(q).unwrap().iter().next().unwrap();
            let neg = loop {
                let cand = ids[rng.random_range(0..ids.len())];
                if !split.positives_of(q).unwrap().contains(&cand) {
                    break cand;
                }
            };

            let eval_loss = |params: &EncoderParams| -> f64 {
                let mut tape = Tape::new();
                let staged = StagedParams::constants(&mut tape, params);
                let zq = forward_on_tape(&mut tape, &var_egos[&q], FeatureSource::Constant, params, &staged, &tax, true)
                    .unwrap()
                    .embedding_node;
                let zp = forward_on_tape(&mut tape, &map_egos[&pos], FeatureSource::Constant, params, &staged, &tax, true)
                    .unwrap()
                    .embedding_node;
                let zn = forward_on_tape(&mut tape, &map_egos[&neg], FeatureSource::Constant, params, &staged, &tax, true)
                    .unwrap()
                    .embedding_node;
                let l = infonce_on_tape(&mut tape, zq, zp, &[zn], 0.7).unwrap();
                tape.value(l).item()
            };

            let before = eval_loss(&params);
            let mut tape = Tape::new();
            let staged = StagedParams::inputs(&mut tape, &params);
            let zq = forward_on_tape(&mut tape, &var_egos[&q], FeatureSource::Constant, &params, &staged, &tax, true)
                .unwrap()
                .embedding_node;
            let zp = forward_on_tape(&mut tape, &map_egos[&pos], FeatureSource::Constant, &params, &staged, &tax, true)
                .unwrap()
                .embedding_node;
            let zn = forward_on_tape(&mut tape, &map_egos[&neg], FeatureSource::Constant, &params, &staged, &tax, true)
                .unwrap()
                .embedding_node;
            let l = infonce_on_tape(&mut tape, zq, zp, &[zn], 0.7).unwrap();
            let grads = tape.backward(l).unwrap();
            let mut acc = GradAccum::new();
            for (name, id) in &staged.nodes {
                if let Some(g) = grads.get(*id) {
                    acc.add(name, g);
                }
            }
            let mut adam = Adam::new(crate::train::AdamConfig {
                learning_rate: 1e-3,
                ..Default::default()
            });
            adam.step(&mut params, &acc);
            let after = eval_loss(&params);
            if after < before {
                improved += 1;
            }
        }
        assert!(improved >= 19, "descent failed on {} of 20 pairs", 20 - improved);
    }

    #[test]
    fn negative_sampling_never_draws_positive() {
        // The pool is masked against each query's positive set inside
        // run_batch; verify through an InfoNCE run on a seeded setup by
        // checking the invariant the masking enforces.
        let (map, split) = tiny_setup();
        let ids: Vec<u32> = map.places().iter().map(|p| p.id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q = ids[rand::RngExt::random_range(&mut rng, 0..ids.len())];
            let positives = split.positives_of(q).unwrap();
            let pool: Vec<u32> = ids
                .sample(&mut rng, 8)
                .copied()
                .collect();
            let negs: Vec<u32> = pool.iter().filter(|m| !positives.contains(m)).copied().collect();
            for n in &negs {
                let d = {
                    let a = map.place(q).unwrap();
                    let b = map.place(*n).unwrap();
                    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
                };
                assert!(d > split.radius, "negative {n} is within the matching radius of {q}");
            }
        }
    }
}
