//! The place-graph encoder: class-only node features, a linear projection
//! with ELU, message-passing layers with per-edge-type weights (sum
//! aggregation, tanh, batch norm), a multi-head GATv2 block, and a final
//! linear map to unit-norm embeddings.
//!
//! Geometry never enters the features: object nodes carry only their
//! semantic class and place nodes a shared "place" slot, so the model must
//! localise from semantics and graph structure alone.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward_on_tape, FeatureSource, ForwardOutput, StagedParams};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchNormStats, Tape, Tensor};
use crate::scene::{EgoGraph, Taxonomy};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot embed an empty graph")]
    EmptyGraph,
    #[error("object label {0} is not in the taxonomy")]
    UnknownClass(u32),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint error at {path}: {detail}")]
    Checkpoint { path: String, detail: String },
}

/// Architecture hyperparameters. `attention_heads == 0` drops the GAT
/// block entirely (the "No GAT" ablation variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderHyperparams {
    pub n_classes: usize,
    pub hidden_dim: usize,
    pub mpnn_layers: usize,
    pub attention_heads: usize,
    pub embedding_dim: usize,
    pub leaky_slope: f64,
    pub elu_alpha: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl EncoderHyperparams {
    /// The reference architecture: 64-d hidden states, two message-passing
    /// layers, three attention heads, 32-d embeddings.
    pub fn standard(n_classes: usize) -> Self {
        Self {
            n_classes,
            hidden_dim: 64,
            mpnn_layers: 2,
            attention_heads: 3,
            embedding_dim: 32,
            leaky_slope: 0.2,
            elu_alpha: 1.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.n_classes + 1
    }

    /// Width of the state entering the output linear layer: concatenated
    /// heads, or the hidden state itself when the GAT block is absent.
    pub fn readout_dim(&self) -> usize {
        if self.attention_heads == 0 {
            self.hidden_dim
        } else {
            self.attention_heads * self.hidden_dim
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpnnLayerParams {
    pub w_self: Tensor,
    pub w_trav: Tensor,
    pub w_vis: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_stats: BatchNormStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatHeadParams {
    pub w_src: Tensor,
    pub w_dst: Tensor,
    /// Attention vector, shape `[hidden, 1]`.
    pub att: Tensor,
}

/// All learnable weights plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub hyper: EncoderHyperparams,
    pub input_proj: Tensor,
    pub mpnn: Vec<MpnnLayerParams>,
    pub gat_heads: Vec<GatHeadParams>,
    pub output: Tensor,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_vec(vec![rows, cols], values).expect("shape/values consistent")
}

/// Deterministic Glorot-uniform initialisation; batch-norm scale 1, shift 0.
pub fn init_params(hyper: &EncoderHyperparams, seed: u64) -> EncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = hyper.hidden_dim;
    let input_proj = glorot(&mut rng, hyper.feature_dim(), h);
    let mpnn = (0..hyper.mpnn_layers)
        .map(|_| MpnnLayerParams {
            w_self: glorot(&mut rng, h, h),
            w_trav: glorot(&mut rng, h, h),
            w_vis: glorot(&mut rng, h, h),
            bn_gamma: Tensor::vector(vec![1.0; h]),
            bn_beta: Tensor::vector(vec![0.0; h]),
            bn_stats: BatchNormStats::identity(h),
        })
        .collect();
    let gat_heads = (0..hyper.attention_heads)
        .map(|_| GatHeadParams {
            w_src: glorot(&mut rng, h, h),
            w_dst: glorot(&mut rng, h, h),
            att: glorot(&mut rng, h, 1),
        })
        .collect();
    let output = glorot(&mut rng, hyper.readout_dim(), hyper.embedding_dim);
    EncoderParams { hyper: hyper.clone(), input_proj, mpnn, gat_heads, output }
}

impl EncoderParams {
    /// Trainable tensors in a fixed order, keyed by stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("input_proj".to_string(), &self.input_proj)];
        for (i, layer) in self.mpnn.iter().enumerate() {
            out.push((format!("mpnn.{i}.w_self"), &layer.w_self));
            out.push((format!("mpnn.{i}.w_trav"), &layer.w_trav));
            out.push((format!("mpnn.{i}.w_vis"), &layer.w_vis));
            out.push((format!("mpnn.{i}.bn_gamma"), &layer.bn_gamma));
            out.push((format!("mpnn.{i}.bn_beta"), &layer.bn_beta));
        }
        for (i, head) in self.gat_heads.iter().enumerate() {
            out.push((format!("gat.{i}.w_src"), &head.w_src));
            out.push((format!("gat.{i}.w_dst"), &head.w_dst));
            out.push((format!("gat.{i}.att"), &head.att));
        }
        out.push(("output".to_string(), &self.output));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("input_proj".to_string(), &mut self.input_proj)];
        for (i, layer) in self.mpnn.iter_mut().enumerate() {
            out.push((format!("mpnn.{i}.w_self"), &mut layer.w_self));
            out.push((format!("mpnn.{i}.w_trav"), &mut layer.w_trav));
            out.push((format!("mpnn.{i}.w_vis"), &mut layer.w_vis));
            out.push((format!("mpnn.{i}.bn_gamma"), &mut layer.bn_gamma));
            out.push((format!("mpnn.{i}.bn_beta"), &mut layer.bn_beta));
        }
        for (i, head) in self.gat_heads.iter_mut().enumerate() {
            out.push((format!("gat.{i}.w_src"), &mut head.w_src));
            out.push((format!("gat.{i}.w_dst"), &mut head.w_dst));
            out.push((format!("gat.{i}.att"), &mut head.att));
        }
        out.push(("output".to_string(), &mut self.output));
        out
    }
}

/// A unit-norm place descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Scalar product; cosine similarity for unit-norm embeddings.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn euclidean(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-head GATv2 attention coefficients over directed edges
/// (local source index, local target index, coefficient). Within each
/// head, coefficients into any target node sum to 1.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub heads: Vec<Vec<(usize, usize, f64)>>,
}

/// One-hot node features: objects over class columns, places on the extra
/// final slot. No geometric coordinates appear anywhere.
pub fn node_features(g: &EgoGraph, taxonomy: &Taxonomy) -> Result<Tensor, EncoderError> {
    let width = taxonomy.len() + 1;
    let n = g.node_count();
    let mut feats = Tensor::zeros(vec![n, width]);
    for i in 0..g.places.len() {
        feats.row_mut(i)[width - 1] = 1.0;
    }
    for (j, &label) in g.object_labels.iter().enumerate() {
        let col = taxonomy.index_of(label).ok_or(EncoderError::UnknownClass(label))?;
        feats.row_mut(g.places.len() + j)[col] = 1.0;
    }
    Ok(feats)
}

/// Inference-mode embedding of an ego graph, with the attention record.
pub fn embed(g: &EgoGraph, params: &EncoderParams, taxonomy: &Taxonomy) -> Result<(Embedding, AttentionRecord), EncoderError> {
    let mut tape = Tape::new();
    let staged = StagedParams::constants(&mut tape, params);
    let out = forward_on_tape(&mut tape, g, FeatureSource::Constant, params, &staged, taxonomy, false)?;
    let emb = Embedding(tape.value(out.embedding_node).values().to_vec());
    Ok((emb, out.attention))
}

/// Bag-of-words baseline: the l2-normalised per-class object histogram of
/// the ego graph. Object-free graphs map to the zero vector. Two graphs
/// with identical histograms collide regardless of layout — the aliasing
/// failure the learned encoder exists to avoid.
pub fn bow_embed(g: &EgoGraph, taxonomy: &Taxonomy) -> Vec<f64> {
    let mut counts = vec![0.0; taxonomy.len()];
    for &label in &g.object_labels {
        if let Some(i) = taxonomy.index_of(label) {
            counts[i] += 1.0;
        }
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm > 0.0 {
        for c in counts.iter_mut() {
            *c /= norm;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic, Object, Place, SceneGraph, SyntheticConfig};

    fn small_scene() -> SceneGraph {
        generate_synthetic(&SyntheticConfig::office(1)).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let hyper = EncoderHyperparams::standard(6);
        let a = init_params(&hyper, 5);
        let b = init_params(&hyper, 5);
        let c = init_params(&hyper, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes_match_contract() {
        let hyper = EncoderHyperparams::standard(6);
        let p = init_params(&hyper, 0);
        assert_eq!(p.input_proj.shape(), &[7, 64]);
        assert_eq!(p.mpnn.len(), 2);
        for layer in &p.mpnn {
            assert_eq!(layer.w_self.shape(), &[64, 64]);
            assert_eq!(layer.w_trav.shape(), &[64, 64]);
            assert_eq!(layer.w_vis.shape(), &[64, 64]);
            assert_eq!(layer.bn_gamma.values(), vec![1.0; 64].as_slice());
        }
        assert_eq!(p.gat_heads.len(), 3);
        for head in &p.gat_heads {
            assert_eq!(head.w_src.shape(), &[64, 64]);
            assert_eq!(head.att.shape(), &[64, 1]);
        }
        assert_eq!(p.output.shape(), &[192, 32]);
    }

    #[test]
    fn features_are_one_hot() {
        let scene = small_scene();
        let tax = scene.taxonomy().clone();
        assert_eq!(tax.len(), 6);
        let ego = scene.ego_graph(scene.places()[0].id, 2).unwrap();
        let feats = node_features(&ego, &tax).unwrap();
        assert_eq!(feats.cols(), 7);
        for i in 0..ego.places.len() {
            let row = feats.row(i);
            assert_eq!(row[6], 1.0);
            assert_eq!(row[..6].iter().sum::<f64>(), 0.0);
        }
        for (j, &label) in ego.object_labels.iter().enumerate() {
            let row = feats.row(ego.places.len() + j);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row[tax.index_of(label).unwrap()], 1.0);
            assert_eq!(row[6], 0.0);
        }
    }

    #[test]
    fn embedding_is_unit_norm_32d() {
        let scene = small_scene();
        let params = init_params(&EncoderHyperparams::standard(6), 0);
        let ego = scene.ego_graph(scene.places()[10].id, 2).unwrap();
        let (emb, _) = embed(&ego, &params, scene.taxonomy()).unwrap();
        assert_eq!(emb.dim(), 32);
        let norm: f64 = emb.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embed_is_deterministic() {
        let scene = small_scene();
        let params = init_params(&EncoderHyperparams::standard(6), 0);
        let ego = scene.ego_graph(scene.places()[4].id, 2).unwrap();
        let (a, _) = embed(&ego, &params, scene.taxonomy()).unwrap();
        let (b, _) = embed(&ego, &params, scene.taxonomy()).unwrap();
        assert_eq!(a, b, "inference must be bit-identical");
    }

    #[test]
    fn attention_sums_to_one_per_target() {
        let scene = small_scene();
        let params = init_params(&EncoderHyperparams::standard(6), 3);
        let ego = scene.ego_graph(scene.places()[20].id, 2).unwrap();
        let (_, att) = embed(&ego, &params, scene.taxonomy()).unwrap();
        assert_eq!(att.heads.len(), 3);
        for head in &att.heads {
            let mut sums = vec![0.0; ego.node_count()];
            for &(_, dst, a) in head {
                assert!(a >= 0.0);
                sums[dst] += a;
            }
            for s in sums {
                assert!((s - 1.0).abs() < 1e-9, "attention into a node must sum to 1, got {s}");
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        // Relabel every node id in the parent scene; the centre embedding
        // must be unchanged within float-reassociation noise.
        let scene = small_scene();
        let params = init_params(&EncoderHyperparams::standard(6), 2);
        let tax = scene.taxonomy().clone();

        let remap = |id: u32| 10_000u32.wrapping_sub(id);
        let places: Vec<Place> = scene
            .places()
            .iter()
            .map(|p| Place { id: remap(p.id), ..*p })
            .collect();
        let objects: Vec<Object> = scene
            .objects()
            .iter()
            .map(|o| Object { id: remap(o.id), ..*o })
            .collect();
        let trav = scene.trav_edges().iter().map(|&(a, b)| (remap(a), remap(b))).collect();
        let vis = scene.vis_edges().iter().map(|&(p, o)| (remap(p), remap(o))).collect();
        let permuted = SceneGraph::new(tax.clone(), places, objects, trav, vis).unwrap();

        for &idx in &[0usize, 17, 60] {
            let centre = scene.places()[idx].id;
            let ego_a = scene.ego_graph(centre, 2).unwrap();
            let ego_b = permuted.ego_graph(remap(centre), 2).unwrap();
            let (ea, _) = embed(&ego_a, &params, &tax).unwrap();
            let (eb, _) = embed(&ego_b, &params, &tax).unwrap();
            let max_diff = ea
                .as_slice()
                .iter()
                .zip(eb.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-12, "permutation changed embedding by {max_diff}");
        }
    }

    #[test]
    fn locality_remote_nodes_cannot_leak() {
        let scene = small_scene();
        let params = init_params(&EncoderHyperparams::standard(6), 0);
        let tax = scene.taxonomy().clone();
        let centre = scene.places()[0].id;
        let ego_before = scene.ego_graph(centre, 2).unwrap();

        // Add a far-away place with an object, connected far from the centre.
        let mut places = scene.places().to_vec();
        let mut objects = scene.objects().to_vec();
        let mut trav = scene.trav_edges().to_vec();
        let mut vis = scene.vis_edges().to_vec();
        let far_place = 90_000u32;
        let far_obj = 90_001u32;
        places.push(Place { id: far_place, x: 500.0, y: 500.0 });
        objects.push(Object { id: far_obj, x: 500.0, y: 500.0, label: 8 });
        // Attach the new place at least 3 hops from the centre.
        let ego3 = scene.ego_graph(centre, 3).unwrap();
        let outside = scene
            .places()
            .iter()
            .find(|p| !ego3.places.contains(&p.id))
            .expect("scene has places beyond 3 hops");
        trav.push((outside.id, far_place));
        vis.push((far_place, far_obj));
        let extended = SceneGraph::new(tax.clone(), places, objects, trav, vis).unwrap();

        let ego_after = extended.ego_graph(centre, 2).unwrap();
        assert_eq!(ego_before, ego_after);
        let (ea, _) = embed(&ego_before, &params, &tax).unwrap();
        let (eb, _) = embed(&ego_after, &params, &tax).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn bow_counts_and_aliasing() {
        let tax = Taxonomy::office();
        let scene = SceneGraph::new(
            tax.clone(),
            vec![Place { id: 0, x: 0.0, y: 0.0 }],
            vec![
                Object { id: 1, x: 0.1, y: 0.0, label: 5 },
                Object { id: 2, x: 0.2, y: 0.0, label: 5 },
                Object { id: 3, x: 0.3, y: 0.0, label: 8 },
            ],
            vec![],
            vec![(0, 1), (0, 2), (0, 3)],
        )
        .unwrap();
        let ego = scene.ego_graph(0, 0).unwrap();
        let bow = bow_embed(&ego, &tax);
        let norm = (4.0f64 + 1.0).sqrt();
        assert_eq!(bow, vec![2.0 / norm, 1.0 / norm, 0.0, 0.0, 0.0, 0.0]);

        // Same histogram, different layout: identical BoW vectors.
        let scene2 = SceneGraph::new(
            tax.clone(),
            vec![Place { id: 0, x: 9.0, y: 9.0 }],
            vec![
                Object { id: 1, x: 9.5, y: 9.0, label: 8 },
                Object { id: 2, x: 9.0, y: 9.5, label: 5 },
                Object { id: 3, x: 8.5, y: 9.0, label: 5 },
            ],
            vec![],
            vec![(0, 1), (0, 2), (0, 3)],
        )
        .unwrap();
        let bow2 = bow_embed(&scene2.ego_graph(0, 0).unwrap(), &tax);
        assert_eq!(bow, bow2);
    }

    /// Dot of two embeddings differentiated against every parameter tensor,
    /// verified by central differences on a 6-node graph.
    #[test]
    fn full_gradient_flow_matches_finite_differences() {
        use crate::autodiff::Tape;

        let tax = Taxonomy::office();
        let scene = SceneGraph::new(
            tax.clone(),
            vec![
                Place { id: 0, x: 0.0, y: 0.0 },
                Place { id: 1, x: 1.0, y: 0.0 },
                Place { id: 2, x: 2.0, y: 0.0 },
            ],
            vec![
                Object { id: 3, x: 0.5, y: 0.5, label: 5 },
                Object { id: 4, x: 1.5, y: 0.5, label: 10 },
                Object { id: 5, x: 2.5, y: 0.5, label: 18 },
            ],
            vec![(0, 1), (1, 2)],
            vec![(0, 3), (1, 3), (1, 4), (2, 4), (2, 5)],
        )
        .unwrap();
        let p_graph = scene.ego_graph(0, 2).unwrap();
        let q_graph = scene.ego_graph(2, 2).unwrap();
        assert_eq!(p_graph.node_count(), 6);

        let hyper = EncoderHyperparams {
            n_classes: 6,
            hidden_dim: 6,
            mpnn_layers: 2,
            attention_heads: 2,
            embedding_dim: 4,
            ..EncoderHyperparams::standard(6)
        };
        let params = init_params(&hyper, 1);

        let value = |params: &EncoderParams| -> f64 {
            let mut tape = Tape::new();
            let staged = StagedParams::constants(&mut tape, params);
            let op = forward_on_tape(&mut tape, &p_graph, FeatureSource::Constant, params, &staged, &tax, true).unwrap();
            let oq = forward_on_tape(&mut tape, &q_graph, FeatureSource::Constant, params, &staged, &tax, true).unwrap();
            let d = tape.dot(op.embedding_node, oq.embedding_node).unwrap();
            tape.value(d).item()
        };

        // Analytic gradients for every parameter tensor in one pass.
        let mut tape = Tape::new();
        let staged = StagedParams::inputs(&mut tape, &params);
        let op = forward_on_tape(&mut tape, &p_graph, FeatureSource::Constant, &params, &staged, &tax, true).unwrap();
        let oq = forward_on_tape(&mut tape, &q_graph, FeatureSource::Constant, &params, &staged, &tax, true).unwrap();
        let d = tape.dot(op.embedding_node, oq.embedding_node).unwrap();
        let grads = tape.backward(d).unwrap();

        let h = 1e-5;
        let mut worst = 0.0f64;
        for (name, id) in &staged.nodes {
            let analytic = grads.wrt(*id).unwrap().clone();
            let len = analytic.len();
            for i in 0..len {
                let mut plus = params.clone();
                let mut minus = params.clone();
                for (n, t) in plus.named_tensors_mut() {
                    if &n == name {
                        t.values_mut()[i] += h;
                    }
                }
                for (n, t) in minus.named_tensors_mut() {
                    if &n == name {
                        t.values_mut()[i] -= h;
                    }
                }
                let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
                let a = analytic.values()[i];
                let err = (a - numeric).abs() / a.abs().max(1.0);
                assert!(err < 1e-4, "{name}[{i}]: analytic {a}, numeric {numeric}, err {err}");
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn bow_of_object_free_graph_is_zero() {
        let tax = Taxonomy::office();
        let scene = SceneGraph::new(
            tax.clone(),
            vec![Place { id: 0, x: 0.0, y: 0.0 }],
            vec![],
            vec![],
            vec![],
        )
        .unwrap();
        let bow = bow_embed(&scene.ego_graph(0, 0).unwrap(), &tax);
        assert_eq!(bow, vec![0.0; 6]);
    }
}
