//! Encoder forward pass recorded on an autodiff tape.
//!
//! Pipeline: project + ELU, then per message-passing layer
//! `h <- batchnorm(tanh(W_self h + sum_trav W_t h_j + sum_vis W_v h_j))`,
//! then the GATv2 block (per-head scores
//! `e_ij = a^T LeakyReLU(W_s h_j + W_t h_i)`, softmax over in-neighbours,
//! heads concatenated), a linear map to the embedding dimension read at the
//! centre place node, and l2 normalisation.

use std::rc::Rc;

use crate::autodiff::{BatchNormStats, NodeId, Tape};
use crate::scene::{EgoGraph, Taxonomy};

use super::{node_features, AttentionRecord, EncoderError, EncoderParams};

/// Parameter tensors materialised as tape nodes, in `named_tensors` order.
pub struct StagedParams {
    pub nodes: Vec<(String, NodeId)>,
    trainable: bool,
}

impl StagedParams {
    /// Stage parameters as differentiable inputs (training, gradcheck).
    pub fn inputs(tape: &mut Tape, params: &EncoderParams) -> Self {
        let nodes = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, tape.input(t.clone())))
            .collect();
        Self { nodes, trainable: true }
    }

    /// Stage parameters as constants (inference, feature attribution).
    pub fn constants(tape: &mut Tape, params: &EncoderParams) -> Self {
        let nodes = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, tape.constant(t.clone())))
            .collect();
        Self { nodes, trainable: false }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn get(&self, name: &str) -> NodeId {
        self.nodes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("staged parameter {name} missing"))
    }
}

/// Where the node feature matrix comes from.
pub enum FeatureSource {
    /// Built from the graph, recorded as a constant.
    Constant,
    /// Built from the graph, recorded as a differentiable input
    /// (gradient-based attribution).
    Input,
    /// Already on the tape (e.g. an interpolated tensor for integrated
    /// gradients). Shape must be `[n_nodes, n_classes + 1]`.
    Node(NodeId),
}

pub struct ForwardOutput {
    pub embedding_node: NodeId,
    /// The features leaf, when one was created on this tape.
    pub feature_node: Option<NodeId>,
    pub attention: AttentionRecord,
    /// Fresh batch statistics per message-passing layer, training mode only.
    pub batch_stats: Vec<BatchNormStats>,
}

/// Records the full encoder forward pass for one ego graph.
pub fn forward_on_tape(
    tape: &mut Tape,
    g: &EgoGraph,
    features: FeatureSource,
    params: &EncoderParams,
    staged: &StagedParams,
    taxonomy: &Taxonomy,
    training: bool,
) -> Result<ForwardOutput, EncoderError> {
    if g.places.is_empty() {
        return Err(EncoderError::EmptyGraph);
    }
    let n = g.node_count();
    let hyper = &params.hyper;

    let (feat_id, feature_node) = match features {
        FeatureSource::Constant => {
            let f = node_features(g, taxonomy)?;
            (tape.constant(f), None)
        }
        FeatureSource::Input => {
            let f = node_features(g, taxonomy)?;
            let id = tape.input(f);
            (id, Some(id))
        }
        FeatureSource::Node(id) => (id, Some(id)),
    };

    // Directed edge lists. Message passing treats each undirected edge as
    // two directed edges; the GAT block additionally gets self-loops so
    // every node has a non-empty in-neighbourhood to soft-max over.
    let n_places = g.places.len();
    let mut trav_src = Vec::with_capacity(g.trav_edges.len() * 2);
    let mut trav_dst = Vec::with_capacity(g.trav_edges.len() * 2);
    for &(a, b) in &g.trav_edges {
        trav_src.push(a);
        trav_dst.push(b);
        trav_src.push(b);
        trav_dst.push(a);
    }
    let mut vis_src = Vec::with_capacity(g.vis_edges.len() * 2);
    let mut vis_dst = Vec::with_capacity(g.vis_edges.len() * 2);
    for &(p, o) in &g.vis_edges {
        let o_row = n_places + o;
        vis_src.push(p);
        vis_dst.push(o_row);
        vis_src.push(o_row);
        vis_dst.push(p);
    }
    let trav_src = Rc::new(trav_src);
    let trav_dst = Rc::new(trav_dst);
    let vis_src = Rc::new(vis_src);
    let vis_dst = Rc::new(vis_dst);

    // Input projection + ELU.
    let proj = tape.matmul(feat_id, staged.get("input_proj"))?;
    let mut h = tape.elu(proj, hyper.elu_alpha)?;

    // Message-passing layers with per-edge-type weights.
    let mut batch_stats = Vec::new();
    for layer in 0..hyper.mpnn_layers {
        let w_self = staged.get(&format!("mpnn.{layer}.w_self"));
        let w_trav = staged.get(&format!("mpnn.{layer}.w_trav"));
        let w_vis = staged.get(&format!("mpnn.{layer}.w_vis"));
        let gamma = staged.get(&format!("mpnn.{layer}.bn_gamma"));
        let beta = staged.get(&format!("mpnn.{layer}.bn_beta"));

        let self_term = tape.matmul(h, w_self)?;
        let mut pre = self_term;
        if !trav_src.is_empty() {
            let transformed = tape.matmul(h, w_trav)?;
            let gathered = tape.gather_rows(transformed, trav_src.clone())?;
            let agg = tape.sum_segments(gathered, trav_dst.clone(), n)?;
            pre = tape.add(pre, agg)?;
        }
        if !vis_src.is_empty() {
            let transformed = tape.matmul(h, w_vis)?;
            let gathered = tape.gather_rows(transformed, vis_src.clone())?;
            let agg = tape.sum_segments(gathered, vis_dst.clone(), n)?;
            pre = tape.add(pre, agg)?;
        }
        let act = tape.tanh(pre)?;
        let (bn, stats) = tape.batch_norm(
            act,
            gamma,
            beta,
            &params.mpnn[layer].bn_stats,
            training,
            hyper.bn_eps,
        )?;
        if let Some(stats) = stats {
            batch_stats.push(stats);
        }
        h = bn;
    }

    // GATv2 block over the union of both edge types plus self-loops.
    let mut attention = AttentionRecord::default();
    let readout = if hyper.attention_heads > 0 {
        let mut gat_src: Vec<usize> = Vec::new();
        let mut gat_dst: Vec<usize> = Vec::new();
        gat_src.extend(trav_src.iter());
        gat_dst.extend(trav_dst.iter());
        gat_src.extend(vis_src.iter());
        gat_dst.extend(vis_dst.iter());
        for i in 0..n {
            gat_src.push(i);
            gat_dst.push(i);
        }
        let gat_src = Rc::new(gat_src);
        let gat_dst = Rc::new(gat_dst);

        let mut head_outputs = Vec::with_capacity(hyper.attention_heads);
        for head in 0..hyper.attention_heads {
            let w_src = staged.get(&format!("gat.{head}.w_src"));
            let w_dst = staged.get(&format!("gat.{head}.w_dst"));
            let att = staged.get(&format!("gat.{head}.att"));

            let s = tape.matmul(h, w_src)?;
            let t = tape.matmul(h, w_dst)?;
            let src_feats = tape.gather_rows(s, gat_src.clone())?;
            let dst_feats = tape.gather_rows(t, gat_dst.clone())?;
            let pre = tape.add(src_feats, dst_feats)?;
            let act = tape.leaky_relu(pre, hyper.leaky_slope)?;
            let scores2d = tape.matmul(act, att)?;
            let scores = tape.reshape(scores2d, vec![gat_src.len()])?;
            let alpha = tape.softmax_over_segments(scores, gat_dst.clone(), n)?;

            let coeffs = tape.value(alpha).values().to_vec();
            attention.heads.push(
                gat_src
                    .iter()
                    .zip(gat_dst.iter())
                    .zip(coeffs)
                    .map(|((&s, &d), a)| (s, d, a))
                    .collect(),
            );

            let weighted = tape.scale_rows(src_feats, alpha)?;
            let out = tape.sum_segments(weighted, gat_dst.clone(), n)?;
            head_outputs.push(out);
        }
        if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            tape.concat(&head_outputs)?
        }
    } else {
        h
    };

    // Readout at the centre place, linear map, unit normalisation.
    let centre = tape.gather_rows(readout, Rc::new(vec![g.centre_index]))?;
    let emb2d = tape.matmul(centre, staged.get("output"))?;
    let flat = tape.reshape(emb2d, vec![tape.value(emb2d).cols()])?;
    let embedding_node = tape.l2_normalize(flat)?;

    Ok(ForwardOutput { embedding_node, feature_node, attention, batch_stats })
}
