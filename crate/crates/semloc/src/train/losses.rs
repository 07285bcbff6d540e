//! Contrastive, batch-hard triplet, and InfoNCE losses, built from tape
//! primitives so gradients flow back into the encoder.

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::encoder::Embedding;

/// Euclidean distance between two embedding nodes.
fn distance(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
    let diff = tape.sub(a, b)?;
    let d2 = tape.dot(diff, diff)?;
    tape.sqrt(d2)
}

fn squared_distance(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
    let diff = tape.sub(a, b)?;
    tape.dot(diff, diff)
}

/// Pairwise contrastive loss: `y d^2 + (1-y) max(0, margin - d)^2` with
/// Euclidean distance `d`.
pub fn contrastive_on_tape(
    tape: &mut Tape,
    z_a: NodeId,
    z_b: NodeId,
    positive: bool,
    margin: f64,
) -> Result<NodeId, AutodiffError> {
    if positive {
        squared_distance(tape, z_a, z_b)
    } else {
        let d = distance(tape, z_a, z_b)?;
        let neg_d = tape.scale(d, -1.0)?;
        let gap = tape.add_scalar(neg_d, margin)?;
        let hinge = tape.relu(gap)?;
        tape.mul(hinge, hinge)
    }
}

/// Batch-hard triplet: per anchor, the hardest positive is the farthest,
/// the hardest negative the closest; loss is the mean hinge
/// `max(0, d_hp - d_hn + margin)`. Anchors lacking a positive or a negative
/// are excluded; the count of exclusions is returned.
pub fn triplet_batchhard_on_tape(
    tape: &mut Tape,
    anchors: &[NodeId],
    positives: &[Vec<NodeId>],
    negatives: &[Vec<NodeId>],
    margin: f64,
) -> Result<(NodeId, usize), AutodiffError> {
    assert_eq!(anchors.len(), positives.len());
    assert_eq!(anchors.len(), negatives.len());
    let mut terms = Vec::new();
    let mut excluded = 0usize;
    for ((&a, pos), neg) in anchors.iter().zip(positives).zip(negatives) {
        if pos.is_empty() || neg.is_empty() {
            excluded += 1;
            continue;
        }
        let mut hardest_pos: Option<(NodeId, f64)> = None;
        for &p in pos {
            let d = distance(tape, a, p)?;
            let v = tape.value(d).item();
            if hardest_pos.map_or(true, |(_, best)| v > best) {
                hardest_pos = Some((d, v));
            }
        }
        let mut hardest_neg: Option<(NodeId, f64)> = None;
        for &n in neg {
            let d = distance(tape, a, n)?;
            let v = tape.value(d).item();
            if hardest_neg.map_or(true, |(_, best)| v < best) {
                hardest_neg = Some((d, v));
            }
        }
        let (d_hp, _) = hardest_pos.expect("non-empty positives");
        let (d_hn, _) = hardest_neg.expect("non-empty negatives");
        let gap = tape.sub(d_hp, d_hn)?;
        let shifted = tape.add_scalar(gap, margin)?;
        let hinge = tape.relu(shifted)?;
        terms.push(hinge);
    }
    if terms.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok((zero, excluded));
    }
    let stacked = tape.concat(&terms)?;
    let total = tape.sum(stacked)?;
    let mean = tape.scale(total, 1.0 / terms.len() as f64)?;
    Ok((mean, excluded))
}

/// InfoNCE with cosine similarities:
/// `-log( exp(c_pos/T) / (exp(c_pos/T) + sum_k exp(c_k/T)) )`.
pub fn infonce_on_tape(
    tape: &mut Tape,
    z_query: NodeId,
    z_pos: NodeId,
    z_negs: &[NodeId],
    temperature: f64,
) -> Result<NodeId, AutodiffError> {
    assert!(!z_negs.is_empty(), "InfoNCE needs at least one negative");
    assert!(temperature > 0.0, "temperature must be positive");
    let mut sims = Vec::with_capacity(1 + z_negs.len());
    sims.push(tape.dot(z_query, z_pos)?);
    for &n in z_negs {
        sims.push(tape.dot(z_query, n)?);
    }
    let pos_scaled = tape.scale(sims[0], 1.0 / temperature)?;
    let all = tape.concat(&sims)?;
    let scaled = tape.scale(all, 1.0 / temperature)?;
    let exps = tape.exp(scaled)?;
    let denom = tape.sum(exps)?;
    let lse = tape.log(denom)?;
    tape.sub(lse, pos_scaled)
}

fn stage(tape: &mut Tape, e: &Embedding) -> NodeId {
    tape.input(Tensor::vector(e.0.clone()))
}

/// Value-level contrastive loss over embeddings.
pub fn loss_contrastive(z_a: &Embedding, z_b: &Embedding, positive: bool, margin: f64) -> f64 {
    let mut tape = Tape::new();
    let a = stage(&mut tape, z_a);
    let b = stage(&mut tape, z_b);
    let l = contrastive_on_tape(&mut tape, a, b, positive, margin).expect("shapes agree");
    tape.value(l).item()
}

/// Value-level batch-hard triplet loss; returns (loss, excluded anchors).
pub fn loss_triplet_batchhard(
    anchors: &[Embedding],
    positives: &[Vec<Embedding>],
    negatives: &[Vec<Embedding>],
    margin: f64,
) -> (f64, usize) {
    let mut tape = Tape::new();
    let a: Vec<NodeId> = anchors.iter().map(|e| stage(&mut tape, e)).collect();
    let p: Vec<Vec<NodeId>> = positives
        .iter()
        .map(|v| v.iter().map(|e| stage(&mut tape, e)).collect())
        .collect();
    let n: Vec<Vec<NodeId>> = negatives
        .iter()
        .map(|v| v.iter().map(|e| stage(&mut tape, e)).collect())
        .collect();
    let (l, excluded) = triplet_batchhard_on_tape(&mut tape, &a, &p, &n, margin).expect("shapes agree");
    (tape.value(l).item(), excluded)
}

/// Value-level InfoNCE loss over embeddings.
pub fn loss_infonce(z_query: &Embedding, z_pos: &Embedding, z_negs: &[Embedding], temperature: f64) -> f64 {
    let mut tape = Tape::new();
    let q = stage(&mut tape, z_query);
    let p = stage(&mut tape, z_pos);
    let n: Vec<NodeId> = z_negs.iter().map(|e| stage(&mut tape, e)).collect();
    let l = infonce_on_tape(&mut tape, q, p, &n, temperature).expect("shapes agree");
    tape.value(l).item()
}
