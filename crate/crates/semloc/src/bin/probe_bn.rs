use semloc::autodiff::Tape;
use semloc::encoder::*;
use semloc::metrics::*;
use semloc::pipeline::*;
use semloc::scene::*;
use semloc::train::*;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let rx: usize = a[1].parse().unwrap();
    let ry: usize = a[2].parse().unwrap();
    let epochs: usize = a[3].parse().unwrap();
    let mut gen = SyntheticConfig::office(0);
    gen.rooms_x = rx; gen.rooms_y = ry;
    let map = generate_synthetic(&gen).unwrap();
    let protocol = Protocol::standard();
    let split = protocol.train_split(&map, 0).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.epochs = epochs;
    let (params, report) = train(&map, &split, &cfg).unwrap();
    let eval_vars = protocol.eval_variants(&map, 0).unwrap();
    let map_egos = extract_egos(&map, 2).unwrap();
    let var_egos: Vec<_> = eval_vars.iter().map(|v| extract_egos(v, 2).unwrap()).collect();
    let vq = query_list(&split, QuerySet::Val, eval_vars.len());
    let tax = map.taxonomy();

    let embed_mode = |g: &EgoGraph, training: bool| -> Vec<f64> {
        let mut tape = Tape::new();
        let staged = StagedParams::constants(&mut tape, &params);
        let out = forward_on_tape(&mut tape, g, FeatureSource::Constant, &params, &staged, tax, training).unwrap();
        tape.value(out.embedding_node).values().to_vec()
    };
    for training in [false, true] {
        let map_ids: Vec<u32> = map_egos.keys().copied().collect();
        let map_embs: Vec<Vec<f64>> = map_ids.iter().map(|id| embed_mode(&map_egos[id], training)).collect();
        let q_embs: Vec<Vec<f64>> = vq.iter().map(|(v, p)| embed_mode(&var_egos[*v][p], training)).collect();
        let sim = SimilarityMatrix::from_vectors(vq.clone(), map_ids, &q_embs, &map_embs).unwrap();
        let rep = evaluate_matrix(&sim, &split).unwrap();
        println!("bn_mode={} : pooled pr={:.3} r1={:.3} r10={:.3}", if training {"per-graph"} else {"running"}, rep.pr_auc, rep.recall_at_1, rep.recall_at_10);
    }
    println!("best_ep={}", report.best_epoch);
}
