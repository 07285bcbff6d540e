use semloc::pipeline::*;
use semloc::scene::*;
use semloc::train::*;

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let epochs: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let map = generate_synthetic(&SyntheticConfig::office(0)).unwrap();
    let protocol = Protocol::standard();
    let split = protocol.train_split(&map, seed).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.epochs = epochs; cfg.learning_rate = 5e-4; cfg.seed = seed;
    let (params, report) = train(&map, &split, &cfg).unwrap();
    let eval_vars = protocol.eval_variants(&map, seed).unwrap();
    let map_egos = extract_egos(&map, 2).unwrap();
    let var_egos: Vec<_> = eval_vars.iter().map(|v| extract_egos(v, 2).unwrap()).collect();
    let vq = query_list(&split, QuerySet::Val, eval_vars.len());
    let sim_l = similarity_learned(&map, &map_egos, &var_egos, &vq, &params).unwrap();
    let learned = evaluate_matrix(&sim_l, &split).unwrap();
    let sim_b = similarity_bow(&map, &map_egos, &var_egos, &vq).unwrap();
    let bow = evaluate_matrix(&sim_b, &split).unwrap();
    println!("seed={seed} ep={epochs}: best_ep={} | L pr={:.3} r10={:.3} | B pr={:.3} r10={:.3} | m_pr={:+.3} m_r10={:+.3}",
        report.best_epoch, learned.pr_auc, learned.recall_at_10, bow.pr_auc, bow.recall_at_10,
        learned.pr_auc - bow.pr_auc, learned.recall_at_10 - bow.recall_at_10);
}
