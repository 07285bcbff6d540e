use semloc::pipeline::*;
use semloc::scene::*;
use semloc::train::*;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let lr: f64 = a[1].parse().unwrap();
    let negs: usize = a[2].parse().unwrap();
    let epochs: usize = a[3].parse().unwrap();
    let map = generate_synthetic(&SyntheticConfig::office(0)).unwrap();
    let protocol = Protocol::standard();
    let split = protocol.train_split(&map, 0).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.epochs = epochs; cfg.learning_rate = lr; cfg.negatives = negs;
    let t = std::time::Instant::now();
    let (params, report) = train(&map, &split, &cfg).unwrap();
    let eval_vars = protocol.eval_variants(&map, 0).unwrap();
    let map_egos = extract_egos(&map, 2).unwrap();
    let var_egos: Vec<_> = eval_vars.iter().map(|v| extract_egos(v, 2).unwrap()).collect();
    let vq = query_list(&split, QuerySet::Val, eval_vars.len());
    let sim_l = similarity_learned(&map, &map_egos, &var_egos, &vq, &params).unwrap();
    let learned = evaluate_matrix(&sim_l, &split).unwrap();
    let sim_b = similarity_bow(&map, &map_egos, &var_egos, &vq).unwrap();
    let bow = evaluate_matrix(&sim_b, &split).unwrap();
    println!("lr={lr} negs={negs} ep={epochs}: best_ep={} | L pr={:.3} r1={:.3} r10={:.3} | B pr={:.3} r10={:.3} | m_pr={:+.3} m_r10={:+.3} | {:.0}s",
        report.best_epoch, learned.pr_auc, learned.recall_at_1, learned.recall_at_10,
        bow.pr_auc, bow.recall_at_10, learned.pr_auc - bow.pr_auc, learned.recall_at_10 - bow.recall_at_10, t.elapsed().as_secs_f64());
}
