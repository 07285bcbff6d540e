use semloc::pipeline::*;
use semloc::scene::*;
use semloc::train::*;
use std::time::Instant;

fn run(rx: usize, ry: usize, vis: f64, epochs: usize, label: &str) {
    let t0 = Instant::now();
    let mut gen = SyntheticConfig::office(0);
    gen.rooms_x = rx; gen.rooms_y = ry; gen.visibility_range = vis;
    let map = generate_synthetic(&gen).unwrap();
    let mut protocol = Protocol::standard();
    protocol.visibility_range = vis;
    let split = protocol.train_split(&map, 0).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.epochs = epochs;
    let (params, report) = train(&map, &split, &cfg).unwrap();
    let eval_vars = protocol.eval_variants(&map, 0).unwrap();
    let map_egos = extract_egos(&map, cfg.ego_hops).unwrap();
    let var_egos: Vec<_> = eval_vars.iter().map(|v| extract_egos(v, cfg.ego_hops).unwrap()).collect();
    let vq = query_list(&split, QuerySet::Val, eval_vars.len());
    let sim_l = similarity_learned(&map, &map_egos, &var_egos, &vq, &params).unwrap();
    let learned = evaluate_matrix(&sim_l, &split).unwrap();
    let sim_b = similarity_bow(&map, &map_egos, &var_egos, &vq).unwrap();
    let bow = evaluate_matrix(&sim_b, &split).unwrap();
    println!("{label}: places={} best_ep={} | L pr={:.3} r1={:.3} r10={:.3} | B pr={:.3} r1={:.3} r10={:.3} | m_pr={:+.3} m_r10={:+.3} | {:.0}s",
        map.places().len(), report.best_epoch, learned.pr_auc, learned.recall_at_1, learned.recall_at_10,
        bow.pr_auc, bow.recall_at_1, bow.recall_at_10,
        learned.pr_auc - bow.pr_auc, learned.recall_at_10 - bow.recall_at_10, t0.elapsed().as_secs_f64());
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let rx: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(5);
    let ry: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let vis: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3.0);
    let epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(40);
    run(rx, ry, vis, epochs, "probe");
}
