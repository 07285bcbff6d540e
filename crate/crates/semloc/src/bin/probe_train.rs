use semloc::pipeline::*;
use semloc::scene::*;
use semloc::train::*;
use std::time::Instant;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let t0 = Instant::now();
    let map = generate_synthetic(&SyntheticConfig::office(0)).unwrap();
    let protocol = Protocol::standard();
    let split = protocol.train_split(&map, 0).unwrap();
    println!("setup: {:.1}s  places={} train={} val={} test={}", t0.elapsed().as_secs_f64(), map.places().len(), split.train.len(), split.val.len(), split.test.len());

    let mut cfg = TrainConfig::default();
    cfg.epochs = epochs;
    let t1 = Instant::now();
    let (params, report) = train(&map, &split, &cfg).unwrap();
    println!("train {} epochs: {:.1}s best epoch {} best val pr_auc {:.3}", epochs, t1.elapsed().as_secs_f64(), report.best_epoch, report.best().val.pr_auc);
    for r in report.rows.iter().step_by(5) {
        println!("  epoch {:3} loss {:.4} val_pr_auc {:.3} r@1 {:.3} r@10 {:.3}", r.epoch, r.loss, r.val.pr_auc, r.val.recall_at_1, r.val.recall_at_10);
    }

    // Held-out eval: fresh perturbation seeds, val+test queries.
    let t2 = Instant::now();
    let eval_vars = protocol.eval_variants(&map, 0).unwrap();
    let map_egos = extract_egos(&map, cfg.ego_hops).unwrap();
    let var_egos: Vec<_> = eval_vars.iter().map(|v| extract_egos(v, cfg.ego_hops).unwrap()).collect();
    let vq = query_list(&split, QuerySet::Val, eval_vars.len());
    let tq = query_list(&split, QuerySet::Test, eval_vars.len());
    for (name, queries) in [("val", &vq), ("test", &tq)] {
        let sim_l = similarity_learned(&map, &map_egos, &var_egos, queries, &params).unwrap();
        let learned = evaluate_matrix(&sim_l, &split).unwrap();
        let sim_b = similarity_bow(&map, &map_egos, &var_egos, queries).unwrap();
        let bow = evaluate_matrix(&sim_b, &split).unwrap();
        println!("{name}: learned pr_auc {:.3} f1 {:.3} r@1 {:.3} r@5 {:.3} r@10 {:.3}", learned.pr_auc, learned.f1, learned.recall_at_1, learned.recall_at_5, learned.recall_at_10);
        println!("{name}: bow     pr_auc {:.3} f1 {:.3} r@1 {:.3} r@5 {:.3} r@10 {:.3}", bow.pr_auc, bow.f1, bow.recall_at_1, bow.recall_at_5, bow.recall_at_10);
        println!("{name}: margins pr_auc {:+.3} r@10 {:+.3}", learned.pr_auc - bow.pr_auc, learned.recall_at_10 - bow.recall_at_10);
    }
    println!("eval: {:.1}s; total {:.1}s", t2.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64());
}
