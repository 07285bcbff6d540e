use semloc::metrics::*;
use semloc::pipeline::*;
use semloc::scene::*;
use semloc::train::*;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let negs: usize = a[1].parse().unwrap();
    let epochs: usize = a[2].parse().unwrap();
    let mut gen = SyntheticConfig::office(0);
    gen.rooms_x = 6; gen.rooms_y = 3;
    let map = generate_synthetic(&gen).unwrap();
    let protocol = Protocol::standard();
    let split = protocol.train_split(&map, 0).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.epochs = epochs; cfg.negatives = negs;
    let t = std::time::Instant::now();
    let (params, report) = train(&map, &split, &cfg).unwrap();
    let eval_vars = protocol.eval_variants(&map, 0).unwrap();
    let map_egos = extract_egos(&map, 2).unwrap();
    let var_egos: Vec<_> = eval_vars.iter().map(|v| extract_egos(v, 2).unwrap()).collect();
    let vq = query_list(&split, QuerySet::Val, eval_vars.len());
    for (name, sim) in [
        ("learned", similarity_learned(&map, &map_egos, &var_egos, &vq, &params).unwrap()),
        ("bow", similarity_bow(&map, &map_egos, &var_egos, &vq).unwrap()),
    ] {
        let pooled = evaluate_matrix(&sim, &split).unwrap();
        // Macro: mean per-query PR-AUC.
        let positives = positives_for_queries(&split, &sim.query_ids);
        let mut macro_sum = 0.0; let mut n = 0;
        for (q, pos) in positives.iter().enumerate() {
            let row = sim.row(q);
            let labels: Vec<bool> = sim.map_ids.iter().map(|id| pos.contains(id)).collect();
            if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
                macro_sum += pr_auc(row, &labels).unwrap(); n += 1;
            }
        }
        println!("{name}: pooled pr={:.3} macro pr={:.3} r1={:.3} r10={:.3}", pooled.pr_auc, macro_sum / n as f64, pooled.recall_at_1, pooled.recall_at_10);
    }
    println!("negs={negs} ep={epochs} best_ep={} {:.0}s", report.best_epoch, t.elapsed().as_secs_f64());
}
