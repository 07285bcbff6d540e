use semloc::pipeline::*;
use semloc::scene::*;
use semloc::train::*;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let rx: usize = a[1].parse().unwrap();
    let ry: usize = a[2].parse().unwrap();
    let mob_scale: f64 = a[3].parse().unwrap();
    let epochs: usize = a[4].parse().unwrap();
    let seed: u64 = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let mut gen = SyntheticConfig::office(seed);
    gen.rooms_x = rx; gen.rooms_y = ry;
    let map = generate_synthetic(&gen).unwrap();
    let mut protocol = Protocol::standard();
    let mut mob = MobilityProfile::office();
    for label in [5u32, 8, 10, 11, 12, 18] {
        mob.set(label, mob.sigma(label).unwrap() * mob_scale);
    }
    protocol.mobility = mob;
    let split = protocol.train_split(&map, seed).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.epochs = epochs; cfg.seed = seed;
    let t = std::time::Instant::now();
    let (params, report) = train(&map, &split, &cfg).unwrap();
    let eval_vars = protocol.eval_variants(&map, seed).unwrap();
    let map_egos = extract_egos(&map, 2).unwrap();
    let var_egos: Vec<_> = eval_vars.iter().map(|v| extract_egos(v, 2).unwrap()).collect();
    let vq = query_list(&split, QuerySet::Val, eval_vars.len());
    let sim_l = similarity_learned(&map, &map_egos, &var_egos, &vq, &params).unwrap();
    let learned = evaluate_matrix(&sim_l, &split).unwrap();
    let sim_b = similarity_bow(&map, &map_egos, &var_egos, &vq).unwrap();
    let bow = evaluate_matrix(&sim_b, &split).unwrap();
    println!("{rx}x{ry} mob_scale={mob_scale} ep={epochs} seed={seed}: places={} best_ep={} | L pr={:.3} r1={:.3} r10={:.3} | B pr={:.3} r1={:.3} r10={:.3} | m_pr={:+.3} m_r10={:+.3} | {:.0}s",
        map.places().len(), report.best_epoch, learned.pr_auc, learned.recall_at_1, learned.recall_at_10,
        bow.pr_auc, bow.recall_at_1, bow.recall_at_10, learned.pr_auc - bow.pr_auc, learned.recall_at_10 - bow.recall_at_10, t.elapsed().as_secs_f64());
}
