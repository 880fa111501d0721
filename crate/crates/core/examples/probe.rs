use fedbayes::harness::config::parse_config;
use fedbayes::sim::round::run_multi_round_sgd;

fn main() {
    let text = std::fs::read_to_string(std::env::args().nth(1).unwrap()).unwrap();
    let mut cfg = parse_config(&text).unwrap();
    let kind = std::env::args().nth(2).unwrap();
    cfg.aggregator = fedbayes::AggregatorKind::from_name(&kind).unwrap();
    let seed: u64 = std::env::args().nth(3).unwrap_or("1".into()).parse().unwrap();
    let out = run_multi_round_sgd(&cfg, seed).unwrap();
    for log in out.rounds.iter() {
        if log.round % 20 == 0 || log.round == cfg.task.rounds - 1 {
            let w: Vec<String> = log.weights.iter().map(|(p, w)| format!("{}:{:.4}", p, w)).collect();
            let n: Vec<String> = log.update_norms.iter().map(|(_, x)| format!("{:.2}", x)).collect();
            println!("r{:3} metric {:.4} | norms [{}] | w [{}]", log.round, log.metric, n.join(","), w.join(","));
        }
    }
    println!("final {:.6}", out.final_metric);
}
