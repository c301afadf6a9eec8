//! Scratch diagnostics for curriculum learning speed.

use growrnn::config::ExperimentConfig;
use growrnn::topology::NetworkKind;
use growrnn::trainer::run_curriculum;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arch = args.get(1).map(|s| s.as_str()).unwrap_or("modular");
    let size: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.05);

    let mut cfg = ExperimentConfig::default();
    cfg.architecture = if arch == "modular" {
        NetworkKind::Modular
    } else {
        NetworkKind::NonModular
    };
    cfg.size = size;
    cfg.optimizer.max_epochs = epochs;
    cfg.optimizer.lr = lr;
    if let Some(mode) = args.get(6) {
        cfg.apply("growth.freeze_mode", mode).unwrap();
    }
    if let Some(dup) = args.get(7) {
        cfg.apply("growth.duplicate_recurrent", dup).unwrap();
    }
    let t0 = std::time::Instant::now();
    let (trace, net) = run_curriculum(&cfg, seed).unwrap();
    for rec in &trace.epochs {
        let accs: Vec<String> = rec
            .accuracies
            .iter()
            .map(|(n, a)| format!("{n}:{a:.3}"))
            .collect();
        println!(
            "epoch {:>3}  N_solved {:>3}  loss {:.4}  [{}]",
            rec.epoch,
            rec.n_solved,
            rec.loss,
            accs.join(" ")
        );
    }
    let (total, trainable) = net.count_parameters();
    println!(
        "final N_solved={} params total={total} trainable={trainable} elapsed={:.1?}",
        trace.final_n_solved,
        t0.elapsed()
    );
}
