//! Runs the synthetic ablation and prints the per-seed table.
//!
//! `cargo run --release -p frp-core --example ablation -- [train] [test] [seeds...]`

use frp_core::experiment::{format_summary, format_table, run_experiment, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = ExperimentConfig::default();
    if let Some(n) = args.first() {
        cfg.train_images = n.parse()?;
    }
    if let Some(n) = args.get(1) {
        cfg.test_images = n.parse()?;
    }
    if args.len() > 2 {
        cfg.seeds = args[2..].iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    }
    let start = std::time::Instant::now();
    let results = run_experiment(&cfg)?;
    print!("{}", format_table(&results));
    print!("{}", format_summary(&results));
    for r in &results {
        println!(
            "seed {} acc {:.3} removed {} base losses {:?} resel losses {:?} resel-baseline ms {:.3}",
            r.seed, r.classifier_accuracy, r.removed_negatives, r.baseline_losses, r.reselection_losses, r.reselection_baseline_ms
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
