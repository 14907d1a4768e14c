//! Runs the desk-scale method comparison and prints one line per method and
//! seed. Arguments are `key=value` config overrides; `SEEDS` picks the count.

#[path = "../tests/support/desk.rs"]
mod desk;

use std::time::Instant;

fn main() -> xbarprune::Result<()> {
    xbarprune::configure_threads()?;
    let extra: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = std::env::var("SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut outcomes = Vec::new();
    for seed in 0..seeds {
        let t = Instant::now();
        let (o, results) = desk::run_seed(seed, &extra)?;
        for (s, r) in o.all().into_iter().zip(&results) {
            let trained = r
                .histories
                .iter()
                .filter(|(name, _)| name != "finetune")
                .last()
                .and_then(|(_, h)| h.epochs.last())
                .and_then(|e| e.test_acc)
                .unwrap_or(f64::NAN);
            println!(
                "seed {seed} {:<16} trained {trained:.4} acc {:.4} (pre-ft {:.4}) energy {:.4} pruned {:.4} tiles>=75% {:.3} removed {:.3}",
                s.method, s.accuracy, s.accuracy_before_finetune, s.normalized_energy, s.final_pruning_ratio,
                s.tiles_at_least_75, s.tiles_removed
            );
        }
        println!("seed {seed} took {:.1}s", t.elapsed().as_secs_f64());
        outcomes.push(o);
    }
    let med = |f: &dyn Fn(&desk::SeedOutcome) -> f64| desk::median(outcomes.iter().map(f).collect());
    println!(
        "median energy: unstructured {:.4} dub {:.4} tile {:.4} sdub {:.4}",
        med(&|o| o.unstructured.normalized_energy),
        med(&|o| o.dub.normalized_energy),
        med(&|o| o.tile.normalized_energy),
        med(&|o| o.sdub.normalized_energy)
    );
    println!(
        "median acc drop: unstructured {:.4} dub {:.4} tile {:.4} sdub {:.4}",
        med(&|o| o.baseline.accuracy - o.unstructured.accuracy),
        med(&|o| o.baseline.accuracy - o.dub.accuracy),
        med(&|o| o.baseline.accuracy - o.tile.accuracy),
        med(&|o| o.baseline.accuracy - o.sdub.accuracy)
    );
    Ok(())
}
