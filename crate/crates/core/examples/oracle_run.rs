//! Runs the loop on a synthetic oracle and prints the per-iteration records.
//!
//!     cargo run --release -p tso-core --example oracle_run -- <pipeline.json> [seeds]

use tso_core::pipeline::{run_tso, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().ok_or("usage: oracle_run <pipeline.json> [seeds]")?;
    let seeds: Vec<u64> = args
        .next()
        .unwrap_or_else(|| "0".into())
        .split(',')
        .map(|s| s.parse())
        .collect::<Result<_, _>>()?;
    let base: PipelineConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    for seed in seeds {
        let config = PipelineConfig {
            rng_seed: seed,
            ..base.clone()
        };
        let log = run_tso(&config, None)?;
        for r in &log.records {
            println!(
                "seed {seed} it {} n {:2} mean {:.4} max {:.4} dup {:2} refill {:2} loss {:>8.4} pred {:.4}->{:.4} {:.1}s",
                r.iteration,
                r.evaluated,
                r.mean_acc,
                r.max_acc,
                r.duplicates,
                r.refills,
                r.assembly_loss.unwrap_or(f64::NAN),
                r.predicted_sources.unwrap_or(f64::NAN),
                r.predicted_candidates.unwrap_or(f64::NAN),
                r.wall_time
            );
        }
    }
    Ok(())
}
