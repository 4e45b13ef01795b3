//! Accuracy of the default tiny-neural learner on random orderings.
//!
//!     cargo run --release -p tso-core --example mnist_baseline -- data/mnist-2k [runs]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use tso_core::learner::{Dataset, Learner, MlpSpec, TinyNeural};
use tso_core::strategy::sample_random_strategy;

fn main() -> tso_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist-2k".into()));
    let runs: u64 = args.next().map_or(10, |r| r.parse().expect("runs must be an integer"));
    let data = Arc::new(Dataset::load(&dir)?);
    let learner = TinyNeural::new(MlpSpec::default(), data.clone())?;
    let mut accs = Vec::new();
    for seed in 0..runs {
        let s = sample_random_strategy(data.strategy_len(), seed)?;
        let start = Instant::now();
        let acc = learner.accuracy(&s)?;
        println!("seed {seed:2}  acc {acc:.4}  {:.3}s", start.elapsed().as_secs_f64());
        accs.push(acc);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() as f64 - 1.0).max(1.0)).sqrt();
    let (lo, hi) = accs
        .iter()
        .fold((1.0f64, 0.0f64), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    println!("mean {mean:.4}  sd {sd:.4}  range [{lo:.4}, {hi:.4}]");
    Ok(())
}
