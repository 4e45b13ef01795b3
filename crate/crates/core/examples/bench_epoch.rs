use std::time::Instant;
use tso_core::model::{loss_gradient, AssemblyParams, Dims, ModelConfig};
use tso_core::strategy::{init_pool, LabeledPool};

fn main() {
    for (t, m) in [(10, 20), (20, 60), (20, 100), (100, 150)] {
        let mut pool = LabeledPool::new();
        for (i, s) in init_pool(t, m, 1).unwrap().strategies().enumerate() {
            pool.insert_labeled(s.clone(), 0.5 + 0.001 * i as f64 % 0.1).unwrap();
        }
        let p = AssemblyParams::init(Dims::new(t, &ModelConfig::default()).unwrap(), 0);
        let start = Instant::now();
        let reps = 3;
        for _ in 0..reps {
            loss_gradient(&p, &pool, 0.65).unwrap();
        }
        println!(
            "T={t} m={m}: {:.3} s/epoch",
            start.elapsed().as_secs_f64() / reps as f64
        );
    }
}
