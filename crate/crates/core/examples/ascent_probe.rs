//! Diagnostics for one trained assembly on an oracle pool: fit quality,
//! gradient scale, and how decoded strategies respond to the step size.
//!
//!     cargo run --release -p tso-core --example ascent_probe -- t m epochs lr [seed]

use tso_core::learner::{Learner, OracleSpec, SyntheticOracle, Target};
use tso_core::model::{
    decode_many, encode_many, grad_wrt_hidden, latent_step, predict_many, train_assembly, Tensor, TrainingConfig,
};
use tso_core::pipeline::select_top_k;
use tso_core::strategy::{init_pool, LabeledPool, Strategy};

fn main() -> tso_core::Result<()> {
    let a: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| a.get(i).map_or(d, |v| v.parse().unwrap());
    let (t, m, epochs, lr) = (
        arg(0, 20.0) as usize,
        arg(1, 60.0) as usize,
        arg(2, 300.0) as usize,
        arg(3, 0.003),
    );
    let seed = arg(4, 1.0) as u64;
    let oracle = SyntheticOracle::new(OracleSpec {
        length: t,
        target: Target::Random { seed: 100 },
        alpha: 0.1,
        base: 0.5,
        noise: 0.005,
        seed: 1,
    })?;
    let minmax = arg(5, 0.0) > 0.0;
    let k = arg(6, 0.65);
    let raw: Vec<(Strategy, f64)> = init_pool(t, m, seed)?
        .strategies()
        .map(|s| (s.clone(), oracle.accuracy(s).unwrap()))
        .collect();
    let lo = raw.iter().map(|r| r.1).fold(f64::MAX, f64::min);
    let hi = raw.iter().map(|r| r.1).fold(f64::MIN, f64::max);
    let mut pool = LabeledPool::new();
    for (s, y) in &raw {
        let y = if minmax { (y - lo) / (hi - lo) } else { *y };
        pool.insert_labeled(s.clone(), y)?;
    }
    let config = TrainingConfig {
        epochs,
        learning_rate: lr,
        tradeoff_k: k,
        ..TrainingConfig::default()
    };
    let start = std::time::Instant::now();
    let trained = train_assembly(&pool, &config)?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    for (i, l) in trained.losses.iter().enumerate().step_by((epochs / 10).max(1)) {
        println!("  epoch {i:5} loss {l:.4}");
    }
    println!("  final loss {:.4}", trained.final_loss);
    let p = &trained.params;
    let all: Vec<Strategy> = pool.strategies().cloned().collect();
    let labels: Vec<f64> = pool.accuracies().into_iter().map(Option::unwrap).collect();
    let emb = encode_many(p, &all)?;
    let refs: Vec<_> = emb.iter().collect();
    let preds = predict_many(p, &refs)?;
    let dec = decode_many(p, &refs)?;
    let exact = dec.iter().zip(&all).filter(|(d, s)| d == s).count();
    let mean = labels.iter().sum::<f64>() / m as f64;
    let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / m as f64;
    let mse = preds.iter().zip(&labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / m as f64;
    let pm = preds.iter().sum::<f64>() / m as f64;
    let cov: f64 = preds
        .iter()
        .zip(&labels)
        .map(|(p, y)| (p - pm) * (y - mean))
        .sum::<f64>();
    let pv: f64 = preds.iter().map(|p| (p - pm).powi(2)).sum::<f64>();
    println!(
        "reconstruct {exact}/{m}  mse {mse:.2e}  label var {var:.2e}  corr {:.3}",
        cov / (pv * var * m as f64).sqrt()
    );
    let held: Vec<Strategy> = (0..500)
        .map(|i| tso_core::strategy::sample_random_strategy(t, 10_000 + i).unwrap())
        .collect();
    let he = encode_many(p, &held)?;
    let hp = predict_many(p, &he.iter().collect::<Vec<_>>())?;
    let hy: Vec<f64> = held.iter().map(|s| oracle.clean_accuracy(s).unwrap()).collect();
    println!("held-out corr {:.3}", corr(&hp, &hy));
    let w = &p[Tensor::PredictorWeights];
    println!("|w| {:.3}", w.iter().map(|v| v * v).sum::<f64>().sqrt());

    let top = select_top_k(&pool, m / 3)?;
    let src = encode_many(p, &top)?;
    let g0 = grad_wrt_hidden(p, &src[0])?;
    println!("|g row| {:.4}", g0.row(0).dot(&g0.row(0)).sqrt());
    let mean = raw.iter().map(|r| r.1).sum::<f64>() / m as f64;
    let src_acc: f64 = top.iter().map(|s| oracle.accuracy(s).unwrap()).sum::<f64>() / top.len() as f64;
    let src_pred = predict_many(p, &src.iter().collect::<Vec<_>>())?.iter().sum::<f64>() / src.len() as f64;
    println!("sources predicted {src_pred:.4}");
    for steps in [1usize, 3] {
        for eta in [5.0, 10.0, 20.0, 50.0, 100.0] {
            let moved: Vec<_> = src
                .iter()
                .map(|e| {
                    let mut e = e.clone();
                    for _ in 0..steps {
                        e = latent_step(&e, &grad_wrt_hidden(p, &e).unwrap(), eta).unwrap();
                    }
                    e
                })
                .collect();
            let out = decode_many(p, &moved.iter().collect::<Vec<_>>())?;
            let new: Vec<Strategy> = out.into_iter().filter(|s| !pool.contains(s)).collect();
            let uniq: std::collections::HashSet<_> = new.iter().collect();
            let acc = new.iter().map(|s| oracle.accuracy(s).unwrap()).sum::<f64>() / new.len().max(1) as f64;
            let ne = encode_many(p, &new)?;
            let np = predict_many(p, &ne.iter().collect::<Vec<_>>())?.iter().sum::<f64>() / new.len().max(1) as f64;
            println!(
                "steps {steps} eta {eta:6}: new {:2} unique {:2}  acc {acc:.4} pred {np:.4} (sources {src_acc:.4}, pool {mean:.4})",
                new.len(),
                uniq.len()
            );
        }
    }
    Ok(())
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
