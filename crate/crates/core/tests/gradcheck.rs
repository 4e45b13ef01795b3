//! Central finite differences against the analytic gradients of the assembly
//! loss and of the predictor w.r.t. the embedding.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tso_core::model::{
    assembly_loss, encode, grad_wrt_hidden_matrix, loss_gradient, predict_matrix, AssemblyParams, Dims, ModelConfig,
    Tensor,
};
use tso_core::strategy::{init_pool, LabeledPool};

const STEP: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn tolerance(analytic: f64) -> f64 {
    if analytic.abs() < 1e-8 {
        1e-2
    } else {
        1e-4
    }
}

fn labeled_pool(t: usize, m: usize, seed: u64) -> LabeledPool {
    let unlabeled = init_pool(t, m, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = LabeledPool::new();
    for s in unlabeled.strategies() {
        pool.insert_labeled(s.clone(), rng.random_range(0.3..0.7)).unwrap();
    }
    pool
}

fn check_parameters(model: ModelConfig, t: usize, per_tensor: usize, seed: u64) -> usize {
    let pool = labeled_pool(t, 3, seed);
    let params = AssemblyParams::init(Dims::new(t, &model).unwrap(), seed);
    let k = 0.65;
    let (_, grad) = loss_gradient(&params, &pool, k).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut checked = 0;
    for (tensor, g) in grad.iter() {
        if g.is_empty() {
            continue;
        }
        for _ in 0..per_tensor {
            let idx = (rng.random_range(0..g.nrows()), rng.random_range(0..g.ncols()));
            let mut plus = params.clone();
            plus[tensor][idx] += STEP;
            let mut minus = params.clone();
            minus[tensor][idx] -= STEP;
            let numeric =
                (assembly_loss(&plus, &pool, k).unwrap() - assembly_loss(&minus, &pool, k).unwrap()) / (2.0 * STEP);
            let analytic = g[idx];
            let err = rel_err(analytic, numeric);
            assert!(
                err < tolerance(analytic),
                "{} {idx:?}: analytic {analytic:e} numeric {numeric:e} rel {err:e}",
                tensor.name()
            );
            checked += 1;
        }
    }
    checked
}

#[test]
fn loss_gradient_matches_finite_differences_with_attention() {
    let n = check_parameters(ModelConfig::default(), 5, 20, 11);
    assert_eq!(n, 12 * 20);
}

#[test]
fn loss_gradient_matches_finite_differences_without_attention() {
    let model = ModelConfig {
        attention: false,
        ..ModelConfig::default()
    };
    let n = check_parameters(model, 4, 10, 12);
    assert_eq!(n, 11 * 10);
}

#[test]
fn every_tensor_receives_gradient() {
    let pool = labeled_pool(6, 4, 3);
    let params = AssemblyParams::init(Dims::new(6, &ModelConfig::default()).unwrap(), 3);
    let (_, grad) = loss_gradient(&params, &pool, 0.65).unwrap();
    for (tensor, g) in grad.iter() {
        assert!(g.iter().any(|&v| v != 0.0), "{} has zero gradient", tensor.name());
    }
    // k = 1 leaves the decoder untouched
    let (_, grad) = loss_gradient(&params, &pool, 1.0).unwrap();
    for t in [
        Tensor::DecoderWeights,
        Tensor::OutputWeights,
        Tensor::QueryWeights,
        Tensor::InitBias,
    ] {
        assert!(grad[t].iter().all(|&v| v == 0.0), "{}", t.name());
    }
}

#[test]
fn hidden_gradient_matches_finite_differences() {
    let t = 8;
    let params = AssemblyParams::init(Dims::new(t, &ModelConfig::default()).unwrap(), 21);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for s in labeled_pool(t, 10, 2).strategies() {
        let e = encode(&params, s).unwrap().into_inner();
        let g = grad_wrt_hidden_matrix(&params, e.view()).unwrap();
        for _ in 0..20 {
            let idx = (rng.random_range(0..t), rng.random_range(0..e.ncols()));
            let f = |delta: f64| {
                let mut m: Array2<f64> = e.clone();
                m[idx] += delta;
                predict_matrix(&params, m.view()).unwrap()
            };
            let numeric = (f(STEP) - f(-STEP)) / (2.0 * STEP);
            let err = rel_err(g[idx], numeric);
            assert!(err < tolerance(g[idx]), "{idx:?}: {} vs {numeric} ({err:e})", g[idx]);
            checked += 1;
        }
    }
    assert_eq!(checked, 200);
}

#[test]
fn uniform_pooling_gives_equal_timestep_gradients() {
    let t = 6;
    let params = AssemblyParams::init(Dims::new(t, &ModelConfig::default()).unwrap(), 4);
    let s = labeled_pool(t, 1, 9).strategies().next().unwrap().clone();
    let e = encode(&params, &s).unwrap().into_inner();
    let shift: Vec<f64> = (0..e.ncols()).map(|i| 1e-3 * ((i % 7) as f64 - 3.0)).collect();
    let moved = |row: usize| {
        let mut m = e.clone();
        for (j, v) in shift.iter().enumerate() {
            m[[row, j]] += v;
        }
        predict_matrix(&params, m.view()).unwrap()
    };
    let base = moved(0);
    for row in 1..t {
        assert!((moved(row) - base).abs() < 1e-14);
    }
}
