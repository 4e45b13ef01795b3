//! Assembly training behaviour, checked against a scalar reference forward
//! pass written independently of the batched implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tso_core::model::{
    assembly_loss, assembly_loss_parts, decode_many, encode_many, grad_wrt_hidden, latent_step, predict_many,
    train_assembly, train_assembly_from, AssemblyParams, Dims, ModelConfig, Tensor, TrainingConfig,
};
use tso_core::strategy::{init_pool, LabeledPool, Strategy};
use tso_core::TsoError;

fn labeled_pool(t: usize, m: usize, seed: u64, lo: f64, hi: f64) -> LabeledPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = LabeledPool::new();
    for s in init_pool(t, m, seed).unwrap().strategies() {
        pool.insert_labeled(s.clone(), rng.random_range(lo..hi)).unwrap();
    }
    pool
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · W + b` for a weight matrix stored (in, out).
fn affine(p: &AssemblyParams, w: Tensor, b: Tensor, x: &[f64]) -> Vec<f64> {
    let (w, b) = (&p[w], &p[b]);
    (0..w.ncols())
        .map(|j| b[[0, j]] + x.iter().enumerate().map(|(i, v)| v * w[[i, j]]).sum::<f64>())
        .collect()
}

fn lstm(p: &AssemblyParams, w: Tensor, b: Tensor, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let input: Vec<f64> = x.iter().chain(h).copied().collect();
    let z = affine(p, w, b, &input);
    let n = h.len();
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for k in 0..n {
        c2[k] = sig(z[n + k]) * c[k] + sig(z[k]) * z[2 * n + k].tanh();
        h2[k] = sig(z[3 * n + k]) * c2[k].tanh();
    }
    (h2, c2)
}

fn embedding_row(p: &AssemblyParams, token: usize) -> Vec<f64> {
    p[Tensor::TokenEmbedding].row(token).to_vec()
}

/// (squared regression error, teacher-forced NLL) for one strategy.
fn reference_terms(p: &AssemblyParams, s: &[usize], label: f64) -> (f64, f64) {
    let d = *p.dims();
    let mut h = vec![0.0; d.d_enc];
    let mut c = vec![0.0; d.d_enc];
    let mut states = Vec::new();
    for &tok in s {
        let (h2, c2) = lstm(
            p,
            Tensor::EncoderWeights,
            Tensor::EncoderBias,
            &embedding_row(p, tok),
            &h,
            &c,
        );
        let n = h2.iter().map(|v| v * v).sum::<f64>().sqrt();
        states.push(h2.iter().map(|v| v / n).collect::<Vec<_>>());
        h = h2;
        c = c2;
    }
    let pooled: Vec<f64> = (0..d.d_enc)
        .map(|j| states.iter().map(|r| r[j]).sum::<f64>() / s.len() as f64)
        .collect();
    let y = sig(affine(p, Tensor::PredictorWeights, Tensor::PredictorBias, &pooled)[0]);

    let mut state: Vec<f64> = affine(p, Tensor::InitWeights, Tensor::InitBias, states.last().unwrap())
        .into_iter()
        .map(f64::tanh)
        .collect();
    let mut cell = vec![0.0; d.d_dec];
    let mut prev = d.t;
    let mut used = vec![false; d.t];
    let mut nll = 0.0;
    for &target in s {
        let mut x = embedding_row(p, prev);
        if d.attention {
            let q: Vec<f64> = (0..d.d_enc)
                .map(|j| (0..d.d_dec).map(|i| state[i] * p[Tensor::QueryWeights][[i, j]]).sum())
                .collect();
            let scores: Vec<f64> = states
                .iter()
                .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum())
                .collect();
            let total: f64 = scores.iter().map(|v| v.exp()).sum();
            for j in 0..d.d_enc {
                x.push(states.iter().zip(&scores).map(|(k, sc)| k[j] * sc.exp() / total).sum());
            }
        }
        let (s2, c2) = lstm(p, Tensor::DecoderWeights, Tensor::DecoderBias, &x, &state, &cell);
        let logits = affine(p, Tensor::OutputWeights, Tensor::OutputBias, &s2);
        let free: f64 = (0..d.t).filter(|&k| !used[k]).map(|k| logits[k].exp()).sum();
        nll -= (logits[target].exp() / free).ln();
        used[target] = true;
        prev = target;
        state = s2;
        cell = c2;
    }
    ((y - label).powi(2), nll)
}

#[test]
fn loss_matches_termwise_reference() {
    for attention in [true, false] {
        let model = ModelConfig {
            attention,
            ..ModelConfig::default()
        };
        let pool = labeled_pool(6, 2, 8, 0.4, 0.6);
        let params = AssemblyParams::init(Dims::new(6, &model).unwrap(), 8);
        let (mut l1, mut l2) = (0.0, 0.0);
        for (s, y) in pool.labeled().unwrap() {
            let (a, b) = reference_terms(&params, s.as_slice(), y);
            l1 += a;
            l2 += b;
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * b.abs().max(1.0);
        let (p1, p2) = assembly_loss_parts(&params, &pool).unwrap();
        assert!(close(p1, l1) && close(p2, l2), "{p1} {l1} {p2} {l2}");
        assert!(close(assembly_loss(&params, &pool, 1.0).unwrap(), l1));
        assert!(close(assembly_loss(&params, &pool, 0.0).unwrap(), l2));
        assert!(close(
            assembly_loss(&params, &pool, 0.65).unwrap(),
            0.65 * l1 + 0.35 * l2
        ));
        assert!(l2 > 0.0);
    }
}

#[test]
fn loss_rejects_bad_inputs() {
    let params = AssemblyParams::init(Dims::new(4, &ModelConfig::default()).unwrap(), 0);
    let mut pool = labeled_pool(4, 3, 1, 0.4, 0.6);
    assert!(assembly_loss(&params, &pool, 1.5).is_err());
    pool.insert(Strategy::new(vec![3, 2, 1, 0]).unwrap(), None).unwrap();
    assert!(assembly_loss(&params, &pool, 0.5).is_err());
    let wrong = labeled_pool(5, 3, 1, 0.4, 0.6);
    assert!(assembly_loss(&params, &wrong, 0.5).is_err());
}

#[test]
fn zero_epochs_returns_initialization() {
    let pool = labeled_pool(5, 4, 2, 0.4, 0.6);
    let config = TrainingConfig {
        epochs: 0,
        rng_seed: 4,
        ..TrainingConfig::default()
    };
    let trained = train_assembly(&pool, &config).unwrap();
    let init = AssemblyParams::init(Dims::new(5, &config.model).unwrap(), 4);
    assert_eq!(trained.params, init);
    assert!(trained.losses.is_empty());
}

#[test]
fn training_is_deterministic_and_trends_down() {
    let pool = labeled_pool(8, 20, 3, 0.45, 0.55);
    let config = TrainingConfig {
        epochs: 200,
        learning_rate: 0.003,
        rng_seed: 1,
        ..TrainingConfig::default()
    };
    let a = train_assembly(&pool, &config).unwrap();
    let b = train_assembly(&pool, &config).unwrap();
    assert_eq!(a.losses, b.losses);
    assert!(a.params == b.params);

    // trailing-window means never increase by more than 1%
    let window = 20;
    let means: Vec<f64> = a
        .losses
        .chunks(window)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0] * 1.01, "{means:?}");
    }
    assert!(a.final_loss < 0.2 * a.losses[0]);
}

#[test]
fn non_finite_parameters_report_divergence() {
    let pool = labeled_pool(4, 3, 1, 0.4, 0.6);
    let mut params = AssemblyParams::init(Dims::new(4, &ModelConfig::default()).unwrap(), 0);
    params[Tensor::OutputBias][[0, 1]] = f64::NAN;
    let err = train_assembly_from(params, &pool, &TrainingConfig::default()).unwrap_err();
    assert!(matches!(err, TsoError::TrainingDiverged { epoch: 0, .. }), "{err}");
}

#[test]
fn predictor_beats_constant_baseline_on_its_pool() {
    let pool = labeled_pool(10, 40, 6, 0.45, 0.55);
    let config = TrainingConfig {
        epochs: 300,
        learning_rate: 0.003,
        ..TrainingConfig::default()
    };
    let trained = train_assembly(&pool, &config).unwrap();
    let labeled = pool.labeled().unwrap();
    let strategies: Vec<Strategy> = labeled.iter().map(|(s, _)| (*s).clone()).collect();
    let labels: Vec<f64> = labeled.iter().map(|e| e.1).collect();
    let emb = encode_many(&trained.params, &strategies).unwrap();
    let preds = predict_many(&trained.params, &emb.iter().collect::<Vec<_>>()).unwrap();
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let mse = preds.iter().zip(&labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n;
    assert!(mse < var, "mse {mse} var {var}");
}

#[test]
fn reconstructs_a_150_strategy_pool() {
    let pool = labeled_pool(10, 150, 12, 0.45, 0.55);
    let config = TrainingConfig {
        epochs: 300,
        learning_rate: 0.003,
        ..TrainingConfig::default()
    };
    let trained = train_assembly(&pool, &config).unwrap();
    let strategies: Vec<Strategy> = pool.strategies().cloned().collect();
    let emb = encode_many(&trained.params, &strategies).unwrap();
    let decoded = decode_many(&trained.params, &emb.iter().collect::<Vec<_>>()).unwrap();
    let exact = decoded.iter().zip(&strategies).filter(|(a, b)| a == b).count();
    assert!(exact * 100 >= 95 * strategies.len(), "{exact}/150");
}

#[test]
fn small_ascent_steps_do_not_lower_predictions() {
    let pool = labeled_pool(8, 30, 5, 0.0, 1.0);
    let config = TrainingConfig {
        epochs: 100,
        learning_rate: 0.003,
        ..TrainingConfig::default()
    };
    let trained = train_assembly(&pool, &config).unwrap();
    let p = &trained.params;
    let strategies: Vec<Strategy> = init_pool(8, 120, 77).unwrap().strategies().cloned().collect();
    let embeddings = encode_many(p, &strategies).unwrap();
    for e in &embeddings {
        let g = grad_wrt_hidden(p, e).unwrap();
        let moved = latent_step(e, &g, 1e-3).unwrap();
        let before = predict_many(p, &[e]).unwrap()[0];
        let after = predict_many(p, &[&moved]).unwrap()[0];
        assert!(after >= before, "{before} -> {after}");
    }
}
