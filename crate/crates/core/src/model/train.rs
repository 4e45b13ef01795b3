use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{AssemblyParams, Dims, ModelConfig};
use super::pass::{self, LossParts};
use crate::error::{invalid, Result, TsoError};
use crate::strategy::LabeledPool;

/// Strategies per gradient chunk. Chunk boundaries are fixed so the reduced
/// gradient is bit-identical for any thread count.
const GRAD_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// weight of the regression loss; reconstruction gets `1 - tradeoff_k`
    pub tradeoff_k: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// global gradient-norm clip; `None` disables clipping
    pub clip_norm: Option<f64>,
    pub rng_seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 0.001,
            tradeoff_k: 0.65,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(5.0),
            rng_seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tradeoff_k) {
            return Err(invalid(format!("tradeoff_k {} outside [0, 1]", self.tradeoff_k)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("Adam epsilon must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(invalid("clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: AssemblyParams,
    v: AssemblyParams,
}

impl Adam {
    pub fn new(params: &AssemblyParams, config: &TrainingConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut AssemblyParams, grad: &AssemblyParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

fn labeled_batch<'a>(params: &AssemblyParams, pool: &'a LabeledPool) -> Result<(Vec<&'a [usize]>, Vec<f64>)> {
    let labeled = pool.labeled()?;
    if labeled.is_empty() {
        return Err(invalid("cannot train on an empty pool"));
    }
    let t = params.dims().t;
    let mut tokens = Vec::with_capacity(labeled.len());
    let mut labels = Vec::with_capacity(labeled.len());
    for (s, y) in labeled {
        if s.len() != t {
            return Err(invalid(format!(
                "pool strategy length {} != assembly length {t}",
                s.len()
            )));
        }
        tokens.push(s.as_slice());
        labels.push(y);
    }
    Ok((tokens, labels))
}

fn check_k(k: f64) -> Result<()> {
    if (0.0..=1.0).contains(&k) {
        Ok(())
    } else {
        Err(invalid(format!("trade-off {k} outside [0, 1]")))
    }
}

fn merge(into: &mut LossParts, part: LossParts) {
    into.regression += part.regression;
    into.reconstruction += part.reconstruction;
    into.predictions.extend(part.predictions);
    into.nll.extend(part.nll);
}

fn run_chunks(
    params: &AssemblyParams,
    tokens: &[&[usize]],
    labels: &[f64],
    k: f64,
    with_grad: bool,
) -> (LossParts, Option<AssemblyParams>) {
    let parts: Vec<(LossParts, Option<AssemblyParams>)> = tokens
        .par_chunks(GRAD_CHUNK)
        .zip(labels.par_chunks(GRAD_CHUNK))
        .map(|(tok, lab)| {
            let mut grad = with_grad.then(|| params.zeros_like());
            let loss = pass::loss_and_grad(params, tok, lab, k, grad.as_mut());
            (loss, grad)
        })
        .collect();
    let mut total = LossParts::default();
    let mut grad: Option<AssemblyParams> = None;
    for (loss, g) in parts {
        merge(&mut total, loss);
        match (&mut grad, g) {
            (Some(acc), Some(g)) => acc.add_assign(&g),
            (None, Some(g)) => grad = Some(g),
            _ => {}
        }
    }
    (total, grad)
}

/// `k * L1 + (1 - k) * L2` over the pool: `L1` sums squared regression errors
/// and `L2` sums teacher-forced reconstruction negative log-likelihoods.
pub fn assembly_loss(params: &AssemblyParams, pool: &LabeledPool, k: f64) -> Result<f64> {
    let (l1, l2) = assembly_loss_parts(params, pool)?;
    check_k(k)?;
    Ok(k * l1 + (1.0 - k) * l2)
}

/// `(L1, L2)` separately.
pub fn assembly_loss_parts(params: &AssemblyParams, pool: &LabeledPool) -> Result<(f64, f64)> {
    let (tokens, labels) = labeled_batch(params, pool)?;
    let (parts, _) = run_chunks(params, &tokens, &labels, 0.5, false);
    Ok((parts.regression, parts.reconstruction))
}

/// Loss and its exact gradient w.r.t. every parameter.
pub fn loss_gradient(params: &AssemblyParams, pool: &LabeledPool, k: f64) -> Result<(f64, AssemblyParams)> {
    check_k(k)?;
    let (tokens, labels) = labeled_batch(params, pool)?;
    let (parts, grad) = run_chunks(params, &tokens, &labels, k, true);
    Ok((parts.total(k), grad.expect("gradient requested")))
}

/// Result of [`train_assembly`].
#[derive(Clone, Debug)]
pub struct TrainedAssembly {
    pub params: AssemblyParams,
    /// full-batch loss before each epoch's update
    pub losses: Vec<f64>,
    /// loss of the returned parameters
    pub final_loss: f64,
}

/// Trains a freshly initialized assembly on the labeled pool with full-batch
/// Adam.
pub fn train_assembly(pool: &LabeledPool, config: &TrainingConfig) -> Result<TrainedAssembly> {
    let t = pool
        .strategy_len()
        .ok_or_else(|| invalid("cannot train on an empty pool"))?;
    let dims = Dims::new(t, &config.model)?;
    train_assembly_from(AssemblyParams::init(dims, config.rng_seed), pool, config)
}

/// Continues training from existing parameters.
pub fn train_assembly_from(
    mut params: AssemblyParams,
    pool: &LabeledPool,
    config: &TrainingConfig,
) -> Result<TrainedAssembly> {
    config.validate()?;
    let k = config.tradeoff_k;
    let (tokens, labels) = labeled_batch(&params, pool)?;
    let mut adam = Adam::new(&params, config);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (parts, grad) = run_chunks(&params, &tokens, &labels, k, true);
        let mut grad = grad.expect("gradient requested");
        let loss = parts.total(k);
        let norm = grad.squared_norm().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(TsoError::TrainingDiverged { epoch, loss });
        }
        losses.push(loss);
        if let Some(clip) = config.clip_norm {
            if norm > clip {
                grad.scale(clip / norm);
            }
        }
        adam.update(&mut params, &grad);
    }
    let (parts, _) = run_chunks(&params, &tokens, &labels, k, false);
    let final_loss = parts.total(k);
    if !final_loss.is_finite() || !params.is_finite() {
        return Err(TsoError::TrainingDiverged {
            epoch: config.epochs,
            loss: final_loss,
        });
    }
    Ok(TrainedAssembly {
        params,
        losses,
        final_loss,
    })
}
