use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::Learner;
use crate::error::{invalid, Result};
use crate::strategy::Strategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// A small fully connected classifier trained from scratch for every
/// evaluated ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSpec {
    /// widths of the hidden ReLU layers
    pub hidden: Vec<usize>,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// SGD momentum; ignored by Adam
    pub momentum: f64,
    /// passes over the ordered batches
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            optimizer: Optimizer::Sgd,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 3,
            seed: 0,
        }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("tiny-neural epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("tiny-neural learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("tiny-neural momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TinyNeural {
    spec: MlpSpec,
    data: Arc<Dataset>,
}

impl TinyNeural {
    pub fn new(spec: MlpSpec, data: Arc<Dataset>) -> Result<Self> {
        spec.validate()?;
        if data.n_classes < 2 {
            return Err(invalid("dataset needs at least two classes"));
        }
        Ok(Self { spec, data })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.data.input_dim()];
        w.extend(&self.spec.hidden);
        w.push(self.data.n_classes);
        w
    }

    /// Trains a fresh network on the batches in order `s` and returns it.
    pub fn train(&self, s: &Strategy) -> Result<Mlp> {
        if s.len() != self.data.strategy_len() {
            return Err(invalid(format!(
                "strategy length {} but the dataset has {} batches",
                s.len(),
                self.data.strategy_len()
            )));
        }
        let mut net = Mlp::init(&self.widths(), self.spec.seed);
        let mut opt = OptState::new(&net, &self.spec);
        let d = &*self.data;
        for _ in 0..self.spec.epochs {
            for &b in s.as_slice() {
                let items = d.batch(b);
                let x = d.train_images.select(Axis(0), items);
                let y: Vec<u8> = items.iter().map(|&i| d.train_labels[i]).collect();
                let grads = net.gradients(x.view(), &y);
                opt.apply(&mut net, grads);
            }
        }
        Ok(net)
    }
}

impl Learner for TinyNeural {
    fn strategy_len(&self) -> usize {
        self.data.strategy_len()
    }

    fn seed(&self) -> u64 {
        self.spec.seed
    }

    fn accuracy(&self, s: &Strategy) -> Result<f64> {
        let net = self.train(s)?;
        Ok(net.accuracy(self.data.val_images.view(), &self.data.val_labels))
    }
}

/// Dense layers stored as (in, out) weight matrices.
#[derive(Clone, Debug)]
pub struct Mlp {
    weights: Vec<Array2<f32>>,
    biases: Vec<Array1<f32>>,
}

impl Mlp {
    pub fn init(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let r = (1.0 / w[0] as f32).sqrt();
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-r..r)));
            biases.push(Array1::zeros(w[1]));
        }
        Self { weights, biases }
    }

    /// Activations of every layer; the last entry holds the logits.
    fn forward(&self, x: ArrayView2<f32>) -> Vec<Array2<f32>> {
        let mut acts = vec![x.to_owned()];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(w) + b;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn predict(&self, x: ArrayView2<f32>) -> Vec<usize> {
        let logits = self.forward(x).pop().unwrap();
        logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f32::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, x: ArrayView2<f32>, labels: &[u8]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .predict(x)
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == l as usize)
            .count();
        hits as f64 / labels.len() as f64
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, x: ArrayView2<f32>, labels: &[u8]) -> f64 {
        let logits = self.forward(x).pop().unwrap();
        let mut total = 0.0f64;
        for (row, &y) in logits.rows().into_iter().zip(labels) {
            let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
            total += lse - row[y as usize] as f64;
        }
        total / labels.len() as f64
    }

    /// Gradients of [`Mlp::loss`], as (weights, biases) per layer.
    pub fn gradients(&self, x: ArrayView2<f32>, labels: &[u8]) -> Vec<(Array2<f32>, Array1<f32>)> {
        let acts = self.forward(x);
        let n = labels.len() as f32;
        let mut delta = acts.last().unwrap().clone();
        for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
            let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
            row[y as usize] -= 1.0;
        }
        delta /= n;
        let mut grads = Vec::with_capacity(self.weights.len());
        for l in (0..self.weights.len()).rev() {
            let gw = acts[l].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                ndarray::Zip::from(&mut back).and(&acts[l]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        grads
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Array2<f32> {
        &mut self.weights[layer]
    }
}

struct OptState {
    kind: Optimizer,
    lr: f32,
    momentum: f32,
    step: i32,
    m: Vec<(Array2<f32>, Array1<f32>)>,
    v: Vec<(Array2<f32>, Array1<f32>)>,
}

impl OptState {
    fn new(net: &Mlp, spec: &MlpSpec) -> Self {
        let zeros: Vec<_> = net
            .weights
            .iter()
            .zip(&net.biases)
            .map(|(w, b)| (Array2::zeros(w.raw_dim()), Array1::zeros(b.len())))
            .collect();
        Self {
            kind: spec.optimizer,
            lr: spec.learning_rate as f32,
            momentum: spec.momentum as f32,
            step: 0,
            v: zeros.clone(),
            m: zeros,
        }
    }

    fn apply(&mut self, net: &mut Mlp, grads: Vec<(Array2<f32>, Array1<f32>)>) {
        self.step += 1;
        let lr = self.lr;
        for (l, (gw, gb)) in grads.into_iter().enumerate() {
            match self.kind {
                Optimizer::Sgd => {
                    let mu = self.momentum;
                    let (mw, mb) = &mut self.m[l];
                    mw.zip_mut_with(&gw, |m, &g| *m = mu * *m + g);
                    mb.zip_mut_with(&gb, |m, &g| *m = mu * *m + g);
                    net.weights[l].scaled_add(-lr, mw);
                    net.biases[l].scaled_add(-lr, mb);
                }
                Optimizer::Adam => {
                    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
                    let bc1 = 1.0 - b1.powi(self.step);
                    let bc2 = 1.0 - b2.powi(self.step);
                    let upd = |p: &mut f32, m: &mut f32, v: &mut f32, g: f32| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    };
                    let (mw, mb) = &mut self.m[l];
                    let (vw, vb) = &mut self.v[l];
                    ndarray::Zip::from(&mut net.weights[l])
                        .and(mw)
                        .and(vw)
                        .and(&gw)
                        .for_each(|p, m, v, &g| upd(p, m, v, g));
                    ndarray::Zip::from(&mut net.biases[l])
                        .and(mb)
                        .and(vb)
                        .and(&gb)
                        .for_each(|p, m, v, &g| upd(p, m, v, g));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n: usize, batch: usize) -> Arc<Dataset> {
        // two Gaussian-ish blobs separable on the first coordinate
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut make = |n: usize| {
            let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let x = Array2::from_shape_fn((n, 6), |(i, j)| {
                let centre = if j == 0 { labels[i] as f32 } else { 0.5 };
                centre + rng.random_range(-0.3..0.3)
            });
            (x, labels)
        };
        let (tx, ty) = make(n);
        let (vx, vy) = make(40);
        Arc::new(Dataset::from_parts(tx, ty, vx, vy, batch).unwrap())
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = toy_dataset(8, 4);
        let mut net = Mlp::init(&[6, 5, 2], 3);
        let x = data.train_images.view();
        let y = &data.train_labels;
        let grads = net.gradients(x, y);
        for layer in 0..net.layers() {
            for idx in [(0, 0), (1, 1), (3, 0)] {
                let h = 1e-2f32;
                net.weight_mut(layer)[idx] += h;
                let up = net.loss(x, y);
                net.weight_mut(layer)[idx] -= 2.0 * h;
                let down = net.loss(x, y);
                net.weight_mut(layer)[idx] += h;
                let numeric = (up - down) / (2.0 * h as f64);
                let analytic = grads[layer].0[idx] as f64;
                assert!(
                    (numeric - analytic).abs() < 2e-3,
                    "layer {layer} {idx:?}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn learns_a_separable_problem() {
        let data = toy_dataset(200, 20);
        for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
            let spec = MlpSpec {
                hidden: vec![8],
                optimizer,
                learning_rate: if optimizer == Optimizer::Sgd { 0.1 } else { 0.01 },
                ..MlpSpec::default()
            };
            let learner = TinyNeural::new(spec, data.clone()).unwrap();
            let acc = learner.accuracy(&Strategy::identity(10).unwrap()).unwrap();
            assert!(acc > 0.9, "{optimizer:?}: {acc}");
        }
    }

    #[test]
    fn evaluation_is_pure_and_order_sensitive() {
        let data = toy_dataset(200, 20);
        let learner = TinyNeural::new(
            MlpSpec {
                hidden: vec![4],
                epochs: 1,
                ..MlpSpec::default()
            },
            data,
        )
        .unwrap();
        let s = Strategy::identity(10).unwrap();
        let a = learner.train(&s).unwrap();
        let b = learner.train(&s).unwrap();
        assert_eq!(a.weights, b.weights);
        let r = learner.train(&s.reversed()).unwrap();
        assert_ne!(a.weights, r.weights);
        assert!(learner.accuracy(&Strategy::identity(9).unwrap()).is_err());
    }
}
