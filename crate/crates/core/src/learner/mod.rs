//! Learners: the expensive black box that turns a batch ordering into a
//! validation accuracy.
//!
//! Two kinds are provided. [`SyntheticOracle`] scores an ordering by its
//! distance to a hidden target ordering and costs microseconds. [`TinyNeural`]
//! trains a small classifier from scratch on an on-disk [`Dataset`] with the
//! batches presented in the given order.

pub mod dataset;
pub mod mlp;
pub mod oracle;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::strategy::{check_accuracy, mean_pairwise_distance, mean_pairwise_raw_distance, Strategy};

pub use dataset::{Dataset, Manifest};
pub use mlp::{MlpSpec, Optimizer, TinyNeural};
pub use oracle::{OracleSpec, SyntheticOracle, Target};

pub trait Learner: Send + Sync {
    /// Number of batches an ordering must cover.
    fn strategy_len(&self) -> usize;

    fn seed(&self) -> u64;

    /// Validation accuracy as a fraction in `[0, 1]`. Must be a pure function
    /// of the learner's configuration and `s`.
    fn accuracy(&self, s: &Strategy) -> Result<f64>;

    fn evaluate(&self, s: &Strategy) -> Result<EvalResult> {
        if s.len() != self.strategy_len() {
            return Err(invalid(format!(
                "strategy length {} but the learner expects {}",
                s.len(),
                self.strategy_len()
            )));
        }
        let start = Instant::now();
        let accuracy = self.accuracy(s)?;
        check_accuracy(accuracy)?;
        Ok(EvalResult {
            strategy: s.clone(),
            accuracy,
            wall_time: start.elapsed().as_secs_f64(),
            seed: self.seed(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub strategy: Strategy,
    pub accuracy: f64,
    /// seconds
    pub wall_time: f64,
    pub seed: u64,
}

/// Serializable description of a learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LearnerSpec {
    SyntheticOracle(OracleSpec),
    TinyNeural(MlpSpec),
}

impl LearnerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::SyntheticOracle(_) => "synthetic-oracle",
            Self::TinyNeural(_) => "tiny-neural",
        }
    }

    pub fn needs_dataset(&self) -> bool {
        matches!(self, Self::TinyNeural(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::SyntheticOracle(spec) => spec.validate(),
            Self::TinyNeural(spec) => spec.validate(),
        }
    }

    /// Instantiates the learner. Tiny-neural learners require a dataset;
    /// oracles ignore it.
    pub fn build(&self, dataset: Option<Arc<Dataset>>) -> Result<Arc<dyn Learner>> {
        match self {
            Self::SyntheticOracle(spec) => Ok(Arc::new(SyntheticOracle::new(spec.clone())?)),
            Self::TinyNeural(spec) => {
                let data = dataset.ok_or_else(|| invalid("the tiny-neural learner needs a dataset"))?;
                Ok(Arc::new(TinyNeural::new(spec.clone(), data)?))
            }
        }
    }

    /// The oracle score of `s`; an error for any other learner kind.
    pub fn synthetic_oracle_accuracy(&self, s: &Strategy) -> Result<f64> {
        match self {
            Self::SyntheticOracle(spec) => SyntheticOracle::new(spec.clone())?.accuracy(s),
            other => Err(invalid(format!("{} is not a synthetic oracle", other.kind()))),
        }
    }

    /// Same learner with its seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            Self::SyntheticOracle(spec) => spec.seed = seed,
            Self::TinyNeural(spec) => spec.seed = seed,
        }
        out
    }
}

/// Evaluates every strategy in parallel; results come back in input order.
pub fn evaluate_all(learner: &dyn Learner, strategies: &[Strategy]) -> Result<Vec<EvalResult>> {
    strategies.par_iter().map(|s| learner.evaluate(s)).collect()
}

/// Converts a percentage in `[0, 100]` into a fraction.
pub fn percent_to_fraction(percent: f64) -> Result<f64> {
    let f = percent / 100.0;
    check_accuracy(f)?;
    Ok(f)
}

/// Append-only JSON-lines log of evaluations.
pub struct EvalLog {
    out: BufWriter<File>,
}

impl EvalLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, result: &EvalResult) -> Result<()> {
        serde_json::to_writer(&mut self.out, result)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Mean accuracy of one strategy set on two learners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TransferMeans {
    pub on_source: f64,
    pub on_target: f64,
}

pub fn transfer_evaluate(strategies: &[Strategy], source: &dyn Learner, target: &dyn Learner) -> Result<TransferMeans> {
    if strategies.is_empty() {
        return Err(invalid("transfer needs at least one strategy"));
    }
    let mean = |learner: &dyn Learner| -> Result<f64> {
        let results = evaluate_all(learner, strategies)?;
        Ok(results.iter().map(|r| r.accuracy).sum::<f64>() / results.len() as f64)
    };
    Ok(TransferMeans {
        on_source: mean(source)?,
        on_target: mean(target)?,
    })
}

/// Two learners' optimized pools swapped between them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TransferReport {
    /// pool `a` on learner `a` and on learner `b`
    pub a: TransferMeans,
    /// pool `b` on learner `b` and on learner `a`
    pub b: TransferMeans,
    /// mean pairwise distance between the pools, divided by `T`
    pub distance: f64,
    pub raw_distance: f64,
}

pub fn cross_transfer(
    pool_a: &[Strategy],
    learner_a: &dyn Learner,
    pool_b: &[Strategy],
    learner_b: &dyn Learner,
) -> Result<TransferReport> {
    if learner_a.strategy_len() != learner_b.strategy_len() {
        return Err(invalid(format!(
            "learners disagree on strategy length: {} vs {}",
            learner_a.strategy_len(),
            learner_b.strategy_len()
        )));
    }
    Ok(TransferReport {
        a: transfer_evaluate(pool_a, learner_a, learner_b)?,
        b: transfer_evaluate(pool_b, learner_b, learner_a)?,
        distance: mean_pairwise_distance(pool_a, pool_b)?,
        raw_distance: mean_pairwise_raw_distance(pool_a, pool_b)?,
    })
}
