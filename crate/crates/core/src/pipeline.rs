//! The outer optimization loop.
//!
//! Iteration 0 evaluates a random pool. Every later iteration trains an
//! assembly on everything evaluated so far, picks the `top_k` best strategies,
//! moves their embeddings up the predictor's gradient, decodes them, and
//! evaluates whatever new strategies come out.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TsoError};
use crate::learner::oracle::mix_seed;
use crate::learner::{evaluate_all, Dataset, EvalResult, LearnerSpec};
use crate::model::{
    decode_many, encode_many, grad_wrt_hidden, latent_step, predict_many, train_assembly, train_assembly_from,
    AssemblyParams, Dims, Embedding, TrainingConfig,
};
use crate::strategy::{all_permutations, init_pool, permutation_count, LabeledPool, Strategy};

// Stream tags for seeds derived from the run seed.
const POOL_STREAM: usize = 0;
const ASSEMBLY_STREAM: usize = 1;
const REFILL_STREAM: usize = 2;

/// Largest length for which the pipeline enumerates every ordering to report
/// the gap to the oracle optimum.
pub const OPTIMUM_SEARCH_MAX_LEN: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// strategy length
    pub t: usize,
    /// size of the initial random pool
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// how many of the final pool's best strategies to report; defaults to
    /// `top_k`
    #[serde(default)]
    pub output_k: Option<usize>,
    /// latent ascent step size
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// ascent steps per candidate
    #[serde(default = "default_ascent_steps")]
    pub ascent_steps: usize,
    /// continue from the previous iteration's assembly instead of retraining
    #[serde(default)]
    pub warm_start: bool,
    /// transform applied to pool accuracies before the assembly sees them
    #[serde(default)]
    pub label_scaling: LabelScaling,
    #[serde(default)]
    pub training: TrainingConfig,
    pub learner: LearnerSpec,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_m() -> usize {
    150
}
fn default_top_k() -> usize {
    50
}
fn default_eta() -> f64 {
    5.0
}
fn default_iterations() -> usize {
    2
}
fn default_ascent_steps() -> usize {
    1
}

impl PipelineConfig {
    /// Defaults for everything but the strategy length and the learner.
    pub fn new(t: usize, learner: LearnerSpec) -> Self {
        Self {
            t,
            m: default_m(),
            top_k: default_top_k(),
            output_k: None,
            eta: default_eta(),
            iterations: default_iterations(),
            ascent_steps: default_ascent_steps(),
            warm_start: false,
            label_scaling: LabelScaling::default(),
            training: TrainingConfig::default(),
            learner,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(invalid("t must be positive"));
        }
        if self.m == 0 || self.m as u128 > permutation_count(self.t) {
            return Err(invalid(format!("m = {} is not between 1 and {}!", self.m, self.t)));
        }
        if self.top_k == 0 || self.top_k > self.m {
            return Err(invalid(format!("top_k = {} must lie in 1..={}", self.top_k, self.m)));
        }
        if self.output_k == Some(0) {
            return Err(invalid("output_k must be positive"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid(format!("eta = {} must be positive", self.eta)));
        }
        if self.ascent_steps == 0 {
            return Err(invalid("ascent_steps must be at least 1"));
        }
        self.training.validate()?;
        Dims::new(self.t, &self.training.model)?;
        self.learner.validate()?;
        if let LearnerSpec::SyntheticOracle(o) = &self.learner {
            if o.length != self.t {
                return Err(invalid(format!(
                    "oracle length {} differs from t = {}",
                    o.length, self.t
                )));
            }
        }
        Ok(())
    }
}

/// How accuracies are presented to the predictor during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelScaling {
    /// raw fractions
    None,
    /// affine map of the pool's accuracy range onto `[0, 1]`
    #[default]
    MinMax,
}

impl LabelScaling {
    /// A copy of `pool` with transformed accuracies. A pool whose accuracies
    /// are all equal maps to 0.5.
    pub fn apply(self, pool: &LabeledPool) -> Result<LabeledPool> {
        let labeled = pool.labeled()?;
        if self == Self::None {
            return Ok(pool.clone());
        }
        let lo = labeled.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
        let hi = labeled.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        let mut out = LabeledPool::new();
        for (s, y) in labeled {
            let scaled = if hi > lo { (y - lo) / (hi - lo) } else { 0.5 };
            out.insert_labeled(s.clone(), scaled)?;
        }
        Ok(out)
    }
}

/// Summary of the strategies evaluated in one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub evaluated: usize,
    pub mean_acc: f64,
    pub max_acc: f64,
    pub min_acc: f64,
    /// decoded strategies discarded as already known or repeated
    pub duplicates: usize,
    /// random strategies drawn because nothing new was decoded
    pub refills: usize,
    pub assembly_loss: Option<f64>,
    /// mean predicted accuracy of the selected strategies and of what they
    /// decoded to after ascent
    pub predicted_sources: Option<f64>,
    pub predicted_candidates: Option<f64>,
    /// best accuracy in the pool after this iteration
    pub best_so_far: f64,
    /// seconds
    pub wall_time: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<IterationRecord>,
    pub pool: LabeledPool,
    /// the best strategies of the final pool
    pub output: Vec<Strategy>,
    pub evaluations: Vec<EvalResult>,
    /// best possible accuracy minus best found, when the optimum is known
    pub optimum_gap: Option<f64>,
}

impl RunLog {
    /// One JSON record per line.
    pub fn write_records(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_pool(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.pool)?)?;
        Ok(())
    }

    pub fn write_evaluations(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for e in &self.evaluations {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// The `k` best strategies; ties keep insertion order.
pub fn select_top_k(pool: &LabeledPool, k: usize) -> Result<Vec<Strategy>> {
    if k == 0 || k > pool.len() {
        return Err(invalid(format!("cannot select {k} of {} strategies", pool.len())));
    }
    let mut ranked = pool.labeled()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked.into_iter().take(k).map(|(s, _)| s.clone()).collect())
}

/// Output of [`generate_candidates`].
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    /// new strategies, in the order of their sources
    pub strategies: Vec<Strategy>,
    pub duplicates: usize,
    pub predicted_sources: f64,
    /// predicted accuracy of every decoded strategy, re-encoded
    pub predicted_candidates: f64,
}

/// Ascends each source's embedding `steps` times with step size `eta` and
/// decodes it, dropping results already in `existing` or seen earlier in the
/// batch.
pub fn generate_candidates(
    params: &AssemblyParams,
    selected: &[Strategy],
    eta: f64,
    steps: usize,
    existing: &LabeledPool,
) -> Result<Candidates> {
    if selected.is_empty() {
        return Err(invalid("no strategies selected"));
    }
    let embeddings = encode_many(params, selected)?;
    let mut moved: Vec<Embedding> = Vec::with_capacity(embeddings.len());
    for e in &embeddings {
        let mut e = e.clone();
        for _ in 0..steps {
            let g = grad_wrt_hidden(params, &e)?;
            e = latent_step(&e, &g, eta)?;
        }
        moved.push(e);
    }
    let decoded = decode_many(params, &moved.iter().collect::<Vec<_>>())?;

    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let predicted_sources = mean(predict_many(params, &embeddings.iter().collect::<Vec<_>>())?);
    let re_encoded = encode_many(params, &decoded)?;
    let predicted_candidates = mean(predict_many(params, &re_encoded.iter().collect::<Vec<_>>())?);

    let mut seen = HashSet::new();
    let mut strategies = Vec::new();
    let mut duplicates = 0;
    for s in decoded {
        if existing.contains(&s) || !seen.insert(s.clone()) {
            duplicates += 1;
        } else {
            strategies.push(s);
        }
    }
    Ok(Candidates {
        strategies,
        duplicates,
        predicted_sources,
        predicted_candidates,
    })
}

fn summarize(iteration: usize, results: &[EvalResult]) -> IterationRecord {
    let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    IterationRecord {
        iteration,
        evaluated: accs.len(),
        mean_acc: accs.iter().sum::<f64>() / accs.len() as f64,
        max_acc: accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        min_acc: accs.iter().cloned().fold(f64::INFINITY, f64::min),
        duplicates: 0,
        refills: 0,
        assembly_loss: None,
        predicted_sources: None,
        predicted_candidates: None,
        best_so_far: 0.0,
        wall_time: 0.0,
    }
}

fn best(pool: &LabeledPool) -> f64 {
    pool.accuracies()
        .into_iter()
        .flatten()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Runs the full loop. `dataset` is required by tiny-neural learners.
pub fn run_tso(config: &PipelineConfig, dataset: Option<Arc<Dataset>>) -> Result<RunLog> {
    config.validate()?;
    let learner = config.learner.build(dataset)?;
    if learner.strategy_len() != config.t {
        return Err(invalid(format!(
            "learner expects strategies of length {} but t = {}",
            learner.strategy_len(),
            config.t
        )));
    }
    let seed = config.rng_seed;

    let start = Instant::now();
    let initial: Vec<Strategy> = init_pool(config.t, config.m, mix_seed(seed, &[POOL_STREAM]))?
        .strategies()
        .cloned()
        .collect();
    let results = evaluate_all(&*learner, &initial)?;
    let mut pool = LabeledPool::new();
    for r in &results {
        pool.insert_labeled(r.strategy.clone(), r.accuracy)?;
    }
    let mut record = summarize(0, &results);
    record.best_so_far = best(&pool);
    record.wall_time = start.elapsed().as_secs_f64();
    let mut records = vec![record];
    let mut evaluations = results;

    let mut params: Option<AssemblyParams> = None;
    for iteration in 1..=config.iterations {
        let start = Instant::now();
        let step = || -> Result<(IterationRecord, AssemblyParams, Vec<EvalResult>)> {
            let mut training = config.training.clone();
            training.rng_seed = mix_seed(seed ^ config.training.rng_seed, &[ASSEMBLY_STREAM, iteration]);
            let scaled = config.label_scaling.apply(&pool)?;
            let trained = match (&params, config.warm_start) {
                (Some(p), true) => train_assembly_from(p.clone(), &scaled, &training)?,
                _ => train_assembly(&scaled, &training)?,
            };
            let selected = select_top_k(&pool, config.top_k)?;
            let cands = generate_candidates(&trained.params, &selected, config.eta, config.ascent_steps, &pool)?;
            let mut fresh = cands.strategies;
            let mut refills = 0;
            if fresh.is_empty() {
                fresh = refill(&pool, config.top_k, mix_seed(seed, &[REFILL_STREAM, iteration]))?;
                refills = fresh.len();
                if fresh.is_empty() {
                    return Err(TsoError::DegenerateIteration { iteration });
                }
            }
            let results = evaluate_all(&*learner, &fresh)?;
            let mut record = summarize(iteration, &results);
            record.duplicates = cands.duplicates;
            record.refills = refills;
            record.assembly_loss = Some(trained.final_loss);
            record.predicted_sources = Some(cands.predicted_sources);
            record.predicted_candidates = Some(cands.predicted_candidates);
            Ok((record, trained.params, results))
        };
        let (mut record, trained, results) = step().map_err(|e| match e {
            e @ TsoError::DegenerateIteration { .. } => e,
            e => e.in_iteration(iteration),
        })?;
        for r in &results {
            pool.insert_labeled(r.strategy.clone(), r.accuracy)?;
        }
        record.best_so_far = best(&pool);
        record.wall_time = start.elapsed().as_secs_f64();
        records.push(record);
        evaluations.extend(results);
        params = Some(trained);
    }

    let optimum_gap = match &config.learner {
        LearnerSpec::SyntheticOracle(_) if config.t <= OPTIMUM_SEARCH_MAX_LEN => {
            let optimum = all_permutations(config.t)
                .iter()
                .map(|s| learner.accuracy(s))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            Some(optimum - best(&pool))
        }
        _ => None,
    };
    let output = select_top_k(&pool, config.output_k.unwrap_or(config.top_k).min(pool.len()))?;
    Ok(RunLog {
        records,
        pool,
        output,
        evaluations,
        optimum_gap,
    })
}

/// Up to `n` random strategies not yet in `pool`.
fn refill(pool: &LabeledPool, n: usize, seed: u64) -> Result<Vec<Strategy>> {
    let t = pool.strategy_len().ok_or_else(|| invalid("empty pool"))?;
    let available = permutation_count(t).saturating_sub(pool.len() as u128);
    let n = (n as u128).min(available) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Strategy> = Vec::with_capacity(n);
    if permutation_count(t) <= 40_320 {
        use rand::seq::SliceRandom;
        let mut rest: Vec<Strategy> = all_permutations(t).into_iter().filter(|s| !pool.contains(s)).collect();
        rest.shuffle(&mut rng);
        rest.truncate(n);
        return Ok(rest);
    }
    let mut seen = HashSet::new();
    while out.len() < n {
        let s = Strategy::random(t, &mut rng)?;
        if !pool.contains(&s) && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{OracleSpec, Target};

    fn pool_of(accs: &[f64]) -> LabeledPool {
        let mut pool = LabeledPool::new();
        for (i, s) in all_permutations(4).into_iter().take(accs.len()).enumerate() {
            pool.insert_labeled(s, accs[i]).unwrap();
        }
        pool
    }

    #[test]
    fn top_k_matches_sort_and_breaks_ties_by_insertion() {
        let accs = [0.5, 0.9, 0.1, 0.7, 0.3, 0.8];
        let pool = pool_of(&accs);
        let all: Vec<Strategy> = pool.strategies().cloned().collect();
        let mut idx: Vec<usize> = (0..accs.len()).collect();
        idx.sort_by(|&a, &b| accs[b].partial_cmp(&accs[a]).unwrap());
        let expected: Vec<Strategy> = idx[..3].iter().map(|&i| all[i].clone()).collect();
        assert_eq!(select_top_k(&pool, 3).unwrap(), expected);
        assert_eq!(select_top_k(&pool, 6).unwrap().len(), 6);
        assert!(select_top_k(&pool, 7).is_err());
        assert!(select_top_k(&pool, 0).is_err());

        let tied = pool_of(&[0.2, 0.9, 0.9]);
        assert_eq!(select_top_k(&tied, 1).unwrap()[0], all[1]);
    }

    #[test]
    fn refill_avoids_known_strategies() {
        let pool = pool_of(&[0.1; 20]);
        let fresh = refill(&pool, 10, 1).unwrap();
        assert_eq!(fresh.len(), 4);
        assert!(fresh.iter().all(|s| !pool.contains(s)));
        let unique: HashSet<_> = fresh.iter().collect();
        assert_eq!(unique.len(), 4);
    }

    #[test]
    fn config_validation() {
        let oracle = LearnerSpec::SyntheticOracle(OracleSpec {
            length: 5,
            target: Target::Random { seed: 0 },
            alpha: 0.1,
            base: 0.5,
            noise: 0.0,
            seed: 0,
        });
        let mut c = PipelineConfig::new(5, oracle);
        c.m = 10;
        c.top_k = 4;
        c.validate().unwrap();
        for bad in [
            PipelineConfig { top_k: 11, ..c.clone() },
            PipelineConfig {
                iterations: 0,
                ..c.clone()
            },
            PipelineConfig { eta: 0.0, ..c.clone() },
            PipelineConfig { m: 121, ..c.clone() },
            PipelineConfig { t: 6, ..c.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
