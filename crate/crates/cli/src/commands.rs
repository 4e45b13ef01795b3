use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use tso_core::learner::{cross_transfer, Dataset, LearnerSpec, TransferReport};
use tso_core::pipeline::{run_tso, PipelineConfig, RunLog};
use tso_core::strategy::{normalized_distance, sample_random_strategy};

use crate::config::{LengthPair, LoadedConfig, SensitivityConfig};
use crate::report::{secs, CsvOut};
use crate::CliError;

/// Pairs drawn for the Monte-Carlo distance between unrelated strategies.
pub const NULL_DISTANCE_PAIRS: usize = 10_000;

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub percent: bool,
}

struct Context {
    seeds: Vec<u64>,
    out: PathBuf,
    percent: bool,
    dataset: Option<Arc<Dataset>>,
}

impl Context {
    fn new(cfg: &LoadedConfig, opts: &Options) -> Result<Self, CliError> {
        let c = &cfg.config;
        let seeds = opts.seeds.clone().unwrap_or_else(|| c.seeds.clone());
        if seeds.is_empty() {
            return Err(CliError::config(&cfg.path, None, "the seed list is empty"));
        }
        let out = match (&opts.out, &c.output_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => cfg.resolve(o),
            (None, None) => PathBuf::from("out").join(&c.name),
        };
        fs::create_dir_all(&out).map_err(|e| {
            cfg.error_at(
                "output_dir",
                format!("output directory {} is not writable: {e}", out.display()),
            )
        })?;
        let dataset = match cfg.dataset_dir() {
            Some(dir) => {
                Some(Arc::new(Dataset::load(&dir).map_err(|e| {
                    cfg.error_at("dataset", format!("cannot load `dataset`: {e}"))
                })?))
            }
            None => None,
        };
        Ok(Self {
            seeds,
            out,
            percent: opts.percent,
            dataset,
        })
    }
}

/// Runs one seed and stores its run log, pool, evaluations and output under
/// `dir`.
fn execute(
    pipeline: &PipelineConfig,
    seed: u64,
    dataset: Option<Arc<Dataset>>,
    dir: &Path,
) -> Result<RunLog, tso_core::TsoError> {
    let config = PipelineConfig {
        rng_seed: seed,
        ..pipeline.clone()
    };
    let log = run_tso(&config, dataset)?;
    fs::create_dir_all(dir)?;
    log.write_records(&dir.join("records.jsonl"))?;
    log.write_pool(&dir.join("pool.json"))?;
    log.write_evaluations(&dir.join("evals.jsonl"))?;
    fs::write(dir.join("output.json"), serde_json::to_string(&log.output)?)?;
    Ok(log)
}

fn seed_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed-{seed}"))
}

/// Result of [`run`]: completed seeds and failed ones.
#[derive(Debug, Default)]
pub struct RunReport {
    pub out: PathBuf,
    pub logs: Vec<(u64, RunLog)>,
    pub failures: Vec<(u64, String)>,
}

/// Runs the pipeline once per seed. Writes `summary.csv` (seed, iteration,
/// mean_acc, max_acc, duplicates) and `timing.csv`. Failed seeds are reported
/// but do not stop the others.
pub fn run(cfg: &LoadedConfig, opts: &Options) -> Result<RunReport, CliError> {
    let ctx = Context::new(cfg, opts)?;
    let mut report = RunReport {
        out: ctx.out.clone(),
        ..RunReport::default()
    };
    for &seed in &ctx.seeds {
        match execute(
            &cfg.config.pipeline,
            seed,
            ctx.dataset.clone(),
            &seed_dir(&ctx.out, seed),
        ) {
            Ok(log) => report.logs.push((seed, log)),
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                report.failures.push((seed, e.to_string()));
            }
        }
    }
    let mut summary = CsvOut::results(
        &ctx.out.join("summary.csv"),
        ctx.percent,
        &["seed", "iteration", "mean_acc", "max_acc", "duplicates"],
    )?;
    let mut timing = CsvOut::timing(&ctx.out.join("timing.csv"), &["seed", "iteration", "wall_time"])?;
    for (seed, log) in &report.logs {
        for r in &log.records {
            summary.row([
                seed.to_string(),
                r.iteration.to_string(),
                summary.acc(r.mean_acc),
                summary.acc(r.max_acc),
                r.duplicates.to_string(),
            ])?;
            timing.row([seed.to_string(), r.iteration.to_string(), secs(r.wall_time)])?;
        }
    }
    summary.finish()?;
    timing.finish()?;
    Ok(report)
}

/// Per-pair, per-seed outcome of [`ablate_length`].
#[derive(Debug)]
pub struct AblationRow {
    pub pair: LengthPair,
    pub seed: u64,
    pub log: RunLog,
    /// mean wall time of the optimization iterations, seconds
    pub time_per_step: f64,
}

/// One run per (length, batch size) pair and seed. Writes `ablation.csv`
/// (length, batch size, initial mean, per-iteration means) and `timing.csv`
/// (time per optimization step).
pub fn ablate_length(cfg: &LoadedConfig, opts: &Options) -> Result<Vec<AblationRow>, CliError> {
    let section = cfg.section(&cfg.config.ablation, "ablation")?;
    if section.pairs.len() < 2 {
        return Err(cfg.error_at(
            "pairs",
            "`ablation.pairs` needs at least two (length, batch_size) pairs",
        ));
    }
    let ctx = Context::new(cfg, opts)?;
    let n_items = match (&ctx.dataset, section.n_items) {
        (Some(d), _) => d.n_items(),
        (None, Some(n)) => n,
        (None, None) => return Err(cfg.error_at("ablation", "missing field `n_items` in `ablation`")),
    };
    let mut jobs = Vec::new();
    for &pair in &section.pairs {
        if pair.length == 0 || pair.batch_size == 0 || pair.length * pair.batch_size != n_items {
            return Err(cfg.error_at(
                "pairs",
                format!(
                    "invalid argument: length {} x batch_size {} does not cover {n_items} items",
                    pair.length, pair.batch_size
                ),
            ));
        }
        let mut pipeline = cfg.config.pipeline.clone();
        pipeline.t = pair.length;
        let dataset = match &mut pipeline.learner {
            LearnerSpec::SyntheticOracle(o) => {
                o.length = pair.length;
                None
            }
            LearnerSpec::TinyNeural(_) => {
                let d = ctx.dataset.as_ref().expect("checked at load");
                Some(Arc::new(d.with_batch_size(pair.batch_size)?))
            }
        };
        pipeline
            .validate()
            .map_err(|e| cfg.error_at("pairs", format!("length {}: {e}", pair.length)))?;
        jobs.push((pair, pipeline, dataset));
    }

    let mut rows = Vec::new();
    for (pair, pipeline, dataset) in &jobs {
        for &seed in &ctx.seeds {
            let dir = seed_dir(&ctx.out.join(format!("length-{}", pair.length)), seed);
            let log = execute(pipeline, seed, dataset.clone(), &dir)?;
            let steps = &log.records[1..];
            let time_per_step = steps.iter().map(|r| r.wall_time).sum::<f64>() / steps.len() as f64;
            rows.push(AblationRow {
                pair: *pair,
                seed,
                log,
                time_per_step,
            });
        }
    }

    let iterations = cfg.config.pipeline.iterations;
    let mut header: Vec<String> = ["seed", "length", "batch_size", "initial_mean"]
        .map(String::from)
        .to_vec();
    header.extend((1..=iterations).map(|i| format!("iter{i}_mean")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = CsvOut::results(&ctx.out.join("ablation.csv"), ctx.percent, &header)?;
    let mut timing = CsvOut::timing(
        &ctx.out.join("timing.csv"),
        &["seed", "length", "batch_size", "time_per_step"],
    )?;
    for row in &rows {
        let mut fields = vec![
            row.seed.to_string(),
            row.pair.length.to_string(),
            row.pair.batch_size.to_string(),
        ];
        fields.extend(row.log.records.iter().map(|r| csv.acc(r.mean_acc)));
        csv.row(&fields)?;
        timing.row([
            row.seed.to_string(),
            row.pair.length.to_string(),
            row.pair.batch_size.to_string(),
            secs(row.time_per_step),
        ])?;
    }
    csv.finish()?;
    timing.finish()?;
    Ok(rows)
}

#[derive(Debug)]
pub struct TransferRow {
    pub seed: u64,
    pub report: TransferReport,
    /// mean normalized distance between independent random strategies
    pub null_distance: f64,
    pub logs: (RunLog, RunLog),
}

/// Optimizes against both learners, then swaps the outputs. Writes
/// `transfer.csv`: one row per seed and direction with the native mean, the
/// transferred mean and the distance between the two output sets.
pub fn transfer(cfg: &LoadedConfig, opts: &Options) -> Result<Vec<TransferRow>, CliError> {
    let section = cfg.section(&cfg.config.transfer, "transfer")?;
    let ctx = Context::new(cfg, opts)?;
    let a = cfg.config.pipeline.clone();
    let b = PipelineConfig {
        learner: section.other.clone(),
        ..a.clone()
    };
    b.validate()
        .map_err(|e| cfg.error_at("other", format!("invalid argument: `transfer.other`: {e}")))?;
    let learner_a = a.learner.build(ctx.dataset.clone())?;
    let learner_b = b.learner.build(ctx.dataset.clone())?;
    if learner_a.strategy_len() != learner_b.strategy_len() {
        return Err(cfg.error_at(
            "other",
            format!(
                "invalid argument: learners disagree on strategy length ({} vs {})",
                learner_a.strategy_len(),
                learner_b.strategy_len()
            ),
        ));
    }

    let mut rows = Vec::new();
    for &seed in &ctx.seeds {
        let log_a = execute(&a, seed, ctx.dataset.clone(), &seed_dir(&ctx.out.join("a"), seed))?;
        let log_b = execute(&b, seed, ctx.dataset.clone(), &seed_dir(&ctx.out.join("b"), seed))?;
        let report = cross_transfer(&log_a.output, &*learner_a, &log_b.output, &*learner_b)?;
        let null_distance = null_distance(a.t, seed)?;
        rows.push(TransferRow {
            seed,
            report,
            null_distance,
            logs: (log_a, log_b),
        });
    }

    let mut csv = CsvOut::results(
        &ctx.out.join("transfer.csv"),
        ctx.percent,
        &[
            "seed",
            "pool",
            "native_mean",
            "transferred_mean",
            "distance",
            "raw_distance",
            "null_distance",
        ],
    )?;
    for row in &rows {
        for (name, means) in [("a", row.report.a), ("b", row.report.b)] {
            csv.row([
                row.seed.to_string(),
                name.to_string(),
                csv.acc(means.on_source),
                csv.acc(means.on_target),
                format!("{:.6}", row.report.distance),
                format!("{:.6}", row.report.raw_distance),
                format!("{:.6}", row.null_distance),
            ])?;
        }
    }
    csv.finish()?;
    Ok(rows)
}

/// Mean normalized distance over independently sampled strategy pairs.
pub fn null_distance(t: usize, seed: u64) -> Result<f64, CliError> {
    let base = seed.wrapping_mul(2 * NULL_DISTANCE_PAIRS as u64);
    let mut total = 0.0;
    for i in 0..NULL_DISTANCE_PAIRS as u64 {
        let s1 = sample_random_strategy(t, base.wrapping_add(2 * i))?;
        let s2 = sample_random_strategy(t, base.wrapping_add(2 * i + 1))?;
        total += normalized_distance(&s1, &s2)?;
    }
    Ok(total / NULL_DISTANCE_PAIRS as f64)
}

#[derive(Debug)]
pub struct SensitivityRow {
    /// alpha, or total hidden units for width sweeps
    pub sensitivity: f64,
    pub label: String,
    pub seed: u64,
    pub initial_mean: f64,
    pub final_mean: f64,
}

impl SensitivityRow {
    /// Gain of the last iteration's generated mean over the random pool, in
    /// accuracy points.
    pub fn boost_ap(&self) -> f64 {
        100.0 * (self.final_mean - self.initial_mean)
    }
}

/// Boost as a function of learner sensitivity. Writes `sensitivity.csv`,
/// sorted by sensitivity, then seed.
pub fn sensitivity(cfg: &LoadedConfig, opts: &Options) -> Result<Vec<SensitivityRow>, CliError> {
    let section = cfg.section(&cfg.config.sensitivity, "sensitivity")?;
    let base = &cfg.config.pipeline;
    let mut variants: Vec<(f64, String, PipelineConfig)> = Vec::new();
    match (section, &base.learner) {
        (SensitivityConfig::Alphas(alphas), LearnerSpec::SyntheticOracle(o)) => {
            if alphas.len() < 3 {
                return Err(cfg.error_at("alphas", "`sensitivity.alphas` needs at least three values"));
            }
            for &alpha in alphas {
                let mut spec = o.clone();
                spec.alpha = alpha;
                let p = PipelineConfig {
                    learner: LearnerSpec::SyntheticOracle(spec),
                    ..base.clone()
                };
                p.validate()
                    .map_err(|e| cfg.error_at("alphas", format!("alpha {alpha}: {e}")))?;
                variants.push((alpha, format!("alpha={alpha}"), p));
            }
        }
        (SensitivityConfig::Widths(widths), LearnerSpec::TinyNeural(m)) => {
            if widths.len() < 2 {
                return Err(cfg.error_at("widths", "`sensitivity.widths` needs at least two entries"));
            }
            for w in widths {
                let mut spec = m.clone();
                spec.hidden = w.clone();
                let p = PipelineConfig {
                    learner: LearnerSpec::TinyNeural(spec),
                    ..base.clone()
                };
                p.validate()
                    .map_err(|e| cfg.error_at("widths", format!("widths {w:?}: {e}")))?;
                let label = w.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
                variants.push((w.iter().sum::<usize>() as f64, format!("hidden={label}"), p));
            }
        }
        (SensitivityConfig::Alphas(_), _) => {
            return Err(cfg.error_at("alphas", "`sensitivity.alphas` needs a synthetic-oracle learner"))
        }
        (SensitivityConfig::Widths(_), _) => {
            return Err(cfg.error_at("widths", "`sensitivity.widths` needs a tiny-neural learner"))
        }
    }
    let ctx = Context::new(cfg, opts)?;
    let mut rows = Vec::new();
    for (sensitivity, label, pipeline) in &variants {
        for &seed in &ctx.seeds {
            let dir = seed_dir(&ctx.out.join(label.replace('=', "-")), seed);
            let log = execute(pipeline, seed, ctx.dataset.clone(), &dir)?;
            rows.push(SensitivityRow {
                sensitivity: *sensitivity,
                label: label.clone(),
                seed,
                initial_mean: log.records[0].mean_acc,
                final_mean: log.records.last().expect("at least one iteration").mean_acc,
            });
        }
    }
    rows.sort_by(|a, b| a.sensitivity.total_cmp(&b.sensitivity).then(a.seed.cmp(&b.seed)));

    let mut csv = CsvOut::results(
        &ctx.out.join("sensitivity.csv"),
        ctx.percent,
        &[
            "learner",
            "sensitivity",
            "seed",
            "initial_mean",
            "final_mean",
            "boost_ap",
        ],
    )?;
    for r in &rows {
        csv.row([
            r.label.clone(),
            format!("{}", r.sensitivity),
            r.seed.to_string(),
            csv.acc(r.initial_mean),
            csv.acc(r.final_mean),
            format!("{:.6}", r.boost_ap()),
        ])?;
    }
    csv.finish()?;
    Ok(rows)
}
