//! The search space: orderings of training batches.
//!
//! A [`Strategy`] is a permutation of the `T` batch indices of a dataset. The
//! dataset is split into `T` batches whose internal order never changes, so a
//! strategy only decides which batch the learner sees first, second, and so on.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TsoError};

/// Number of sequence positions needed to present `n_items` in batches of
/// `batch_size`. A trailing partial batch still takes one position.
pub fn compute_strategy_length(n_items: usize, batch_size: usize) -> Result<usize> {
    if n_items == 0 || batch_size == 0 {
        return Err(invalid(format!(
            "n_items ({n_items}) and batch_size ({batch_size}) must be positive"
        )));
    }
    Ok(n_items.div_ceil(batch_size))
}

/// A permutation of `0..T`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Strategy(Vec<usize>);

impl Strategy {
    /// Validates that `order` is a permutation of `0..order.len()`.
    pub fn new(order: Vec<usize>) -> Result<Self> {
        if order.is_empty() {
            return Err(invalid("a strategy must contain at least one batch"));
        }
        let mut seen = vec![false; order.len()];
        for &idx in &order {
            if idx >= order.len() {
                return Err(invalid(format!(
                    "batch index {idx} out of range for length {}",
                    order.len()
                )));
            }
            if std::mem::replace(&mut seen[idx], true) {
                return Err(invalid(format!("batch index {idx} appears twice")));
            }
        }
        Ok(Self(order))
    }

    pub fn identity(t: usize) -> Result<Self> {
        Self::new((0..t).collect())
    }

    /// Uniformly random permutation drawn from `rng`.
    pub fn random<R: Rng + ?Sized>(t: usize, rng: &mut R) -> Result<Self> {
        if t == 0 {
            return Err(invalid("strategy length must be at least 1"));
        }
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(rng);
        Ok(Self(order))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// `positions()[i]` is the (0-based) position at which batch `i` is presented.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.0.len()];
        for (p, &idx) in self.0.iter().enumerate() {
            pos[idx] = p;
        }
        pos
    }

    /// Returns the ordering in reverse presentation order.
    pub fn reversed(&self) -> Self {
        Self(self.0.iter().rev().copied().collect())
    }
}

impl TryFrom<Vec<usize>> for Strategy {
    type Error = TsoError;

    fn try_from(order: Vec<usize>) -> Result<Self> {
        Self::new(order)
    }
}

impl From<Strategy> for Vec<usize> {
    fn from(s: Strategy) -> Self {
        s.0
    }
}

impl fmt::Debug for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Strategy{:?}", self.0)
    }
}

/// Deterministic uniform permutation of `0..t` for a given seed.
pub fn sample_random_strategy(t: usize, rng_seed: u64) -> Result<Strategy> {
    Strategy::random(t, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

/// `t!`, saturating at `u128::MAX`.
pub fn permutation_count(t: usize) -> u128 {
    (1..=t as u128)
        .try_fold(1u128, |acc, k| acc.checked_mul(k))
        .unwrap_or(u128::MAX)
}

/// All permutations of `0..t` in lexicographic order. Meant for small `t`.
pub fn all_permutations(t: usize) -> Vec<Strategy> {
    let mut cur: Vec<usize> = (0..t).collect();
    let mut out = Vec::new();
    loop {
        out.push(Strategy(cur.clone()));
        // next lexicographic permutation
        let Some(i) = (1..cur.len()).rev().find(|&i| cur[i - 1] < cur[i]) else {
            break;
        };
        let j = (i..cur.len()).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

/// One pool member: a strategy and its measured validation accuracy (a
/// fraction in `[0, 1]`), if it has been evaluated yet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub order: Strategy,
    pub accuracy: Option<f64>,
}

/// Strategies with their accuracies, in insertion order, without duplicates.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<PoolEntry>", into = "Vec<PoolEntry>")]
pub struct LabeledPool {
    entries: Vec<PoolEntry>,
    members: HashSet<Strategy>,
}

impl PartialEq for LabeledPool {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl LabeledPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn contains(&self, s: &Strategy) -> bool {
        self.members.contains(s)
    }

    pub fn strategies(&self) -> impl Iterator<Item = &Strategy> {
        self.entries.iter().map(|e| &e.order)
    }

    /// Common strategy length, if the pool is non-empty.
    pub fn strategy_len(&self) -> Option<usize> {
        self.entries.first().map(|e| e.order.len())
    }

    /// Inserts an entry. Returns `Ok(false)` (and leaves the pool untouched)
    /// if the strategy is already present.
    pub fn insert(&mut self, order: Strategy, accuracy: Option<f64>) -> Result<bool> {
        if let Some(t) = self.strategy_len() {
            if order.len() != t {
                return Err(invalid(format!(
                    "strategy of length {} does not fit a pool of length-{t} strategies",
                    order.len()
                )));
            }
        }
        if let Some(acc) = accuracy {
            check_accuracy(acc)?;
        }
        if self.members.contains(&order) {
            return Ok(false);
        }
        self.members.insert(order.clone());
        self.entries.push(PoolEntry { order, accuracy });
        Ok(true)
    }

    pub fn insert_labeled(&mut self, order: Strategy, accuracy: f64) -> Result<bool> {
        self.insert(order, Some(accuracy))
    }

    /// Attaches an accuracy to the entry at `index`.
    pub fn set_accuracy(&mut self, index: usize, accuracy: f64) -> Result<()> {
        check_accuracy(accuracy)?;
        let entry = self
            .entries
            .get_mut(index)
            .ok_or_else(|| invalid(format!("pool index {index} out of range")))?;
        entry.accuracy = Some(accuracy);
        Ok(())
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.entries.iter().all(|e| e.accuracy.is_some())
    }

    /// `(strategy, accuracy)` pairs; fails if any entry is unlabeled.
    pub fn labeled(&self) -> Result<Vec<(&Strategy, f64)>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.accuracy
                    .map(|a| (&e.order, a))
                    .ok_or_else(|| invalid(format!("pool entry {i} has no accuracy")))
            })
            .collect()
    }

    pub fn accuracies(&self) -> Vec<Option<f64>> {
        self.entries.iter().map(|e| e.accuracy).collect()
    }
}

impl TryFrom<Vec<PoolEntry>> for LabeledPool {
    type Error = TsoError;

    fn try_from(entries: Vec<PoolEntry>) -> Result<Self> {
        let mut pool = LabeledPool::new();
        for e in entries {
            let order = e.order.clone();
            if !pool.insert(e.order, e.accuracy)? {
                return Err(invalid(format!("duplicate strategy {order:?} in pool")));
            }
        }
        Ok(pool)
    }
}

impl From<LabeledPool> for Vec<PoolEntry> {
    fn from(pool: LabeledPool) -> Self {
        pool.entries
    }
}

pub(crate) fn check_accuracy(acc: f64) -> Result<()> {
    if acc.is_finite() && (0.0..=1.0).contains(&acc) {
        Ok(())
    } else {
        Err(invalid(format!("accuracy {acc} is not a fraction in [0, 1]")))
    }
}

/// `m` distinct random strategies of length `t`, unlabeled.
pub fn init_pool(t: usize, m: usize, rng_seed: u64) -> Result<LabeledPool> {
    if t == 0 || m == 0 {
        return Err(invalid("init_pool needs t >= 1 and m >= 1"));
    }
    let available = permutation_count(t);
    if m as u128 > available {
        return Err(TsoError::InfeasiblePool {
            requested: m,
            length: t,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pool = LabeledPool::new();
    // Rejection sampling stalls when m approaches t!; enumerate instead.
    if available <= 40_320 && (m as u128) * 2 > available {
        let mut all = all_permutations(t);
        all.shuffle(&mut rng);
        for s in all.into_iter().take(m) {
            pool.insert(s, None)?;
        }
        return Ok(pool);
    }
    while pool.len() < m {
        pool.insert(Strategy::random(t, &mut rng)?, None)?;
    }
    Ok(pool)
}

/// Sum over batches of the absolute difference between the batch's
/// positions in the two orderings (the Spearman footrule).
pub fn strategy_distance(s1: &Strategy, s2: &Strategy) -> Result<usize> {
    if s1.len() != s2.len() {
        return Err(invalid(format!(
            "cannot compare strategies of lengths {} and {}",
            s1.len(),
            s2.len()
        )));
    }
    let p1 = s1.positions();
    let p2 = s2.positions();
    Ok(p1.iter().zip(&p2).map(|(&a, &b)| a.abs_diff(b)).sum())
}

/// [`strategy_distance`] divided by the strategy length.
pub fn normalized_distance(s1: &Strategy, s2: &Strategy) -> Result<f64> {
    Ok(strategy_distance(s1, s2)? as f64 / s1.len() as f64)
}

/// Largest raw distance between two length-`t` strategies, `floor(t^2 / 2)`,
/// attained by reversal.
pub fn max_distance(t: usize) -> usize {
    t * t / 2
}

/// Expected raw distance between two independent uniform permutations,
/// `(t^2 - 1) / 3`.
pub fn expected_random_distance(t: usize) -> f64 {
    (t as f64 * t as f64 - 1.0) / 3.0
}

/// Mean normalized distance over every pair in `a × b`.
pub fn mean_pairwise_distance(a: &[Strategy], b: &[Strategy]) -> Result<f64> {
    Ok(mean_pairwise_raw_distance(a, b)? / a[0].len() as f64)
}

/// Mean raw distance over every pair in `a × b`.
pub fn mean_pairwise_raw_distance(a: &[Strategy], b: &[Strategy]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("mean_pairwise_distance needs two non-empty sets"));
    }
    let mut total = 0usize;
    for s1 in a {
        for s2 in b {
            total += strategy_distance(s1, s2)?;
        }
    }
    Ok(total as f64 / (a.len() * b.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use std::collections::HashMap;

    fn s(v: &[usize]) -> Strategy {
        Strategy::new(v.to_vec()).unwrap()
    }

    #[test]
    fn strategy_length_examples() {
        assert_eq!(compute_strategy_length(50_000, 500).unwrap(), 100);
        assert_eq!(compute_strategy_length(777, 777).unwrap(), 1);
        assert_eq!(compute_strategy_length(2500, 25).unwrap(), 100);
        assert_eq!(compute_strategy_length(101, 10).unwrap(), 11);
        assert!(compute_strategy_length(0, 10).is_err());
        assert!(compute_strategy_length(10, 0).is_err());
    }

    #[test]
    fn rejects_non_permutations() {
        assert!(Strategy::new(vec![]).is_err());
        assert!(Strategy::new(vec![0, 0]).is_err());
        assert!(Strategy::new(vec![0, 2]).is_err());
        assert!(serde_json::from_str::<Strategy>("[1,1,0]").is_err());
        let ok: Strategy = serde_json::from_str("[2,0,1]").unwrap();
        assert_eq!(serde_json::to_string(&ok).unwrap(), "[2,0,1]");
    }

    #[test]
    fn sampling_trivia() {
        assert_eq!(sample_random_strategy(1, 99).unwrap(), s(&[0]));
        assert_eq!(
            sample_random_strategy(3, 5).unwrap(),
            sample_random_strategy(3, 5).unwrap()
        );
        assert!(sample_random_strategy(0, 1).is_err());
    }

    #[test]
    fn sampling_is_uniform_over_s4() {
        let draws = 10_000;
        let mut counts: HashMap<Strategy, usize> = HashMap::new();
        for seed in 0..draws {
            *counts.entry(sample_random_strategy(4, seed).unwrap()).or_default() += 1;
        }
        assert_eq!(counts.len(), 24);
        let p = 1.0 / 24.0;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        let mut chi2 = 0.0;
        let expected = draws as f64 * p;
        for &c in counts.values() {
            let freq = c as f64 / draws as f64;
            assert!((freq - p).abs() < 4.0 * se, "frequency {freq} outside band");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 99.9th percentile of chi-square with 23 degrees of freedom.
        assert!(chi2 < 49.73, "chi2 = {chi2}");
    }

    #[test]
    fn pool_examples() {
        let pool = init_pool(100, 150, 7).unwrap();
        assert_eq!(pool.len(), 150);
        assert!(pool.strategies().all(|x| x.len() == 100));

        let pool = init_pool(3, 6, 7).unwrap();
        let mut got: Vec<_> = pool.strategies().cloned().collect();
        got.sort();
        assert_eq!(got, all_permutations(3));

        assert!(matches!(
            init_pool(2, 3, 7),
            Err(TsoError::InfeasiblePool { available: 2, .. })
        ));
        assert_eq!(init_pool(6, 40, 3).unwrap(), init_pool(6, 40, 3).unwrap());
    }

    #[test]
    fn pool_rejects_duplicates_and_bad_labels() {
        let mut pool = LabeledPool::new();
        assert!(pool.insert_labeled(s(&[0, 1]), 0.5).unwrap());
        assert!(!pool.insert_labeled(s(&[0, 1]), 0.7).unwrap());
        assert_eq!(pool.len(), 1);
        assert!(pool.insert_labeled(s(&[1, 0]), 1.5).is_err());
        assert!(pool.insert_labeled(s(&[1, 0]), f64::NAN).is_err());
        assert!(pool.insert_labeled(s(&[0, 1, 2]), 0.5).is_err());
        let json = serde_json::to_string(&pool).unwrap();
        assert_eq!(json, r#"[{"order":[0,1],"accuracy":0.5}]"#);
        let dup = r#"[{"order":[0,1],"accuracy":0.5},{"order":[0,1],"accuracy":null}]"#;
        assert!(serde_json::from_str::<LabeledPool>(dup).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(strategy_distance(&s(&[0, 1, 2]), &s(&[0, 1, 2])).unwrap(), 0);
        assert_eq!(strategy_distance(&s(&[0, 1, 2, 3]), &s(&[3, 2, 1, 0])).unwrap(), 8);
        assert!(strategy_distance(&s(&[0]), &s(&[0, 1])).is_err());
        let id = Strategy::identity(100).unwrap();
        assert_eq!(strategy_distance(&id, &id.reversed()).unwrap(), 5000);
        assert_eq!(normalized_distance(&id, &id.reversed()).unwrap(), 50.0);
    }

    #[test]
    fn max_distance_matches_exhaustive_search() {
        for t in 1..=7 {
            let perms = all_permutations(t);
            let id = &perms[0];
            // distance is invariant under relabeling, so fixing one side is exhaustive
            let max = perms.iter().map(|p| strategy_distance(id, p).unwrap()).max().unwrap();
            assert_eq!(max, max_distance(t), "t = {t}");
            if t % 2 == 0 {
                assert_eq!(max, t * t / 2);
            }
        }
    }

    #[test]
    fn pairwise_examples() {
        let a = vec![s(&[0, 1])];
        let b = vec![s(&[1, 0])];
        assert_eq!(mean_pairwise_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(mean_pairwise_raw_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(mean_pairwise_distance(&a, &b).unwrap(), 1.0);
        assert!(mean_pairwise_distance(&[], &b).is_err());
    }

    #[test]
    fn expected_random_distance_matches_enumeration() {
        for t in 1..=6 {
            let perms = all_permutations(t);
            let mean = perms
                .iter()
                .map(|p| strategy_distance(&perms[0], p).unwrap() as f64)
                .sum::<f64>()
                / perms.len() as f64;
            assert!((mean - expected_random_distance(t)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn random_strategies_are_permutations(t in 1usize..64, seed: u64) {
            let st = sample_random_strategy(t, seed).unwrap();
            prop_assert!(Strategy::new(st.clone().into_inner()).is_ok());
            prop_assert_eq!(st.len(), t);
        }

        #[test]
        fn distance_is_a_metric(t in 1usize..30, a: u64, b: u64, c: u64) {
            let (x, y, z) = (
                sample_random_strategy(t, a).unwrap(),
                sample_random_strategy(t, b).unwrap(),
                sample_random_strategy(t, c).unwrap(),
            );
            let d = |p: &Strategy, q: &Strategy| strategy_distance(p, q).unwrap();
            prop_assert_eq!(d(&x, &y), d(&y, &x));
            prop_assert_eq!(d(&x, &y) == 0, x == y);
            prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z));
            prop_assert!(d(&x, &y) <= max_distance(t));
        }
    }
}
