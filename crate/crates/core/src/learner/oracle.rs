use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Learner;
use crate::error::{invalid, Result};
use crate::strategy::{max_distance, sample_random_strategy, strategy_distance, Strategy};

/// Where the oracle's preferred ordering comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Explicit(Strategy),
    Random { seed: u64 },
}

/// A learner whose accuracy is a known function of how close an ordering is
/// to a hidden target ordering:
///
/// `acc = base + alpha * (1 - d(s, target) / d_max) + noise`, clamped to `[0, 1]`,
///
/// where `d` is the footrule distance and the noise is Gaussian with standard
/// deviation `noise`, seeded by `(seed, s)` so repeated evaluations agree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub length: usize,
    pub target: Target,
    pub alpha: f64,
    pub base: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(invalid("oracle length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.base) {
            return Err(invalid("oracle alpha and base must lie in [0, 1]"));
        }
        if self.base + self.alpha > 1.0 + 1e-12 {
            return Err(invalid(format!("base + alpha = {} exceeds 1", self.base + self.alpha)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid("oracle noise must be a non-negative number"));
        }
        if let Target::Explicit(s) = &self.target {
            if s.len() != self.length {
                return Err(invalid("oracle target length differs from oracle length"));
            }
        }
        Ok(())
    }

    pub fn target_strategy(&self) -> Result<Strategy> {
        match &self.target {
            Target::Explicit(s) => Ok(s.clone()),
            Target::Random { seed } => sample_random_strategy(self.length, *seed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticOracle {
    spec: OracleSpec,
    target: Strategy,
}

impl SyntheticOracle {
    pub fn new(spec: OracleSpec) -> Result<Self> {
        spec.validate()?;
        let target = spec.target_strategy()?;
        Ok(Self { spec, target })
    }

    pub fn target(&self) -> &Strategy {
        &self.target
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    /// Noise-free part of the accuracy.
    pub fn clean_accuracy(&self, s: &Strategy) -> Result<f64> {
        let d = strategy_distance(s, &self.target)?;
        let d_max = max_distance(self.spec.length);
        let closeness = if d_max == 0 { 1.0 } else { 1.0 - d as f64 / d_max as f64 };
        Ok(self.spec.base + self.spec.alpha * closeness)
    }
}

impl Learner for SyntheticOracle {
    fn strategy_len(&self) -> usize {
        self.spec.length
    }

    fn seed(&self) -> u64 {
        self.spec.seed
    }

    fn accuracy(&self, s: &Strategy) -> Result<f64> {
        let mut acc = self.clean_accuracy(s)?;
        if self.spec.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.spec.seed, s.as_slice()));
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += self.spec.noise * z;
        }
        Ok(acc.clamp(0.0, 1.0))
    }
}

/// Combines a seed with a sequence into a new 64-bit seed (splitmix64 steps).
pub(crate) fn mix_seed(seed: u64, items: &[usize]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    items.iter().fold(splitmix(seed), |h, &x| splitmix(h ^ x as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::all_permutations;

    fn oracle(t: usize, alpha: f64, base: f64, noise: f64) -> SyntheticOracle {
        SyntheticOracle::new(OracleSpec {
            length: t,
            target: Target::Random { seed: 17 },
            alpha,
            base,
            noise,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn target_scores_base_plus_alpha() {
        let o = oracle(6, 0.1, 0.5, 0.0);
        assert_eq!(o.accuracy(o.target()).unwrap(), 0.5 + 0.1);
    }

    #[test]
    fn farthest_strategy_scores_base() {
        for t in 2..=6 {
            let o = oracle(t, 0.1, 0.5, 0.0);
            let far = all_permutations(t)
                .into_iter()
                .max_by_key(|s| strategy_distance(s, o.target()).unwrap())
                .unwrap();
            assert_eq!(o.accuracy(&far).unwrap(), 0.5);
        }
    }

    #[test]
    fn range_and_monotonicity_exhaustive() {
        for t in 1..=6 {
            let o = oracle(t, 0.1, 0.5, 0.0);
            let mut scored: Vec<(usize, f64)> = all_permutations(t)
                .iter()
                .map(|s| (strategy_distance(s, o.target()).unwrap(), o.accuracy(s).unwrap()))
                .collect();
            scored.sort_by_key(|&(d, _)| d);
            for w in scored.windows(2) {
                assert!((0.5..=0.6).contains(&w[0].1));
                if w[0].0 < w[1].0 {
                    assert!(w[0].1 > w[1].1);
                } else {
                    assert_eq!(w[0].1, w[1].1);
                }
            }
        }
    }

    #[test]
    fn alpha_zero_is_flat_and_noise_is_deterministic() {
        let flat = oracle(5, 0.0, 0.7, 0.0);
        for s in all_permutations(5) {
            assert_eq!(flat.accuracy(&s).unwrap(), 0.7);
        }
        let noisy = oracle(8, 0.1, 0.5, 0.01);
        let s = sample_random_strategy(8, 4).unwrap();
        assert_eq!(noisy.accuracy(&s).unwrap(), noisy.accuracy(&s).unwrap());
        assert_ne!(noisy.accuracy(&s).unwrap(), noisy.clean_accuracy(&s).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = oracle(4, 0.1, 0.5, 0.0).spec().clone();
        spec.base = 0.95;
        assert!(SyntheticOracle::new(spec.clone()).is_err());
        spec.base = 0.5;
        spec.target = Target::Explicit(Strategy::identity(3).unwrap());
        assert!(SyntheticOracle::new(spec).is_err());
        assert!(oracle(4, 0.1, 0.5, 0.0)
            .accuracy(&Strategy::identity(5).unwrap())
            .is_err());
    }
}
