//! Agreement between a scorer and logged preferences.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::measures::FeatureVector;

/// How a scorer's exact tie between two visualizations is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// A tie counts as half an agreement.
    #[default]
    HalfCredit,
    /// A tie is resolved by a coin flip drawn from a generator seeded with this value.
    Random(u64),
}

impl TiePolicy {
    /// The same policy with its seed mixed with `salt`; half credit is unchanged.
    pub fn derive(self, salt: u64) -> Self {
        match self {
            TiePolicy::HalfCredit => TiePolicy::HalfCredit,
            TiePolicy::Random(seed) => TiePolicy::Random(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }

    pub fn resolver(self) -> TieResolver {
        match self {
            TiePolicy::HalfCredit => TieResolver::HalfCredit,
            TiePolicy::Random(seed) => TieResolver::Random(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

/// Stateful tie handling; a random resolver advances its generator once per tie.
#[derive(Debug, Clone)]
pub enum TieResolver {
    HalfCredit,
    Random(ChaCha8Rng),
}

impl TieResolver {
    /// Credit for a tie: 0.5, or 0/1 from a coin flip.
    pub fn credit(&mut self) -> f64 {
        match self {
            TieResolver::HalfCredit => 0.5,
            TieResolver::Random(rng) => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Anything that assigns a comparable score to a visualization's features.
pub trait Scorer {
    fn score(&self, fv: &FeatureVector) -> Result<f64>;
}

impl<F> Scorer for F
where
    F: Fn(&FeatureVector) -> Result<f64>,
{
    fn score(&self, fv: &FeatureVector) -> Result<f64> {
        self(fv)
    }
}

/// Fraction of trainable records whose preferred visualization the scorer ranks higher.
pub fn agreement<'a, S, I>(
    scorer: &S,
    records: I,
    features: &BTreeMap<String, FeatureVector>,
    tie_policy: TiePolicy,
) -> Result<f64>
where
    S: Scorer + ?Sized,
    I: IntoIterator<Item = &'a PreferenceRecord>,
{
    let mut resolver = tie_policy.resolver();
    let mut total = 0.0;
    let mut count = 0usize;
    for record in records {
        let Some((winner, loser)) = record.winner_loser() else {
            continue;
        };
        let lookup = |id: &str| {
            features
                .get(id)
                .ok_or_else(|| Error::UncoveredVisualization(id.to_string()))
        };
        let sw = scorer.score(lookup(winner)?)?;
        let sl = scorer.score(lookup(loser)?)?;
        total += if sw > sl {
            1.0
        } else if sw < sl {
            0.0
        } else {
            resolver.credit()
        };
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoTrainablePreferences);
    }
    Ok(total / count as f64)
}
