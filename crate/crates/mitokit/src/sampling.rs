//! Batch composition helpers for imbalanced training sets.
//!
//! Detection batches guarantee a minimum fraction of mitosis-bearing
//! patches; classification epochs draw records with probability inversely
//! proportional to class frequency so the minority class appears at parity.

use crate::error::{Error, Result};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// One epoch of pre-planned batches over record ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<String>>,
}

impl BatchPlan {
    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }
}

/// Plan an epoch where every batch holds at least `ceil(fraction * batch_size)`
/// positives.
///
/// Negatives are consumed without replacement until the pool runs dry, then
/// it refills; positives are drawn from a reshuffling pool, so a scarce
/// positive set is revisited as often as the quota demands. With
/// `fraction = 0` the plan is a plain shuffled pass over all ids.
pub fn plan_fraction_batches(
    positives: &[String],
    negatives: &[String],
    batch_size: usize,
    fraction: f64,
    seed: u64,
) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(
            "positive fraction must be in [0, 1]".into(),
        ));
    }
    let total = positives.len() + negatives.len();
    if total == 0 {
        return Err(Error::EmptySplit("no records to batch".into()));
    }
    let quota = (fraction * batch_size as f64).ceil() as usize;
    if quota > 0 && positives.is_empty() {
        return Err(Error::NoPositives);
    }
    let num_batches = total.div_ceil(batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if quota == 0 {
        // no guarantee requested: one shuffled pass over everything
        let mut ids: Vec<String> = positives.iter().chain(negatives).cloned().collect();
        ids.shuffle(&mut rng);
        let batches = ids.chunks(batch_size).map(|c| c.to_vec()).collect();
        return Ok(BatchPlan { batches });
    }

    fn refill<'a>(pool: &mut Vec<&'a String>, source: &'a [String], rng: &mut ChaCha8Rng) {
        let mut fresh: Vec<&String> = source.iter().collect();
        fresh.shuffle(rng);
        *pool = fresh;
    }
    let mut pos_pool: Vec<&String> = Vec::new();
    let mut neg_pool: Vec<&String> = Vec::new();

    let quota = quota.min(batch_size);
    let mut batches = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..quota {
            if pos_pool.is_empty() {
                refill(&mut pos_pool, positives, &mut rng);
            }
            batch.push(pos_pool.pop().expect("refilled").clone());
        }
        while batch.len() < batch_size {
            if neg_pool.is_empty() {
                if negatives.is_empty() {
                    // all-positive dataset: keep filling from the positive pool
                    if pos_pool.is_empty() {
                        refill(&mut pos_pool, positives, &mut rng);
                    }
                    batch.push(pos_pool.pop().expect("refilled").clone());
                    continue;
                }
                refill(&mut neg_pool, negatives, &mut rng);
            }
            batch.push(neg_pool.pop().expect("refilled").clone());
        }
        batch.shuffle(&mut rng);
        batches.push(batch);
    }
    Ok(BatchPlan { batches })
}

/// Per-record sampling weights derived from inverse class frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWeights {
    /// Parallel to the ids passed in: weight of each record.
    pub weights: Vec<f64>,
    /// Class -> 1 / count, for inspection.
    pub per_class: BTreeMap<u8, f64>,
}

/// Weight each record by the reciprocal of its class count.
///
/// `expected_classes` lists the labels that must be present; an absent one
/// is an error rather than a silent zero-probability class.
pub fn inverse_frequency_weights(
    labels: &[u8],
    expected_classes: &[u8],
) -> Result<SampleWeights> {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    for &c in expected_classes {
        if !counts.contains_key(&c) {
            return Err(Error::EmptyClass(format!("class {c}")));
        }
    }
    let per_class: BTreeMap<u8, f64> = counts
        .iter()
        .map(|(&c, &n)| (c, 1.0 / n as f64))
        .collect();
    let weights = labels.iter().map(|l| per_class[l]).collect();
    Ok(SampleWeights { weights, per_class })
}

/// Draw `n` record indices with replacement, proportional to `weights`.
pub fn weighted_draws(weights: &[f64], n: usize, seed: u64) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::InvalidParameter(format!("bad sampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}
