//! Stratified holdout and slide-grouped stratified K-fold splits.
//!
//! The same engine serves both tracks with different keys: detection
//! stratifies by tissue domain without grouping, classification stratifies
//! by class label with slide-level grouping so no slide ever spans a fold's
//! train/val boundary.

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

/// What to balance across splits.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratKey {
    TissueDomain,
    ClassLabel,
}

/// What must never leak across a fold's train/val boundary.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    SlideId,
    None,
}

fn stratum_of(rec: &crate::data::PatchRecord, key: StratKey) -> Result<String> {
    match key {
        StratKey::TissueDomain => Ok(format!("domain{}", rec.domain_id)),
        StratKey::ClassLabel => rec
            .class_label
            .map(|l| format!("class{l}"))
            .ok_or_else(|| Error::Schema {
                record: rec.patch_id.clone(),
                reason: "class_label stratification needs classification records".into(),
            }),
    }
}

/// One fold's id lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// A complete, serializable split: optional holdout plus K folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub test_ids: Vec<String>,
    pub folds: Vec<Fold>,
    pub k: usize,
    pub strat_key: StratKey,
    pub group_key: GroupKey,
    pub seed: u64,
}

impl FoldPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?,
        );
        Ok(serde_json::from_reader(file)?)
    }

    /// Check every structural invariant against the manifest.
    ///
    /// Test ids are disjoint from fold ids; within each fold train and val
    /// are disjoint and together cover all non-test records; val sets across
    /// folds partition the non-test records; with slide grouping, no slide
    /// appears on both sides of a fold.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let all: HashSet<&str> = manifest.records.iter().map(|r| r.patch_id.as_str()).collect();
        let test: HashSet<&str> = self.test_ids.iter().map(String::as_str).collect();
        let fail = |reason: String| Err(Error::EmptySplit(reason));
        if test.len() != self.test_ids.len() {
            return fail("duplicate ids in test set".into());
        }
        for id in &test {
            if !all.contains(id) {
                return fail(format!("test id `{id}` not in manifest"));
            }
        }
        let non_test: HashSet<&str> = all.difference(&test).copied().collect();
        let slide_of: BTreeMap<&str, &str> = manifest
            .records
            .iter()
            .map(|r| (r.patch_id.as_str(), r.slide_id.as_str()))
            .collect();

        let mut seen_val: HashSet<&str> = HashSet::new();
        for (fi, fold) in self.folds.iter().enumerate() {
            let train: HashSet<&str> = fold.train_ids.iter().map(String::as_str).collect();
            let val: HashSet<&str> = fold.val_ids.iter().map(String::as_str).collect();
            if !train.is_disjoint(&val) {
                return fail(format!("fold {fi}: train and val overlap"));
            }
            if train.iter().chain(&val).any(|id| test.contains(id)) {
                return fail(format!("fold {fi}: test ids leak into the fold"));
            }
            let union: HashSet<&str> = train.union(&val).copied().collect();
            if union != non_test {
                return fail(format!("fold {fi}: train+val do not cover non-test ids"));
            }
            for id in &val {
                if !seen_val.insert(id) {
                    return fail(format!("id `{id}` in multiple val sets"));
                }
            }
            if self.group_key == GroupKey::SlideId {
                let train_slides: HashSet<&str> =
                    train.iter().map(|id| slide_of[id]).collect();
                let val_slides: HashSet<&str> = val.iter().map(|id| slide_of[id]).collect();
                if !train_slides.is_disjoint(&val_slides) {
                    return fail(format!("fold {fi}: slide leakage across train/val"));
                }
            }
        }
        if seen_val != non_test {
            return fail("val sets do not partition the non-test records".into());
        }
        Ok(())
    }
}

/// Stratified holdout by largest-remainder apportionment.
///
/// The global test count is `round(test_fraction * n)` (at least 1); each
/// stratum contributes its floored share, and the remainder goes to the
/// strata with the largest fractional parts, keeping every stratum within
/// one record of `test_fraction * stratum_size`.
pub fn stratified_holdout(
    manifest: &DatasetManifest,
    test_fraction: f64,
    strat_key: StratKey,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0 < test_fraction && test_fraction < 0.5) {
        return Err(Error::InvalidParameter(
            "test_fraction must be in (0, 0.5)".into(),
        ));
    }
    if manifest.records.is_empty() {
        return Err(Error::EmptySplit("manifest has no records".into()));
    }
    let mut strata: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for rec in &manifest.records {
        strata
            .entry(stratum_of(rec, strat_key)?)
            .or_default()
            .push(&rec.patch_id);
    }
    for (name, ids) in &strata {
        if ids.len() < 2 {
            return Err(Error::StratumTooSmall {
                stratum: name.clone(),
                size: ids.len(),
            });
        }
    }
    let n = manifest.records.len();
    let target = ((test_fraction * n as f64).round() as usize).max(1);

    // floored per-stratum quotas, then distribute the remainder by largest
    // fractional part (ties: stratum name order)
    let mut quotas: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fracs: Vec<(f64, &str)> = Vec::new();
    let mut assigned = 0usize;
    for (name, ids) in &strata {
        let exact = test_fraction * ids.len() as f64;
        let floor = exact.floor() as usize;
        quotas.insert(name, floor);
        assigned += floor;
        fracs.push((exact - floor as f64, name));
    }
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    let mut remainder = target.saturating_sub(assigned);
    for (_, name) in &fracs {
        if remainder == 0 {
            break;
        }
        // never drain a stratum below one training record
        if quotas[name] + 1 < strata[*name].len() {
            *quotas.get_mut(name).unwrap() += 1;
            remainder -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_ids = Vec::new();
    let mut train_ids = Vec::new();
    for (name, ids) in &strata {
        let mut shuffled: Vec<&str> = ids.clone();
        shuffled.shuffle(&mut rng);
        let q = quotas[name.as_str()];
        for (i, id) in shuffled.into_iter().enumerate() {
            if i < q {
                test_ids.push(id.to_string());
            } else {
                train_ids.push(id.to_string());
            }
        }
    }
    if test_ids.is_empty() {
        return Err(Error::EmptySplit("holdout produced no test records".into()));
    }
    test_ids.sort();
    train_ids.sort();
    Ok((train_ids, test_ids))
}

/// Grouped stratified K-fold by greedy deficiency assignment.
///
/// Groups (slides, or single records when ungrouped) are ordered by how much
/// of the globally rarest stratum they carry, then by size, and each is
/// placed on the fold whose stratum counts are furthest below their
/// per-fold targets. Every group lands in exactly one fold's val set, so
/// slides never straddle a train/val boundary.
pub fn stratified_group_kfold(
    manifest: &DatasetManifest,
    k: usize,
    strat_key: StratKey,
    group_key: GroupKey,
    seed: u64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidParameter("k must be >= 2".into()));
    }
    // group -> (ids, per-stratum counts)
    let mut groups: BTreeMap<String, (Vec<&str>, BTreeMap<String, usize>)> = BTreeMap::new();
    let mut global: BTreeMap<String, usize> = BTreeMap::new();
    for rec in &manifest.records {
        let group = match group_key {
            GroupKey::SlideId => rec.slide_id.clone(),
            GroupKey::None => rec.patch_id.clone(),
        };
        let stratum = stratum_of(rec, strat_key)?;
        let entry = groups.entry(group).or_default();
        entry.0.push(&rec.patch_id);
        *entry.1.entry(stratum.clone()).or_default() += 1;
        *global.entry(stratum).or_default() += 1;
    }
    if groups.len() < k {
        return Err(Error::TooFewGroups {
            groups: groups.len(),
            k,
        });
    }

    // rarest stratum first so scarce labels are spread deliberately
    let rarest = global
        .iter()
        .min_by_key(|(name, count)| (*count, name.as_str()))
        .map(|(name, _)| name.clone())
        .expect("nonempty manifest");

    let mut order: Vec<&String> = groups.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by_key(|name| {
        let (ids, counts) = &groups[*name];
        (
            std::cmp::Reverse(counts.get(&rarest).copied().unwrap_or(0)),
            std::cmp::Reverse(ids.len()),
        )
    });

    // per-fold stratum targets assume equal shares
    let strata_names: Vec<&String> = global.keys().collect();
    let targets: BTreeMap<&str, f64> = global
        .iter()
        .map(|(name, &count)| (name.as_str(), count as f64 / k as f64))
        .collect();
    let mut fold_counts: Vec<BTreeMap<&str, f64>> = vec![
        strata_names
            .iter()
            .map(|n| (n.as_str(), 0.0))
            .collect();
        k
    ];
    let mut fold_sizes = vec![0usize; k];
    let mut fold_groups: Vec<Vec<&String>> = vec![Vec::new(); k];

    for name in order {
        let (ids, counts) = &groups[name];
        let mut best_fold = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (fi, fc) in fold_counts.iter().enumerate() {
            // how much this group fills the fold's remaining stratum deficit
            let score: f64 = counts
                .iter()
                .map(|(s, &c)| c as f64 * (targets[s.as_str()] - fc[s.as_str()]))
                .sum();
            let better = score > best_score + 1e-12
                || ((score - best_score).abs() <= 1e-12 && fold_sizes[fi] < fold_sizes[best_fold]);
            if better {
                best_fold = fi;
                best_score = score;
            }
        }
        fold_groups[best_fold].push(name);
        fold_sizes[best_fold] += ids.len();
        for (s, &c) in counts {
            *fold_counts[best_fold].get_mut(s.as_str()).unwrap() += c as f64;
        }
    }

    let all_ids: Vec<&str> = manifest.records.iter().map(|r| r.patch_id.as_str()).collect();
    let mut folds = Vec::with_capacity(k);
    for fg in &fold_groups {
        let val: HashSet<&str> = fg
            .iter()
            .flat_map(|g| groups[*g].0.iter().copied())
            .collect();
        if val.is_empty() {
            return Err(Error::EmptySplit(
                "a fold received no validation records".into(),
            ));
        }
        let mut val_ids: Vec<String> = val.iter().map(|s| s.to_string()).collect();
        let mut train_ids: Vec<String> = all_ids
            .iter()
            .filter(|id| !val.contains(**id))
            .map(|s| s.to_string())
            .collect();
        val_ids.sort();
        train_ids.sort();
        folds.push(Fold { train_ids, val_ids });
    }

    Ok(FoldPlan {
        test_ids: Vec::new(),
        folds,
        k,
        strat_key,
        group_key,
        seed,
    })
}

/// Holdout followed by K-fold over the remaining records: the complete
/// split used by a training run.
pub fn plan_splits(
    manifest: &DatasetManifest,
    test_fraction: Option<f64>,
    k: usize,
    strat_key: StratKey,
    group_key: GroupKey,
    seed: u64,
) -> Result<FoldPlan> {
    let (rest, test_ids) = match test_fraction {
        Some(f) => {
            let (train, test) = stratified_holdout(manifest, f, strat_key, seed)?;
            let keep: HashSet<String> = train.into_iter().collect();
            (manifest.subset(&keep), test)
        }
        None => (manifest.clone(), Vec::new()),
    };
    let mut plan = stratified_group_kfold(&rest, k, strat_key, group_key, seed)?;
    plan.test_ids = test_ids;
    plan.validate(manifest)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PatchRecord, Track};
    use proptest::prelude::*;
    use std::path::PathBuf;

    /// Build an in-memory manifest without touching the filesystem.
    fn synthetic_manifest(
        slides: usize,
        per_slide: usize,
        track: Track,
        label: impl Fn(usize, usize) -> u8,
    ) -> DatasetManifest {
        let mut records = Vec::new();
        for s in 0..slides {
            for p in 0..per_slide {
                let (centroids, class_label) = match track {
                    Track::Detection => (Some(vec![]), None),
                    Track::Classification => (None, Some(label(s, p))),
                };
                records.push(PatchRecord {
                    patch_id: format!("s{s:02}_p{p:03}"),
                    slide_id: format!("slide{s:02}"),
                    domain_id: (s % 4) as u8,
                    mpp: 0.25,
                    image_path: PathBuf::from("unused.png"),
                    centroids,
                    class_label,
                });
            }
        }
        DatasetManifest {
            track,
            schema_version: 1,
            records,
        }
    }

    #[test]
    fn holdout_hits_global_target_with_balanced_strata() {
        // 100 records over 4 equal domains at 10% -> exactly 10 test ids,
        // 2 or 3 from each domain
        let m = synthetic_manifest(100, 1, Track::Detection, |_, _| 0);
        let (train, test) = stratified_holdout(&m, 0.1, StratKey::TissueDomain, 3).unwrap();
        assert_eq!(test.len(), 10);
        assert_eq!(train.len(), 90);
        let mut per_domain = [0usize; 4];
        for id in &test {
            let rec = m.record(id).unwrap();
            per_domain[rec.domain_id as usize] += 1;
        }
        for count in per_domain {
            assert!((2..=3).contains(&count), "per-domain counts {per_domain:?}");
        }
    }

    #[test]
    fn holdout_takes_one_from_a_small_single_stratum() {
        let m = synthetic_manifest(10, 1, Track::Detection, |_, _| 0);
        // make all records one domain
        let mut m = m;
        for r in &mut m.records {
            r.domain_id = 0;
        }
        let (_, test) = stratified_holdout(&m, 0.1, StratKey::TissueDomain, 1).unwrap();
        assert_eq!(test.len(), 1);
    }

    #[test]
    fn holdout_is_deterministic_per_seed() {
        let m = synthetic_manifest(40, 2, Track::Detection, |_, _| 0);
        let a = stratified_holdout(&m, 0.2, StratKey::TissueDomain, 9).unwrap();
        let b = stratified_holdout(&m, 0.2, StratKey::TissueDomain, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn holdout_rejects_undersized_strata_and_bad_fractions() {
        let mut m = synthetic_manifest(9, 1, Track::Detection, |_, _| 0);
        m.records[8].domain_id = 7; // lone record in its own stratum
        assert!(matches!(
            stratified_holdout(&m, 0.2, StratKey::TissueDomain, 0),
            Err(Error::StratumTooSmall { .. })
        ));
        let ok = synthetic_manifest(8, 1, Track::Detection, |_, _| 0);
        assert!(stratified_holdout(&ok, 0.5, StratKey::TissueDomain, 0).is_err());
        assert!(stratified_holdout(&ok, 0.0, StratKey::TissueDomain, 0).is_err());
    }

    #[test]
    fn kfold_places_each_slide_in_exactly_one_val_set() {
        let m = synthetic_manifest(10, 4, Track::Classification, |s, _| (s % 3 == 0) as u8);
        let plan =
            stratified_group_kfold(&m, 5, StratKey::ClassLabel, GroupKey::SlideId, 11).unwrap();
        plan.validate(&m).unwrap();
        let mut val_slides_seen = std::collections::HashSet::new();
        for fold in &plan.folds {
            let slides: std::collections::HashSet<&str> = fold
                .val_ids
                .iter()
                .map(|id| m.record(id).unwrap().slide_id.as_str())
                .collect();
            for s in slides {
                assert!(val_slides_seen.insert(s.to_string()), "slide {s} repeated");
            }
        }
        assert_eq!(val_slides_seen.len(), 10);
    }

    #[test]
    fn kfold_balances_minority_label_within_tolerance() {
        // 20 slides x 5 records with per-slide atypical counts between 0 and
        // 3, summing to 30 -> global rate 0.3
        const COUNTS: [usize; 20] = [3, 3, 3, 3, 2, 2, 2, 2, 2, 2, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        let m = synthetic_manifest(20, 5, Track::Classification, |s, p| (p < COUNTS[s]) as u8);
        let global = 0.3;
        let plan =
            stratified_group_kfold(&m, 5, StratKey::ClassLabel, GroupKey::SlideId, 5).unwrap();
        plan.validate(&m).unwrap();
        for (fi, fold) in plan.folds.iter().enumerate() {
            let pos = fold
                .val_ids
                .iter()
                .filter(|id| m.record(id).unwrap().class_label == Some(1))
                .count() as f64;
            let rate = pos / fold.val_ids.len() as f64;
            assert!(
                (rate - global).abs() <= 0.15,
                "fold {fi} val atypical rate {rate}"
            );
        }
    }

    #[test]
    fn kfold_needs_enough_groups() {
        let m = synthetic_manifest(3, 4, Track::Classification, |_, _| 0);
        assert!(matches!(
            stratified_group_kfold(&m, 5, StratKey::ClassLabel, GroupKey::SlideId, 0),
            Err(Error::TooFewGroups { groups: 3, k: 5 })
        ));
    }

    #[test]
    fn kfold_is_deterministic_per_seed() {
        let m = synthetic_manifest(12, 3, Track::Classification, |s, _| (s % 2) as u8);
        let a = stratified_group_kfold(&m, 4, StratKey::ClassLabel, GroupKey::SlideId, 2).unwrap();
        let b = stratified_group_kfold(&m, 4, StratKey::ClassLabel, GroupKey::SlideId, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ungrouped_kfold_partitions_records() {
        let m = synthetic_manifest(6, 5, Track::Detection, |_, _| 0);
        let plan =
            stratified_group_kfold(&m, 5, StratKey::TissueDomain, GroupKey::None, 4).unwrap();
        plan.validate(&m).unwrap();
        let total: usize = plan.folds.iter().map(|f| f.val_ids.len()).sum();
        assert_eq!(total, 30);
    }

    #[test]
    fn full_plan_with_holdout_validates_and_round_trips() {
        let m = synthetic_manifest(15, 4, Track::Classification, |s, _| (s % 3 == 0) as u8);
        let plan = plan_splits(
            &m,
            Some(0.1),
            5,
            StratKey::ClassLabel,
            GroupKey::SlideId,
            21,
        )
        .unwrap();
        assert!(!plan.test_ids.is_empty());
        plan.validate(&m).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        plan.save(&path).unwrap();
        let back = FoldPlan::load(&path).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn validate_catches_corrupted_plans() {
        let m = synthetic_manifest(10, 2, Track::Classification, |s, _| (s % 2) as u8);
        let good =
            stratified_group_kfold(&m, 5, StratKey::ClassLabel, GroupKey::SlideId, 0).unwrap();

        let mut leaked = good.clone();
        let stolen = leaked.folds[0].val_ids.pop().unwrap();
        leaked.folds[0].train_ids.push(stolen);
        assert!(leaked.validate(&m).is_err(), "slide leakage must be caught");

        let mut missing = good.clone();
        missing.folds[1].val_ids.pop();
        assert!(missing.validate(&m).is_err(), "coverage gap must be caught");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn kfold_partition_property(
            slides in 5usize..12,
            per_slide in 1usize..5,
            k in 2usize..5,
            seed in 0u64..1000,
            atypical_mod in 2usize..4,
        ) {
            prop_assume!(slides >= k);
            let m = synthetic_manifest(slides, per_slide, Track::Classification,
                |s, _| (s % atypical_mod == 0) as u8);
            let plan = stratified_group_kfold(&m, k, StratKey::ClassLabel, GroupKey::SlideId, seed).unwrap();
            prop_assert!(plan.validate(&m).is_ok());
        }
    }
}
