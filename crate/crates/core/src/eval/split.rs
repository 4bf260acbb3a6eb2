use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positions into a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Fold {
    /// True when the three sets are pairwise disjoint.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.train.iter().chain(&self.val).chain(&self.test).all(|i| seen.insert(*i))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Share of the non-test remainder that goes to validation (20 of 90).
const VAL_SHARE_CV: f64 = 2.0 / 9.0;
const VAL_SHARE_LOCO: f64 = 0.22;

fn by_class(labels: &[usize], members: impl Iterator<Item = usize>) -> BTreeMap<usize, Vec<usize>> {
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in members {
        classes.entry(labels[i]).or_default().push(i);
    }
    classes
}

/// Stratified train/val split of `pool`; the val count of each class is
/// rounded.
fn split_train_val(labels: &[usize], pool: &[usize], val_share: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut members) in by_class(labels, pool.iter().copied()) {
        members.sort_unstable();
        members.shuffle(rng);
        let n_val = (members.len() as f64 * val_share).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn fold_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Stratified k-fold plan: each fold tests on about `1/k` of every class and
/// splits the rest into train and validation at 70:20 of the whole.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid("kfold_split", "k must be at least 2"));
    }
    let classes = by_class(labels, 0..labels.len());
    let mut tests = vec![Vec::new(); k];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Round-robin continues across classes so fold sizes differ by at most one.
    let mut next = 0usize;
    for (class, mut members) in classes {
        if members.len() < k {
            return Err(Error::invalid(
                "kfold_split",
                format!("class {class} has {} members, fewer than k = {k}", members.len()),
            ));
        }
        members.shuffle(&mut rng);
        for i in members {
            tests[next % k].push(i);
            next += 1;
        }
    }
    let folds = tests
        .into_iter()
        .enumerate()
        .map(|(f, mut test)| {
            test.sort_unstable();
            let mut in_test = vec![false; labels.len()];
            for &i in &test {
                in_test[i] = true;
            }
            let pool: Vec<usize> = (0..labels.len()).filter(|&i| !in_test[i]).collect();
            let (train, val) = split_train_val(labels, &pool, VAL_SHARE_CV, &mut fold_rng(seed, f));
            Fold { train, val, test }
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// One fold per distinct group, in ascending group order; the rest is split
/// train/val about 78:22, stratified by label.
pub fn loco_split(groups: &[usize], labels: &[usize], seed: u64) -> Result<FoldPlan> {
    if groups.len() != labels.len() {
        return Err(Error::shape("loco_split", &[groups.len()], &[labels.len()]));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::invalid("loco_split", "need at least two groups"));
    }
    let folds = ids
        .iter()
        .enumerate()
        .map(|(f, &g)| {
            let (test, pool): (Vec<usize>, Vec<usize>) = (0..groups.len()).partition(|&i| groups[i] == g);
            let (train, val) = split_train_val(labels, &pool, VAL_SHARE_LOCO, &mut fold_rng(seed, f));
            Fold { train, val, test }
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// A single stratified 70/20/10 split.
pub fn single_split(labels: &[usize], seed: u64) -> Result<FoldPlan> {
    let mut plan = kfold_split(labels, 10, seed)?;
    plan.folds.truncate(1);
    Ok(plan)
}
