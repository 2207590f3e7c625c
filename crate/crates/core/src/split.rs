//! Train/validation/test assignment.
//!
//! Three ways to carve a fine-tuning split (group holdout, the leaky pooled
//! frame sample, and its group-respecting correction), seeded k-fold plans,
//! and an auditor that reports any group spanning more than one partition
//! and any test item whose group fed an upstream training stage.
//!
//! Every splitter first reserves test groups with the same routine, so two
//! splitters called with the same dataset, `test_fraction` and seed reserve
//! the same test groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::GroupedDataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
    Excluded,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
            Partition::Excluded => "excluded",
        })
    }
}

/// A two-part ratio such as `3:1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio(pub u32, pub u32);

impl Ratio {
    pub const FOUR_TO_ONE: Ratio = Ratio(4, 1);
    pub const THREE_TO_ONE: Ratio = Ratio(3, 1);

    fn validate(self) -> Result<()> {
        if self.0 == 0 || self.1 == 0 {
            return Err(Error::Config(format!("ratio {}:{} must be positive", self.0, self.1)));
        }
        Ok(())
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.0, self.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub protocol_tag: String,
    pub seed: u64,
    pub assignment: BTreeMap<String, Partition>,
}

impl SplitPlan {
    fn from_labels(dataset: &GroupedDataset, labels: &[Partition], tag: String, seed: u64) -> Self {
        let assignment = dataset
            .items()
            .iter()
            .zip(labels)
            .map(|(item, &p)| (item.item_id.clone(), p))
            .collect();
        Self {
            protocol_tag: tag,
            seed,
            assignment,
        }
    }

    /// Partition labels in dataset item order. Fails unless the plan covers
    /// exactly the dataset's items.
    pub fn aligned(&self, dataset: &GroupedDataset) -> Result<Vec<Partition>> {
        if self.assignment.len() != dataset.len() {
            return Err(Error::Data(format!(
                "plan assigns {} items, dataset has {}",
                self.assignment.len(),
                dataset.len()
            )));
        }
        dataset
            .items()
            .iter()
            .map(|item| {
                self.assignment
                    .get(&item.item_id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("plan has no entry for {}", item.item_id)))
            })
            .collect()
    }

    pub fn count(&self, partition: Partition) -> usize {
        self.assignment.values().filter(|&&p| p == partition).count()
    }
}

/// Item indices assigned to `partition`, in dataset order.
pub fn items_in(labels: &[Partition], partition: Partition) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &p)| p == partition)
        .map(|(i, _)| i)
        .collect()
}

/// Group indices with at least one item in any of `partitions`.
pub fn groups_in(dataset: &GroupedDataset, labels: &[Partition], partitions: &[Partition]) -> Vec<usize> {
    let mut out: Vec<usize> = dataset
        .groups()
        .iter()
        .enumerate()
        .filter(|(_, g)| g.items.iter().any(|&i| partitions.contains(&labels[i])))
        .map(|(gi, _)| gi)
        .collect();
    out.sort_unstable();
    out
}

/// Group ids of every group that contributed a training or validation item.
pub fn trained_groups(dataset: &GroupedDataset, labels: &[Partition]) -> BTreeSet<String> {
    groups_in(dataset, labels, &[Partition::Train, Partition::Validation])
        .into_iter()
        .map(|g| dataset.groups()[g].id.clone())
        .collect()
}

// ---------------------------------------------------------------------------
// Quotas
// ---------------------------------------------------------------------------

/// Largest-remainder apportionment of `total` over `weights`. Ties between
/// equal remainders go to the partition that comes first in a seeded
/// permutation.
pub fn largest_remainder(total: usize, weights: &[f64], rng: &mut seed::Rng) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut tiebreak: Vec<usize> = (0..weights.len()).collect();
    tiebreak.shuffle(rng);
    let mut rank = vec![0; weights.len()];
    for (r, &i) in tiebreak.iter().enumerate() {
        rank[i] = r;
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(rank[a].cmp(&rank[b]))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Moves one unit from the largest bucket into every empty one.
fn ensure_nonempty(counts: &mut [usize]) {
    for i in 0..counts.len() {
        if counts[i] == 0 {
            let (donor, _) = counts
                .iter()
                .enumerate()
                .max_by_key(|&(j, &c)| (c, usize::MAX - j))
                .expect("non-empty counts");
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[i] = 1;
            }
        }
    }
}

fn check_fraction(name: &str, value: f64, allow_one: bool) -> Result<()> {
    let ok = value > 0.0 && (value < 1.0 || (allow_one && value == 1.0));
    if !ok {
        let range = if allow_one { "(0, 1]" } else { "(0, 1)" };
        return Err(Error::Config(format!("{name} = {value} must lie in {range}")));
    }
    Ok(())
}

struct Reservation {
    test: Vec<usize>,
    rest: Vec<usize>,
}

/// Shuffles groups and reserves the leading `test_fraction` of them.
fn reserve_test_groups(
    dataset: &GroupedDataset,
    test_fraction: f64,
    min_partitions: usize,
    rng: &mut seed::Rng,
) -> Result<Reservation> {
    check_fraction("test_fraction", test_fraction, false)?;
    let n = dataset.n_groups();
    if n < min_partitions {
        return Err(Error::Data(format!(
            "{n} groups cannot fill {min_partitions} partitions"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut counts = largest_remainder(n, &[test_fraction, 1.0 - test_fraction], rng);
    ensure_nonempty(&mut counts);
    let rest = order.split_off(counts[0]);
    Ok(Reservation { test: order, rest })
}

fn label_groups(dataset: &GroupedDataset, labels: &mut [Partition], groups: &[usize], p: Partition) {
    for &g in groups {
        for &i in &dataset.groups()[g].items {
            labels[i] = p;
        }
    }
}

// ---------------------------------------------------------------------------
// Splitters
// ---------------------------------------------------------------------------

/// Whole groups go to train, validation or test.
pub fn split_holdout_by_group(
    dataset: &GroupedDataset,
    test_fraction: f64,
    trainval: Ratio,
    seed: u64,
) -> Result<SplitPlan> {
    trainval.validate()?;
    let mut rng = seed::rng(seed);
    let res = reserve_test_groups(dataset, test_fraction, 3, &mut rng)?;
    let mut counts = largest_remainder(
        res.rest.len(),
        &[trainval.0 as f64, trainval.1 as f64],
        &mut rng,
    );
    ensure_nonempty(&mut counts);
    let mut labels = vec![Partition::Excluded; dataset.len()];
    label_groups(dataset, &mut labels, &res.test, Partition::Test);
    label_groups(dataset, &mut labels, &res.rest[..counts[0]], Partition::Train);
    label_groups(dataset, &mut labels, &res.rest[counts[0]..], Partition::Validation);
    let tag = format!("holdout_by_group(test={test_fraction},ratio={trainval})");
    Ok(SplitPlan::from_labels(dataset, &labels, tag, seed))
}

fn frame_pool_size(n: usize, frame_fraction: f64) -> usize {
    ((n as f64 * frame_fraction).round() as usize).clamp(1, n.max(1))
}

/// Reserves test groups, pools a random `frame_fraction` of all remaining
/// items and splits that pool item-wise into train and validation. Frames
/// of one group land on both sides; unsampled items are excluded.
pub fn split_leaky_frame_pool(
    dataset: &GroupedDataset,
    test_fraction: f64,
    frame_fraction: f64,
    train_val: Ratio,
    seed: u64,
) -> Result<SplitPlan> {
    train_val.validate()?;
    check_fraction("frame_fraction", frame_fraction, true)?;
    let mut rng = seed::rng(seed);
    let res = reserve_test_groups(dataset, test_fraction, 2, &mut rng)?;
    let mut labels = vec![Partition::Excluded; dataset.len()];
    label_groups(dataset, &mut labels, &res.test, Partition::Test);

    let mut remaining: Vec<usize> = res
        .rest
        .iter()
        .flat_map(|&g| dataset.groups()[g].items.iter().copied())
        .collect();
    remaining.sort_unstable();
    if remaining.is_empty() {
        return Err(Error::Data("pooled frame set is empty".into()));
    }
    remaining.shuffle(&mut rng);
    let pool = &remaining[..frame_pool_size(remaining.len(), frame_fraction)];
    let mut counts = largest_remainder(pool.len(), &[train_val.0 as f64, train_val.1 as f64], &mut rng);
    ensure_nonempty(&mut counts);
    for &i in &pool[..counts[0]] {
        labels[i] = Partition::Train;
    }
    for &i in &pool[counts[0]..] {
        labels[i] = Partition::Validation;
    }
    let tag = format!(
        "leaky_frame_pool(test={test_fraction},frames={frame_fraction},ratio={train_val})"
    );
    Ok(SplitPlan::from_labels(dataset, &labels, tag, seed))
}

/// Reserves test groups, samples `frame_fraction` of the items inside each
/// remaining group, then assigns whole groups to train or validation.
pub fn split_clean_frame_sample(
    dataset: &GroupedDataset,
    test_fraction: f64,
    frame_fraction: f64,
    train_val: Ratio,
    seed: u64,
) -> Result<SplitPlan> {
    train_val.validate()?;
    check_fraction("frame_fraction", frame_fraction, true)?;
    let mut rng = seed::rng(seed);
    let res = reserve_test_groups(dataset, test_fraction, 3, &mut rng)?;
    let mut labels = vec![Partition::Excluded; dataset.len()];
    label_groups(dataset, &mut labels, &res.test, Partition::Test);

    let mut counts = largest_remainder(
        res.rest.len(),
        &[train_val.0 as f64, train_val.1 as f64],
        &mut rng,
    );
    ensure_nonempty(&mut counts);
    for (pos, &g) in res.rest.iter().enumerate() {
        let target = if pos < counts[0] {
            Partition::Train
        } else {
            Partition::Validation
        };
        let mut members = dataset.groups()[g].items.clone();
        members.shuffle(&mut rng);
        let take = frame_pool_size(members.len(), frame_fraction);
        for &i in &members[..take] {
            labels[i] = target;
        }
    }
    let tag = format!(
        "clean_frame_sample(test={test_fraction},frames={frame_fraction},ratio={train_val})"
    );
    Ok(SplitPlan::from_labels(dataset, &labels, tag, seed))
}

/// `k * replicates` plans. Within a replicate, the k test folds partition the
/// dataset; every non-test item is train. `grouped` folds over whole groups,
/// otherwise over individual items.
pub fn make_kfold_plans(
    dataset: &GroupedDataset,
    k: usize,
    replicates: usize,
    grouped: bool,
    seed: u64,
) -> Result<Vec<SplitPlan>> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k} must be at least 2")));
    }
    if replicates == 0 {
        return Err(Error::Config("replicates must be positive".into()));
    }
    let population = if grouped { dataset.n_groups() } else { dataset.len() };
    if k > population {
        return Err(Error::Data(format!("k = {k} exceeds population {population}")));
    }
    let mut plans = Vec::with_capacity(k * replicates);
    for rep in 0..replicates {
        let mut rng = seed::rng(seed::derive(seed, "kfold", rep as u64));
        let mut units: Vec<usize> = (0..population).collect();
        units.shuffle(&mut rng);
        let mut fold_of_unit = vec![0usize; population];
        for (pos, &u) in units.iter().enumerate() {
            fold_of_unit[u] = pos % k;
        }
        for fold in 0..k {
            let labels: Vec<Partition> = (0..dataset.len())
                .map(|i| {
                    let unit = if grouped { dataset.group_of(i) } else { i };
                    if fold_of_unit[unit] == fold {
                        Partition::Test
                    } else {
                        Partition::Train
                    }
                })
                .collect();
            let tag = format!("kfold(k={k},grouped={grouped},replicate={rep},fold={fold})");
            plans.push(SplitPlan::from_labels(dataset, &labels, tag, seed));
        }
    }
    Ok(plans)
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Clean,
    GroupLeak,
    TaintedTest,
    Both,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Clean => "clean",
            Verdict::GroupLeak => "group-leak",
            Verdict::TaintedTest => "tainted-test",
            Verdict::Both => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakyGroup {
    pub group_id: String,
    pub partitions: BTreeSet<Partition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub leaky_groups: Vec<LeakyGroup>,
    pub n_tainted_test_items: usize,
    pub verdict: Verdict,
}

/// Reports groups whose non-excluded items span several partitions, and test
/// items whose group appears in `finetune_groups`.
pub fn audit_plan(
    plan: &SplitPlan,
    dataset: &GroupedDataset,
    finetune_groups: Option<&BTreeSet<String>>,
) -> Result<AuditReport> {
    let labels = plan.aligned(dataset)?;
    Ok(audit_labels(&labels, dataset, finetune_groups))
}

pub(crate) fn audit_labels(
    labels: &[Partition],
    dataset: &GroupedDataset,
    finetune_groups: Option<&BTreeSet<String>>,
) -> AuditReport {
    let mut leaky_groups = Vec::new();
    let mut n_tainted_test_items = 0;
    for group in dataset.groups() {
        let partitions: BTreeSet<Partition> = group
            .items
            .iter()
            .map(|&i| labels[i])
            .filter(|&p| p != Partition::Excluded)
            .collect();
        if let Some(ft) = finetune_groups {
            if ft.contains(&group.id) {
                n_tainted_test_items += group.items.iter().filter(|&&i| labels[i] == Partition::Test).count();
            }
        }
        if partitions.len() > 1 {
            leaky_groups.push(LeakyGroup {
                group_id: group.id.clone(),
                partitions,
            });
        }
    }
    let verdict = match (leaky_groups.is_empty(), n_tainted_test_items == 0) {
        (true, true) => Verdict::Clean,
        (false, true) => Verdict::GroupLeak,
        (true, false) => Verdict::TaintedTest,
        (false, false) => Verdict::Both,
    };
    AuditReport {
        leaky_groups,
        n_tainted_test_items,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};
    use proptest::prelude::*;

    fn dataset(groups: usize, per: usize) -> GroupedDataset {
        generate_synthetic(&SynthConfig::video(groups, per, 2, 11)).unwrap().0
    }

    fn group_counts(ds: &GroupedDataset, plan: &SplitPlan) -> [usize; 3] {
        let labels = plan.aligned(ds).unwrap();
        let mut c = [0; 3];
        for g in ds.groups() {
            match labels[g.items[0]] {
                Partition::Train => c[0] += 1,
                Partition::Validation => c[1] += 1,
                Partition::Test => c[2] += 1,
                Partition::Excluded => {}
            }
        }
        c
    }

    #[test]
    fn largest_remainder_examples() {
        let mut rng = seed::rng(0);
        assert_eq!(largest_remainder(8, &[4.0, 1.0], &mut rng), vec![6, 2]);
        assert_eq!(largest_remainder(10, &[0.2, 0.8], &mut rng), vec![2, 8]);
        assert_eq!(largest_remainder(1200, &[0.2, 0.8], &mut rng), vec![240, 960]);
        let tie = largest_remainder(3, &[1.0, 1.0], &mut rng);
        assert_eq!(tie.iter().sum::<usize>(), 3);
        assert!(tie == vec![2, 1] || tie == vec![1, 2]);
    }

    #[test]
    fn holdout_ten_groups() {
        let ds = dataset(10, 3);
        let plan = split_holdout_by_group(&ds, 0.2, Ratio::FOUR_TO_ONE, 1).unwrap();
        assert_eq!(group_counts(&ds, &plan), [6, 2, 2]);
        assert_eq!(audit_plan(&plan, &ds, None).unwrap().verdict, Verdict::Clean);
    }

    #[test]
    fn holdout_konvid_scale_reserves_240() {
        let ds = dataset(1200, 1);
        let plan = split_holdout_by_group(&ds, 0.2, Ratio::FOUR_TO_ONE, 3).unwrap();
        assert_eq!(group_counts(&ds, &plan), [768, 192, 240]);
    }

    #[test]
    fn too_few_groups() {
        let ds = dataset(2, 3);
        assert!(split_holdout_by_group(&ds, 0.2, Ratio::FOUR_TO_ONE, 1).is_err());
        assert!(split_holdout_by_group(&dataset(5, 1), 1.2, Ratio::FOUR_TO_ONE, 1).is_err());
    }

    #[test]
    fn leaky_pool_counts_at_konvid_scale() {
        let ds = dataset(1200, 30);
        let plan = split_leaky_frame_pool(&ds, 0.2, 0.2, Ratio::THREE_TO_ONE, 5).unwrap();
        assert_eq!(plan.count(Partition::Train), 4320);
        assert_eq!(plan.count(Partition::Validation), 1440);
        assert_eq!(plan.count(Partition::Test), 240 * 30);
        let audit = audit_plan(&plan, &ds, None).unwrap();
        assert_eq!(audit.verdict, Verdict::GroupLeak);
        assert!(!audit.leaky_groups.is_empty());
    }

    #[test]
    fn leaky_pool_degenerates_to_clean_with_singleton_groups() {
        let ds = dataset(50, 1);
        let plan = split_leaky_frame_pool(&ds, 0.2, 1.0, Ratio::THREE_TO_ONE, 2).unwrap();
        assert_eq!(audit_plan(&plan, &ds, None).unwrap().verdict, Verdict::Clean);
        assert_eq!(plan.count(Partition::Excluded), 0);
    }

    #[test]
    fn clean_sample_takes_six_of_thirty() {
        let ds = dataset(20, 30);
        let plan = split_clean_frame_sample(&ds, 0.2, 0.2, Ratio::THREE_TO_ONE, 4).unwrap();
        let labels = plan.aligned(&ds).unwrap();
        for g in ds.groups() {
            let used = g.items.iter().filter(|&&i| labels[i] != Partition::Excluded).count();
            let is_test = labels[g.items[0]] == Partition::Test;
            assert_eq!(used, if is_test { 30 } else { 6 });
        }
        assert_eq!(audit_plan(&plan, &ds, None).unwrap().verdict, Verdict::Clean);
        assert_eq!(plan, split_clean_frame_sample(&ds, 0.2, 0.2, Ratio::THREE_TO_ONE, 4).unwrap());
    }

    #[test]
    fn splitters_share_test_reservation() {
        let ds = dataset(40, 5);
        let test_of = |plan: &SplitPlan| -> BTreeSet<String> {
            plan.assignment
                .iter()
                .filter(|(_, &p)| p == Partition::Test)
                .map(|(k, _)| k.clone())
                .collect()
        };
        let a = split_holdout_by_group(&ds, 0.2, Ratio::THREE_TO_ONE, 9).unwrap();
        let b = split_leaky_frame_pool(&ds, 0.2, 0.2, Ratio::THREE_TO_ONE, 9).unwrap();
        let c = split_clean_frame_sample(&ds, 0.2, 0.2, Ratio::THREE_TO_ONE, 9).unwrap();
        assert_eq!(test_of(&a), test_of(&b));
        assert_eq!(test_of(&a), test_of(&c));
    }

    #[test]
    fn kfold_counts_and_partition() {
        let ds = dataset(23, 4);
        let plans = make_kfold_plans(&ds, 5, 10, false, 1).unwrap();
        assert_eq!(plans.len(), 50);
        for rep in plans.chunks(5) {
            let mut seen = BTreeSet::new();
            for plan in rep {
                for (id, &p) in &plan.assignment {
                    if p == Partition::Test {
                        assert!(seen.insert(id.clone()), "{id} tested twice");
                    }
                }
            }
            assert_eq!(seen.len(), ds.len());
        }
        for plan in make_kfold_plans(&ds, 5, 2, true, 1).unwrap() {
            assert_eq!(audit_plan(&plan, &ds, None).unwrap().verdict, Verdict::Clean);
        }
        assert!(make_kfold_plans(&ds, 24, 1, true, 1).is_err());
        assert!(make_kfold_plans(&ds, 1, 1, true, 1).is_err());
    }

    #[test]
    fn random_folds_after_finetune_reservation_are_mostly_tainted() {
        let ds = dataset(200, 5);
        let ft = split_holdout_by_group(&ds, 0.2, Ratio::FOUR_TO_ONE, 3).unwrap();
        let ft_groups = trained_groups(&ds, &ft.aligned(&ds).unwrap());
        let plans = make_kfold_plans(&ds, 5, 1, false, 8).unwrap();
        let tainted: usize = plans
            .iter()
            .map(|p| audit_plan(p, &ds, Some(&ft_groups)).unwrap().n_tainted_test_items)
            .sum();
        let frac = tainted as f64 / ds.len() as f64;
        assert!((frac - 0.8).abs() < 1e-12, "{frac}");
        let holdout_audit = audit_plan(&ft, &ds, Some(&ft_groups)).unwrap();
        assert_eq!(holdout_audit.verdict, Verdict::Clean);
    }

    #[test]
    fn audit_flags_exactly_injected_violations() {
        let ds = dataset(6, 4);
        let mut plan = split_holdout_by_group(&ds, 0.2, Ratio::FOUR_TO_ONE, 1).unwrap();
        let labels = plan.aligned(&ds).unwrap();
        // move one item of a train group into validation
        let g = ds.groups().iter().find(|g| labels[g.items[0]] == Partition::Train).unwrap();
        let victim = ds.item(g.items[1]).item_id.clone();
        plan.assignment.insert(victim, Partition::Validation);
        let report = audit_plan(&plan, &ds, None).unwrap();
        assert_eq!(report.verdict, Verdict::GroupLeak);
        assert_eq!(report.leaky_groups.len(), 1);
        assert_eq!(report.leaky_groups[0].group_id, g.id);
        // excluded items never count as a partition
        let mut plan2 = split_holdout_by_group(&ds, 0.2, Ratio::FOUR_TO_ONE, 1).unwrap();
        plan2.assignment.insert(ds.item(g.items[2]).item_id.clone(), Partition::Excluded);
        assert_eq!(audit_plan(&plan2, &ds, None).unwrap().verdict, Verdict::Clean);
    }

    #[test]
    fn audit_rejects_mismatched_plan() {
        let ds = dataset(6, 2);
        let mut plan = split_holdout_by_group(&ds, 0.2, Ratio::FOUR_TO_ONE, 1).unwrap();
        plan.assignment.remove(&ds.item(0).item_id);
        assert!(audit_plan(&plan, &ds, None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn group_aware_splitters_keep_groups_whole(seed in any::<u64>(), groups in 5usize..40, per in 1usize..8) {
            let ds = generate_synthetic(&SynthConfig::video(groups, per, 2, seed ^ 1)).unwrap().0;
            let a = split_holdout_by_group(&ds, 0.2, Ratio::FOUR_TO_ONE, seed).unwrap();
            let b = split_clean_frame_sample(&ds, 0.25, 0.5, Ratio::THREE_TO_ONE, seed).unwrap();
            prop_assert_eq!(audit_plan(&a, &ds, None).unwrap().verdict, Verdict::Clean);
            prop_assert_eq!(audit_plan(&b, &ds, None).unwrap().verdict, Verdict::Clean);
            for p in make_kfold_plans(&ds, 3, 1, true, seed).unwrap() {
                prop_assert_eq!(audit_plan(&p, &ds, None).unwrap().verdict, Verdict::Clean);
            }
            prop_assert_eq!(a.assignment.len(), ds.len());
            prop_assert!(a.count(Partition::Train) > 0 && a.count(Partition::Validation) > 0);
            prop_assert_eq!(&a, &split_holdout_by_group(&ds, 0.2, Ratio::FOUR_TO_ONE, seed).unwrap());
        }
    }
}
