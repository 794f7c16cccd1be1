//! Split protocols: grouped in-domain splits, leave-one-out over manipulation
//! tags, and the per-class val-test carve-out.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;

/// Disjoint id lists. Leave-one-out plans park the non-held-out fakes of the
/// base test partition in `excluded`, so every plan still partitions the
/// manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub name: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub val_test: Vec<String>,
    pub held_out_tags: BTreeSet<String>,
    #[serde(default)]
    pub excluded: Vec<String>,
}

impl SplitPlan {
    pub fn parts(&self) -> [(&'static str, &Vec<String>); 5] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
            ("val_test", &self.val_test),
            ("excluded", &self.excluded),
        ]
    }

    /// Test ids for final reporting: the val-test subset is added back.
    pub fn reporting_test(&self) -> Vec<String> {
        self.test.iter().chain(&self.val_test).cloned().collect()
    }

    /// Checks that the parts are disjoint and together cover `manifest`
    /// exactly, and that no held-out tag leaks into train or val.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (part, ids) in self.parts() {
            for id in ids {
                if manifest.get(id).is_none() {
                    return Err(Error::Split(format!("{}: unknown id {id} in {part}", self.name)));
                }
                if let Some(prev) = seen.insert(id.as_str(), part) {
                    return Err(Error::Split(format!(
                        "{}: id {id} in both {prev} and {part}",
                        self.name
                    )));
                }
            }
        }
        if seen.len() != manifest.samples.len() {
            return Err(Error::Split(format!(
                "{}: plan covers {} of {} samples",
                self.name,
                seen.len(),
                manifest.samples.len()
            )));
        }
        for id in self.train.iter().chain(&self.val) {
            let s = manifest.get(id).expect("checked above");
            if s.has_any_tag(&self.held_out_tags) {
                return Err(Error::Split(format!(
                    "{}: held-out sample {id} in train/val",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Named group of manipulation tags to hold out together.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagGroup {
    pub name: String,
    pub tags: BTreeSet<String>,
}

impl TagGroup {
    pub fn single(tag: &str) -> Self {
        Self {
            name: tag.to_string(),
            tags: BTreeSet::from([tag.to_string()]),
        }
    }
}

/// Whole-group counts per part: `round(ratio * groups)`, repaired so they sum
/// to `groups` and every part with a positive ratio gets at least one group.
fn allocate(ratios: &[f64], groups: usize) -> Result<Vec<usize>> {
    let wanted = ratios.iter().filter(|&&r| r > 0.0).count();
    if groups < wanted {
        return Err(Error::Split(format!(
            "{groups} groups cannot fill {wanted} parts"
        )));
    }
    let mut counts: Vec<usize> = ratios
        .iter()
        .map(|r| (r * groups as f64).round() as usize)
        .collect();
    let largest = |c: &[usize]| (0..c.len()).max_by_key(|&i| (c[i], usize::MAX - i)).unwrap();
    while counts.iter().sum::<usize>() > groups {
        let i = largest(&counts);
        counts[i] -= 1;
    }
    while counts.iter().sum::<usize>() < groups {
        let i = (0..ratios.len())
            .max_by(|&a, &b| ratios[a].total_cmp(&ratios[b]).then(b.cmp(&a)))
            .unwrap();
        counts[i] += 1;
    }
    for i in 0..ratios.len() {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let j = largest(&counts);
            counts[j] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Train/val/test split over whole `group_key` groups.
pub fn make_in_domain_split(
    manifest: &DatasetManifest,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitPlan> {
    if manifest.samples.is_empty() {
        return Err(Error::Split("empty manifest".into()));
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for s in &manifest.samples {
        groups.entry(s.group_key.as_str()).or_default().push(s.id.clone());
    }
    let mut keys: Vec<&str> = groups.keys().copied().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = allocate(&ratios, keys.len())?;

    let mut parts: [Vec<String>; 3] = Default::default();
    let mut it = keys.into_iter();
    for (part, &n) in parts.iter_mut().zip(&counts) {
        for key in it.by_ref().take(n) {
            part.extend(groups[key].iter().cloned());
        }
    }
    let [train, val, test] = parts;
    Ok(SplitPlan {
        name: "in_domain".into(),
        train,
        val,
        test,
        val_test: Vec::new(),
        held_out_tags: BTreeSet::new(),
        excluded: Vec::new(),
    })
}

/// One plan per tag group: train/val drop every sample carrying a held-out
/// tag; test holds all held-out fakes plus the reals of the base test
/// partition.
pub fn make_leave_one_out_splits(
    manifest: &DatasetManifest,
    base: &SplitPlan,
    tag_groups: &[TagGroup],
) -> Result<Vec<SplitPlan>> {
    let present = manifest.all_tags();
    let mut plans = Vec::with_capacity(tag_groups.len());
    for group in tag_groups {
        if let Some(t) = group.tags.iter().find(|t| !present.contains(*t)) {
            return Err(Error::Split(format!("tag {t} does not occur in the manifest")));
        }
        let keep = |ids: &[String]| -> Vec<String> {
            ids.iter()
                .filter(|id| !manifest.get(id).is_some_and(|s| s.has_any_tag(&group.tags)))
                .cloned()
                .collect()
        };
        let train = keep(&base.train);
        let val = keep(&base.val);
        let has_fake = train
            .iter()
            .any(|id| manifest.get(id).is_some_and(|s| s.is_fake()));
        if !has_fake {
            return Err(Error::Split(format!(
                "holding out {} leaves no fakes to train on",
                group.name
            )));
        }
        let base_test: BTreeSet<&str> = base
            .test
            .iter()
            .chain(&base.val_test)
            .map(String::as_str)
            .collect();
        let mut test = Vec::new();
        let mut excluded = Vec::new();
        for s in &manifest.samples {
            if s.has_any_tag(&group.tags) {
                test.push(s.id.clone());
            } else if base_test.contains(s.id.as_str()) {
                if s.is_fake() {
                    excluded.push(s.id.clone());
                } else {
                    test.push(s.id.clone());
                }
            }
        }
        excluded.extend(base.excluded.iter().cloned());
        let plan = SplitPlan {
            name: format!("loo_{}", group.name),
            train,
            val,
            test,
            val_test: Vec::new(),
            held_out_tags: group.tags.clone(),
            excluded,
        };
        plans.push(plan);
    }
    Ok(plans)
}

/// `floor(x + 1/2)` with a small guard against representation error just
/// below a half.
fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

/// Per-class subsample of `round_half_up(fraction * class size)` ids.
/// Returns `(val_test, remaining)`, each in input order.
pub fn make_val_test_split(
    test: &[(String, u8)],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    for class in [0u8, 1] {
        let members: Vec<usize> = (0..test.len()).filter(|&i| test[i].1 == class).collect();
        if members.is_empty() {
            return Err(Error::Split(format!("class {class} is empty")));
        }
        let k = round_half_up(fraction * members.len() as f64).min(members.len());
        for j in sample(&mut rng, members.len(), k) {
            chosen.insert(members[j]);
        }
    }
    let mut val_test = Vec::new();
    let mut remaining = Vec::new();
    for (i, (id, _)) in test.iter().enumerate() {
        if chosen.contains(&i) {
            val_test.push(id.clone());
        } else {
            remaining.push(id.clone());
        }
    }
    Ok((val_test, remaining))
}

/// Moves a val-test subset out of `plan.test`.
pub fn with_val_test(
    mut plan: SplitPlan,
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    let labeled: Vec<(String, u8)> = plan
        .reporting_test()
        .into_iter()
        .map(|id| {
            let label = manifest
                .get(&id)
                .map(|s| s.label)
                .ok_or_else(|| Error::Split(format!("unknown id {id}")))?;
            Ok((id, label))
        })
        .collect::<Result<_>>()?;
    let (val_test, rest) = make_val_test_split(&labeled, fraction, seed)?;
    plan.val_test = val_test;
    plan.test = rest;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Sample;
    use proptest::prelude::*;

    fn manifest_from(specs: &[(&str, &[&str], &str)]) -> DatasetManifest {
        let samples = specs
            .iter()
            .map(|(id, tags, group)| {
                let fake = !tags.is_empty();
                Sample {
                    id: id.to_string(),
                    label: fake as u8,
                    video_fake: fake,
                    audio_fake: false,
                    manipulation_tags: tags.iter().map(|t| t.to_string()).collect(),
                    group_key: group.to_string(),
                    video_path: format!("{id}.v").into(),
                    audio_path: format!("{id}.a").into(),
                }
            })
            .collect();
        DatasetManifest::new(samples)
    }

    fn singleton_manifest(n: usize, tags: &[&str]) -> DatasetManifest {
        let ids: Vec<String> = (0..n).map(|i| format!("x{i:03}")).collect();
        let specs: Vec<(&str, &[&str], &str)> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let t: &[&str] = if i % 2 == 0 {
                    &[]
                } else {
                    std::slice::from_ref(&tags[(i / 2) % tags.len()])
                };
                (id.as_str(), t, id.as_str())
            })
            .collect();
        manifest_from(&specs)
    }

    #[test]
    fn in_domain_sizes_and_determinism() {
        let m = singleton_manifest(100, &["A", "B"]);
        let p = make_in_domain_split(&m, [0.6, 0.1, 0.3], 7).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (60, 10, 30));
        assert_eq!(p, make_in_domain_split(&m, [0.6, 0.1, 0.3], 7).unwrap());
        assert_ne!(p, make_in_domain_split(&m, [0.6, 0.1, 0.3], 8).unwrap());
        p.validate(&m).unwrap();
    }

    #[test]
    fn in_domain_keeps_groups_together() {
        let m = manifest_from(&[
            ("a1", &[], "g1"),
            ("a2", &["A"], "g1"),
            ("b1", &[], "g2"),
            ("c1", &["A"], "g3"),
            ("c2", &[], "g3"),
            ("d1", &[], "g4"),
        ]);
        let p = make_in_domain_split(&m, [0.5, 0.25, 0.25], 1).unwrap();
        p.validate(&m).unwrap();
        for (_, ids) in p.parts() {
            let has = |x: &str| ids.iter().any(|i| i == x);
            assert_eq!(has("a1"), has("a2"));
            assert_eq!(has("c1"), has("c2"));
        }
    }

    #[test]
    fn single_group_is_an_error() {
        let m = manifest_from(&[("a", &[], "g"), ("b", &["A"], "g"), ("c", &[], "g")]);
        assert!(make_in_domain_split(&m, [0.6, 0.1, 0.3], 0).is_err());
        assert!(make_in_domain_split(&m, [0.6, 0.1, 0.2], 0).is_err());
    }

    #[test]
    fn leave_one_out_rules() {
        let m = singleton_manifest(60, &["A", "B"]);
        let base = make_in_domain_split(&m, [0.6, 0.1, 0.3], 3).unwrap();
        let plans = make_leave_one_out_splits(&m, &base, &[TagGroup::single("A")]).unwrap();
        let p = &plans[0];
        p.validate(&m).unwrap();
        let tagged = |id: &String| m.get(id).unwrap().manipulation_tags.contains("A");
        assert!(!p.train.iter().chain(&p.val).any(tagged));
        let a_count = m.samples.iter().filter(|s| s.manipulation_tags.contains("A")).count();
        let test_fakes: Vec<_> = p.test.iter().filter(|id| m.get(id).unwrap().is_fake()).collect();
        assert_eq!(test_fakes.len(), a_count);
        assert!(test_fakes.iter().all(|id| tagged(id)));
        let base_reals = base.test.iter().filter(|id| !m.get(id).unwrap().is_fake()).count();
        assert_eq!(p.test.len(), a_count + base_reals);
    }

    #[test]
    fn holding_out_every_tag_is_an_error() {
        let m = singleton_manifest(20, &["A", "B"]);
        let base = make_in_domain_split(&m, [0.6, 0.1, 0.3], 3).unwrap();
        let all = TagGroup {
            name: "AB".into(),
            tags: BTreeSet::from(["A".to_string(), "B".to_string()]),
        };
        assert!(make_leave_one_out_splits(&m, &base, &[all]).is_err());
        assert!(make_leave_one_out_splits(&m, &base, &[TagGroup::single("Z")]).is_err());
    }

    #[test]
    fn val_test_sizes() {
        let mut ids: Vec<(String, u8)> = (0..150).map(|i| (format!("r{i}"), 0)).collect();
        ids.extend((0..929).map(|i| (format!("f{i}"), 1)));
        let (vt, rest) = make_val_test_split(&ids, 0.2, 5).unwrap();
        let real = vt.iter().filter(|id| id.starts_with('r')).count();
        assert_eq!((real, vt.len() - real), (30, 186));
        assert_eq!(rest.len(), 1079 - 216);
        assert_eq!(make_val_test_split(&ids, 0.2, 5).unwrap().0, vt);

        let small: Vec<(String, u8)> = (0..20).map(|i| (format!("s{i}"), (i % 2) as u8)).collect();
        let (vt, _) = make_val_test_split(&small, 0.2, 0).unwrap();
        assert_eq!(vt.len(), 4);
        assert!(make_val_test_split(&small[..1], 0.2, 0).is_err());
        assert!(make_val_test_split(&small, 1.0, 0).is_err());
    }

    #[test]
    fn round_half_up_examples() {
        assert_eq!(round_half_up(0.2 * 150.0), 30);
        assert_eq!(round_half_up(0.2 * 929.0), 186);
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(0.3 * 5.0), 2);
        assert_eq!(round_half_up(2.4999), 2);
    }

    #[test]
    fn reunited_test_restores_the_partition() {
        let m = singleton_manifest(40, &["A", "B"]);
        let base = make_in_domain_split(&m, [0.5, 0.2, 0.3], 1).unwrap();
        let p = with_val_test(base.clone(), &m, 0.2, 9).unwrap();
        p.validate(&m).unwrap();
        assert!(!p.val_test.is_empty());
        let mut a = p.reporting_test();
        let mut b = base.test.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn random_manifests_partition_and_exclude(
            n in 12usize..80,
            tag_draws in prop::collection::vec(0usize..4, 80),
            group_draws in prop::collection::vec(0usize..30, 80),
            seed in any::<u64>(),
        ) {
            let tags = ["A", "B", "C"];
            let ids: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
            let groups: Vec<String> = (0..n).map(|i| format!("g{}", group_draws[i])).collect();
            let specs: Vec<(&str, &[&str], &str)> = (0..n)
                .map(|i| {
                    let t: &[&str] = match tag_draws[i] {
                        0 => &[],
                        k => std::slice::from_ref(&tags[k - 1]),
                    };
                    (ids[i].as_str(), t, groups[i].as_str())
                })
                .collect();
            let m = manifest_from(&specs);
            let Ok(base) = make_in_domain_split(&m, [0.6, 0.1, 0.3], seed) else {
                return Ok(());
            };
            base.validate(&m).unwrap();
            for tag in m.all_tags() {
                if let Ok(plans) = make_leave_one_out_splits(&m, &base, &[TagGroup::single(&tag)]) {
                    prop_assert!(plans[0].validate(&m).is_ok());
                }
            }
        }
    }
}
