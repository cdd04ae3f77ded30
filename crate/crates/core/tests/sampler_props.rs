use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;

use cat_core::cfgen::{sample_counterfactuals, CounterfactualInstance, SamplerConfig};
use cat_core::dataspec::{Dataset, PairedInstance, Part, Split, TaskConfig};

/// Texts come from a tiny vocabulary so duplicates across instances are
/// common.
fn dataset_strategy() -> impl Strategy<Value = (Vec<(String, String, usize)>, usize)> {
    (1usize..=5).prop_flat_map(|k| {
        let row = ("[ab]{0,3}", "[xyz ]{0,4}", 0usize..3);
        (prop::collection::vec(row, (k + 1)..30), Just(k))
    })
}

fn build(rows: &[(String, String, usize)], perm: Option<&[usize]>) -> Dataset {
    let t = TaskConfig::preset("mnli").unwrap();
    let order: Vec<usize> = perm.map_or_else(|| (0..rows.len()).collect(), <[usize]>::to_vec);
    let v = order
        .iter()
        .map(|&i| {
            let (p1, p2, l) = &rows[i];
            PairedInstance {
                id: format!("r{i}"),
                part1: p1.clone(),
                part2: p2.clone(),
                gold_label: t.label_set[*l].clone(),
                answers: vec![],
            }
        })
        .collect();
    Dataset::new(t, Split::Dev, v, "").unwrap()
}

fn by_cf_id(v: &[CounterfactualInstance]) -> BTreeMap<String, CounterfactualInstance> {
    v.iter().map(|c| (c.cf_id.clone(), c.clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn donors_are_distinct_and_foreign(
        (rows, k) in dataset_strategy(),
        seed in any::<u64>(),
        part in prop_oneof![Just(Part::Part1), Just(Part::Part2)],
    ) {
        let ds = build(&rows, None);
        let cfs = sample_counterfactuals(&ds, &SamplerConfig::new(k, seed, part)).unwrap();
        prop_assert_eq!(cfs.len(), ds.len() * k);
        let index = ds.index_by_id();
        for (i, chunk) in cfs.instances.chunks(k).enumerate() {
            let orig = &ds.instances()[i];
            let donors: HashSet<&str> = chunk.iter().map(|c| c.donor_id.as_str()).collect();
            prop_assert_eq!(donors.len(), k);
            prop_assert!(!donors.contains(orig.id.as_str()));
            for (j, c) in chunk.iter().enumerate() {
                prop_assert_eq!(&c.original_id, &orig.id);
                prop_assert_eq!(c.sample_index, j);
                prop_assert_eq!(&c.cf_id, &format!("{}#cf{}", orig.id, j));
                prop_assert_eq!(c.assigned_label.as_str(), "neutral");
                let donor = index[c.donor_id.as_str()];
                prop_assert_eq!(c.part(part), donor.part(part));
                prop_assert_eq!(c.part(part.other()), orig.part(part.other()));
            }
        }
        cfs.check_against(&ds).unwrap();
    }

    #[test]
    fn invariant_under_dataset_permutation(
        ((rows, k), perm) in dataset_strategy().prop_flat_map(|(rows, k)| {
            let n = rows.len();
            (Just((rows, k)), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
        }),
        seed in any::<u64>(),
    ) {
        let a = build(&rows, None);
        let b = build(&rows, Some(&perm));
        prop_assert_eq!(a.content_digest(), b.content_digest());
        let cfg = SamplerConfig::new(k, seed, Part::Part1);
        let ca = sample_counterfactuals(&a, &cfg).unwrap();
        let cb = sample_counterfactuals(&b, &cfg).unwrap();
        prop_assert_eq!(by_cf_id(&ca.instances), by_cf_id(&cb.instances));
    }

    #[test]
    fn double_run_is_byte_identical((rows, k) in dataset_strategy(), seed in any::<u64>()) {
        let ds = build(&rows, None);
        let cfg = SamplerConfig::new(k, seed, Part::Part1);
        let one = sample_counterfactuals(&ds, &cfg).unwrap().to_jsonl_bytes();
        let two = sample_counterfactuals(&ds, &cfg).unwrap().to_jsonl_bytes();
        prop_assert_eq!(one, two);
    }
}

#[test]
fn seed_changes_the_draw() {
    let rows: Vec<_> = (0..50).map(|i| (format!("p{i}"), format!("h{i}"), i % 3)).collect();
    let ds = build(&rows, None);
    let a = sample_counterfactuals(&ds, &SamplerConfig::new(5, 1, Part::Part1)).unwrap();
    let b = sample_counterfactuals(&ds, &SamplerConfig::new(5, 2, Part::Part1)).unwrap();
    assert_ne!(a.to_jsonl_bytes(), b.to_jsonl_bytes());
}
