use std::collections::BTreeSet;

use fabsearch::discovery::{discover, discover_all, AugType, CorpusIndex, DatasetProfile, MinHashSignature, Thresholds};
use fabsearch::relation::{Cell, ColumnDesc, ColumnKind, Relation};
use fabsearch::{RegisteredSketchSet, SketchOptions};
use proptest::prelude::*;

fn keyed(name: &str, key: &str, keys: &BTreeSet<u8>) -> Relation {
    let schema = vec![ColumnDesc::new(key, ColumnKind::Key), ColumnDesc::new("v", ColumnKind::Feature)];
    let rows = keys
        .iter()
        .map(|k| vec![Cell::from(format!("id{k}")), Cell::from(f64::from(*k))])
        .collect();
    Relation::from_rows(name, schema, rows).unwrap()
}

fn profile(name: &str, key: &str, keys: &BTreeSet<u8>) -> DatasetProfile {
    RegisteredSketchSet::build(&keyed(name, key, keys), &[key], SketchOptions::default())
        .unwrap()
        .profile()
}

fn key_set() -> impl Strategy<Value = BTreeSet<u8>> {
    prop::collection::btree_set(0u8..40, 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn estimator_is_unbiased_over_seeds(a in key_set(), b in key_set()) {
        let inter = a.intersection(&b).count() as f64;
        let union = a.union(&b).count() as f64;
        let truth = inter / union;
        let k = 256;
        let trials = 1000;
        let render = |s: &BTreeSet<u8>| s.iter().map(|v| format!("id{v}")).collect::<Vec<_>>();
        let (ra, rb) = (render(&a), render(&b));
        let mean = (0..trials as u64)
            .map(|seed| {
                let sa = MinHashSignature::compute(&ra, k, seed);
                let sb = MinHashSignature::compute(&rb, k, seed);
                sa.jaccard(&sb).unwrap()
            })
            .sum::<f64>()
            / trials as f64;
        let bound = 3.0 * (truth * (1.0 - truth) / (trials * k) as f64).sqrt();
        prop_assert!((mean - truth).abs() <= bound.max(1e-12), "mean {mean} truth {truth} bound {bound}");
    }
}

fn corpus() -> impl Strategy<Value = (BTreeSet<u8>, Vec<BTreeSet<u8>>)> {
    (key_set(), prop::collection::vec(key_set(), 1..8))
}

fn index(providers: &[BTreeSet<u8>]) -> CorpusIndex {
    CorpusIndex::new(
        providers
            .iter()
            .enumerate()
            .map(|(i, keys)| profile(&format!("p{i}"), "key", keys))
            .collect(),
    )
}

proptest! {
    #[test]
    fn discovery_is_deterministic((request, providers) in corpus()) {
        let req = profile("request", "k", &request);
        let a = discover_all(&index(&providers), &req, Thresholds::default()).unwrap();
        let b = discover_all(&index(&providers), &req, Thresholds::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn raising_join_threshold_never_adds((request, providers) in corpus(), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let idx = index(&providers);
        let req = profile("request", "k", &request);
        let loose = discover(&idx, &req, AugType::Join, Thresholds { join: lo, union: 0.8 }).unwrap();
        let strict = discover(&idx, &req, AugType::Join, Thresholds { join: hi, union: 0.8 }).unwrap();
        for c in &strict.joins {
            prop_assert!(loose.joins.contains(c));
            prop_assert!(c.estimated_jaccard >= hi);
        }
    }
}
