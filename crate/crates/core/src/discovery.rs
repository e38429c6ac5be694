//! Minhash-based discovery of join and union candidates.
//!
//! Signatures are plain metadata: they are not privatized, and a signature
//! over a key column reveals which values appear in it with some probability.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use crate::error::{Error, Result};
use crate::relation::{ColumnKind, Relation};

pub const DEFAULT_NUM_HASHES: usize = 256;
pub const DEFAULT_SEED: u64 = 0x5eed_f00d;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub k: usize,
    pub seed: u64,
    pub minima: Vec<u64>,
}

impl MinHashSignature {
    /// Signature of the distinct values in `values`, after trimming and
    /// lowercasing each one.
    pub fn compute<I, S>(values: I, k: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        assert!(k >= 1, "minhash needs at least one hash function");
        let salts: Vec<u64> = (0..k as u64)
            .map(|i| splitmix64(seed ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
            .collect();
        let mut minima = vec![u64::MAX; k];
        let mut seen = HashSet::new();
        for v in values {
            let norm = v.as_ref().trim().to_lowercase();
            let base = xxh3_64(norm.as_bytes());
            if !seen.insert(base) {
                continue;
            }
            for (m, salt) in minima.iter_mut().zip(&salts) {
                let h = splitmix64(base ^ salt);
                if h < *m {
                    *m = h;
                }
            }
        }
        Self { k, seed, minima }
    }

    pub fn of_column(r: &Relation, column: &str, k: usize, seed: u64) -> Result<Self> {
        let data = r
            .column(column)
            .ok_or_else(|| Error::UnknownColumn(column.to_string()))?;
        Ok(Self::compute(
            (0..data.len()).map(|i| data.render(i)),
            k,
            seed,
        ))
    }

    /// True for the signature of an empty set.
    pub fn is_empty(&self) -> bool {
        self.minima.iter().all(|m| *m == u64::MAX)
    }

    /// Fraction of agreeing minima. Zero when either side is empty.
    pub fn jaccard(&self, other: &MinHashSignature) -> Result<f64> {
        if self.k != other.k || self.seed != other.seed || self.minima.len() != other.minima.len() {
            return Err(Error::Invalid(format!(
                "signatures differ in (k, seed): ({}, {}) vs ({}, {})",
                self.k, self.seed, other.k, other.seed
            )));
        }
        if self.is_empty() || other.is_empty() {
            return Ok(0.0);
        }
        let agree = self
            .minima
            .iter()
            .zip(&other.minima)
            .filter(|(a, b)| a == b)
            .count();
        Ok(agree as f64 / self.k as f64)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnProfile {
    pub name: String,
    pub kind: ColumnKind,
    pub signature: MinHashSignature,
}

/// What discovery knows about one dataset: its columns, their signatures and
/// which key columns can be joined on.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetProfile {
    pub dataset_id: String,
    pub columns: Vec<ColumnProfile>,
    pub join_keys: Vec<String>,
}

impl DatasetProfile {
    fn column(&self, name: &str) -> Option<&ColumnProfile> {
        self.columns.iter().find(|c| c.name == name)
    }

    fn value_columns(&self) -> impl Iterator<Item = &ColumnProfile> {
        self.columns.iter().filter(|c| c.kind.is_numeric())
    }
}

#[derive(Clone, Debug, Default)]
pub struct CorpusIndex {
    profiles: Vec<DatasetProfile>,
}

impl CorpusIndex {
    pub fn new(mut profiles: Vec<DatasetProfile>) -> Self {
        profiles.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id));
        Self { profiles }
    }

    pub fn profiles(&self) -> &[DatasetProfile] {
        &self.profiles
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugType {
    Join,
    Union,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub join: f64,
    pub union: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            join: 0.5,
            union: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JoinCandidate {
    pub dataset_id: String,
    pub request_key: String,
    pub provider_key: String,
    pub estimated_jaccard: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnionCandidate {
    pub dataset_id: String,
    /// Request column → provider column, for every request feature and the target.
    pub column_mapping: BTreeMap<String, String>,
    /// Request join key → provider key column, where one matches.
    pub key_mapping: BTreeMap<String, String>,
    pub schema_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    pub joins: Vec<JoinCandidate>,
    pub unions: Vec<UnionCandidate>,
}

pub fn discover(
    index: &CorpusIndex,
    request: &DatasetProfile,
    aug: AugType,
    thresholds: Thresholds,
) -> Result<CandidateSet> {
    let mut out = CandidateSet::default();
    match aug {
        AugType::Join => out.joins = join_candidates(index, request, thresholds.join)?,
        AugType::Union => out.unions = union_candidates(index, request, thresholds.union)?,
    }
    Ok(out)
}

/// Join and union candidates together.
pub fn discover_all(
    index: &CorpusIndex,
    request: &DatasetProfile,
    thresholds: Thresholds,
) -> Result<CandidateSet> {
    Ok(CandidateSet {
        joins: join_candidates(index, request, thresholds.join)?,
        unions: union_candidates(index, request, thresholds.union)?,
    })
}

fn join_candidates(
    index: &CorpusIndex,
    request: &DatasetProfile,
    threshold: f64,
) -> Result<Vec<JoinCandidate>> {
    let mut found = Vec::new();
    for provider in &index.profiles {
        if provider.dataset_id == request.dataset_id {
            continue;
        }
        for pk in &provider.join_keys {
            let Some(psig) = provider.column(pk) else { continue };
            for rk in &request.join_keys {
                let Some(rsig) = request.column(rk) else { continue };
                let est = rsig.signature.jaccard(&psig.signature)?;
                if est >= threshold {
                    found.push(JoinCandidate {
                        dataset_id: provider.dataset_id.clone(),
                        request_key: rk.clone(),
                        provider_key: pk.clone(),
                        estimated_jaccard: est,
                    });
                }
            }
        }
    }
    found.sort_by(|a, b| {
        b.estimated_jaccard
            .total_cmp(&a.estimated_jaccard)
            .then_with(|| a.dataset_id.cmp(&b.dataset_id))
            .then_with(|| a.request_key.cmp(&b.request_key))
            .then_with(|| a.provider_key.cmp(&b.provider_key))
    });
    Ok(found)
}

fn union_candidates(
    index: &CorpusIndex,
    request: &DatasetProfile,
    threshold: f64,
) -> Result<Vec<UnionCandidate>> {
    let mut found = Vec::new();
    'provider: for provider in &index.profiles {
        if provider.dataset_id == request.dataset_id {
            continue;
        }
        let mut used = HashSet::new();
        let mut column_mapping = BTreeMap::new();
        let mut score = 0.0;
        let mut matched = 0usize;
        for rc in request.value_columns() {
            let Some((pc, s)) = match_column(rc, provider.value_columns(), &used, threshold)? else {
                continue 'provider;
            };
            used.insert(pc.clone());
            column_mapping.insert(rc.name.clone(), pc);
            score += s;
            matched += 1;
        }
        if matched == 0 {
            continue;
        }
        let mut key_mapping = BTreeMap::new();
        let mut used_keys = HashSet::new();
        for rk in request.join_keys.iter().filter_map(|k| request.column(k)) {
            let keys = provider.join_keys.iter().filter_map(|k| provider.column(k));
            if let Some((pk, _)) = match_column(rk, keys, &used_keys, threshold)? {
                used_keys.insert(pk.clone());
                key_mapping.insert(rk.name.clone(), pk);
            }
        }
        found.push(UnionCandidate {
            dataset_id: provider.dataset_id.clone(),
            column_mapping,
            key_mapping,
            schema_score: score / matched as f64,
        });
    }
    found.sort_by(|a, b| {
        b.schema_score
            .total_cmp(&a.schema_score)
            .then_with(|| a.dataset_id.cmp(&b.dataset_id))
    });
    Ok(found)
}

/// Case-insensitive name match first, otherwise the most similar unused
/// column at or above `threshold`.
fn match_column<'a>(
    wanted: &ColumnProfile,
    pool: impl Iterator<Item = &'a ColumnProfile>,
    used: &HashSet<String>,
    threshold: f64,
) -> Result<Option<(String, f64)>> {
    let pool: Vec<&ColumnProfile> = pool.filter(|c| !used.contains(&c.name)).collect();
    if let Some(c) = pool
        .iter()
        .find(|c| c.name.eq_ignore_ascii_case(&wanted.name))
    {
        return Ok(Some((c.name.clone(), 1.0)));
    }
    let mut best: Option<(String, f64)> = None;
    for c in pool {
        let est = wanted.signature.jaccard(&c.signature)?;
        if est >= threshold && best.as_ref().is_none_or(|(_, b)| est > *b) {
            best = Some((c.name.clone(), est));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig<S: AsRef<str>>(values: impl IntoIterator<Item = S>) -> MinHashSignature {
        MinHashSignature::compute(values, DEFAULT_NUM_HASHES, DEFAULT_SEED)
    }

    #[test]
    fn determinism_and_identity() {
        let a = sig(["x", "y", "z"]);
        assert_eq!(a, sig(["z", "y", "x", "x"]));
        assert_eq!(a.jaccard(&a).unwrap(), 1.0);
        assert_eq!(sig(["a"]).jaccard(&sig(["a"])).unwrap(), 1.0);
        assert_eq!(sig([" A "]), sig(["a"]));
    }

    #[test]
    fn empty_set_convention() {
        let e = sig(Vec::<String>::new());
        assert!(e.is_empty());
        assert!(e.minima.iter().all(|m| *m == u64::MAX));
        assert_eq!(e.jaccard(&e).unwrap(), 0.0);
        assert_eq!(e.jaccard(&sig(["a"])).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_parameters() {
        let a = MinHashSignature::compute(["a"], 8, 1);
        assert!(a.jaccard(&MinHashSignature::compute(["a"], 16, 1)).is_err());
        assert!(a.jaccard(&MinHashSignature::compute(["a"], 8, 2)).is_err());
    }

    fn profile(id: &str, cols: &[(&str, ColumnKind, Vec<String>)], keys: &[&str]) -> DatasetProfile {
        DatasetProfile {
            dataset_id: id.to_string(),
            columns: cols
                .iter()
                .map(|(n, k, v)| ColumnProfile {
                    name: n.to_string(),
                    kind: *k,
                    signature: sig(v),
                })
                .collect(),
            join_keys: keys.iter().map(|k| k.to_string()).collect(),
        }
    }

    fn range(lo: usize, hi: usize) -> Vec<String> {
        (lo..hi).map(|i| format!("v{i}")).collect()
    }

    #[test]
    fn join_discovery_and_ties() {
        let request = profile(
            "req",
            &[
                ("zip", ColumnKind::Key, range(0, 100)),
                ("x", ColumnKind::Feature, range(0, 10)),
                ("y", ColumnKind::Target, range(0, 10)),
            ],
            &["zip"],
        );
        let p_b = profile("b", &[("code", ColumnKind::Key, range(0, 100))], &["code"]);
        let p_a = profile("a", &[("zip", ColumnKind::Key, range(0, 100))], &["zip"]);
        let alien = profile(
            "c",
            &[
                ("k", ColumnKind::Key, range(500, 600)),
                ("w", ColumnKind::Feature, range(900, 950)),
            ],
            &["k"],
        );
        let index = CorpusIndex::new(vec![p_b, alien, p_a]);
        let c = discover(&index, &request, AugType::Join, Thresholds::default()).unwrap();
        assert!(c.unions.is_empty());
        let ids: Vec<&str> = c.joins.iter().map(|j| j.dataset_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(c.joins[0].estimated_jaccard, 1.0);
        assert_eq!(c.joins[1].provider_key, "code");

        let u = discover(&index, &request, AugType::Union, Thresholds::default()).unwrap();
        assert!(u.unions.is_empty());

        let strict = Thresholds { join: 1.01, union: 0.8 };
        assert!(discover(&index, &request, AugType::Join, strict).unwrap().joins.is_empty());
        assert!(discover(&CorpusIndex::default(), &request, AugType::Join, Thresholds::default())
            .unwrap()
            .joins
            .is_empty());
    }

    #[test]
    fn union_discovery_by_name_and_signature() {
        let request = profile(
            "req",
            &[
                ("zip", ColumnKind::Key, range(0, 100)),
                ("X", ColumnKind::Feature, range(0, 50)),
                ("y", ColumnKind::Target, range(50, 100)),
            ],
            &["zip"],
        );
        let provider = profile(
            "p",
            &[
                ("zip", ColumnKind::Key, range(0, 100)),
                ("x", ColumnKind::Feature, range(200, 250)),
                ("price", ColumnKind::Feature, range(50, 100)),
            ],
            &["zip"],
        );
        let partial = profile("q", &[("x", ColumnKind::Feature, range(0, 50))], &[]);
        let index = CorpusIndex::new(vec![provider, partial]);
        let c = discover(&index, &request, AugType::Union, Thresholds::default()).unwrap();
        assert_eq!(c.unions.len(), 1);
        let u = &c.unions[0];
        assert_eq!(u.dataset_id, "p");
        assert_eq!(u.column_mapping["X"], "x");
        assert_eq!(u.column_mapping["y"], "price");
        assert_eq!(u.key_mapping["zip"], "zip");
        assert!((0.0..=1.0).contains(&u.schema_score));
    }
}
