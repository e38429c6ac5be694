//! Pre-computed sketch sets and their on-disk format.
//!
//! A sketch file is a pretty-printed JSON document followed by one trailer
//! line, `crc32 <8 hex digits>`, holding the CRC32 of every byte before it.
//! Floats are written in shortest round-trip form, so a load reproduces the
//! stored values bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::discovery::{ColumnProfile, DatasetProfile, MinHashSignature, DEFAULT_NUM_HASHES, DEFAULT_SEED};
use crate::error::{Error, Result};
use crate::privacy::Bounds;
use crate::relation::{ColumnDesc, ColumnKind, Relation};
use crate::semiring::{CovSketch, KeyedSketch};
use crate::space::FeatureSpace;

pub const FORMAT_VERSION: u64 = 1;
pub const MAX_KEY_CARDINALITY: usize = 100_000;
const EXACT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Exact,
    /// Noise standard deviation used for each artifact.
    Noisy { sigma: BTreeMap<String, f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegisteredSketchSet {
    pub dataset_id: String,
    /// Key, feature and target columns, unqualified.
    pub columns: Vec<ColumnDesc>,
    pub feature_space: FeatureSpace,
    pub horizontal: CovSketch,
    pub vertical: BTreeMap<Vec<String>, KeyedSketch>,
    pub provenance: Provenance,
    pub row_count_hint: u64,
    pub signatures: BTreeMap<String, MinHashSignature>,
    /// Normalization bounds, when the sketched values were normalized.
    pub bounds: Option<Bounds>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SketchOptions {
    pub max_subset: usize,
    pub num_hashes: usize,
    pub seed: u64,
}

impl SketchOptions {
    pub fn with_max_subset(max_subset: usize) -> Self {
        Self {
            max_subset,
            ..Self::default()
        }
    }
}

impl Default for SketchOptions {
    fn default() -> Self {
        Self {
            max_subset: 1,
            num_hashes: DEFAULT_NUM_HASHES,
            seed: DEFAULT_SEED,
        }
    }
}

impl RegisteredSketchSet {
    /// Sketches `r` under its own name: one horizontal sketch over every
    /// feature and target column, plus one keyed sketch for each non-empty
    /// subset of `join_keys` with at most `opts.max_subset` columns.
    pub fn build<S: AsRef<str>>(r: &Relation, join_keys: &[S], opts: SketchOptions) -> Result<Self> {
        if opts.max_subset < 1 {
            return Err(Error::Invalid("max_subset must be at least 1".into()));
        }
        let features = r.numeric_columns();
        if features.is_empty() {
            return Err(Error::Schema(format!("`{}` has no feature columns", r.name())));
        }
        let join_keys: Vec<&str> = join_keys.iter().map(AsRef::as_ref).unique().collect();
        for k in &join_keys {
            match r.kind_of(k) {
                Some(ColumnKind::Key) => {
                    let distinct = r.text(k)?.iter().unique().count();
                    if distinct > MAX_KEY_CARDINALITY {
                        return Err(Error::KeyCardinality {
                            column: k.to_string(),
                            distinct,
                            limit: MAX_KEY_CARDINALITY,
                        });
                    }
                }
                Some(_) => return Err(Error::Schema(format!("`{k}` is not a key column"))),
                None => return Err(Error::UnknownColumn(k.to_string())),
            }
        }

        let horizontal = CovSketch::from_relation(r, &features)?;
        let mut vertical = BTreeMap::new();
        for size in 1..=opts.max_subset.min(join_keys.len()) {
            for subset in join_keys.iter().combinations(size) {
                let keys: Vec<String> = subset.iter().map(|k| k.to_string()).collect();
                let keyed = KeyedSketch::group_by(r, &keys, &features)?;
                if keyed.len() > MAX_KEY_CARDINALITY {
                    return Err(Error::KeyCardinality {
                        column: keys.join(","),
                        distinct: keyed.len(),
                        limit: MAX_KEY_CARDINALITY,
                    });
                }
                vertical.insert(keys, keyed);
            }
        }

        let mut columns = Vec::new();
        let mut signatures = BTreeMap::new();
        for desc in r.schema() {
            let keep = desc.kind.is_numeric() || join_keys.contains(&desc.name.as_str());
            if keep {
                signatures.insert(
                    desc.name.clone(),
                    MinHashSignature::of_column(r, &desc.name, opts.num_hashes, opts.seed)?,
                );
                columns.push(desc.clone());
            }
        }

        Ok(Self {
            dataset_id: r.name().to_string(),
            columns,
            feature_space: horizontal.space().clone(),
            horizontal,
            vertical,
            provenance: Provenance::Exact,
            row_count_hint: r.num_rows() as u64,
            signatures,
            bounds: None,
        })
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn is_privatized(&self) -> bool {
        matches!(self.provenance, Provenance::Noisy { .. })
    }

    /// Declared join keys: those with a single-column keyed sketch.
    pub fn join_keys(&self) -> Vec<String> {
        self.vertical
            .keys()
            .filter(|k| k.len() == 1)
            .map(|k| k[0].clone())
            .collect()
    }

    pub fn keyed(&self, keys: &[String]) -> Option<&KeyedSketch> {
        self.vertical.get(keys)
    }

    pub fn columns_of_kind(&self, kind: ColumnKind) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.name.as_str())
            .collect()
    }

    /// Discovery view of this set.
    pub fn profile(&self) -> DatasetProfile {
        DatasetProfile {
            dataset_id: self.dataset_id.clone(),
            columns: self
                .columns
                .iter()
                .filter_map(|c| {
                    self.signatures.get(&c.name).map(|sig| ColumnProfile {
                        name: c.name.clone(),
                        kind: c.kind,
                        signature: sig.clone(),
                    })
                })
                .collect(),
            join_keys: self.join_keys(),
        }
    }

    /// For exact sets, every keyed sketch must collapse to the horizontal one.
    pub fn check_consistency(&self) -> Result<()> {
        for (keys, keyed) in &self.vertical {
            if keyed.space() != &self.feature_space {
                return Err(Error::Corrupt(format!(
                    "keyed sketch on {keys:?} is over a different feature space"
                )));
            }
        }
        if self.horizontal.space() != &self.feature_space {
            return Err(Error::Corrupt("horizontal sketch is over a different feature space".into()));
        }
        if self.is_privatized() {
            return Ok(());
        }
        for (keys, keyed) in &self.vertical {
            let collapsed = keyed.collapse();
            if !approx_eq(&collapsed, &self.horizontal, EXACT_TOLERANCE) {
                return Err(Error::Corrupt(format!(
                    "keyed sketch on {keys:?} does not sum to the horizontal sketch"
                )));
            }
        }
        Ok(())
    }

    pub fn file_name(&self) -> String {
        format!("{}.sketch", self.dataset_id)
    }

    /// Canonical text form, trailer included.
    pub fn to_text(&self) -> Result<String> {
        let doc = SketchFile::from_set(self);
        let mut body = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Invalid(format!("sketch encode: {e}")))?;
        body.push('\n');
        let crc = crc32fast::hash(body.as_bytes());
        Ok(format!("{body}crc32 {crc:08x}\n"))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let trimmed = text.strip_suffix('\n').unwrap_or(text);
        let (body, trailer) = match trimmed.rfind('\n') {
            Some(pos) => (&text[..=pos], &trimmed[pos + 1..]),
            None => return Err(Error::Checksum("missing checksum trailer".into())),
        };
        let stored = trailer
            .strip_prefix("crc32 ")
            .and_then(|h| u32::from_str_radix(h.trim(), 16).ok())
            .ok_or_else(|| Error::Checksum("missing checksum trailer".into()))?;
        let computed = crc32fast::hash(body.as_bytes());
        if stored != computed {
            return Err(Error::Checksum(format!(
                "stored {stored:08x}, computed {computed:08x}"
            )));
        }
        let value: serde_json::Value =
            serde_json::from_str(body).map_err(|e| Error::Corrupt(e.to_string()))?;
        let version = value
            .get("formatVersion")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Corrupt("missing formatVersion".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let doc: SketchFile =
            serde_json::from_value(value).map_err(|e| Error::Corrupt(e.to_string()))?;
        let set = doc.into_set()?;
        set.check_consistency()?;
        Ok(set)
    }

    /// Writes `<dir>/<datasetId>.sketch` and returns its path.
    pub fn store(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        validate_id(&self.dataset_id)?;
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(self.file_name());
        let tmp = dir.join(format!(".{}.tmp", self.file_name()));
        std::fs::write(&tmp, self.to_text()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Dataset ids double as file names.
pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "dataset id `{id}` must be non-empty and use only [A-Za-z0-9_.-]"
        )))
    }
}

/// Entrywise comparison, relative to each entry or to the sketch's largest
/// entry, whichever is looser.
pub fn approx_eq(a: &CovSketch, b: &CovSketch, tol: f64) -> bool {
    if a.space() != b.space() {
        return false;
    }
    let scale = a
        .bordered_gram()
        .iter()
        .chain(b.bordered_gram().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let close = |x: f64, y: f64| {
        let d = (x - y).abs();
        d <= tol * x.abs().max(y.abs()) || d <= tol * scale
    };
    close(a.count(), b.count())
        && a.sums().iter().zip(b.sums().iter()).all(|(x, y)| close(*x, *y))
        && a.moments().iter().zip(b.moments().iter()).all(|(x, y)| close(*x, *y))
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SketchFile {
    format_version: u64,
    dataset_id: String,
    row_count_hint: u64,
    columns: Vec<ColumnDesc>,
    feature_space: Vec<String>,
    horizontal: SketchBody,
    vertical: Vec<VerticalEntry>,
    provenance: ProvenanceEntry,
    signatures: BTreeMap<String, MinHashSignature>,
    bounds: Option<BTreeMap<String, [f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct SketchBody {
    c: f64,
    s: Vec<f64>,
    /// Row-major.
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct VerticalEntry {
    key_columns: Vec<String>,
    groups: Vec<GroupEntry>,
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    key: Vec<String>,
    #[serde(flatten)]
    sketch: SketchBody,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ProvenanceEntry {
    Exact,
    Noisy { sigma: BTreeMap<String, f64> },
}

impl SketchBody {
    fn from_sketch(sk: &CovSketch) -> Self {
        let m = sk.dim();
        let q = sk.moments();
        Self {
            c: sk.count(),
            s: sk.sums().iter().copied().collect(),
            q: (0..m).flat_map(|i| (0..m).map(move |j| q[(i, j)])).collect(),
        }
    }

    fn into_sketch(self, space: &FeatureSpace) -> Result<CovSketch> {
        let m = space.len();
        if self.s.len() != m || self.q.len() != m * m {
            return Err(Error::Corrupt(format!(
                "sketch entry has {} sums and {} products for {m} features",
                self.s.len(),
                self.q.len()
            )));
        }
        CovSketch::from_parts(
            space.clone(),
            self.c,
            DVector::from_vec(self.s),
            DMatrix::from_row_slice(m, m, &self.q),
        )
    }
}

impl SketchFile {
    fn from_set(set: &RegisteredSketchSet) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dataset_id: set.dataset_id.clone(),
            row_count_hint: set.row_count_hint,
            columns: set.columns.clone(),
            feature_space: set.feature_space.names().to_vec(),
            horizontal: SketchBody::from_sketch(&set.horizontal),
            vertical: set
                .vertical
                .iter()
                .map(|(keys, keyed)| VerticalEntry {
                    key_columns: keys.clone(),
                    groups: keyed
                        .groups()
                        .iter()
                        .map(|(k, g)| GroupEntry {
                            key: k.clone(),
                            sketch: SketchBody::from_sketch(g),
                        })
                        .collect(),
                })
                .collect(),
            provenance: match &set.provenance {
                Provenance::Exact => ProvenanceEntry::Exact,
                Provenance::Noisy { sigma } => ProvenanceEntry::Noisy {
                    sigma: sigma.clone(),
                },
            },
            signatures: set.signatures.clone(),
            bounds: set.bounds.as_ref().map(|b| {
                b.iter().map(|(k, (lo, hi))| (k.clone(), [*lo, *hi])).collect()
            }),
        }
    }

    fn into_set(self) -> Result<RegisteredSketchSet> {
        let space = FeatureSpace::new(self.feature_space.iter().cloned())?;
        if space.names() != self.feature_space.as_slice() {
            return Err(Error::Corrupt("featureSpace is not in canonical order".into()));
        }
        let horizontal = self.horizontal.into_sketch(&space)?;
        let mut vertical = BTreeMap::new();
        for entry in self.vertical {
            let mut groups = BTreeMap::new();
            for g in entry.groups {
                if groups.insert(g.key, g.sketch.into_sketch(&space)?).is_some() {
                    return Err(Error::Corrupt("duplicate group key".into()));
                }
            }
            let keyed = KeyedSketch::from_groups(entry.key_columns.clone(), space.clone(), groups)?;
            vertical.insert(entry.key_columns, keyed);
        }
        Ok(RegisteredSketchSet {
            dataset_id: self.dataset_id,
            columns: self.columns,
            feature_space: space,
            horizontal,
            vertical,
            provenance: match self.provenance {
                ProvenanceEntry::Exact => Provenance::Exact,
                ProvenanceEntry::Noisy { sigma } => Provenance::Noisy { sigma },
            },
            row_count_hint: self.row_count_hint,
            signatures: self.signatures,
            bounds: self
                .bounds
                .map(|b| b.into_iter().map(|(k, [lo, hi])| (k, (lo, hi))).collect()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::{read_csv, SchemaHints};

    fn relation() -> Relation {
        let hints = SchemaHints::new()
            .with("j1", ColumnKind::Key)
            .with("j2", ColumnKind::Key);
        let csv = "j1,j2,a,b\nk1,u,0.1,0.2\nk1,v,0.3,0.25\nk2,u,0.7,0.9\nk3,w,0.5,0.125\n";
        read_csv("prov", csv.as_bytes(), &hints).unwrap().0
    }

    #[test]
    fn subset_counts() {
        let r = relation();
        let two = RegisteredSketchSet::build(&r, &["j1", "j2"], SketchOptions::with_max_subset(2)).unwrap();
        let keys: Vec<&Vec<String>> = two.vertical.keys().collect();
        assert_eq!(keys.len(), 3);
        assert!(two.vertical.contains_key(&vec!["j1".to_string(), "j2".to_string()]));
        let one = RegisteredSketchSet::build(&r, &["j1", "j2"], SketchOptions::default()).unwrap();
        assert_eq!(one.vertical.len(), 2);
        assert_eq!(one.join_keys(), vec!["j1".to_string(), "j2".to_string()]);
        let none = RegisteredSketchSet::build(&r, &[] as &[&str], SketchOptions::default()).unwrap();
        assert!(none.vertical.is_empty());
        assert_eq!(none.horizontal.count(), 4.0);
        two.check_consistency().unwrap();
    }

    #[test]
    fn build_errors() {
        let r = relation();
        assert!(RegisteredSketchSet::build(&r, &["a"], SketchOptions::default()).is_err());
        let keys_only = r.project_features(&["j1"]).unwrap();
        assert!(RegisteredSketchSet::build(&keys_only, &["j1"], SketchOptions::default()).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact_and_deterministic() {
        let set = RegisteredSketchSet::build(&relation(), &["j1", "j2"], SketchOptions::with_max_subset(2))
            .unwrap()
            .with_bounds([("a".to_string(), (0.0, 1.0 / 3.0))].into_iter().collect());
        let text = set.to_text().unwrap();
        assert_eq!(text, set.to_text().unwrap());
        let back = RegisteredSketchSet::from_text(&text).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_text().unwrap(), text);
    }

    #[test]
    fn store_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let set = RegisteredSketchSet::build(&relation(), &["j1"], SketchOptions::default()).unwrap();
        let path = set.store(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), "prov.sketch");
        assert_eq!(RegisteredSketchSet::load(&path).unwrap(), set);
    }

    #[test]
    fn corruption_is_detected() {
        let set = RegisteredSketchSet::build(&relation(), &["j1"], SketchOptions::default()).unwrap();
        let text = set.to_text().unwrap();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(
            RegisteredSketchSet::from_text(truncated),
            Err(Error::Checksum(_))
        ));
        let flipped = text.replacen("\"c\": 4.0", "\"c\": 5.0", 1);
        assert!(matches!(
            RegisteredSketchSet::from_text(&flipped),
            Err(Error::Checksum(_))
        ));

        let body = text[..text.rfind("crc32").unwrap()].replacen(
            "\"formatVersion\": 1",
            "\"formatVersion\": 2",
            1,
        );
        let future = format!("{body}crc32 {:08x}\n", crc32fast::hash(body.as_bytes()));
        assert!(matches!(
            RegisteredSketchSet::from_text(&future),
            Err(Error::Version { found: 2, .. })
        ));
    }

    #[test]
    fn inconsistent_exact_set_rejected_on_load() {
        let mut set = RegisteredSketchSet::build(&relation(), &["j1"], SketchOptions::default()).unwrap();
        set.horizontal = set.horizontal.map_entries(|v| v * 2.0);
        let text = set.to_text().unwrap();
        assert!(matches!(
            RegisteredSketchSet::from_text(&text),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn ids_are_file_safe() {
        assert!(validate_id("nyc-taxi_2020.v1").is_ok());
        assert!(validate_id("../etc").is_err());
        assert!(validate_id("").is_err());
        assert!(validate_id("a b").is_err());
    }
}
