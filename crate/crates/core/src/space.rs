use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Ordered set of globally qualified feature names (`relation.column`).
///
/// Names are kept in lexicographic order so that sketch vectors and matrices
/// built independently line up entry for entry.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct FeatureSpace(Arc<[String]>);

impl FeatureSpace {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = BTreeSet::new();
        for name in names {
            let name = name.into();
            if !set.insert(name.clone()) {
                return Err(Error::SpaceMismatch(format!("duplicate feature `{name}`")));
            }
        }
        Ok(Self(set.into_iter().collect()))
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// `prefix.column` for each column.
    pub fn qualified<S: AsRef<str>>(prefix: &str, columns: &[S]) -> Result<Self> {
        Self::new(columns.iter().map(|c| qualify(prefix, c.as_ref())))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn is_subset(&self, other: &FeatureSpace) -> bool {
        self.0.iter().all(|n| other.contains(n))
    }

    pub fn is_disjoint(&self, other: &FeatureSpace) -> bool {
        self.0.iter().all(|n| !other.contains(n))
    }

    pub fn union(&self, other: &FeatureSpace) -> FeatureSpace {
        if self == other {
            return self.clone();
        }
        let set: BTreeSet<&String> = self.0.iter().chain(other.0.iter()).collect();
        Self(set.into_iter().cloned().collect())
    }

    pub(crate) fn same_as(&self, other: &FeatureSpace) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0 == other.0
    }
}

impl fmt::Debug for FeatureSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

pub fn qualify(prefix: &str, column: &str) -> String {
    format!("{prefix}.{column}")
}

/// Column part of a qualified name.
pub fn unqualified(name: &str) -> &str {
    name.split_once('.').map_or(name, |(_, col)| col)
}
