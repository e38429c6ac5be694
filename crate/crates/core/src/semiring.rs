//! The covariance semi-ring.
//!
//! A [`CovSketch`] is the triple `(c, s, Q)`: row count, per-feature sums
//! and sums of pairwise products. Union of row multisets is `+`, the cross
//! product of two row multisets over disjoint feature sets is `×`. Grouping
//! by join key ([`KeyedSketch`]) lets a join be evaluated as a per-key product
//! followed by a sum, without materializing the joined rows.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::relation::{ColumnKind, Relation};
use crate::space::{qualify, FeatureSpace};

#[derive(Clone, Debug, PartialEq)]
pub struct CovSketch {
    space: FeatureSpace,
    count: f64,
    sums: DVector<f64>,
    moments: DMatrix<f64>,
}

impl CovSketch {
    pub fn from_parts(
        space: FeatureSpace,
        count: f64,
        sums: DVector<f64>,
        moments: DMatrix<f64>,
    ) -> Result<Self> {
        let m = space.len();
        if sums.len() != m || moments.nrows() != m || moments.ncols() != m {
            return Err(Error::SpaceMismatch(format!(
                "space has {m} features but s has {} and Q is {}x{}",
                sums.len(),
                moments.nrows(),
                moments.ncols()
            )));
        }
        Ok(Self {
            space,
            count,
            sums,
            moments,
        })
    }

    /// Additive identity over `space`.
    pub fn zero(space: FeatureSpace) -> Self {
        let m = space.len();
        Self {
            space,
            count: 0.0,
            sums: DVector::zeros(m),
            moments: DMatrix::zeros(m, m),
        }
    }

    /// Multiplicative identity: one empty tuple.
    pub fn one() -> Self {
        Self {
            space: FeatureSpace::empty(),
            count: 1.0,
            sums: DVector::zeros(0),
            moments: DMatrix::zeros(0, 0),
        }
    }

    /// Sums `(1, x, x xᵀ)` over the rows of `r`, where `x` holds the named
    /// numeric columns. Sketch feature names are qualified with `r.name()`.
    pub fn from_relation<S: AsRef<str>>(r: &Relation, features: &[S]) -> Result<Self> {
        let acc = FeatureColumns::resolve(r, features)?;
        let mut sum = Accumulator::new(acc.space.len());
        let mut x = vec![0.0; acc.space.len()];
        for row in 0..r.num_rows() {
            acc.fill(row, &mut x);
            sum.push(&x);
        }
        Ok(sum.finish(acc.space))
    }

    pub fn space(&self) -> &FeatureSpace {
        &self.space
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn sums(&self) -> &DVector<f64> {
        &self.sums
    }

    pub fn moments(&self) -> &DMatrix<f64> {
        &self.moments
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }

    pub fn add(&self, other: &CovSketch) -> Result<CovSketch> {
        if !self.space.same_as(&other.space) {
            return Err(Error::SpaceMismatch(format!(
                "cannot add sketches over {:?} and {:?}",
                self.space, other.space
            )));
        }
        Ok(CovSketch {
            space: self.space.clone(),
            count: self.count + other.count,
            sums: &self.sums + &other.sums,
            moments: &self.moments + &other.moments,
        })
    }

    pub(crate) fn add_assign(&mut self, other: &CovSketch) -> Result<()> {
        if !self.space.same_as(&other.space) {
            return Err(Error::SpaceMismatch(format!(
                "cannot add sketches over {:?} and {:?}",
                self.space, other.space
            )));
        }
        self.count += other.count;
        self.sums += &other.sums;
        self.moments += &other.moments;
        Ok(())
    }

    /// Semi-ring product. Both operands are zero-padded into the union of
    /// their spaces, which must be disjoint.
    pub fn multiply(&self, other: &CovSketch) -> Result<CovSketch> {
        if !self.space.is_disjoint(&other.space) {
            return Err(Error::SpaceMismatch(format!(
                "product needs disjoint spaces, got {:?} and {:?}",
                self.space, other.space
            )));
        }
        let space = self.space.union(&other.space);
        let a = self.align(&space)?;
        let b = other.align(&space)?;
        let (ca, cb) = (a.count, b.count);
        let sums = &a.sums * cb + &b.sums * ca;
        let cross = &a.sums * b.sums.transpose();
        let moments = &a.moments * cb + &b.moments * ca + &cross + cross.transpose();
        Ok(CovSketch {
            space,
            count: ca * cb,
            sums,
            moments,
        })
    }

    /// Re-indexes into `target`, a superset of this sketch's space.
    pub fn align(&self, target: &FeatureSpace) -> Result<CovSketch> {
        if self.space.same_as(target) {
            return Ok(self.clone());
        }
        let idx = self.indices_in(target)?;
        let m = target.len();
        let mut sums = DVector::zeros(m);
        let mut moments = DMatrix::zeros(m, m);
        for (i, &ti) in idx.iter().enumerate() {
            sums[ti] = self.sums[i];
            for (j, &tj) in idx.iter().enumerate() {
                moments[(ti, tj)] = self.moments[(i, j)];
            }
        }
        Ok(CovSketch {
            space: target.clone(),
            count: self.count,
            sums,
            moments,
        })
    }

    /// Sub-sketch over `target`, a subset of this sketch's space.
    pub fn restrict(&self, target: &FeatureSpace) -> Result<CovSketch> {
        if self.space.same_as(target) {
            return Ok(self.clone());
        }
        let idx: Vec<usize> = target
            .names()
            .iter()
            .map(|n| {
                self.space.index_of(n).ok_or_else(|| {
                    Error::SpaceMismatch(format!("`{n}` is not in {:?}", self.space))
                })
            })
            .collect::<Result<_>>()?;
        let sums = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.sums[i]));
        let moments = DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.moments[(idx[r], idx[c])]);
        Ok(CovSketch {
            space: target.clone(),
            count: self.count,
            sums,
            moments,
        })
    }

    /// Renames features; names absent from `mapping` are kept.
    pub fn rename(&self, mapping: &BTreeMap<String, String>) -> Result<CovSketch> {
        let renamed: Vec<String> = self
            .space
            .names()
            .iter()
            .map(|n| mapping.get(n).cloned().unwrap_or_else(|| n.clone()))
            .collect();
        let space = FeatureSpace::new(renamed.iter().cloned())?;
        let idx: Vec<usize> = renamed
            .iter()
            .map(|n| space.index_of(n).expect("renamed name is in the new space"))
            .collect();
        let m = space.len();
        let mut sums = DVector::zeros(m);
        let mut moments = DMatrix::zeros(m, m);
        for (i, &ti) in idx.iter().enumerate() {
            sums[ti] = self.sums[i];
            for (j, &tj) in idx.iter().enumerate() {
                moments[(ti, tj)] = self.moments[(i, j)];
            }
        }
        Ok(CovSketch {
            space,
            count: self.count,
            sums,
            moments,
        })
    }

    /// The bordered Gram matrix `[[c, sᵀ], [s, Q]]`.
    pub fn bordered_gram(&self) -> DMatrix<f64> {
        let m = self.dim();
        DMatrix::from_fn(m + 1, m + 1, |i, j| match (i, j) {
            (0, 0) => self.count,
            (0, j) => self.sums[j - 1],
            (i, 0) => self.sums[i - 1],
            (i, j) => self.moments[(i - 1, j - 1)],
        })
    }

    /// Inverse of [`bordered_gram`](Self::bordered_gram).
    pub fn from_bordered_gram(space: FeatureSpace, gram: &DMatrix<f64>) -> Result<CovSketch> {
        let m = space.len();
        if gram.nrows() != m + 1 || gram.ncols() != m + 1 {
            return Err(Error::SpaceMismatch(format!(
                "bordered Gram is {}x{}, expected {}x{}",
                gram.nrows(),
                gram.ncols(),
                m + 1,
                m + 1
            )));
        }
        Ok(CovSketch {
            space,
            count: gram[(0, 0)],
            sums: DVector::from_fn(m, |i, _| gram[(i + 1, 0)]),
            moments: gram.view((1, 1), (m, m)).into_owned(),
        })
    }

    /// Largest entrywise relative difference to `other` over `c`, `s` and `Q`.
    /// Infinite when the spaces differ.
    pub fn max_relative_diff(&self, other: &CovSketch) -> f64 {
        if !self.space.same_as(&other.space) {
            return f64::INFINITY;
        }
        let mut worst = rel_diff(self.count, other.count);
        for (a, b) in self.sums.iter().zip(other.sums.iter()) {
            worst = worst.max(rel_diff(*a, *b));
        }
        for (a, b) in self.moments.iter().zip(other.moments.iter()) {
            worst = worst.max(rel_diff(*a, *b));
        }
        worst
    }

    #[cfg(test)]
    pub(crate) fn map_entries(&self, mut f: impl FnMut(f64) -> f64) -> CovSketch {
        CovSketch {
            space: self.space.clone(),
            count: f(self.count),
            sums: self.sums.map(&mut f),
            moments: self.moments.map(&mut f),
        }
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut f64, &mut DVector<f64>, &mut DMatrix<f64>) {
        (&mut self.count, &mut self.sums, &mut self.moments)
    }

    fn indices_in(&self, target: &FeatureSpace) -> Result<Vec<usize>> {
        self.space
            .names()
            .iter()
            .map(|n| {
                target.index_of(n).ok_or_else(|| {
                    Error::SpaceMismatch(format!("`{n}` is not in target space {target:?}"))
                })
            })
            .collect()
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// Per-key sketches of one relation, all over a shared feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyedSketch {
    key_columns: Vec<String>,
    space: FeatureSpace,
    groups: BTreeMap<Vec<String>, CovSketch>,
}

impl KeyedSketch {
    pub fn from_groups(
        key_columns: Vec<String>,
        space: FeatureSpace,
        groups: BTreeMap<Vec<String>, CovSketch>,
    ) -> Result<Self> {
        for (key, g) in &groups {
            if key.len() != key_columns.len() {
                return Err(Error::KeyMismatch(format!(
                    "group key {key:?} does not match key columns {key_columns:?}"
                )));
            }
            if !g.space.same_as(&space) {
                return Err(Error::SpaceMismatch(format!(
                    "group {key:?} is over {:?}, expected {space:?}",
                    g.space
                )));
            }
        }
        Ok(Self {
            key_columns,
            space,
            groups,
        })
    }

    /// `γ_keys` of `r`: one sketch per distinct key tuple.
    pub fn group_by<K: AsRef<str>, S: AsRef<str>>(
        r: &Relation,
        key_columns: &[K],
        features: &[S],
    ) -> Result<Self> {
        let keys: Vec<&[String]> = key_columns
            .iter()
            .map(|k| {
                let k = k.as_ref();
                match r.kind_of(k) {
                    Some(ColumnKind::Key) => r.text(k),
                    Some(_) => Err(Error::Schema(format!("`{k}` is not a key column"))),
                    None => Err(Error::UnknownColumn(k.to_string())),
                }
            })
            .collect::<Result<_>>()?;
        let acc = FeatureColumns::resolve(r, features)?;
        let m = acc.space.len();
        let mut slots: HashMap<Vec<&str>, usize> = HashMap::new();
        let mut sums: Vec<Accumulator> = Vec::new();
        let mut x = vec![0.0; m];
        for row in 0..r.num_rows() {
            let key: Vec<&str> = keys.iter().map(|col| col[row].as_str()).collect();
            let slot = *slots.entry(key).or_insert_with(|| {
                sums.push(Accumulator::new(m));
                sums.len() - 1
            });
            acc.fill(row, &mut x);
            sums[slot].push(&x);
        }
        let mut finished: Vec<Option<Accumulator>> = sums.into_iter().map(Some).collect();
        let groups = slots
            .into_iter()
            .map(|(key, slot)| {
                let sk = finished[slot].take().expect("slot used once").finish(acc.space.clone());
                (key.into_iter().map(str::to_string).collect(), sk)
            })
            .collect();
        Ok(Self {
            key_columns: key_columns.iter().map(|k| k.as_ref().to_string()).collect(),
            space: acc.space,
            groups,
        })
    }

    pub fn key_columns(&self) -> &[String] {
        &self.key_columns
    }

    pub fn space(&self) -> &FeatureSpace {
        &self.space
    }

    pub fn groups(&self) -> &BTreeMap<Vec<String>, CovSketch> {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, key: &[String]) -> Option<&CovSketch> {
        self.groups.get(key)
    }

    /// Sum of all groups: the outer `γ` after a pushed-down join.
    pub fn collapse(&self) -> CovSketch {
        let mut total = CovSketch::zero(self.space.clone());
        for g in self.groups.values() {
            total
                .add_assign(g)
                .expect("groups share the keyed sketch's space");
        }
        total
    }

    /// Largest number of rows behind any single key, rounded.
    pub fn max_multiplicity(&self) -> f64 {
        self.groups
            .values()
            .map(|g| g.count.round())
            .fold(0.0, f64::max)
    }

    /// Inner join with `other` on identically named key columns. `other`'s
    /// key columns must be a subset of this sketch's key columns; the result
    /// stays keyed on this sketch's columns.
    pub fn join(&self, other: &KeyedSketch) -> Result<KeyedSketch> {
        let pairs: Vec<(String, String)> = other
            .key_columns
            .iter()
            .map(|k| (k.clone(), k.clone()))
            .collect();
        self.join_on(other, &pairs)
    }

    /// Inner join where `pairs` maps each of `other`'s key columns (second)
    /// to one of this sketch's key columns (first).
    pub fn join_on(&self, other: &KeyedSketch, pairs: &[(String, String)]) -> Result<KeyedSketch> {
        let mut positions = Vec::with_capacity(other.key_columns.len());
        for other_col in &other.key_columns {
            let mine = pairs
                .iter()
                .find(|(_, o)| o == other_col)
                .map(|(m, _)| m)
                .ok_or_else(|| {
                    Error::KeyMismatch(format!("no pairing for key column `{other_col}`"))
                })?;
            let pos = self
                .key_columns
                .iter()
                .position(|k| k == mine)
                .ok_or_else(|| {
                    Error::KeyMismatch(format!(
                        "`{mine}` is not among key columns {:?}",
                        self.key_columns
                    ))
                })?;
            positions.push(pos);
        }
        if !self.space.is_disjoint(&other.space) {
            return Err(Error::SpaceMismatch(format!(
                "join needs disjoint spaces, got {:?} and {:?}",
                self.space, other.space
            )));
        }
        let space = self.space.union(&other.space);
        let mut groups = BTreeMap::new();
        let mut probe = Vec::with_capacity(positions.len());
        for (key, left) in &self.groups {
            probe.clear();
            probe.extend(positions.iter().map(|&p| key[p].clone()));
            if let Some(right) = other.groups.get(&probe) {
                groups.insert(key.clone(), left.multiply(right)?);
            }
        }
        // multiply() builds a fresh union space per group; share one instance
        for g in groups.values_mut() {
            g.space = space.clone();
        }
        Ok(KeyedSketch {
            key_columns: self.key_columns.clone(),
            space,
            groups,
        })
    }

    /// Sums groups whose keys agree on `columns`, a subset of the key columns.
    pub fn regroup<S: AsRef<str>>(&self, columns: &[S]) -> Result<KeyedSketch> {
        let positions: Vec<usize> = columns
            .iter()
            .map(|c| {
                self.key_columns
                    .iter()
                    .position(|k| k == c.as_ref())
                    .ok_or_else(|| Error::KeyMismatch(format!("`{}` is not a key column", c.as_ref())))
            })
            .collect::<Result<_>>()?;
        let mut groups: BTreeMap<Vec<String>, CovSketch> = BTreeMap::new();
        for (key, g) in &self.groups {
            let sub: Vec<String> = positions.iter().map(|&p| key[p].clone()).collect();
            match groups.get_mut(&sub) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    groups.insert(sub, g.clone());
                }
            }
        }
        Ok(KeyedSketch {
            key_columns: columns.iter().map(|c| c.as_ref().to_string()).collect(),
            space: self.space.clone(),
            groups,
        })
    }

    /// Applies `f` to every group, keeping keys.
    pub fn map_groups(&self, mut f: impl FnMut(&CovSketch) -> CovSketch) -> KeyedSketch {
        KeyedSketch {
            key_columns: self.key_columns.clone(),
            space: self.space.clone(),
            groups: self.groups.iter().map(|(k, g)| (k.clone(), f(g))).collect(),
        }
    }

    /// Group-wise sum with a sketch keyed on the same columns and space.
    pub fn add(&self, other: &KeyedSketch) -> Result<KeyedSketch> {
        if self.key_columns != other.key_columns {
            return Err(Error::KeyMismatch(format!(
                "{:?} vs {:?}",
                self.key_columns, other.key_columns
            )));
        }
        let mut groups = self.groups.clone();
        for (k, g) in &other.groups {
            match groups.get_mut(k) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    if !g.space.same_as(&self.space) {
                        return Err(Error::SpaceMismatch(format!(
                            "{:?} vs {:?}",
                            g.space, self.space
                        )));
                    }
                    groups.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(KeyedSketch {
            key_columns: self.key_columns.clone(),
            space: self.space.clone(),
            groups,
        })
    }

    /// Renames features of every group.
    pub fn rename(&self, mapping: &BTreeMap<String, String>) -> Result<KeyedSketch> {
        let space = CovSketch::zero(self.space.clone()).rename(mapping)?.space;
        let mut groups = BTreeMap::new();
        for (k, g) in &self.groups {
            let mut r = g.rename(mapping)?;
            r.space = space.clone();
            groups.insert(k.clone(), r);
        }
        Ok(KeyedSketch {
            key_columns: self.key_columns.clone(),
            space,
            groups,
        })
    }

    pub fn restrict(&self, target: &FeatureSpace) -> Result<KeyedSketch> {
        let mut groups = BTreeMap::new();
        for (k, g) in &self.groups {
            let mut r = g.restrict(target)?;
            r.space = target.clone();
            groups.insert(k.clone(), r);
        }
        Ok(KeyedSketch {
            key_columns: self.key_columns.clone(),
            space: target.clone(),
            groups,
        })
    }

    pub fn with_key_columns(mut self, key_columns: Vec<String>) -> Result<KeyedSketch> {
        if key_columns.len() != self.key_columns.len() {
            return Err(Error::KeyMismatch(format!(
                "cannot rename {:?} to {key_columns:?}",
                self.key_columns
            )));
        }
        self.key_columns = key_columns;
        Ok(self)
    }
}

/// Resolved numeric columns in canonical (sorted, qualified) order.
struct FeatureColumns<'a> {
    space: FeatureSpace,
    columns: Vec<&'a [f64]>,
}

impl<'a> FeatureColumns<'a> {
    fn resolve<S: AsRef<str>>(r: &'a Relation, features: &[S]) -> Result<Self> {
        let mut named: Vec<(String, &'a [f64])> = Vec::with_capacity(features.len());
        for f in features {
            let f = f.as_ref();
            match r.kind_of(f) {
                Some(kind) if kind.is_numeric() => named.push((qualify(r.name(), f), r.numeric(f)?)),
                Some(_) => return Err(Error::Schema(format!("`{f}` is not a feature or target"))),
                None => return Err(Error::UnknownColumn(f.to_string())),
            }
        }
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let space = FeatureSpace::new(named.iter().map(|(n, _)| n.clone()))?;
        Ok(Self {
            space,
            columns: named.into_iter().map(|(_, c)| c).collect(),
        })
    }

    fn fill(&self, row: usize, x: &mut [f64]) {
        for (slot, col) in x.iter_mut().zip(&self.columns) {
            *slot = col[row];
        }
    }
}

/// Row-at-a-time accumulation of `(1, x, x xᵀ)` in input order.
struct Accumulator {
    m: usize,
    count: f64,
    sums: Vec<f64>,
    upper: Vec<f64>,
}

impl Accumulator {
    fn new(m: usize) -> Self {
        Self {
            m,
            count: 0.0,
            sums: vec![0.0; m],
            upper: vec![0.0; m * m],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1.0;
        for i in 0..self.m {
            self.sums[i] += x[i];
            let row = &mut self.upper[i * self.m..(i + 1) * self.m];
            for j in i..self.m {
                row[j] += x[i] * x[j];
            }
        }
    }

    fn finish(self, space: FeatureSpace) -> CovSketch {
        let m = self.m;
        let moments = DMatrix::from_fn(m, m, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.upper[a * m + b]
        });
        CovSketch {
            space,
            count: self.count,
            sums: DVector::from_vec(self.sums),
            moments,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::{Cell, ColumnDesc};

    fn rel(name: &str, cols: &[(&str, ColumnKind)], rows: Vec<Vec<Cell>>) -> Relation {
        let schema = cols.iter().map(|(n, k)| ColumnDesc::new(*n, *k)).collect();
        Relation::from_rows(name, schema, rows).unwrap()
    }

    fn sk(names: &[&str], c: f64, s: &[f64], q: &[f64]) -> CovSketch {
        let m = names.len();
        CovSketch::from_parts(
            FeatureSpace::new(names.iter().copied()).unwrap(),
            c,
            DVector::from_row_slice(s),
            DMatrix::from_row_slice(m, m, q),
        )
        .unwrap()
    }

    #[test]
    fn zero_and_one() {
        let space = FeatureSpace::new(["x"]).unwrap();
        let z = CovSketch::zero(space.clone());
        assert_eq!(z, sk(&["x"], 0.0, &[0.0], &[0.0]));
        let a = sk(&["x"], 2.0, &[3.0], &[5.0]);
        assert_eq!(a.add(&z).unwrap(), a);
        let one = CovSketch::one();
        assert_eq!(one.multiply(&a).unwrap(), a);
        assert_eq!(a.multiply(&one).unwrap(), a);
        assert_eq!(one.multiply(&one).unwrap(), one);
        let two = one.add(&one).unwrap();
        assert_eq!(two.count(), 2.0);
        assert_eq!(two.dim(), 0);
        let zz = CovSketch::zero(FeatureSpace::new(["z"]).unwrap());
        let prod = a.multiply(&zz).unwrap();
        assert_eq!(prod, CovSketch::zero(FeatureSpace::new(["x", "z"]).unwrap()));
    }

    #[test]
    fn from_relation_matches_direct_sums() {
        let r = rel("r", &[("x", ColumnKind::Feature)], vec![vec![1.0.into()], vec![2.0.into()]]);
        assert_eq!(
            CovSketch::from_relation(&r, &["x"]).unwrap(),
            sk(&["r.x"], 2.0, &[3.0], &[5.0])
        );
        let r = rel(
            "r",
            &[("x", ColumnKind::Feature), ("y", ColumnKind::Target)],
            vec![vec![1.0.into(), 2.0.into()], vec![3.0.into(), 4.0.into()]],
        );
        assert_eq!(
            CovSketch::from_relation(&r, &["x", "y"]).unwrap(),
            sk(&["r.x", "r.y"], 2.0, &[4.0, 6.0], &[10.0, 14.0, 14.0, 20.0])
        );
        let empty = r.filter_rows(|_| false);
        assert_eq!(
            CovSketch::from_relation(&empty, &["x", "y"]).unwrap(),
            CovSketch::zero(FeatureSpace::new(["r.x", "r.y"]).unwrap())
        );
    }

    #[test]
    fn add_and_multiply_examples() {
        let a = sk(&["x"], 2.0, &[3.0], &[5.0]);
        let b = sk(&["x"], 1.0, &[3.0], &[9.0]);
        assert_eq!(a.add(&b).unwrap(), sk(&["x"], 3.0, &[6.0], &[14.0]));
        assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());

        // cross join of x ∈ {1,2} with z ∈ {1,2,3}
        let z = sk(&["z"], 3.0, &[6.0], &[14.0]);
        assert_eq!(
            a.multiply(&z).unwrap(),
            sk(&["x", "z"], 6.0, &[9.0, 12.0], &[15.0, 18.0, 18.0, 28.0])
        );
        assert!(matches!(a.multiply(&b), Err(Error::SpaceMismatch(_))));
        assert!(matches!(a.add(&z), Err(Error::SpaceMismatch(_))));
    }

    #[test]
    fn align_examples() {
        let a = sk(&["x"], 2.0, &[3.0], &[5.0]);
        let target = FeatureSpace::new(["x", "z"]).unwrap();
        let aligned = a.align(&target).unwrap();
        assert_eq!(aligned, sk(&["x", "z"], 2.0, &[3.0, 0.0], &[5.0, 0.0, 0.0, 0.0]));
        assert_eq!(a.align(a.space()).unwrap(), a);
        assert!(aligned.align(a.space()).is_err());

        // rows x ∈ {1,2} and rows z ∈ {4} as one padded multiset
        let z = sk(&["z"], 1.0, &[4.0], &[16.0]);
        let block = aligned.add(&z.align(&target).unwrap()).unwrap();
        assert_eq!(block, sk(&["x", "z"], 3.0, &[3.0, 4.0], &[5.0, 0.0, 0.0, 16.0]));
    }

    fn grouped_relation() -> Relation {
        rel(
            "r",
            &[("a", ColumnKind::Key), ("b", ColumnKind::Feature)],
            vec![
                vec!["a1".into(), 1.0.into()],
                vec!["a1".into(), 2.0.into()],
                vec!["a2".into(), 3.0.into()],
            ],
        )
    }

    #[test]
    fn group_by_and_collapse() {
        let r = grouped_relation();
        let g = KeyedSketch::group_by(&r, &["a"], &["b"]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(&["a1".into()]).unwrap(), &sk(&["r.b"], 2.0, &[3.0], &[5.0]));
        assert_eq!(g.get(&["a2".into()]).unwrap(), &sk(&["r.b"], 1.0, &[3.0], &[9.0]));
        assert_eq!(g.collapse(), sk(&["r.b"], 3.0, &[6.0], &[14.0]));
        assert_eq!(g.collapse(), CovSketch::from_relation(&r, &["b"]).unwrap());

        let empty = KeyedSketch::group_by(&r.filter_rows(|_| false), &["a"], &["b"]).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.collapse(), CovSketch::zero(FeatureSpace::new(["r.b"]).unwrap()));

        let single = r.filter_rows(|i| i < 2);
        let g = KeyedSketch::group_by(&single, &["a"], &["b"]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.collapse(), CovSketch::from_relation(&single, &["b"]).unwrap());

        assert!(matches!(
            KeyedSketch::group_by(&r, &["zz"], &["b"]),
            Err(Error::UnknownColumn(_))
        ));
        assert!(KeyedSketch::group_by(&r, &["b"], &["b"]).is_err());
    }

    fn keyed(key: &str, groups: Vec<(&str, CovSketch)>) -> KeyedSketch {
        let space = groups[0].1.space().clone();
        KeyedSketch::from_groups(
            vec![key.to_string()],
            space,
            groups.into_iter().map(|(k, g)| (vec![k.to_string()], g)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn join_examples() {
        // a: k1 rows x ∈ {1,2}; b: k1 row z=4, k2 five rows of z=0
        let a = keyed("k", vec![("k1", sk(&["x"], 2.0, &[3.0], &[5.0]))]);
        let b = keyed(
            "k",
            vec![
                ("k1", sk(&["z"], 1.0, &[4.0], &[16.0])),
                ("k2", sk(&["z"], 5.0, &[0.0], &[0.0])),
            ],
        );
        let j = a.join(&b).unwrap();
        assert_eq!(j.len(), 1);
        // materialized rows (1,4), (2,4)
        assert_eq!(
            j.get(&["k1".into()]).unwrap(),
            &sk(&["x", "z"], 2.0, &[3.0, 8.0], &[5.0, 12.0, 12.0, 32.0])
        );

        let disjoint = keyed("k", vec![("k9", sk(&["z"], 1.0, &[4.0], &[16.0]))]);
        assert!(a.join(&disjoint).unwrap().is_empty());

        let units = KeyedSketch::from_groups(
            vec!["k".into()],
            FeatureSpace::empty(),
            [(vec!["k1".to_string()], CovSketch::one())].into_iter().collect(),
        )
        .unwrap();
        assert_eq!(a.join(&units).unwrap(), a);

        let other_key = b.clone().with_key_columns(vec!["j".into()]).unwrap();
        assert!(matches!(a.join(&other_key), Err(Error::KeyMismatch(_))));
        let renamed = a
            .join_on(&other_key, &[("k".to_string(), "j".to_string())])
            .unwrap();
        assert_eq!(renamed, j);
    }

    #[test]
    fn regroup_to_subkey() {
        let r = rel(
            "r",
            &[("a", ColumnKind::Key), ("c", ColumnKind::Key), ("b", ColumnKind::Feature)],
            vec![
                vec!["a1".into(), "c1".into(), 1.0.into()],
                vec!["a1".into(), "c2".into(), 2.0.into()],
                vec!["a2".into(), "c1".into(), 3.0.into()],
            ],
        );
        let both = KeyedSketch::group_by(&r, &["a", "c"], &["b"]).unwrap();
        assert_eq!(both.len(), 3);
        assert_eq!(
            both.regroup(&["a"]).unwrap(),
            KeyedSketch::group_by(&r, &["a"], &["b"]).unwrap()
        );
    }

    #[test]
    fn rename_and_restrict() {
        let a = sk(&["p", "q"], 2.0, &[1.0, 2.0], &[1.0, 3.0, 3.0, 4.0]);
        let map = [("p".to_string(), "z".to_string())].into_iter().collect();
        let r = a.rename(&map).unwrap();
        assert_eq!(r, sk(&["q", "z"], 2.0, &[2.0, 1.0], &[4.0, 3.0, 3.0, 1.0]));
        let only_q = a.restrict(&FeatureSpace::new(["q"]).unwrap()).unwrap();
        assert_eq!(only_q, sk(&["q"], 2.0, &[2.0], &[4.0]));
        let back = CovSketch::from_bordered_gram(a.space().clone(), &a.bordered_gram()).unwrap();
        assert_eq!(back, a);
    }
}
