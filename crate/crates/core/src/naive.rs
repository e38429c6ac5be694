//! Row-level reference path: materialize the augmented table, then fit and
//! score on its rows. Used as the oracle for the sketch path and as the
//! naive baseline in benchmarks.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::relation::{ColumnKind, Relation};
use crate::search::SearchState;
use crate::space::qualify;

/// A materialized numeric table with qualified column names.
#[derive(Clone, Debug, PartialEq)]
pub struct Materialized {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

struct Row {
    keys: Vec<Option<String>>,
    values: Vec<f64>,
}

/// Applies `state` to `base` row by row: unions append mapped provider
/// rows, joins pair every row with every provider row sharing its key.
pub fn materialize(
    base: &Relation,
    state: &SearchState,
    providers: &BTreeMap<String, Relation>,
) -> Result<Materialized> {
    let id = base.name();
    let key_cols = base.columns_of_kind(ColumnKind::Key);
    let value_cols = base.numeric_columns();
    let mut columns: Vec<String> = value_cols.iter().map(|c| qualify(id, c)).collect();

    let keys_of = |r: &Relation, names: &[Option<&str>], i: usize| -> Result<Vec<Option<String>>> {
        names
            .iter()
            .map(|n| match n {
                Some(n) => Ok(Some(r.text(n)?[i].clone())),
                None => Ok(None),
            })
            .collect()
    };
    let numeric_of = |r: &Relation, names: &[&str]| -> Result<Vec<Vec<f64>>> {
        names.iter().map(|n| r.numeric(n).map(<[f64]>::to_vec)).collect()
    };

    let mut rows = Vec::with_capacity(base.num_rows());
    let own_keys: Vec<Option<&str>> = key_cols.iter().map(|k| Some(*k)).collect();
    let own_values = numeric_of(base, &value_cols)?;
    for i in 0..base.num_rows() {
        rows.push(Row {
            keys: keys_of(base, &own_keys, i)?,
            values: own_values.iter().map(|c| c[i]).collect(),
        });
    }

    for u in &state.unions {
        let p = provider(providers, &u.dataset_id)?;
        let mapped: Vec<&str> = value_cols
            .iter()
            .map(|c| {
                u.column_mapping.get(*c).map(String::as_str).ok_or_else(|| {
                    Error::Invalid(format!("union `{}` does not map `{c}`", u.dataset_id))
                })
            })
            .collect::<Result<_>>()?;
        let mapped_keys: Vec<Option<&str>> = key_cols
            .iter()
            .map(|k| u.key_mapping.get(*k).map(String::as_str))
            .collect();
        let values = numeric_of(p, &mapped)?;
        for i in 0..p.num_rows() {
            rows.push(Row {
                keys: keys_of(p, &mapped_keys, i)?,
                values: values.iter().map(|c| c[i]).collect(),
            });
        }
    }

    for j in &state.joins {
        let p = provider(providers, &j.dataset_id)?;
        let slot = key_cols
            .iter()
            .position(|k| *k == j.request_key)
            .ok_or_else(|| Error::UnknownColumn(j.request_key.clone()))?;
        let p_cols = p.numeric_columns();
        let p_values = numeric_of(p, &p_cols)?;
        let mut by_key: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, k) in p.text(&j.provider_key)?.iter().enumerate() {
            by_key.entry(k.as_str()).or_default().push(i);
        }
        let mut joined = Vec::new();
        for row in rows {
            let key = row.keys[slot].as_deref().ok_or_else(|| {
                Error::KeyMismatch(format!("a unioned row has no `{}` value", j.request_key))
            })?;
            let Some(matches) = by_key.get(key) else { continue };
            for &pi in matches {
                let mut values = row.values.clone();
                values.extend(p_values.iter().map(|c| c[pi]));
                joined.push(Row {
                    keys: row.keys.clone(),
                    values,
                });
            }
        }
        rows = joined;
        columns.extend(p_cols.iter().map(|c| qualify(&j.dataset_id, c)));
    }

    Ok(Materialized {
        columns,
        rows: rows.into_iter().map(|r| r.values).collect(),
    })
}

fn provider<'p>(providers: &'p BTreeMap<String, Relation>, id: &str) -> Result<&'p Relation> {
    providers
        .get(id)
        .ok_or_else(|| Error::Corpus(format!("no relation for `{id}`")))
}

impl Materialized {
    fn index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Design matrix with a leading column of ones, and the target vector.
    pub fn design<S: AsRef<str>>(&self, features: &[S], target: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let idx: Vec<usize> = features
            .iter()
            .map(|f| self.index(f.as_ref()))
            .collect::<Result<_>>()?;
        let t = self.index(target)?;
        let n = self.rows.len();
        let x = DMatrix::from_fn(n, idx.len() + 1, |i, j| match j {
            0 => 1.0,
            j => self.rows[i][idx[j - 1]],
        });
        let y = DVector::from_fn(n, |i, _| self.rows[i][t]);
        Ok((x, y))
    }
}

/// Least squares via Householder QR; rank deficiency is an error.
pub fn fit_qr(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if n < p {
        return Err(Error::Singular(format!("{n} rows for {p} coefficients")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let largest = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|v| v.abs() <= 1e-10 * largest) {
        return Err(Error::Singular("design matrix is rank deficient".into()));
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))
}

/// Ridge fit through normal equations built from the rows.
pub fn fit_ridge(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let mut a = x.transpose() * x;
    for i in 1..a.nrows() {
        a[(i, i)] += lambda;
    }
    let b = x.transpose() * y;
    a.cholesky()
        .map(|c| c.solve(&b))
        .ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))
}

/// `1 − SSE/SST` of `theta` on the rows of `x`, `y`.
pub fn r2(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> Result<f64> {
    let n = y.len() as f64;
    if n == 0.0 {
        return Err(Error::UndefinedUtility("no rows".into()));
    }
    let mean = y.sum() / n;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if !(sst > 0.0) {
        return Err(Error::UndefinedUtility("target has no variance".into()));
    }
    let sse = (y - x * theta).norm_squared();
    Ok(1.0 - sse / sst)
}
