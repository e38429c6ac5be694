#![allow(dead_code)]

use std::collections::BTreeMap;

use fabsearch::relation::{Cell, ColumnDesc, ColumnKind, Relation};
use fabsearch::{CovSketch, FeatureSpace};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Rows of `(key index, feature values)`.
pub type Rows = Vec<(usize, Vec<f64>)>;

pub fn rows(max_rows: usize, m: usize, keys: usize) -> impl Strategy<Value = Rows> {
    prop::collection::vec((0..keys, prop::collection::vec(-20i32..=20, m)), 0..=max_rows).prop_map(|rs| {
        rs.into_iter()
            .map(|(k, v)| (k, v.into_iter().map(f64::from).collect()))
            .collect()
    })
}

pub fn real_rows(max_rows: usize, m: usize, keys: usize) -> impl Strategy<Value = Rows> {
    prop::collection::vec((0..keys, prop::collection::vec(-10.0f64..10.0, m)), 0..=max_rows)
}

/// Columns `k` (key) and `<prefix>0..` (features).
pub fn relation(name: &str, prefix: &str, rows: &Rows, m: usize) -> Relation {
    let mut schema = vec![ColumnDesc::new("k", ColumnKind::Key)];
    schema.extend((0..m).map(|j| ColumnDesc::new(format!("{prefix}{j}"), ColumnKind::Feature)));
    let cells = rows
        .iter()
        .map(|(k, v)| {
            let mut row = vec![Cell::from(format!("k{k}"))];
            row.extend(v.iter().map(|x| Cell::from(*x)));
            row
        })
        .collect();
    Relation::from_rows(name, schema, cells).unwrap()
}

pub fn features(prefix: &str, m: usize) -> Vec<String> {
    (0..m).map(|j| format!("{prefix}{j}")).collect()
}

pub fn sketch(r: &Relation, prefix: &str, m: usize) -> CovSketch {
    CovSketch::from_relation(r, &features(prefix, m)).unwrap()
}

/// Sketch of explicit named rows, the row-level oracle.
pub fn sketch_rows(names: &[String], rows: &[Vec<f64>]) -> CovSketch {
    let space = FeatureSpace::new(names.iter().cloned()).unwrap();
    let order: Vec<usize> = space
        .names()
        .iter()
        .map(|n| names.iter().position(|x| x == n).unwrap())
        .collect();
    let m = names.len();
    let mut s = DVector::zeros(m);
    let mut q = DMatrix::zeros(m, m);
    for row in rows {
        let x = DVector::from_iterator(m, order.iter().map(|&i| row[i]));
        s += &x;
        q += &x * x.transpose();
    }
    CovSketch::from_parts(space, rows.len() as f64, s, q).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn sketches_close(a: &CovSketch, b: &CovSketch, tol: f64) -> bool {
    a.space() == b.space()
        && close(a.count(), b.count(), tol)
        && a.sums().iter().zip(b.sums().iter()).all(|(x, y)| close(*x, *y, tol))
        && a.moments().iter().zip(b.moments().iter()).all(|(x, y)| close(*x, *y, tol))
}

pub fn mapping(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}
