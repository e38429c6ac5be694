mod common;

use common::*;
use fabsearch::naive::{fit_qr, fit_ridge, r2};
use fabsearch::proxy::{default_lambda, r2_from_sketch, train_ridge};
use fabsearch::GramSystem;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const M: usize = 4;

fn design(rows: &Rows) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(rows.len(), M, |i, j| if j == 0 { 1.0 } else { rows[i].1[j - 1] });
    let y = DVector::from_fn(rows.len(), |i, _| rows[i].1[M - 1] + 0.5 * rows[i].1[0]);
    (x, y)
}

fn with_target(rows: &Rows) -> Rows {
    let (_, y) = design(rows);
    rows.iter()
        .zip(y.iter())
        .map(|((k, v), y)| {
            let mut v = v.clone();
            v[M - 1] = *y;
            (*k, v)
        })
        .collect()
}

fn system(rows: &Rows) -> GramSystem {
    let s = sketch(&relation("r", "f", &with_target(rows), M), "f", M);
    GramSystem::assemble(&s, &["r.f0", "r.f1", "r.f2"], "r.f3").unwrap()
}

fn vec_close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol * a.norm().max(b.norm()).max(1.0)
}

fn enough_rows() -> impl Strategy<Value = Rows> {
    real_rows(120, M, 3).prop_filter("need more rows than coefficients", |r| r.len() >= M + 4)
}

proptest! {
    #[test]
    fn sketch_training_matches_row_normal_equations(rows in enough_rows(), lambda in 0.0f64..5.0) {
        let g = system(&rows);
        let (x, y) = design(&rows);
        let sketched = train_ridge(&g, lambda).unwrap();
        let direct = fit_ridge(&x, &y, lambda).unwrap();
        prop_assert!(vec_close(&sketched.theta, &direct, 1e-8), "{} vs {}", sketched.theta, direct);
        if lambda == 0.0 {
            let qr = fit_qr(&x, &y).unwrap();
            prop_assert!(vec_close(&sketched.theta, &qr, 1e-8));
        }
    }

    #[test]
    fn sketch_r2_matches_rows(train in enough_rows(), test in enough_rows()) {
        let model = train_ridge(&system(&train), default_lambda(train.len() as f64)).unwrap();
        let test_sketch = sketch(&relation("r", "f", &with_target(&test), M), "f", M);
        let (x, y) = design(&test);
        let from_rows = r2(&x, &y, &model.theta).unwrap();
        let from_sketch = r2_from_sketch(&model, &test_sketch).unwrap();
        prop_assert!((from_rows - from_sketch).abs() <= 1e-8 * from_rows.abs().max(1.0));
    }

    #[test]
    fn training_sse_is_monotone_in_lambda(rows in enough_rows(), a in 0.0f64..50.0, b in 0.0f64..50.0) {
        let g = system(&rows);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let sse_lo = g.sse(&train_ridge(&g, lo).unwrap().theta);
        let sse_hi = g.sse(&train_ridge(&g, hi).unwrap().theta);
        prop_assert!(sse_lo <= sse_hi + 1e-9 * sse_hi.abs().max(1.0), "{sse_lo} > {sse_hi}");
    }
}
