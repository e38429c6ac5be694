//! Ridge-regularized linear regression trained and scored from sketches.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::semiring::CovSketch;

/// Relative pivot size below which a Cholesky factor is treated as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;

/// Normal-equation blocks with an implicit leading intercept column.
#[derive(Clone, Debug, PartialEq)]
pub struct GramSystem {
    pub features: Vec<String>,
    pub target: String,
    /// `(m+1)×(m+1)`; row/column 0 is the intercept.
    pub gxx: DMatrix<f64>,
    pub gxy: DVector<f64>,
    pub gyy: f64,
    pub n: f64,
}

impl GramSystem {
    /// Extracts the bordered blocks for `features` and `target` from `sk`.
    pub fn assemble<S: AsRef<str>>(sk: &CovSketch, features: &[S], target: &str) -> Result<Self> {
        if features.iter().any(|f| f.as_ref() == target) {
            return Err(Error::Invalid(format!(
                "target `{target}` is also listed as a feature"
            )));
        }
        let lookup = |name: &str| {
            sk.space()
                .index_of(name)
                .ok_or_else(|| Error::UnknownColumn(name.to_string()))
        };
        let idx: Vec<usize> = features
            .iter()
            .map(|f| lookup(f.as_ref()))
            .collect::<Result<_>>()?;
        let t = lookup(target)?;
        let m = idx.len();
        let s = sk.sums();
        let q = sk.moments();
        let gxx = DMatrix::from_fn(m + 1, m + 1, |i, j| match (i, j) {
            (0, 0) => sk.count(),
            (0, j) => s[idx[j - 1]],
            (i, 0) => s[idx[i - 1]],
            (i, j) => q[(idx[i - 1], idx[j - 1])],
        });
        let gxy = DVector::from_fn(m + 1, |i, _| match i {
            0 => s[t],
            i => q[(idx[i - 1], t)],
        });
        Ok(Self {
            features: features.iter().map(|f| f.as_ref().to_string()).collect(),
            target: target.to_string(),
            gxx,
            gxy,
            gyy: q[(t, t)],
            n: sk.count(),
        })
    }

    /// Residual sum of squares of `theta` on the rows behind this system.
    pub fn sse(&self, theta: &DVector<f64>) -> f64 {
        self.gyy - 2.0 * theta.dot(&self.gxy) + theta.dot(&(&self.gxx * theta))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    /// Intercept first, then one coefficient per feature.
    pub theta: DVector<f64>,
    pub features: Vec<String>,
    pub target: String,
    pub lambda: f64,
}

impl LinearModel {
    pub fn intercept(&self) -> f64 {
        self.theta[0]
    }

    pub fn coefficients(&self) -> impl Iterator<Item = (&str, f64)> {
        self.features
            .iter()
            .map(String::as_str)
            .zip(self.theta.iter().skip(1).copied())
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.theta[0]
            + self
                .theta
                .iter()
                .skip(1)
                .zip(x)
                .map(|(t, v)| t * v)
                .sum::<f64>()
    }
}

/// Scale-aware default ridge coefficient.
pub fn default_lambda(n: f64) -> f64 {
    1e-6 * n.max(1.0)
}

/// Solves `(Gxx + λ·diag(0,1,…,1)) θ = Gxy`.
///
/// At `λ = 0` a singular system is an error. At `λ > 0` a failed
/// factorization (noisy Grams can be indefinite) falls back to the
/// least-norm pseudo-inverse solution.
pub fn train_ridge(g: &GramSystem, lambda: f64) -> Result<LinearModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Invalid(format!("ridge coefficient must be >= 0, got {lambda}")));
    }
    if !(g.n >= 1.0) {
        return Err(Error::Invalid(format!("need at least one row, got n = {}", g.n)));
    }
    let mut a = g.gxx.clone();
    for i in 1..a.nrows() {
        a[(i, i)] += lambda;
    }
    let theta = match cholesky_solve(&a, &g.gxy) {
        Some(theta) => theta,
        None if lambda == 0.0 => {
            return Err(Error::Singular(
                "normal equations are rank deficient; retry with lambda > 0".into(),
            ))
        }
        None => pseudo_inverse_solve(&a, &g.gxy),
    };
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Singular("solution has non-finite entries".into()));
    }
    Ok(LinearModel {
        theta,
        features: g.features.clone(),
        target: g.target.clone(),
        lambda,
    })
}

fn cholesky_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = a.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    let chol = Cholesky::new(a.clone())?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, d| m.min(d * d));
    if min_pivot <= PIVOT_TOLERANCE * scale {
        return None;
    }
    Some(chol.solve(b))
}

fn pseudo_inverse_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let largest = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = largest * (a.nrows() as f64) * f64::EPSILON;
    let proj = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_fn(proj.len(), |i, _| {
        let mu = eig.eigenvalues[i];
        if mu.abs() > cutoff {
            proj[i] / mu
        } else {
            0.0
        }
    });
    &eig.eigenvectors * scaled
}

/// Coefficient of determination of `model` on the rows summarized by `sk`.
pub fn r2_from_sketch(model: &LinearModel, sk: &CovSketch) -> Result<f64> {
    let g = GramSystem::assemble(sk, &model.features, &model.target)?;
    if !(g.n >= 1.0) {
        return Err(Error::UndefinedUtility(format!("evaluation sketch has count {}", g.n)));
    }
    let sst = g.gyy - g.gxy[0] * g.gxy[0] / g.n;
    if !(sst > 1e-12 * g.gyy.abs()) {
        return Err(Error::UndefinedUtility(
            "target has no variance in the evaluation data".into(),
        ));
    }
    Ok(1.0 - g.sse(&model.theta) / sst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::{Cell, ColumnDesc, ColumnKind, Relation};

    fn relation(xs: &[&[f64]], ys: &[f64]) -> Relation {
        let m = xs[0].len();
        let mut schema: Vec<ColumnDesc> = (0..m)
            .map(|i| ColumnDesc::new(format!("x{i}"), ColumnKind::Feature))
            .collect();
        schema.push(ColumnDesc::new("y", ColumnKind::Target));
        let rows = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                x.iter()
                    .map(|v| Cell::Num(*v))
                    .chain(std::iter::once(Cell::Num(*y)))
                    .collect()
            })
            .collect();
        Relation::from_rows("r", schema, rows).unwrap()
    }

    fn system(r: &Relation) -> GramSystem {
        let cols = r.numeric_columns();
        let sk = CovSketch::from_relation(r, &cols).unwrap();
        let feats: Vec<String> = cols
            .iter()
            .filter(|c| **c != "y")
            .map(|c| format!("r.{c}"))
            .collect();
        GramSystem::assemble(&sk, &feats, "r.y").unwrap()
    }

    #[test]
    fn assemble_example() {
        let r = relation(&[&[1.0], &[3.0]], &[2.0, 4.0]);
        let g = system(&r);
        assert_eq!(g.n, 2.0);
        assert_eq!(g.gxx, DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 4.0, 10.0]));
        assert_eq!(g.gxy, DVector::from_row_slice(&[6.0, 14.0]));
        assert_eq!(g.gyy, 20.0);
    }

    #[test]
    fn assemble_errors_and_zero() {
        let r = relation(&[&[1.0], &[3.0]], &[2.0, 4.0]);
        let sk = CovSketch::from_relation(&r, &["x0", "y"]).unwrap();
        assert!(GramSystem::assemble(&sk, &["r.y"], "r.y").is_err());
        assert!(matches!(
            GramSystem::assemble(&sk, &["r.nope"], "r.y"),
            Err(Error::UnknownColumn(_))
        ));
        let zero = CovSketch::zero(sk.space().clone());
        let g = GramSystem::assemble(&zero, &["r.x0"], "r.y").unwrap();
        assert_eq!(g.n, 0.0);
        assert!(g.gxx.iter().all(|v| *v == 0.0));
        assert!(train_ridge(&g, 1.0).is_err());
    }

    #[test]
    fn exact_linear_data() {
        let r = relation(&[&[1.0], &[2.0], &[3.0]], &[2.0, 4.0, 6.0]);
        let model = train_ridge(&system(&r), 0.0).unwrap();
        assert!((model.theta[0]).abs() < 1e-12);
        assert!((model.theta[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn colinear_with_intercept() {
        let r = relation(&[&[1.0], &[1.0], &[1.0]], &[1.0, 2.0, 4.0]);
        let g = system(&r);
        assert!(matches!(train_ridge(&g, 0.0), Err(Error::Singular(_))));
        let model = train_ridge(&g, 1e-6).unwrap();
        assert!(model.theta.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn indefinite_gram_falls_back_to_pseudo_inverse() {
        let g = GramSystem {
            features: vec!["a".into()],
            target: "y".into(),
            gxx: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            gxy: DVector::from_row_slice(&[1.0, 1.0]),
            gyy: 1.0,
            n: 1.0,
        };
        let model = train_ridge(&g, 1e-3).unwrap();
        assert!(model.theta.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn r2_examples() {
        let r = relation(&[&[1.0], &[2.0], &[3.0]], &[2.0, 4.0, 6.0]);
        let cols = r.numeric_columns();
        let sk = CovSketch::from_relation(&r, &cols).unwrap();
        let model = train_ridge(&system(&r), 0.0).unwrap();
        assert!((r2_from_sketch(&model, &sk).unwrap() - 1.0).abs() < 1e-9);

        let mean = LinearModel {
            theta: DVector::from_row_slice(&[4.0, 0.0]),
            ..model.clone()
        };
        assert!(r2_from_sketch(&mean, &sk).unwrap().abs() < 1e-9);

        let flat = relation(&[&[1.0], &[2.0]], &[3.0, 3.0]);
        let flat_sk = CovSketch::from_relation(&flat, &["x0", "y"]).unwrap();
        assert!(matches!(
            r2_from_sketch(&model, &flat_sk),
            Err(Error::UndefinedUtility(_))
        ));
    }
}
