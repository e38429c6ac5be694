//! Gaussian-mechanism privatization of sketches and budget accounting.
//!
//! Sketches are noised once, locally, before they leave the owner's store.
//! Everything computed from a noised sketch afterwards is post-processing and
//! spends nothing, so the ledger is only ever debited at release time.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{Provenance, RegisteredSketchSet};
use crate::relation::Relation;
use crate::semiring::CovSketch;

/// An `(ε, δ)` allowance. `ε = ∞` means privatization is disabled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || epsilon.is_nan() {
            return Err(Error::InvalidBudget(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidBudget(format!("delta must be in (0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn unlimited() -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta: 0.5,
        }
    }

    pub fn is_unlimited(&self) -> bool {
        self.epsilon.is_infinite()
    }

    /// Even split into `parts` shares under sequential composition.
    pub fn split(&self, parts: usize) -> PrivacyBudget {
        let parts = parts.max(1) as f64;
        PrivacyBudget {
            epsilon: self.epsilon / parts,
            delta: self.delta / parts,
        }
    }
}

/// Per-column `(lo, hi)` used to map values into `[0, 1]`.
pub type Bounds = BTreeMap<String, (f64, f64)>;

/// Maps every feature and target value to `(v − lo)/(hi − lo)` clipped into
/// `[0, 1]`. Columns without supplied bounds get data-derived bounds, which
/// depend on the private data themselves.
pub fn normalize_clip(r: &Relation, bounds: Option<&Bounds>) -> Result<(Relation, Bounds)> {
    let mut recorded = Bounds::new();
    let mut out = r.clone();
    for col in r.numeric_columns() {
        let values = r.numeric(col)?;
        let (lo, hi) = match bounds.and_then(|b| b.get(col)) {
            Some(&(lo, hi)) => {
                if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                    return Err(Error::InvalidBounds {
                        column: col.to_string(),
                        lo,
                        hi,
                    });
                }
                (lo, hi)
            }
            None => {
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                match (lo.is_finite(), hi > lo) {
                    (false, _) => (0.0, 1.0),
                    (true, false) => (lo, lo + 1.0),
                    (true, true) => (lo, hi),
                }
            }
        };
        let scaled = values
            .iter()
            .map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
            .collect();
        out = out.with_numeric_column(col, scaled)?;
        recorded.insert(col.to_string(), (lo, hi));
    }
    Ok((out, recorded))
}

/// L2 sensitivity of a flattened `(c, s, Q)` over `m` features in `[0, 1]`
/// when one row is added or removed.
pub fn sketch_sensitivity(m: usize) -> f64 {
    let m = m as f64;
    (1.0 + m + m * m).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub sensitivity: f64,
    pub mechanism: Mechanism,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            sigma: 0.0,
            sensitivity: 0.0,
            mechanism: Mechanism::Gaussian,
        }
    }
}

/// Classical Gaussian calibration `σ = Δ·sqrt(2 ln(1.25/δ))/ε`, valid for
/// `ε ≤ 1`.
pub fn gaussian_sigma(b: PrivacyBudget, sensitivity: f64) -> Result<NoiseSpec> {
    if !(b.epsilon > 0.0 && b.epsilon <= 1.0) {
        return Err(Error::InvalidBudget(format!(
            "Gaussian calibration needs 0 < epsilon <= 1, got {}",
            b.epsilon
        )));
    }
    if !(b.delta > 0.0 && b.delta < 1.0) {
        return Err(Error::InvalidBudget(format!("delta must be in (0, 1), got {}", b.delta)));
    }
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(Error::Invalid(format!("sensitivity must be finite and >= 0, got {sensitivity}")));
    }
    Ok(NoiseSpec {
        sigma: sensitivity * (2.0 * (1.25 / b.delta).ln()).sqrt() / b.epsilon,
        sensitivity,
        mechanism: Mechanism::Gaussian,
    })
}

/// Caps ε at 1 for calibration, logging when it had to.
pub fn calibration_budget(b: PrivacyBudget) -> PrivacyBudget {
    if b.epsilon > 1.0 {
        log::warn!(
            "epsilon {} exceeds the Gaussian calibration range; calibrating at epsilon = 1",
            b.epsilon
        );
        PrivacyBudget {
            epsilon: 1.0,
            delta: b.delta,
        }
    } else {
        b
    }
}

/// Adds i.i.d. `N(0, σ²)` to `c`, each `sᵢ` and each `Q_ij` with `i ≤ j`,
/// mirroring the upper triangle so `Q` stays symmetric.
pub fn privatize_sketch<R: Rng + ?Sized>(sk: &CovSketch, spec: &NoiseSpec, rng: &mut R) -> CovSketch {
    let mut out = sk.clone();
    if spec.sigma == 0.0 {
        return out;
    }
    let sigma = spec.sigma;
    let mut draw = || sigma * rng.sample::<f64, _>(StandardNormal);
    let (c, s, q) = out.parts_mut();
    *c += draw();
    for v in s.iter_mut() {
        *v += draw();
    }
    let m = q.nrows();
    for i in 0..m {
        for j in i..m {
            let noisy = q[(i, j)] + draw();
            q[(i, j)] = noisy;
            q[(j, i)] = noisy;
        }
    }
    out
}

/// Artifact name used in provenance and ledger records.
pub fn artifact_name(key_columns: Option<&[String]>) -> String {
    match key_columns {
        None => "horizontal".to_string(),
        Some(keys) => format!("vertical:{}", keys.join(",")),
    }
}

/// Privatizes every artifact of `set` under `b`.
///
/// The budget is split evenly across the horizontal sketch and each keyed
/// sketch (sequential composition). Inside one keyed sketch every group is
/// noised at that artifact's full share, since a row lies in exactly one
/// group. The ledger is debited once, for the whole of `b`.
pub fn privatize_set<R: Rng + ?Sized>(
    set: &RegisteredSketchSet,
    ledger: &mut BudgetLedger,
    b: PrivacyBudget,
    rng: &mut R,
) -> Result<RegisteredSketchSet> {
    if b.is_unlimited() {
        return Err(Error::InvalidBudget(
            "an unlimited budget disables privatization; skip privatize_set instead".into(),
        ));
    }
    ledger.check(&set.dataset_id, b)?;
    let share = calibration_budget(b.split(1 + set.vertical.len()));
    let spec = gaussian_sigma(share, sketch_sensitivity(set.feature_space.len()))?;
    let mut sigma = BTreeMap::new();
    let horizontal = privatize_sketch(&set.horizontal, &spec, rng);
    sigma.insert(artifact_name(None), spec.sigma);
    let mut vertical = BTreeMap::new();
    for (keys, keyed) in &set.vertical {
        vertical.insert(
            keys.clone(),
            keyed.map_groups(|g| privatize_sketch(g, &spec, rng)),
        );
        sigma.insert(artifact_name(Some(keys)), spec.sigma);
    }
    ledger.spend(&set.dataset_id, "sketch-set", b)?;
    Ok(RegisteredSketchSet {
        horizontal,
        vertical,
        provenance: Provenance::Noisy { sigma },
        ..set.clone()
    })
}

/// Makes a noisy sketch usable by the solver: `c` is floored at 1, `Q` is
/// symmetrized and the bordered Gram matrix is projected onto the PSD cone
/// by clipping negative eigenvalues. Exact sketches pass through unchanged.
pub fn repair_sketch(sk: &CovSketch) -> CovSketch {
    let mut out = sk.clone();
    {
        let (c, _, q) = out.parts_mut();
        *c = c.max(1.0);
        let sym = (&*q + q.transpose()) * 0.5;
        *q = sym;
    }
    let gram = out.bordered_gram();
    let eig = SymmetricEigen::new(gram.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= -1e-12 * scale {
        return out;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt: DMatrix<f64> =
        &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
    let mut repaired = CovSketch::from_bordered_gram(out.space().clone(), &rebuilt)
        .expect("bordered Gram has the sketch's dimensions");
    {
        // raising a diagonal entry keeps the matrix PSD
        let (c, _, _) = repaired.parts_mut();
        *c = c.max(1.0);
    }
    repaired
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spend {
    pub artifact: String,
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub allocated: PrivacyBudget,
    #[serde(default)]
    pub spent: Vec<Spend>,
}

impl LedgerEntry {
    pub fn spent_total(&self) -> (f64, f64) {
        self.spent
            .iter()
            .fold((0.0, 0.0), |(e, d), s| (e + s.epsilon, d + s.delta))
    }
}

/// Per-dataset allocations and spend records under basic composition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    #[serde(default)]
    datasets: BTreeMap<String, LedgerEntry>,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&mut self, dataset: &str, budget: PrivacyBudget) -> Result<()> {
        if self.datasets.contains_key(dataset) {
            return Err(Error::DuplicateDataset(dataset.to_string()));
        }
        self.datasets.insert(
            dataset.to_string(),
            LedgerEntry {
                allocated: budget,
                spent: Vec::new(),
            },
        );
        Ok(())
    }

    /// Raises an existing allocation by `extra`.
    pub fn top_up(&mut self, dataset: &str, extra: PrivacyBudget) -> Result<()> {
        let entry = self.entry_mut(dataset)?;
        entry.allocated.epsilon += extra.epsilon;
        entry.allocated.delta += extra.delta;
        Ok(())
    }

    pub fn entry(&self, dataset: &str) -> Option<&LedgerEntry> {
        self.datasets.get(dataset)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &LedgerEntry)> {
        self.datasets.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remaining(&self, dataset: &str) -> Option<(f64, f64)> {
        self.datasets.get(dataset).map(|e| {
            let (se, sd) = e.spent_total();
            (e.allocated.epsilon - se, e.allocated.delta - sd)
        })
    }

    /// Fails unless `b` fits in what is left for `dataset`.
    pub fn check(&self, dataset: &str, b: PrivacyBudget) -> Result<()> {
        let entry = self
            .datasets
            .get(dataset)
            .ok_or_else(|| Error::InvalidBudget(format!("no allocation for `{dataset}`")))?;
        let (se, sd) = entry.spent_total();
        if se + b.epsilon <= entry.allocated.epsilon && sd + b.delta <= entry.allocated.delta {
            Ok(())
        } else {
            Err(Error::InsufficientBudget {
                dataset: dataset.to_string(),
                epsilon: b.epsilon,
                delta: b.delta,
                remaining_epsilon: entry.allocated.epsilon - se,
                remaining_delta: entry.allocated.delta - sd,
            })
        }
    }

    pub fn spend(&mut self, dataset: &str, artifact: &str, b: PrivacyBudget) -> Result<()> {
        self.check(dataset, b)?;
        self.entry_mut(dataset)?.spent.push(Spend {
            artifact: artifact.to_string(),
            epsilon: b.epsilon,
            delta: b.delta,
        });
        Ok(())
    }

    pub fn remove(&mut self, dataset: &str) -> Option<LedgerEntry> {
        self.datasets.remove(dataset)
    }

    fn entry_mut(&mut self, dataset: &str) -> Result<&mut LedgerEntry> {
        self.datasets
            .get_mut(dataset)
            .ok_or_else(|| Error::InvalidBudget(format!("no allocation for `{dataset}`")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Invalid(format!("ledger encode: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Corrupt(format!("ledger: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Loads a ledger, or an empty one when the file does not exist yet.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_toml(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::relation::{Cell, ColumnDesc, ColumnKind};
    use crate::space::FeatureSpace;

    fn column(values: &[f64]) -> Relation {
        Relation::from_rows(
            "r",
            vec![ColumnDesc::new("v", ColumnKind::Feature)],
            values.iter().map(|v| vec![Cell::Num(*v)]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn normalization_examples() {
        let bounds: Bounds = [("v".to_string(), (0.0, 10.0))].into_iter().collect();
        let (n, rec) = normalize_clip(&column(&[0.0, 5.0, 10.0, 12.0]), Some(&bounds)).unwrap();
        assert_eq!(n.numeric("v").unwrap(), &[0.0, 0.5, 1.0, 1.0]);
        assert_eq!(rec, bounds);

        let bad: Bounds = [("v".to_string(), (3.0, 3.0))].into_iter().collect();
        assert!(matches!(
            normalize_clip(&column(&[1.0]), Some(&bad)),
            Err(Error::InvalidBounds { .. })
        ));

        let (n, rec) = normalize_clip(&column(&[2.0, 4.0, 3.0]), None).unwrap();
        assert_eq!(n.numeric("v").unwrap(), &[0.0, 1.0, 0.5]);
        assert_eq!(rec["v"], (2.0, 4.0));
    }

    #[test]
    fn sensitivity_values() {
        assert_eq!(sketch_sensitivity(0), 1.0);
        assert!((sketch_sensitivity(1) - 1.732_050_8).abs() < 1e-7);
        assert!((sketch_sensitivity(3) - 3.605_551_3).abs() < 1e-7);
    }

    #[test]
    fn sigma_calibration() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        let s = gaussian_sigma(b, 1.0).unwrap();
        assert!((s.sigma - (2.0f64 * 125_000f64.ln()).sqrt()).abs() < 1e-12);
        assert!((s.sigma - 4.8447).abs() < 1e-3);
        let s2 = gaussian_sigma(b, 2.0).unwrap();
        assert!((s2.sigma - 2.0 * s.sigma).abs() < 1e-12);
        assert!(gaussian_sigma(PrivacyBudget { epsilon: 2.0, delta: 1e-5 }, 1.0).is_err());
        assert!(gaussian_sigma(PrivacyBudget { epsilon: 0.5, delta: 1.0 }, 1.0).is_err());
        assert!(PrivacyBudget::new(0.0, 1e-5).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
    }

    fn sketch(c: f64, s: &[f64], q: &[f64]) -> CovSketch {
        let m = s.len();
        let names: Vec<String> = (0..m).map(|i| format!("f{i}")).collect();
        CovSketch::from_parts(
            FeatureSpace::new(names).unwrap(),
            c,
            DVector::from_row_slice(s),
            DMatrix::from_row_slice(m, m, q),
        )
        .unwrap()
    }

    #[test]
    fn privatize_sketch_basics() {
        let sk = sketch(3.0, &[1.0, 2.0], &[1.0, 0.5, 0.5, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(privatize_sketch(&sk, &NoiseSpec::none(), &mut rng), sk);
        let spec = NoiseSpec {
            sigma: 1.0,
            sensitivity: 1.0,
            mechanism: Mechanism::Gaussian,
        };
        let a = privatize_sketch(&sk, &spec, &mut ChaCha8Rng::seed_from_u64(1));
        let b = privatize_sketch(&sk, &spec, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_ne!(a, sk);
        assert_eq!(a.moments(), &a.moments().transpose());
    }

    #[test]
    fn repair_examples() {
        let exact = sketch(3.0, &[1.0, 2.0], &[1.0, 0.5, 0.5, 2.0]);
        assert_eq!(repair_sketch(&exact), exact);

        let neg = sketch(-3.0, &[0.0], &[1.0]);
        assert_eq!(repair_sketch(&neg).count(), 1.0);

        // rank-1 bordered Gram [1, 2]ᵀ[1, 2] minus a small perturbation
        let v = [1.0, 2.0];
        let mut g = DMatrix::from_fn(2, 2, |i, j| v[i] * v[j]);
        g -= DMatrix::identity(2, 2) * 1e-3;
        let sk = CovSketch::from_bordered_gram(FeatureSpace::new(["x"]).unwrap(), &g).unwrap();
        let fixed = repair_sketch(&sk);
        let eig = SymmetricEigen::new(fixed.bordered_gram());
        assert!(eig.eigenvalues.iter().all(|l| *l >= -1e-10));
        assert_eq!(repair_sketch(&fixed), fixed);
    }

    #[test]
    fn ledger_accounting() {
        let mut ledger = BudgetLedger::new();
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        ledger.allocate("d", b).unwrap();
        assert!(ledger.allocate("d", b).is_err());
        ledger.spend("d", "a", b.split(2)).unwrap();
        ledger.spend("d", "b", b.split(2)).unwrap();
        assert!(matches!(
            ledger.spend("d", "c", b.split(100)),
            Err(Error::InsufficientBudget { .. })
        ));
        ledger.top_up("d", b).unwrap();
        ledger.spend("d", "c", b.split(100)).unwrap();
        let text = ledger.to_toml().unwrap();
        assert_eq!(BudgetLedger::from_toml(&text).unwrap(), ledger);
    }
}
