//! Greedy augmentation search over registered sketch sets.
//!
//! Everything here reads sketches only. Noisy sketches are repaired per
//! evaluation and never written back, so a search spends no budget and
//! leaves the corpus untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::discovery::{discover_all, CorpusIndex, JoinCandidate, Thresholds, UnionCandidate};
use crate::error::{Error, Result};
use crate::privacy::{repair_sketch, Bounds, PrivacyBudget};
use crate::proxy::{default_lambda, r2_from_sketch, train_ridge, GramSystem, LinearModel};
use crate::registry::RegisteredSketchSet;
use crate::semiring::{CovSketch, KeyedSketch};
use crate::space::{qualify, FeatureSpace};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub max_iters: usize,
    /// Smallest absolute R² gain that gets a candidate accepted.
    pub min_improve: f64,
    pub max_joins: usize,
    pub thresholds: Thresholds,
    /// Ridge coefficient; `None` scales with the training row count.
    pub lambda: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            min_improve: 0.001,
            max_joins: 2,
            thresholds: Thresholds::default(),
            lambda: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |t: f64| t > 0.0 && t <= 1.0;
        if self.max_iters == 0 || self.max_joins == 0 {
            return Err(Error::Invalid("max_iters and max_joins must be positive".into()));
        }
        if !(self.min_improve > 0.0 && self.min_improve.is_finite()) {
            return Err(Error::Invalid(format!(
                "min_improve must be positive, got {}",
                self.min_improve
            )));
        }
        if !in_unit(self.thresholds.join) || !in_unit(self.thresholds.union) {
            return Err(Error::Invalid("discovery thresholds must lie in (0, 1]".into()));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Invalid(format!("lambda must be >= 0, got {l}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SearchRequest {
    pub train: RegisteredSketchSet,
    /// Shares the training set's id and feature space.
    pub test: Option<RegisteredSketchSet>,
    /// Unqualified column names.
    pub features: Vec<String>,
    pub target: String,
    pub budget: PrivacyBudget,
    pub config: SearchConfig,
}

impl SearchRequest {
    pub fn new<S: AsRef<str>>(
        train: RegisteredSketchSet,
        test: Option<RegisteredSketchSet>,
        features: &[S],
        target: &str,
    ) -> Self {
        Self {
            train,
            test,
            features: features.iter().map(|f| f.as_ref().to_string()).collect(),
            target: target.to_string(),
            budget: PrivacyBudget::unlimited(),
            config: SearchConfig::default(),
        }
    }

    pub fn with_config(mut self, config: SearchConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_budget(mut self, budget: PrivacyBudget) -> Self {
        self.budget = budget;
        self
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.features.iter().any(|f| *f == self.target) {
            return Err(Error::Invalid(format!(
                "target `{}` is also listed as a feature",
                self.target
            )));
        }
        let space = &self.train.feature_space;
        for col in self.features.iter().chain(std::iter::once(&self.target)) {
            if !space.contains(&qualify(&self.train.dataset_id, col)) {
                return Err(Error::UnknownColumn(col.clone()));
            }
        }
        if let Some(test) = &self.test {
            if test.dataset_id != self.train.dataset_id || test.feature_space != *space {
                return Err(Error::SpaceMismatch(
                    "train and test sets must share a dataset id and feature space".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Registered provider sets plus their discovery index.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    sets: BTreeMap<String, RegisteredSketchSet>,
    index: CorpusIndex,
}

impl Corpus {
    pub fn new(sets: impl IntoIterator<Item = RegisteredSketchSet>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for set in sets {
            let id = set.dataset_id.clone();
            if map.insert(id.clone(), set).is_some() {
                return Err(Error::DuplicateDataset(id));
            }
        }
        let index = CorpusIndex::new(map.values().map(RegisteredSketchSet::profile).collect());
        Ok(Self { sets: map, index })
    }

    pub fn get(&self, id: &str) -> Option<&RegisteredSketchSet> {
        self.sets.get(id)
    }

    pub fn sets(&self) -> impl Iterator<Item = &RegisteredSketchSet> {
        self.sets.values()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn index(&self) -> &CorpusIndex {
        &self.index
    }

    fn set(&self, id: &str) -> Result<&RegisteredSketchSet> {
        self.get(id)
            .ok_or_else(|| Error::Corpus(format!("dataset `{id}` is not in the corpus")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Augmentation {
    Union(UnionCandidate),
    Join(JoinCandidate),
}

impl Augmentation {
    pub fn dataset_id(&self) -> &str {
        match self {
            Augmentation::Union(u) => &u.dataset_id,
            Augmentation::Join(j) => &j.dataset_id,
        }
    }

    pub fn is_join(&self) -> bool {
        matches!(self, Augmentation::Join(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanStep {
    pub augmentation: Augmentation,
    pub utility_before: f64,
    pub utility_after: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPlan {
    pub request_id: String,
    pub baseline_utility: f64,
    pub steps: Vec<PlanStep>,
    pub final_model: LinearModel,
    pub final_utility: f64,
}

impl AugmentationPlan {
    pub fn selected(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.augmentation.dataset_id()).collect()
    }

    /// The accepted augmentations as a search state.
    pub fn state(&self) -> SearchState {
        let mut state = SearchState::default();
        for step in &self.steps {
            state = state.with(&step.augmentation);
        }
        state
    }
}

/// Accepted augmentations, in acceptance order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchState {
    pub unions: Vec<UnionCandidate>,
    pub joins: Vec<JoinCandidate>,
}

impl SearchState {
    pub fn with(&self, aug: &Augmentation) -> SearchState {
        let mut next = self.clone();
        match aug {
            Augmentation::Union(u) => next.unions.push(u.clone()),
            Augmentation::Join(j) => next.joins.push(j.clone()),
        }
        next
    }

    pub fn uses(&self, id: &str) -> bool {
        self.unions.iter().any(|u| u.dataset_id == id) || self.joins.iter().any(|j| j.dataset_id == id)
    }

    /// Request key columns the joins need, first use first.
    pub fn join_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = Vec::new();
        for j in &self.joins {
            if !keys.contains(&j.request_key) {
                keys.push(j.request_key.clone());
            }
        }
        keys
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub model: LinearModel,
    pub utility: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Train,
    Test,
}

/// Transforms each augmented sketch before it is used, e.g. to add noise
/// to a per-request release.
pub type ReleaseFn<'a> = dyn Fn(&SearchState, Side, CovSketch) -> CovSketch + Sync + 'a;

/// Scores and searches augmentations for one request.
pub struct Evaluator<'a> {
    request: &'a SearchRequest,
    corpus: &'a Corpus,
    features: Vec<String>,
    target: String,
    release: Option<Box<ReleaseFn<'a>>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(request: &'a SearchRequest, corpus: &'a Corpus) -> Result<Self> {
        request.validate()?;
        let id = &request.train.dataset_id;
        if corpus.get(id).is_some() {
            return Err(Error::Corpus(format!(
                "request id `{id}` collides with a registered dataset"
            )));
        }
        Ok(Self {
            request,
            corpus,
            features: request.features.iter().map(|f| qualify(id, f)).collect(),
            target: qualify(id, &request.target),
            release: None,
        })
    }

    /// Routes every augmented train and test sketch through `f`. Released
    /// sketches are treated as noisy.
    pub fn with_release(
        mut self,
        f: impl Fn(&SearchState, Side, CovSketch) -> CovSketch + Sync + 'a,
    ) -> Self {
        self.release = Some(Box::new(f));
        self
    }

    /// Trains on the augmented train sketch and scores on the augmented test
    /// sketch (or the train sketch without a test set).
    pub fn evaluate(&self, state: &SearchState) -> Result<Evaluation> {
        let (mut train, mut test, features) = self.augmented(state)?;
        if let Some(release) = &self.release {
            train = release(state, Side::Train, train);
            test = test.map(|t| release(state, Side::Test, t));
        }
        let noisy = self.release.is_some() || self.involves_noise(state);
        let (train, test) = if noisy {
            (repair_sketch(&train), test.as_ref().map(repair_sketch))
        } else {
            (train, test)
        };
        let gram = GramSystem::assemble(&train, &features, &self.target)?;
        let lambda = self.request.config.lambda.unwrap_or_else(|| default_lambda(gram.n));
        let model = train_ridge(&gram, lambda)?;
        let utility = r2_from_sketch(&model, test.as_ref().unwrap_or(&train))?;
        if !utility.is_finite() {
            return Err(Error::UndefinedUtility(format!("utility evaluated to {utility}")));
        }
        Ok(Evaluation { model, utility })
    }

    /// Utility of `state` extended by `aug`; any failure scores −∞.
    pub fn score(&self, state: &SearchState, aug: &Augmentation) -> f64 {
        match self.evaluate(&state.with(aug)) {
            Ok(e) => e.utility,
            Err(e) => {
                log::debug!("candidate `{}` rejected: {e}", aug.dataset_id());
                f64::NEG_INFINITY
            }
        }
    }

    /// Augmentations discovery proposes that are still admissible in `state`.
    pub fn candidates(&self, state: &SearchState) -> Result<Vec<Augmentation>> {
        let found = discover_all(
            self.corpus.index(),
            &self.request.train.profile(),
            self.request.config.thresholds,
        )?;
        let mut out = Vec::new();
        if state.joins.len() < self.request.config.max_joins {
            for j in found.joins {
                if state.uses(&j.dataset_id) {
                    continue;
                }
                let mut keys = state.join_keys();
                if !keys.contains(&j.request_key) {
                    keys.push(j.request_key.clone());
                }
                if smallest_covering(&self.request.train, &keys).is_some() {
                    out.push(Augmentation::Join(j));
                }
            }
        }
        out.extend(
            found
                .unions
                .into_iter()
                .filter(|u| !state.uses(&u.dataset_id))
                .map(Augmentation::Union),
        );
        Ok(out)
    }

    pub fn search(&self) -> Result<AugmentationPlan> {
        let cfg = self.request.config;
        let mut state = SearchState::default();
        let baseline = self.evaluate(&state)?;
        let mut current = baseline.clone();
        let mut steps = Vec::new();

        for _ in 0..cfg.max_iters {
            let candidates = self.candidates(&state)?;
            if candidates.is_empty() {
                break;
            }
            let scores: Vec<f64> = candidates
                .par_iter()
                .map(|aug| self.score(&state, aug))
                .collect();
            let Some(best) = argmax(&candidates, &scores) else { break };
            if !(scores[best] - current.utility >= cfg.min_improve) {
                break;
            }
            let aug = candidates[best].clone();
            let next = state.with(&aug);
            let eval = self.evaluate(&next)?;
            let warnings = self.warnings(&aug)?;
            for w in &warnings {
                log::warn!("{w}");
            }
            steps.push(PlanStep {
                augmentation: aug,
                utility_before: current.utility,
                utility_after: eval.utility,
                warnings,
            });
            state = next;
            current = eval;
        }

        Ok(AugmentationPlan {
            request_id: self.request.train.dataset_id.clone(),
            baseline_utility: baseline.utility,
            steps,
            final_utility: current.utility,
            final_model: current.model,
        })
    }

    fn involves_noise(&self, state: &SearchState) -> bool {
        let r = self.request;
        r.train.is_privatized()
            || r.test.as_ref().is_some_and(RegisteredSketchSet::is_privatized)
            || state
                .unions
                .iter()
                .map(|u| &u.dataset_id)
                .chain(state.joins.iter().map(|j| &j.dataset_id))
                .any(|id| self.corpus.get(id).is_some_and(RegisteredSketchSet::is_privatized))
    }

    fn warnings(&self, aug: &Augmentation) -> Result<Vec<String>> {
        let Augmentation::Join(j) = aug else { return Ok(Vec::new()) };
        let keyed = provider_keyed(self.corpus.set(&j.dataset_id)?, &j.provider_key)?;
        let mult = keyed.max_multiplicity();
        Ok(if mult > 1.0 {
            vec![format!(
                "`{}` has up to {mult} rows per `{}` value; the join repeats training rows",
                j.dataset_id, j.provider_key
            )]
        } else {
            Vec::new()
        })
    }

    /// Train sketch, optional test sketch and model features for `state`.
    /// Unions are applied before joins; the test side only gets joins.
    pub fn augmented(&self, state: &SearchState) -> Result<(CovSketch, Option<CovSketch>, Vec<String>)> {
        let r = self.request;
        let mut features = self.features.clone();
        if state.joins.is_empty() {
            let mut train = r.train.horizontal.clone();
            for u in &state.unions {
                train.add_assign(&self.union_horizontal(u)?)?;
            }
            let test = r.test.as_ref().map(|t| t.horizontal.clone());
            return Ok((train, test, features));
        }

        let keys = state.join_keys();
        let mut train = keyed_on(&r.train, &keys)?;
        for u in &state.unions {
            train = train.add(&self.union_keyed(u, &keys)?)?;
        }
        let mut test = r.test.as_ref().map(|t| keyed_on(t, &keys)).transpose()?;
        for j in &state.joins {
            let provider = provider_keyed(self.corpus.set(&j.dataset_id)?, &j.provider_key)?;
            let pairs = [(j.request_key.clone(), j.provider_key.clone())];
            train = train.join_on(provider, &pairs)?;
            if let Some(t) = test.as_mut() {
                *t = t.join_on(provider, &pairs)?;
            }
            features.extend(provider.space().names().iter().cloned());
        }
        Ok((train.collapse(), test.map(|t| t.collapse()), features))
    }

    /// Provider name → request name for a union candidate's value columns.
    fn union_mapping(&self, u: &UnionCandidate) -> (FeatureSpace, BTreeMap<String, String>) {
        let rid = &self.request.train.dataset_id;
        let mapping: BTreeMap<String, String> = u
            .column_mapping
            .iter()
            .map(|(rc, pc)| (qualify(&u.dataset_id, pc), qualify(rid, rc)))
            .collect();
        let space = FeatureSpace::new(mapping.keys().cloned())
            .expect("mapping keys are unique");
        (space, mapping)
    }

    fn union_horizontal(&self, u: &UnionCandidate) -> Result<CovSketch> {
        let set = self.corpus.set(&u.dataset_id)?;
        let (space, mapping) = self.union_mapping(u);
        set.horizontal.restrict(&space)?.rename(&mapping)
    }

    fn union_keyed(&self, u: &UnionCandidate, keys: &[String]) -> Result<KeyedSketch> {
        let set = self.corpus.set(&u.dataset_id)?;
        let provider_keys: Vec<String> = keys
            .iter()
            .map(|k| {
                u.key_mapping.get(k).cloned().ok_or_else(|| {
                    Error::KeyMismatch(format!("`{}` has no column matching key `{k}`", u.dataset_id))
                })
            })
            .collect::<Result<_>>()?;
        let keyed = set.keyed(&provider_keys).ok_or_else(|| {
            Error::KeyMismatch(format!(
                "`{}` has no keyed sketch on {provider_keys:?}",
                u.dataset_id
            ))
        })?;
        let (space, mapping) = self.union_mapping(u);
        keyed
            .restrict(&space)?
            .rename(&mapping)?
            .with_key_columns(keys.to_vec())
    }
}

/// Runs the greedy search for `request` over `corpus`.
pub fn search(request: &SearchRequest, corpus: &Corpus) -> Result<AugmentationPlan> {
    Evaluator::new(request, corpus)?.search()
}

fn argmax(candidates: &[Augmentation], scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) if *s > scores[b] => Some(i),
            Some(b) if *s == scores[b] && candidates[i].dataset_id() < candidates[b].dataset_id() => {
                Some(i)
            }
            keep => keep,
        };
    }
    best
}

/// Smallest pre-computed key subset of `set` containing every column in `keys`.
fn smallest_covering<'s>(set: &'s RegisteredSketchSet, keys: &[String]) -> Option<&'s KeyedSketch> {
    set.vertical
        .iter()
        .filter(|(cols, _)| keys.iter().all(|k| cols.contains(k)))
        .min_by_key(|(cols, _)| cols.len())
        .map(|(_, keyed)| keyed)
}

fn keyed_on(set: &RegisteredSketchSet, keys: &[String]) -> Result<KeyedSketch> {
    let keyed = smallest_covering(set, keys).ok_or_else(|| {
        Error::KeyMismatch(format!(
            "`{}` has no keyed sketch covering {keys:?}",
            set.dataset_id
        ))
    })?;
    if keyed.key_columns() == keys {
        Ok(keyed.clone())
    } else {
        keyed.regroup(keys)
    }
}

fn provider_keyed<'s>(set: &'s RegisteredSketchSet, key: &str) -> Result<&'s KeyedSketch> {
    set.keyed(&[key.to_string()]).ok_or_else(|| {
        Error::KeyMismatch(format!("`{}` has no keyed sketch on `{key}`", set.dataset_id))
    })
}

/// Coefficients converted back to original units. Returns `None` unless
/// bounds are known for the target and every feature.
pub fn denormalized_coefficients(
    model: &LinearModel,
    bounds: &BTreeMap<String, Bounds>,
) -> Option<(f64, Vec<(String, f64)>)> {
    let lookup = |name: &str| -> Option<(f64, f64)> {
        let (id, col) = name.split_once('.')?;
        bounds.get(id)?.get(col).copied()
    };
    let (ly, hy) = lookup(&model.target)?;
    let mut intercept = model.intercept();
    let mut coefs = Vec::new();
    for (name, theta) in model.coefficients() {
        let (lo, hi) = lookup(name)?;
        let beta = (hy - ly) * theta / (hi - lo);
        intercept -= theta * lo / (hi - lo);
        coefs.push((name.to_string(), beta));
    }
    Some((ly + (hy - ly) * intercept, coefs))
}

/// Human-readable plan. `bounds` maps dataset id to the normalization
/// bounds of its columns.
pub fn render_report(plan: &AugmentationPlan, bounds: &BTreeMap<String, Bounds>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "request: {}", plan.request_id);
    let _ = writeln!(out, "baseline utility (R2): {:.6}", plan.baseline_utility);
    let _ = writeln!(out, "steps: {}", plan.steps.len());
    for (i, step) in plan.steps.iter().enumerate() {
        match &step.augmentation {
            Augmentation::Join(j) => {
                let _ = writeln!(
                    out,
                    "  {}. join {} on {} = {} (estimated overlap {:.3})",
                    i + 1,
                    j.dataset_id,
                    j.request_key,
                    j.provider_key,
                    j.estimated_jaccard
                );
            }
            Augmentation::Union(u) => {
                let mapping = u
                    .column_mapping
                    .iter()
                    .map(|(r, p)| format!("{r}<-{p}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                let _ = writeln!(out, "  {}. union {} mapping {mapping}", i + 1, u.dataset_id);
            }
        }
        let _ = writeln!(
            out,
            "     utility {:.6} -> {:.6}",
            step.utility_before, step.utility_after
        );
        for w in &step.warnings {
            let _ = writeln!(out, "     warning: {w}");
        }
    }
    let _ = writeln!(out, "final utility (R2): {:.6}", plan.final_utility);
    let model = &plan.final_model;
    let _ = writeln!(out, "model: {} ~ intercept + {} features", model.target, model.features.len());
    match denormalized_coefficients(model, bounds) {
        Some((intercept, coefs)) => {
            let _ = writeln!(out, "coefficients (original units):");
            let _ = writeln!(out, "  intercept {intercept:.6e}");
            for (name, beta) in coefs {
                let _ = writeln!(out, "  {name} {beta:.6e}");
            }
        }
        None => {
            let _ = writeln!(out, "coefficients (model units):");
            let _ = writeln!(out, "  intercept {:.6e}", model.intercept());
            for (name, theta) in model.coefficients() {
                let _ = writeln!(out, "  {name} {theta:.6e}");
            }
        }
    }
    out
}

/// Dataset ids whose bounds a report needs.
pub fn datasets_in(plan: &AugmentationPlan) -> BTreeSet<String> {
    let mut ids: BTreeSet<String> = plan.steps.iter().map(|s| s.augmentation.dataset_id().to_string()).collect();
    ids.insert(plan.request_id.clone());
    ids
}
