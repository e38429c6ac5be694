//! Benchmark harness: factorized vs materialized equivalence, evaluation
//! latency against provider size, and the utility of plans found under
//! different privacy mechanisms.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datastore::{privatize_request, sketch_relation, sketch_request, PROVIDER_MAX_SUBSET, REQUEST_MAX_SUBSET};
use crate::discovery::{JoinCandidate, Thresholds};
use crate::error::{Error, Result};
use crate::naive::{fit_qr, fit_ridge, materialize, r2};
use crate::privacy::{
    Bounds,
    calibration_budget, gaussian_sigma, normalize_clip, privatize_sketch, sketch_sensitivity, BudgetLedger,
    PrivacyBudget,
};
use crate::proxy::default_lambda;
use crate::registry::{RegisteredSketchSet, SketchOptions};
use crate::relation::{ColumnKind, Relation};
use crate::search::{Augmentation, AugmentationPlan, Corpus, Evaluator, SearchConfig, SearchRequest, SearchState, Side};
use crate::semiring::CovSketch;
use crate::synth::{provider_with_rows, PlantedCorpus, PlantedSpec, RandomCorpus, RandomSpec, REQUEST_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    Equivalence,
    Speed,
    PrivacyScaling,
    RequestScaling,
}

impl BenchKind {
    pub const ALL: [BenchKind; 4] = [
        BenchKind::Equivalence,
        BenchKind::Speed,
        BenchKind::PrivacyScaling,
        BenchKind::RequestScaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchKind::Equivalence => "equivalence",
            BenchKind::Speed => "speed",
            BenchKind::PrivacyScaling => "privacy-scaling",
            BenchKind::RequestScaling => "request-scaling",
        }
    }

    /// Name of the measured column in the CSV output.
    pub fn value_column(self) -> &'static str {
        match self {
            BenchKind::Equivalence => "delta",
            BenchKind::Speed => "latency",
            BenchKind::PrivacyScaling | BenchKind::RequestScaling => "utility",
        }
    }

    pub fn header(self) -> String {
        format!("mechanism,x,run,{}", self.value_column())
    }
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown bench kind `{s}` (expected one of equivalence, speed, privacy-scaling, request-scaling)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mechanism {
    NonPrivate,
    Fpm,
    Apm,
    Tpm,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::NonPrivate, Mechanism::Fpm, Mechanism::Apm, Mechanism::Tpm];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::NonPrivate => "non-p",
            Mechanism::Fpm => "fpm",
            Mechanism::Apm => "apm",
            Mechanism::Tpm => "tpm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mechanism: String,
    pub x: u64,
    pub run: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub runs: usize,
    pub seed: u64,
    /// Per-dataset budget for providers and for each requester.
    pub epsilon: f64,
    pub delta: f64,
    /// x values; empty selects the kind's defaults.
    pub xs: Vec<u64>,
    pub planted: PlantedSpec,
    pub max_iters: usize,
    /// Timing repetitions per configuration in the speed bench.
    pub reps: usize,
}

impl BenchOptions {
    pub fn new(kind: BenchKind) -> Self {
        let planted = match kind {
            BenchKind::PrivacyScaling | BenchKind::RequestScaling => private_bench_spec(),
            _ => PlantedSpec::default(),
        };
        Self {
            runs: match kind {
                BenchKind::Equivalence => 20,
                BenchKind::Speed => 1,
                _ => 10,
            },
            seed: 0,
            epsilon: 1.0,
            delta: 1e-5,
            xs: Vec::new(),
            planted,
            max_iters: 3,
            reps: 101,
        }
    }

    fn xs_or(&self, default: &[u64]) -> Vec<u64> {
        if self.xs.is_empty() {
            default.to_vec()
        } else {
            self.xs.clone()
        }
    }
}

/// Planted corpus for the privacy benches. Few keys with many rows each keep
/// per-group sketch noise small next to the target's spread; providers hold
/// as many rows per key as the training task, so a single aggregate release
/// is cheap but 64 of them are not.
pub fn private_bench_spec() -> PlantedSpec {
    PlantedSpec {
        num_keys: 25,
        train_rows: 60_000,
        test_rows: 30_000,
        provider_rows_per_key: 2_400,
        ..PlantedSpec::default()
    }
}

pub fn run_bench(kind: BenchKind, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.runs == 0 {
        return Err(Error::Invalid("runs must be positive".into()));
    }
    match kind {
        BenchKind::Equivalence => equivalence_bench(opts),
        BenchKind::Speed => speed_bench(opts),
        BenchKind::PrivacyScaling => privacy_scaling_bench(opts),
        BenchKind::RequestScaling => request_scaling_bench(opts),
    }
}

pub fn write_csv<W: Write>(kind: BenchKind, rows: &[BenchRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(kind.header().split(','))?;
    for r in rows {
        wtr.write_record([r.mechanism.clone(), r.x.to_string(), r.run.to_string(), r.value.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::Invalid(format!("csv flush failed: {e}")))
}

/// Mean of `value` per (mechanism, x).
pub fn means(rows: &[BenchRow]) -> BTreeMap<(String, u64), f64> {
    let mut acc: BTreeMap<(String, u64), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.mechanism.clone(), r.x)).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Median of `value` per (mechanism, x).
pub fn medians(rows: &[BenchRow]) -> BTreeMap<(String, u64), f64> {
    let mut acc: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for r in rows {
        acc.entry((r.mechanism.clone(), r.x)).or_default().push(r.value);
    }
    acc.into_iter()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            (k, v[v.len() / 2])
        })
        .collect()
}

// ---------------------------------------------------------------- equivalence

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EquivalenceReport {
    /// Largest normwise relative coefficient difference.
    pub coefficients: f64,
    /// Largest relative R² difference.
    pub utility: f64,
    pub compared: usize,
    /// States where either path declined to fit (rank deficiency, no rows).
    pub skipped: usize,
    /// States where exactly one path produced a fit.
    pub disagreements: usize,
}

/// Sketch-path vs materialized-path fits at `λ = 0` for the baseline, each
/// first-step candidate, the searched plan and each candidate on top of it.
pub fn equivalence_check(c: &RandomCorpus) -> Result<EquivalenceReport> {
    let opts = SketchOptions::with_max_subset(PROVIDER_MAX_SUBSET);
    let providers: Vec<RegisteredSketchSet> = c
        .providers
        .iter()
        .map(|p| {
            let keys = p.columns_of_kind(ColumnKind::Key);
            RegisteredSketchSet::build(p, &keys, opts)
        })
        .collect::<Result<_>>()?;
    let corpus = Corpus::new(providers)?;
    let train = RegisteredSketchSet::build(&c.train, &[c.key.as_str()], SketchOptions::with_max_subset(REQUEST_MAX_SUBSET))?;
    let test = RegisteredSketchSet::build(&c.test, &[c.key.as_str()], SketchOptions::with_max_subset(REQUEST_MAX_SUBSET))?;
    let config = SearchConfig {
        lambda: Some(0.0),
        thresholds: Thresholds { join: 0.1, union: 0.1 },
        ..SearchConfig::default()
    };
    let request = SearchRequest::new(train, Some(test), &c.features, &c.target).with_config(config);
    let ev = Evaluator::new(&request, &corpus)?;
    let raw: BTreeMap<String, Relation> = c.providers.iter().map(|p| (p.name().to_string(), p.clone())).collect();

    let mut states = vec![SearchState::default()];
    for aug in ev.candidates(&SearchState::default())? {
        states.push(SearchState::default().with(&aug));
    }
    if let Ok(plan) = ev.search() {
        let base = plan.state();
        for aug in ev.candidates(&base)? {
            states.push(base.with(&aug));
        }
        states.push(base);
    }

    let target = format!("{REQUEST_ID}.{}", c.target);
    let mut report = EquivalenceReport::default();
    for state in &states {
        let sketch = ev.evaluate(state);
        let rows = (|| {
            let features = ev.augmented(state)?.2;
            let train_rows = materialize(&c.train, state, &raw)?;
            let test_state = SearchState {
                unions: Vec::new(),
                joins: state.joins.clone(),
            };
            let test_rows = materialize(&c.test, &test_state, &raw)?;
            let (x, y) = train_rows.design(&features, &target)?;
            let theta = fit_qr(&x, &y)?;
            let (xt, yt) = test_rows.design(&features, &target)?;
            Ok::<_, Error>((theta.clone(), r2(&xt, &yt, &theta)?))
        })();
        match (sketch, rows) {
            (Ok(s), Ok((theta, u))) => {
                let scale = theta.norm().max(f64::MIN_POSITIVE);
                report.coefficients = report.coefficients.max((&s.model.theta - &theta).norm() / scale);
                report.utility = report.utility.max((s.utility - u).abs() / u.abs().max(1.0));
                report.compared += 1;
            }
            (Err(_), Err(_)) => report.skipped += 1,
            _ => {
                report.skipped += 1;
                report.disagreements += 1;
            }
        }
    }
    Ok(report)
}

fn equivalence_bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for run in 0..opts.runs {
        let corpus = RandomCorpus::generate(RandomSpec::default(), opts.seed.wrapping_add(run as u64));
        let rep = equivalence_check(&corpus)?;
        let x = (corpus.providers.len() + 1) as u64;
        rows.push(BenchRow { mechanism: "coefficients".into(), x, run, value: rep.coefficients });
        rows.push(BenchRow { mechanism: "utility".into(), x, run, value: rep.utility });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------- speed

/// One provider of `rows` rows over `num_keys` keys, a small request and the
/// join between them, ready to time.
pub struct SpeedFixture {
    pub request: SearchRequest,
    pub corpus: Corpus,
    pub train: Relation,
    pub providers: BTreeMap<String, Relation>,
    pub join: Augmentation,
}

impl SpeedFixture {
    pub fn new(rows: usize, num_keys: usize, seed: u64) -> Result<Self> {
        let spec = PlantedSpec {
            num_keys,
            train_rows: 200,
            test_rows: 0,
            num_datasets: 1,
            provider_rows_per_key: 1,
            ..PlantedSpec::default()
        };
        let planted = PlantedCorpus::generate(&spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
        let per_key = (rows / num_keys).max(1);
        let provider = provider_with_rows("provider", &planted.hidden, per_key, spec.jitter_sd, &mut rng);
        let set = RegisteredSketchSet::build(&provider, &["key"], SketchOptions::default())?;
        let train = planted.train.clone();
        let train_set = RegisteredSketchSet::build(&train, &["k"], SketchOptions::with_max_subset(REQUEST_MAX_SUBSET))?;
        Ok(Self {
            request: SearchRequest::new(train_set, None, &planted.features, &planted.target),
            corpus: Corpus::new([set])?,
            train,
            providers: [("provider".to_string(), provider)].into_iter().collect(),
            join: Augmentation::Join(JoinCandidate {
                dataset_id: "provider".into(),
                request_key: "k".into(),
                provider_key: "key".into(),
                estimated_jaccard: 1.0,
            }),
        })
    }

    /// Seconds for one sketch-path evaluation of the join.
    pub fn time_sketch(&self) -> Result<f64> {
        let ev = Evaluator::new(&self.request, &self.corpus)?;
        let start = Instant::now();
        let u = ev.score(&SearchState::default(), &self.join);
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(u);
        Ok(elapsed)
    }

    /// Seconds to materialize the join and refit on its rows.
    pub fn time_naive(&self) -> Result<f64> {
        let state = SearchState::default().with(&self.join);
        let start = Instant::now();
        let m = materialize(&self.train, &state, &self.providers)?;
        let features = ["request.x", "provider.z"];
        let (x, y) = m.design(&features, "request.y")?;
        let theta = fit_ridge(&x, &y, default_lambda(y.len() as f64))?;
        let u = r2(&x, &y, &theta)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(u);
        Ok(elapsed)
    }
}

fn speed_bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for n in opts.xs_or(&[1_000, 1_000_000]) {
        let fixture = SpeedFixture::new(n as usize, opts.planted.num_keys, opts.seed)?;
        for _ in 0..opts.reps.min(5) {
            fixture.time_sketch()?;
        }
        for run in 0..opts.reps {
            rows.push(BenchRow { mechanism: "sketch".into(), x: n, run, value: fixture.time_sketch()? });
        }
        let naive_reps = (opts.reps / 20).clamp(1, 5);
        for run in 0..naive_reps {
            rows.push(BenchRow { mechanism: "naive".into(), x: n, run, value: fixture.time_naive()? });
        }
    }
    Ok(rows)
}

// -------------------------------------------------------------------- privacy

/// Provider sketches for one corpus under every mechanism. FPM and TPM
/// releases are made once here and reused by every request.
pub struct PrivateWorld {
    planted: PlantedCorpus,
    exact: Corpus,
    fpm: Corpus,
    tpm: Corpus,
    budget: PrivacyBudget,
    max_iters: usize,
}

impl PrivateWorld {
    pub fn new(spec: &PlantedSpec, budget: PrivacyBudget, max_iters: usize, seed: u64) -> Result<Self> {
        let planted = PlantedCorpus::generate(spec, seed);
        let keys = vec!["key".to_string()];
        let opts = SketchOptions::with_max_subset(PROVIDER_MAX_SUBSET);
        let mut ledger = BudgetLedger::new();
        let mut exact = Vec::new();
        let mut fpm = Vec::new();
        let mut tpm = Vec::new();
        for (i, p) in planted.providers.iter().enumerate() {
            exact.push(sketch_relation(p, &keys, None, opts, None)?.0);
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 32));
            ledger.allocate(p.name(), budget)?;
            fpm.push(sketch_relation(p, &keys, None, opts, Some((budget, &mut ledger, &mut rng)))?.0);
            let noisy = tuple_noise(&normalize_clip(p, None)?.0, budget, &mut rng)?;
            tpm.push(RegisteredSketchSet::build(&noisy, &keys, opts)?);
        }
        Ok(Self {
            planted,
            exact: Corpus::new(exact)?,
            fpm: Corpus::new(fpm)?,
            tpm: Corpus::new(tpm)?,
            budget,
            max_iters,
        })
    }

    pub fn planted_id(&self) -> &str {
        &self.planted.planted
    }

    /// Non-private-evaluated test R² of the plans each mechanism finds,
    /// averaged over the first `x` requests for every `x` in `xs`. Request 0
    /// is the corpus's own task, later ones are fresh draws. Only APM depends
    /// on the request count, through its per-release budget.
    pub fn utilities(&self, xs: &[u64], seed: u64) -> Result<Vec<(Mechanism, u64, f64)>> {
        let n = xs.iter().copied().max().unwrap_or(0) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fixed: BTreeMap<Mechanism, Vec<f64>> = BTreeMap::new();
        let mut apm: BTreeMap<u64, f64> = BTreeMap::new();
        for r in 0..n {
            let (train, test) = if r == 0 {
                (self.planted.train.clone(), self.planted.test.clone())
            } else {
                self.planted.fresh_request(&mut rng)
            };
            let task = Task::new(self, &train, &test, seed.wrapping_add(r as u64))?;
            for mech in [Mechanism::NonPrivate, Mechanism::Fpm, Mechanism::Tpm] {
                fixed.entry(mech).or_default().push(task.utility(self, mech, 1)?);
            }
            for &x in xs {
                if r < x as usize {
                    *apm.entry(x).or_default() += task.utility(self, Mechanism::Apm, x as usize)?;
                }
            }
        }
        let mut out = Vec::new();
        for &x in xs {
            for mech in Mechanism::ALL {
                let mean = match mech {
                    Mechanism::Apm => apm.get(&x).copied().unwrap_or(0.0) / x as f64,
                    _ => fixed[&mech][..x as usize].iter().sum::<f64>() / x as f64,
                };
                out.push((mech, x, mean));
            }
        }
        Ok(out)
    }

    fn config(&self) -> SearchConfig {
        SearchConfig {
            max_iters: self.max_iters,
            ..SearchConfig::default()
        }
    }
}

/// One requester task with its exact sketches, shared by every mechanism.
struct Task<'a> {
    train: &'a Relation,
    test: &'a Relation,
    exact: SearchRequest,
    bounds: Bounds,
    seed: u64,
}

impl<'a> Task<'a> {
    fn new(world: &PrivateWorld, train: &'a Relation, test: &'a Relation, seed: u64) -> Result<Self> {
        let keys = vec![world.planted.key.clone()];
        let (t, v, bounds) = sketch_request(train, Some(test), &keys, None, REQUEST_MAX_SUBSET, None, seed)?;
        let exact = SearchRequest::new(t, v, &world.planted.features, &world.planted.target).with_config(world.config());
        Ok(Self { train, test, exact, bounds, seed })
    }

    fn utility(&self, world: &PrivateWorld, mech: Mechanism, requests: usize) -> Result<f64> {
        let keys = vec![world.planted.key.clone()];
        let features = &world.planted.features;
        let target = &world.planted.target;
        let config = world.config();
        let state = match mech {
            Mechanism::NonPrivate => {
                let plan = Evaluator::new(&self.exact, &world.exact)?.search();
                plan_state(plan, mech)?
            }
            Mechanism::Fpm => {
                let (t, v) = privatize_request(&self.exact.train, self.exact.test.as_ref(), world.budget, self.seed)?;
                let req = SearchRequest::new(t, v, features, target).with_config(config);
                let plan = Evaluator::new(&req, &world.fpm)?.search();
                plan_state(plan, mech)?
            }
            Mechanism::Tpm => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7e57);
                let half = world.budget.split(2);
                let opts = SketchOptions::with_max_subset(REQUEST_MAX_SUBSET);
                let train = self.train.clone().with_name(REQUEST_ID);
                let test = self.test.clone().with_name(REQUEST_ID);
                let t = tuple_noise(&normalize_clip(&train, None)?.0, half, &mut rng)?;
                let v = tuple_noise(&normalize_clip(&test, Some(&self.bounds))?.0, half, &mut rng)?;
                let req = SearchRequest::new(
                    RegisteredSketchSet::build(&t, &keys, opts)?,
                    Some(RegisteredSketchSet::build(&v, &keys, opts)?),
                    features,
                    target,
                )
                .with_config(config);
                let plan = Evaluator::new(&req, &world.tpm)?.search();
                plan_state(plan, mech)?
            }
            Mechanism::Apm => {
                let release =
                    AggregateRelease::new(&self.exact, &world.exact, world.budget, requests, world.max_iters, self.seed);
                let ev = Evaluator::new(&self.exact, &world.exact)?
                    .with_release(move |state, side, sk| release.noisy(state, side, sk));
                plan_state(ev.search(), mech)?
            }
        };
        let eval = Evaluator::new(&self.exact, &world.exact)?.evaluate(&state)?;
        Ok(eval.utility)
    }
}

/// A search whose noisy baseline is unusable leaves the task unaugmented.
fn plan_state(plan: Result<AugmentationPlan>, mech: Mechanism) -> Result<SearchState> {
    match plan {
        Ok(plan) => Ok(plan.state()),
        Err(e @ (Error::UndefinedUtility(_) | Error::Singular(_))) if mech != Mechanism::NonPrivate => {
            log::debug!("{} search found no usable baseline: {e}", mech.name());
            Ok(SearchState::default())
        }
        Err(e) => Err(e),
    }
}

/// Per-request noisy release of each exact augmented sketch. Every release
/// involving a provider draws on that provider's budget: `ε/requests` per
/// request, split over a train and a test release per search iteration.
struct AggregateRelease {
    share: PrivacyBudget,
    multiplicity: BTreeMap<(Side, String), f64>,
    seed: u64,
}

impl AggregateRelease {
    fn new(
        request: &SearchRequest,
        corpus: &Corpus,
        budget: PrivacyBudget,
        requests: usize,
        max_iters: usize,
        seed: u64,
    ) -> Self {
        let share = calibration_budget(budget.split(requests * 2 * max_iters));
        let mut multiplicity = BTreeMap::new();
        let sides = [(Side::Train, Some(&request.train)), (Side::Test, request.test.as_ref())];
        for (side, set) in sides {
            let Some(set) = set else { continue };
            for (keys, keyed) in &set.vertical {
                if keys.len() == 1 {
                    multiplicity.insert((side, keys[0].clone()), keyed.max_multiplicity().max(1.0));
                }
            }
        }
        for set in corpus.sets() {
            for key in set.join_keys() {
                let m = set.keyed(std::slice::from_ref(&key)).map_or(1.0, |k| k.max_multiplicity().max(1.0));
                for side in [Side::Train, Side::Test] {
                    multiplicity.insert((side, format!("{}.{key}", set.dataset_id)), m);
                }
            }
        }
        Self { share, multiplicity, seed }
    }

    /// Rows of the released join that one input row can touch: for each
    /// party, the product of the other parties' largest key multiplicities.
    fn row_influence(&self, state: &SearchState, side: Side) -> f64 {
        let mut parts = Vec::new();
        for j in &state.joins {
            parts.push(self.multiplicity.get(&(side, j.request_key.clone())).copied().unwrap_or(1.0));
            parts.push(
                self.multiplicity
                    .get(&(side, format!("{}.{}", j.dataset_id, j.provider_key)))
                    .copied()
                    .unwrap_or(1.0),
            );
        }
        if parts.is_empty() {
            return 1.0;
        }
        let total: f64 = parts.iter().product();
        parts.iter().map(|p| total / p).fold(1.0, f64::max)
    }

    fn noisy(&self, state: &SearchState, side: Side, sk: CovSketch) -> CovSketch {
        let sensitivity = self.row_influence(state, side) * sketch_sensitivity(sk.dim());
        let spec = gaussian_sigma(self.share, sensitivity).expect("calibration budget is valid");
        let mut h = xxhash_rust::xxh3::Xxh3::with_seed(self.seed);
        for u in &state.unions {
            h.update(u.dataset_id.as_bytes());
            h.update(b"|");
        }
        for j in &state.joins {
            h.update(j.dataset_id.as_bytes());
            h.update(j.request_key.as_bytes());
            h.update(b"|");
        }
        h.update(if side == Side::Train { b"train" } else { b"test" });
        let mut rng = ChaCha8Rng::seed_from_u64(h.digest());
        privatize_sketch(&sk, &spec, &mut rng)
    }
}

/// Adds Gaussian noise to every feature and target value of a normalized
/// relation, calibrated to one row's L2 influence `sqrt(m)`.
pub fn tuple_noise<R: Rng + ?Sized>(r: &Relation, budget: PrivacyBudget, rng: &mut R) -> Result<Relation> {
    let cols: Vec<String> = r.numeric_columns().iter().map(|c| c.to_string()).collect();
    let spec = gaussian_sigma(calibration_budget(budget), (cols.len() as f64).sqrt())?;
    let mut out = r.clone();
    for c in &cols {
        let noisy = r
            .numeric(c)?
            .iter()
            .map(|v| v + spec.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        out = out.with_numeric_column(c, noisy)?;
    }
    Ok(out)
}

fn privacy_rows(opts: &BenchOptions, xs: &[u64], corpus_size: bool) -> Result<Vec<BenchRow>> {
    let budget = PrivacyBudget::new(opts.epsilon, opts.delta)?;
    let mut rows = Vec::new();
    for run in 0..opts.runs {
        let run_seed = opts.seed.wrapping_add(1000 * run as u64);
        let mut push = |x: u64, results: Vec<(Mechanism, u64, f64)>| {
            for (mech, _, value) in results {
                rows.push(BenchRow { mechanism: mech.name().into(), x, run, value });
            }
        };
        if corpus_size {
            for &x in xs {
                let spec = PlantedSpec {
                    num_datasets: x as usize,
                    ..opts.planted.clone()
                };
                let world = PrivateWorld::new(&spec, budget, opts.max_iters, run_seed)?;
                push(x, world.utilities(&[1], run_seed)?);
            }
        } else {
            let world = PrivateWorld::new(&opts.planted, budget, opts.max_iters, run_seed)?;
            for (mech, x, value) in world.utilities(xs, run_seed)? {
                push(x, vec![(mech, x, value)]);
            }
        }
    }
    Ok(rows)
}

fn privacy_scaling_bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    privacy_rows(opts, &opts.xs_or(&[2, 5, 10, 20]), true)
}

fn request_scaling_bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    privacy_rows(opts, &opts.xs_or(&[1, 4, 16, 64]), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_and_headers() {
        for k in BenchKind::ALL {
            assert_eq!(k.name().parse::<BenchKind>().unwrap(), k);
        }
        assert!("latency".parse::<BenchKind>().is_err());
        assert_eq!(BenchKind::Speed.header(), "mechanism,x,run,latency");
        assert_eq!(BenchKind::RequestScaling.header(), "mechanism,x,run,utility");
    }

    #[test]
    fn csv_output() {
        let rows = vec![BenchRow { mechanism: "fpm".into(), x: 4, run: 0, value: 0.5 }];
        let mut buf = Vec::new();
        write_csv(BenchKind::PrivacyScaling, &rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "mechanism,x,run,utility\nfpm,4,0,0.5\n");
    }

    #[test]
    fn tuple_noise_is_calibrated_per_value() {
        let spec = PlantedSpec { train_rows: 20_000, ..PlantedSpec::default() };
        let planted = PlantedCorpus::generate(&spec, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        let noisy = tuple_noise(&planted.train, b, &mut rng).unwrap();
        let diff: Vec<f64> = noisy
            .numeric("x")
            .unwrap()
            .iter()
            .zip(planted.train.numeric("x").unwrap())
            .map(|(a, b)| a - b)
            .collect();
        let sd = (diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64).sqrt();
        let expected = gaussian_sigma(b, 2f64.sqrt()).unwrap().sigma;
        assert!((sd / expected - 1.0).abs() < 0.03, "{sd} vs {expected}");
    }

    #[test]
    fn small_equivalence_run() {
        let rows = run_bench(BenchKind::Equivalence, &BenchOptions { runs: 3, ..BenchOptions::new(BenchKind::Equivalence) }).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.value < 1e-8), "{rows:?}");
    }
}
