//! Filesystem corpus: manifest, ledger, sketch files and the register and
//! request pipelines.
//!
//! Layout under the corpus root:
//!
//! ```text
//! manifest.toml        registered datasets
//! ledger.toml          per-dataset privacy accounting
//! config.toml          optional defaults for both commands
//! sketches/<id>.sketch one sketch set per dataset
//! .lock                present while a writer holds the corpus
//! ```
//!
//! Raw rows never enter the corpus; only sketches, signatures and metadata do.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::discovery::Thresholds;
use crate::error::{Error, Result};
use crate::privacy::{normalize_clip, privatize_set, Bounds, BudgetLedger, PrivacyBudget};
use crate::registry::{validate_id, RegisteredSketchSet, SketchOptions};
use crate::relation::{ingest_csv, ColumnKind, Relation, SchemaHints};
use crate::search::{render_report, AugmentationPlan, Corpus, Evaluator, SearchConfig, SearchRequest};
use crate::synth::REQUEST_ID;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LEDGER_FILE: &str = "ledger.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const SKETCH_DIR: &str = "sketches";
pub const LOCK_FILE: &str = ".lock";

pub const PROVIDER_MAX_SUBSET: usize = 1;
pub const REQUEST_MAX_SUBSET: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Where the CSV was read from; the file itself is not copied.
    pub csv: String,
    pub hints: SchemaHints,
    pub join_keys: Vec<String>,
    /// `None` when privatization was disabled.
    pub budget: Option<PrivacyBudget>,
    pub sketch: String,
    pub registered_at: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    #[serde(default)]
    pub datasets: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.datasets.iter().find(|d| d.id == id)
    }
}

/// Settings that can come from flags, `FABSEARCH_*` variables or the
/// corpus config file. Unset fields fall through to the next layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    pub min_improve: Option<f64>,
    pub max_joins: Option<usize>,
    pub join_threshold: Option<f64>,
    pub union_threshold: Option<f64>,
    pub lambda: Option<f64>,
    pub max_subset: Option<usize>,
}

impl CorpusConfig {
    /// Fills every unset field of `self` from `lower`.
    pub fn over(self, lower: &CorpusConfig) -> CorpusConfig {
        CorpusConfig {
            epsilon: self.epsilon.or(lower.epsilon),
            delta: self.delta.or(lower.delta),
            seed: self.seed.or(lower.seed),
            max_iters: self.max_iters.or(lower.max_iters),
            min_improve: self.min_improve.or(lower.min_improve),
            max_joins: self.max_joins.or(lower.max_joins),
            join_threshold: self.join_threshold.or(lower.join_threshold),
            union_threshold: self.union_threshold.or(lower.union_threshold),
            lambda: self.lambda.or(lower.lambda),
            max_subset: self.max_subset.or(lower.max_subset),
        }
    }

    pub fn search_config(&self) -> Result<SearchConfig> {
        let d = SearchConfig::default();
        let cfg = SearchConfig {
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            min_improve: self.min_improve.unwrap_or(d.min_improve),
            max_joins: self.max_joins.unwrap_or(d.max_joins),
            thresholds: Thresholds {
                join: self.join_threshold.unwrap_or(d.thresholds.join),
                union: self.union_threshold.unwrap_or(d.thresholds.union),
            },
            lambda: self.lambda.or(d.lambda),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The privacy budget, or `None` when privatization is off: either
    /// `no_privacy` is set or ε is infinite.
    pub fn budget(&self, no_privacy: bool) -> Result<Option<PrivacyBudget>> {
        if no_privacy {
            return Ok(None);
        }
        let epsilon = self
            .epsilon
            .ok_or_else(|| Error::InvalidBudget("epsilon is required unless privacy is disabled".into()))?;
        if epsilon == f64::INFINITY {
            return Ok(None);
        }
        let delta = self
            .delta
            .ok_or_else(|| Error::InvalidBudget("delta is required unless privacy is disabled".into()))?;
        PrivacyBudget::new(epsilon, delta).map(Some)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Held while writing; the lock file is removed on drop.
#[derive(Debug)]
pub struct CorpusLock {
    path: PathBuf,
}

impl Drop for CorpusLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Deterministic noise source for one dataset.
pub fn dataset_rng(seed: u64, dataset_id: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ xxhash_rust::xxh3::xxh3_64(dataset_id.as_bytes()))
}

/// Normalizes `r` and sketches it. With `budget` set the set is privatized
/// and the spend recorded in `ledger`, which must already hold an allocation
/// for the relation.
pub fn sketch_relation(
    r: &Relation,
    join_keys: &[String],
    bounds: Option<&Bounds>,
    opts: SketchOptions,
    privacy: Option<(PrivacyBudget, &mut BudgetLedger, &mut ChaCha20Rng)>,
) -> Result<(RegisteredSketchSet, Bounds)> {
    let (normalized, used) = normalize_clip(r, bounds)?;
    let set = RegisteredSketchSet::build(&normalized, join_keys, opts)?;
    let set = match privacy {
        Some((budget, ledger, rng)) => privatize_set(&set, ledger, budget, rng)?,
        None => set,
    };
    Ok((set, used))
}

#[derive(Clone, Debug)]
pub struct RegisterArgs {
    pub csv: PathBuf,
    /// Defaults to the CSV file stem.
    pub id: Option<String>,
    pub keys: Vec<String>,
    /// Numeric columns to sketch; `None` takes every numeric column.
    pub features: Option<Vec<String>>,
    pub budget: Option<PrivacyBudget>,
    pub bounds: Option<Bounds>,
    pub max_subset: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RequestArgs {
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    pub target: String,
    pub features: Option<Vec<String>>,
    pub keys: Vec<String>,
    pub budget: Option<PrivacyBudget>,
    pub bounds: Option<Bounds>,
    pub config: SearchConfig,
    pub max_subset: usize,
    pub seed: u64,
    pub output: PathBuf,
}

#[derive(Clone, Debug)]
pub struct RequestOutcome {
    pub plan: AugmentationPlan,
    pub report: String,
    pub output: PathBuf,
}

pub struct CorpusStore {
    root: PathBuf,
}

impl CorpusStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn sketch_dir(&self) -> PathBuf {
        self.root.join(SKETCH_DIR)
    }

    pub fn manifest(&self) -> Result<CorpusManifest> {
        let path = self.root.join(MANIFEST_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => toml::from_str(&text).map_err(|e| Error::Corpus(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(CorpusManifest::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn ledger(&self) -> Result<BudgetLedger> {
        BudgetLedger::load(self.root.join(LEDGER_FILE))
    }

    pub fn config(&self) -> Result<CorpusConfig> {
        let path = self.root.join(CONFIG_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => toml::from_str(&text).map_err(|e| Error::Corpus(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(CorpusConfig::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Takes the writer lock, failing if another writer holds it.
    pub fn lock(&self) -> Result<CorpusLock> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(CorpusLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Corpus(format!(
                "corpus is locked by another writer (remove {} if it is stale)",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Loads every registered sketch set.
    pub fn load_corpus(&self) -> Result<Corpus> {
        let manifest = self.manifest()?;
        let sets = manifest
            .datasets
            .iter()
            .map(|d| {
                let set = RegisteredSketchSet::load(self.root.join(&d.sketch))?;
                if set.dataset_id != d.id {
                    return Err(Error::Corpus(format!(
                        "{} holds `{}`, expected `{}`",
                        d.sketch, set.dataset_id, d.id
                    )));
                }
                Ok(set)
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(sets)
    }

    pub fn register(&self, args: &RegisterArgs) -> Result<ManifestEntry> {
        let _lock = self.lock()?;
        let mut manifest = self.manifest()?;
        let mut ledger = self.ledger()?;

        let mut hints = SchemaHints::new();
        for k in &args.keys {
            hints = hints.with(k.clone(), ColumnKind::Key);
        }
        if let Some(features) = &args.features {
            for f in features {
                hints = hints.with(f.clone(), ColumnKind::Feature);
            }
            hints = hints.with_default(ColumnKind::Ignored);
        }
        let (relation, report) = ingest_csv(&args.csv, &hints)?;
        if report.dropped > 0 {
            log::warn!("{} of {} rows dropped for missing or unparsable values", report.dropped, report.rows_read);
        }
        let id = args.id.clone().unwrap_or_else(|| relation.name().to_string());
        validate_id(&id)?;
        if id == REQUEST_ID {
            return Err(Error::Invalid(format!("`{REQUEST_ID}` is reserved for requests")));
        }
        if manifest.get(&id).is_some() {
            return Err(Error::DuplicateDataset(id));
        }
        let relation = relation.with_name(id.clone());
        let opts = SketchOptions::with_max_subset(args.max_subset);

        let (set, used_bounds) = match args.budget {
            Some(budget) => {
                if args.bounds.is_none() {
                    log::warn!(
                        "normalization bounds for `{id}` are derived from the data and are not private; pass public bounds to avoid this"
                    );
                }
                let mut rng = dataset_rng(args.seed, &id);
                ledger.allocate(&id, budget)?;
                sketch_relation(&relation, &args.keys, args.bounds.as_ref(), opts, Some((budget, &mut ledger, &mut rng)))?
            }
            None => sketch_relation(&relation, &args.keys, args.bounds.as_ref(), opts, None)?,
        };
        // data-derived bounds describe the private rows, so they are kept only
        // when the user supplied them or privacy is off
        let set = match (&args.bounds, args.budget) {
            (Some(_), _) | (None, None) => set.with_bounds(used_bounds),
            (None, Some(_)) => set,
        };

        let path = set.store(self.sketch_dir())?;
        let entry = ManifestEntry {
            id: id.clone(),
            csv: args.csv.display().to_string(),
            hints,
            join_keys: args.keys.clone(),
            budget: args.budget,
            sketch: format!("{SKETCH_DIR}/{}", path.file_name().expect("sketch path has a file name").to_string_lossy()),
            registered_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        manifest.datasets.push(entry.clone());
        write_atomic(&self.root.join(MANIFEST_FILE), &toml::to_string_pretty(&manifest).map_err(|e| Error::Corpus(e.to_string()))?)?;
        ledger.save(self.root.join(LEDGER_FILE))?;
        Ok(entry)
    }

    pub fn request(&self, args: &RequestArgs) -> Result<RequestOutcome> {
        let corpus = self.load_corpus()?;
        let mut hints = SchemaHints::new().with(args.target.clone(), ColumnKind::Target);
        for k in &args.keys {
            hints = hints.with(k.clone(), ColumnKind::Key);
        }
        if let Some(features) = &args.features {
            for f in features {
                hints = hints.with(f.clone(), ColumnKind::Feature);
            }
            hints = hints.with_default(ColumnKind::Ignored);
        }
        let (train, _) = ingest_csv(&args.train, &hints)?;
        let test = args
            .test
            .as_ref()
            .map(|p| ingest_csv(p, &hints).map(|(r, _)| r))
            .transpose()?;
        let features: Vec<String> = match &args.features {
            Some(f) => f.clone(),
            None => train
                .columns_of_kind(ColumnKind::Feature)
                .into_iter()
                .map(str::to_string)
                .collect(),
        };

        let (train_set, test_set, bounds) = sketch_request(
            &train,
            test.as_ref(),
            &args.keys,
            args.bounds.as_ref(),
            args.max_subset,
            args.budget,
            args.seed,
        )?;
        let mut request = SearchRequest::new(train_set, test_set, &features, &args.target).with_config(args.config);
        if let Some(b) = args.budget {
            request = request.with_budget(b);
        }
        let plan = Evaluator::new(&request, &corpus)?.search()?;

        let mut all_bounds: BTreeMap<String, Bounds> = corpus
            .sets()
            .filter_map(|s| s.bounds.clone().map(|b| (s.dataset_id.clone(), b)))
            .collect();
        all_bounds.insert(REQUEST_ID.to_string(), bounds);
        let report = render_report(&plan, &all_bounds);
        write_atomic(&args.output, &report)?;
        Ok(RequestOutcome {
            plan,
            report,
            output: args.output.clone(),
        })
    }
}

/// Sketches a requester's train and test relations under the shared name
/// [`REQUEST_ID`]. The test side is normalized with the training bounds.
/// With a budget, half goes to each side.
pub fn sketch_request(
    train: &Relation,
    test: Option<&Relation>,
    keys: &[String],
    bounds: Option<&Bounds>,
    max_subset: usize,
    budget: Option<PrivacyBudget>,
    seed: u64,
) -> Result<(RegisteredSketchSet, Option<RegisteredSketchSet>, Bounds)> {
    let opts = SketchOptions::with_max_subset(max_subset);
    let (train_set, used) = sketch_relation(&train.clone().with_name(REQUEST_ID), keys, bounds, opts, None)?;
    let test_set = match test {
        Some(t) => Some(sketch_relation(&t.clone().with_name(REQUEST_ID), keys, Some(&used), opts, None)?.0),
        None => None,
    };
    let (train_set, test_set) = match budget {
        Some(b) => privatize_request(&train_set, test_set.as_ref(), b, seed)?,
        None => (train_set, test_set),
    };
    Ok((train_set, test_set, used))
}

/// Privatizes exact requester sketches as [`sketch_request`] does.
pub fn privatize_request(
    train: &RegisteredSketchSet,
    test: Option<&RegisteredSketchSet>,
    budget: PrivacyBudget,
    seed: u64,
) -> Result<(RegisteredSketchSet, Option<RegisteredSketchSet>)> {
    let mut ledger = BudgetLedger::new();
    ledger.allocate(REQUEST_ID, budget)?;
    let mut rng = dataset_rng(seed, REQUEST_ID);
    let share = budget.split(if test.is_some() { 2 } else { 1 });
    let train = privatize_set(train, &mut ledger, share, &mut rng)?;
    let test = match test {
        Some(t) => Some(privatize_set(t, &mut ledger, share, &mut rng)?),
        None => None,
    };
    Ok((train, test))
}

/// Reads a bounds file: a TOML table mapping column names to `[lo, hi]`.
pub fn read_bounds(path: impl AsRef<Path>) -> Result<Bounds> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, [f64; 2]> =
        toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok(raw.into_iter().map(|(k, [lo, hi])| (k, (lo, hi))).collect())
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
