//! Task-based dataset search over pre-computed covariance semi-ring sketches.
//!
//! Providers register datasets as sketches (count, sums, pairwise-product
//! sums), optionally privatized with the Gaussian mechanism. A requester's
//! train/test task is then augmented greedily with joins and unions whose
//! effect on a linear-regression proxy model is evaluated directly from the
//! sketches, never from rows.

pub mod bench;
pub mod datastore;
pub mod discovery;
pub mod error;
pub mod naive;
pub mod privacy;
pub mod proxy;
pub mod registry;
pub mod relation;
pub mod search;
pub mod semiring;
pub mod space;
pub mod synth;

pub use error::{Error, Result};
pub use privacy::{BudgetLedger, PrivacyBudget};
pub use proxy::{GramSystem, LinearModel};
pub use registry::{RegisteredSketchSet, SketchOptions};
pub use relation::{ColumnDesc, ColumnKind, Relation, SchemaHints};
pub use search::{search, AugmentationPlan, Corpus, SearchConfig, SearchRequest};
pub use semiring::{CovSketch, KeyedSketch};
pub use space::FeatureSpace;
