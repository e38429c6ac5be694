//! Seeded synthetic corpora for tests and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::relation::{ColumnData, ColumnDesc, ColumnKind, Relation};

pub const REQUEST_ID: &str = "request";

/// A fact table whose target is mostly explained by one hidden per-key
/// attribute, one provider holding that attribute and the rest holding
/// unrelated per-key values.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedSpec {
    pub num_keys: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    /// Providers including the planted one.
    pub num_datasets: usize,
    pub provider_rows_per_key: usize,
    pub x_weight: f64,
    pub hidden_weight: f64,
    pub noise_sd: f64,
    /// Within-key spread of provider values.
    pub jitter_sd: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        // x explains ~10% of the variance, x and the hidden attribute ~95%
        Self {
            num_keys: 100,
            train_rows: 2000,
            test_rows: 1000,
            num_datasets: 10,
            provider_rows_per_key: 10,
            x_weight: 1.0,
            hidden_weight: 8.5f64.sqrt(),
            noise_sd: (0.5f64 / 12.0).sqrt(),
            jitter_sd: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedCorpus {
    pub spec: PlantedSpec,
    pub train: Relation,
    pub test: Relation,
    pub providers: Vec<Relation>,
    pub planted: String,
    pub hidden: Vec<f64>,
    pub key: String,
    pub features: Vec<String>,
    pub target: String,
}

pub fn key_value(k: usize) -> String {
    format!("k{k:05}")
}

impl PlantedCorpus {
    pub fn generate(spec: &PlantedSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden: Vec<f64> = (0..spec.num_keys).map(|_| rng.random::<f64>()).collect();
        let planted_at = rng.random_range(0..spec.num_datasets.max(1));
        let providers = (0..spec.num_datasets)
            .map(|i| {
                let name = format!("ds{i:02}");
                if i == planted_at {
                    provider_table(&name, &hidden, spec, &mut rng)
                } else {
                    let unrelated: Vec<f64> = (0..spec.num_keys).map(|_| rng.random::<f64>()).collect();
                    provider_table(&name, &unrelated, spec, &mut rng)
                }
            })
            .collect();
        let mut corpus = Self {
            spec: spec.clone(),
            train: empty_request(),
            test: empty_request(),
            providers,
            planted: format!("ds{planted_at:02}"),
            hidden,
            key: "k".into(),
            features: vec!["x".into()],
            target: "y".into(),
        };
        let (train, test) = corpus.fresh_request(&mut rng);
        corpus.train = train;
        corpus.test = test;
        corpus
    }

    /// A new train/test pair drawn from the same process, as a different
    /// requester with the same task would hold.
    pub fn fresh_request<R: Rng + ?Sized>(&self, rng: &mut R) -> (Relation, Relation) {
        let train = self.request_table(self.spec.train_rows, rng);
        let test = self.request_table(self.spec.test_rows, rng);
        (train, test)
    }

    fn request_table<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Relation {
        let s = &self.spec;
        let noise = Normal::new(0.0, s.noise_sd).expect("noise sd is finite");
        let mut keys = Vec::with_capacity(rows);
        let mut xs = Vec::with_capacity(rows);
        let mut ys = Vec::with_capacity(rows);
        for _ in 0..rows {
            let k = rng.random_range(0..s.num_keys);
            let x: f64 = rng.random();
            keys.push(key_value(k));
            xs.push(x);
            ys.push(s.x_weight * x + s.hidden_weight * self.hidden[k] + noise.sample(rng));
        }
        Relation::new(
            REQUEST_ID,
            request_schema(),
            vec![ColumnData::Text(keys), ColumnData::Numeric(xs), ColumnData::Numeric(ys)],
        )
        .expect("generated columns are consistent")
    }
}

fn request_schema() -> Vec<ColumnDesc> {
    vec![
        ColumnDesc::new("k", ColumnKind::Key),
        ColumnDesc::new("x", ColumnKind::Feature),
        ColumnDesc::new("y", ColumnKind::Target),
    ]
}

fn empty_request() -> Relation {
    Relation::new(
        REQUEST_ID,
        request_schema(),
        vec![ColumnData::Text(vec![]), ColumnData::Numeric(vec![]), ColumnData::Numeric(vec![])],
    )
    .expect("empty columns are consistent")
}

fn provider_table<R: Rng + ?Sized>(name: &str, values: &[f64], spec: &PlantedSpec, rng: &mut R) -> Relation {
    provider_with_rows(name, values, spec.provider_rows_per_key, spec.jitter_sd, rng)
}

/// `rows_per_key` rows for every key, each carrying the key's value plus
/// Gaussian jitter.
pub fn provider_with_rows<R: Rng + ?Sized>(
    name: &str,
    values: &[f64],
    rows_per_key: usize,
    jitter_sd: f64,
    rng: &mut R,
) -> Relation {
    let n = values.len() * rows_per_key;
    let mut keys = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for _ in 0..rows_per_key {
        for (k, v) in values.iter().enumerate() {
            keys.push(key_value(k));
            let jitter: f64 = rng.sample(StandardNormal);
            zs.push(v + jitter_sd * jitter);
        }
    }
    Relation::new(
        name,
        vec![
            ColumnDesc::new("key", ColumnKind::Key),
            ColumnDesc::new("z", ColumnKind::Feature),
        ],
        vec![ColumnData::Text(keys), ColumnData::Numeric(zs)],
    )
    .expect("generated columns are consistent")
}

/// Bounds on the shape of [`RandomCorpus`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RandomSpec {
    /// Request included.
    pub max_relations: usize,
    pub max_rows: usize,
    pub max_features: usize,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self {
            max_relations: 8,
            max_rows: 200,
            max_features: 6,
        }
    }
}

/// Small random corpus mixing join providers (possibly many rows per key,
/// partial key overlap) and union providers (the request's schema).
#[derive(Clone, Debug)]
pub struct RandomCorpus {
    pub train: Relation,
    pub test: Relation,
    pub providers: Vec<Relation>,
    pub features: Vec<String>,
    pub target: String,
    pub key: String,
}

impl RandomCorpus {
    pub fn generate(spec: RandomSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domain = rng.random_range(4..=24usize);
        let m = rng.random_range(1..=spec.max_features.saturating_sub(1).max(1));
        let features: Vec<String> = (0..m).map(|i| format!("f{i}")).collect();
        let weights: Vec<f64> = (0..m + 1).map(|_| rng.random_range(-2.0..2.0)).collect();
        let key_effect: Vec<f64> = (0..domain).map(|_| rng.random_range(-1.0..1.0)).collect();

        let request = |rng: &mut ChaCha8Rng, rows: usize, name: &str| {
            let mut keys = Vec::with_capacity(rows);
            let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(rows); m + 1];
            for _ in 0..rows {
                let k = rng.random_range(0..domain);
                keys.push(key_value(k));
                let mut y = key_effect[k] + 0.1 * rng.sample::<f64, _>(StandardNormal);
                for (j, col) in cols.iter_mut().take(m).enumerate() {
                    let v: f64 = rng.random();
                    y += weights[j] * v;
                    col.push(v);
                }
                cols[m].push(y);
            }
            let mut schema = vec![ColumnDesc::new("k", ColumnKind::Key)];
            schema.extend(features.iter().map(|f| ColumnDesc::new(f.clone(), ColumnKind::Feature)));
            schema.push(ColumnDesc::new("y", ColumnKind::Target));
            let mut data = vec![ColumnData::Text(keys)];
            data.extend(cols.into_iter().map(ColumnData::Numeric));
            Relation::new(name, schema, data).expect("generated columns are consistent")
        };

        let min_rows = (m + 3).min(spec.max_rows);
        let train_rows = rng.random_range(min_rows.max(8).min(spec.max_rows)..=spec.max_rows);
        let test_rows = rng.random_range(min_rows.max(8).min(spec.max_rows)..=spec.max_rows);
        let train = request(&mut rng, train_rows, REQUEST_ID);
        let test = request(&mut rng, test_rows, REQUEST_ID);

        let num_providers = rng.random_range(1..spec.max_relations.max(2));
        let mut providers = Vec::with_capacity(num_providers);
        for i in 0..num_providers {
            let name = format!("p{i}");
            if rng.random_bool(0.3) {
                let rows = rng.random_range(1..=spec.max_rows);
                providers.push(request(&mut rng, rows, &name));
                continue;
            }
            // join provider over a shuffled, partial slice of the key domain
            let mut keys: Vec<usize> = (0..domain + rng.random_range(0..4)).collect();
            keys.shuffle(&mut rng);
            keys.truncate(rng.random_range(domain / 2..=keys.len()).max(1));
            let width = rng.random_range(1..=spec.max_features.min(3));
            let rows = rng.random_range(keys.len()..=spec.max_rows.max(keys.len()));
            let mut key_col = Vec::with_capacity(rows);
            let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(rows); width];
            for r in 0..rows {
                let k = if r < keys.len() { keys[r] } else { keys[rng.random_range(0..keys.len())] };
                key_col.push(key_value(k));
                for (j, col) in cols.iter_mut().enumerate() {
                    let signal = if j == 0 && k < domain { key_effect[k] } else { 0.0 };
                    col.push(signal + rng.random::<f64>());
                }
            }
            let mut schema = vec![ColumnDesc::new("key", ColumnKind::Key)];
            schema.extend((0..width).map(|j| ColumnDesc::new(format!("a{j}"), ColumnKind::Feature)));
            let mut data = vec![ColumnData::Text(key_col)];
            data.extend(cols.into_iter().map(ColumnData::Numeric));
            providers.push(Relation::new(name, schema, data).expect("generated columns are consistent"));
        }

        Self {
            train,
            test,
            providers,
            features,
            target: "y".into(),
            key: "k".into(),
        }
    }
}
