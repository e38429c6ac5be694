//! In-memory relations with typed columns and CSV ingestion.
//!
//! Storage is columnar: feature and target columns hold `f64`, key and
//! ignored columns hold the verbatim strings read from the source. Relations
//! are immutable once built; every transformation returns a new value.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Feature,
    Key,
    Target,
    Ignored,
}

impl ColumnKind {
    pub fn is_numeric(self) -> bool {
        matches!(self, ColumnKind::Feature | ColumnKind::Target)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDesc {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnDesc {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Text(Vec<String>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> ColumnData {
        match self {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&i| v[i]).collect()),
            ColumnData::Text(v) => ColumnData::Text(rows.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    /// Cell rendered the way it is written to CSV.
    pub fn render(&self, row: usize) -> String {
        match self {
            ColumnData::Numeric(v) => v[row].to_string(),
            ColumnData::Text(v) => v[row].clone(),
        }
    }
}

/// A single owned cell, used when building relations row by row.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Relation {
    name: String,
    schema: Vec<ColumnDesc>,
    columns: Vec<ColumnData>,
    rows: usize,
}

impl Relation {
    pub fn new(
        name: impl Into<String>,
        schema: Vec<ColumnDesc>,
        columns: Vec<ColumnData>,
    ) -> Result<Self> {
        if schema.len() != columns.len() {
            return Err(Error::Schema(format!(
                "{} column descriptors for {} columns",
                schema.len(),
                columns.len()
            )));
        }
        let mut seen = HashSet::new();
        for desc in &schema {
            if !seen.insert(desc.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", desc.name)));
            }
        }
        let rows = columns.first().map_or(0, ColumnData::len);
        for (desc, col) in schema.iter().zip(&columns) {
            if col.len() != rows {
                return Err(Error::Schema(format!(
                    "column `{}` has {} values, expected {rows}",
                    desc.name,
                    col.len()
                )));
            }
            match (desc.kind.is_numeric(), col) {
                (true, ColumnData::Numeric(values)) => {
                    if values.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Schema(format!(
                            "column `{}` holds a non-finite value",
                            desc.name
                        )));
                    }
                }
                (false, ColumnData::Text(_)) => {}
                _ => {
                    return Err(Error::Schema(format!(
                        "column `{}` storage does not match its kind {:?}",
                        desc.name, desc.kind
                    )))
                }
            }
        }
        Ok(Self {
            name: name.into(),
            schema,
            columns,
            rows,
        })
    }

    pub fn from_rows(
        name: impl Into<String>,
        schema: Vec<ColumnDesc>,
        rows: Vec<Vec<Cell>>,
    ) -> Result<Self> {
        let mut columns: Vec<ColumnData> = schema
            .iter()
            .map(|d| {
                if d.kind.is_numeric() {
                    ColumnData::Numeric(Vec::with_capacity(rows.len()))
                } else {
                    ColumnData::Text(Vec::with_capacity(rows.len()))
                }
            })
            .collect();
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::ArityMismatch {
                    row: i,
                    expected: schema.len(),
                    found: row.len(),
                });
            }
            for ((cell, col), desc) in row.into_iter().zip(columns.iter_mut()).zip(&schema) {
                match (cell, col) {
                    (Cell::Num(v), ColumnData::Numeric(c)) => c.push(v),
                    (Cell::Text(s), ColumnData::Text(c)) => c.push(s),
                    _ => {
                        return Err(Error::Schema(format!(
                            "row {i}: cell type does not match column `{}`",
                            desc.name
                        )))
                    }
                }
            }
        }
        Self::new(name, schema, columns)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn schema(&self) -> &[ColumnDesc] {
        &self.schema
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|d| d.name == name)
    }

    pub fn kind_of(&self, name: &str) -> Option<ColumnKind> {
        self.column_index(name).map(|i| self.schema[i].kind)
    }

    pub fn column(&self, name: &str) -> Option<&ColumnData> {
        self.column_index(name).map(|i| &self.columns[i])
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name) {
            Some(ColumnData::Numeric(v)) => Ok(v),
            Some(ColumnData::Text(_)) => Err(Error::Schema(format!(
                "column `{name}` is not numeric"
            ))),
            None => Err(Error::UnknownColumn(name.to_string())),
        }
    }

    pub fn text(&self, name: &str) -> Result<&[String]> {
        match self.column(name) {
            Some(ColumnData::Text(v)) => Ok(v),
            Some(ColumnData::Numeric(_)) => Err(Error::Schema(format!(
                "column `{name}` is not a text column"
            ))),
            None => Err(Error::UnknownColumn(name.to_string())),
        }
    }

    pub fn columns_of_kind(&self, kind: ColumnKind) -> Vec<&str> {
        self.schema
            .iter()
            .filter(|d| d.kind == kind)
            .map(|d| d.name.as_str())
            .collect()
    }

    /// Feature and target column names in schema order.
    pub fn numeric_columns(&self) -> Vec<&str> {
        self.schema
            .iter()
            .filter(|d| d.kind.is_numeric())
            .map(|d| d.name.as_str())
            .collect()
    }

    /// Restricts the relation to `names`, in the order given. Repeated names
    /// are kept once.
    pub fn project_features<S: AsRef<str>>(&self, names: &[S]) -> Result<Relation> {
        let mut seen = HashSet::new();
        let mut schema = Vec::new();
        let mut columns = Vec::new();
        for name in names {
            let name = name.as_ref();
            if !seen.insert(name) {
                continue;
            }
            let idx = self
                .column_index(name)
                .ok_or_else(|| Error::UnknownColumn(name.to_string()))?;
            schema.push(self.schema[idx].clone());
            columns.push(self.columns[idx].clone());
        }
        let rows = self.rows;
        let mut out = Relation::new(self.name.clone(), schema, columns)?;
        out.rows = rows;
        Ok(out)
    }

    /// Keeps rows whose index satisfies `keep`.
    pub fn filter_rows(&self, mut keep: impl FnMut(usize) -> bool) -> Relation {
        let rows: Vec<usize> = (0..self.rows).filter(|&i| keep(i)).collect();
        self.select_rows(&rows)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Relation {
        Relation {
            name: self.name.clone(),
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            rows: rows.len(),
        }
    }

    /// Replaces the values of an existing numeric column.
    pub fn with_numeric_column(mut self, name: &str, values: Vec<f64>) -> Result<Relation> {
        let idx = self
            .column_index(name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))?;
        if !self.schema[idx].kind.is_numeric() {
            return Err(Error::Schema(format!("column `{name}` is not numeric")));
        }
        if values.len() != self.rows {
            return Err(Error::Schema(format!(
                "replacement for `{name}` has {} values, expected {}",
                values.len(),
                self.rows
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("column `{name}` holds a non-finite value")));
        }
        self.columns[idx] = ColumnData::Numeric(values);
        Ok(self)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        self.write_records(&mut wtr)?;
        let bytes = wtr
            .into_inner()
            .map_err(|e| Error::Invalid(format!("csv flush failed: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut wtr = csv::Writer::from_path(path)?;
        self.write_records(&mut wtr)?;
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    fn write_records<W: std::io::Write>(&self, wtr: &mut csv::Writer<W>) -> Result<()> {
        wtr.write_record(self.schema.iter().map(|d| d.name.as_str()))?;
        for row in 0..self.rows {
            wtr.write_record(self.columns.iter().map(|c| c.render(row)))?;
        }
        Ok(())
    }

    /// Schema hints that reproduce this relation's column kinds on re-ingestion.
    pub fn hints(&self) -> SchemaHints {
        SchemaHints {
            kinds: self
                .schema
                .iter()
                .map(|d| (d.name.clone(), d.kind))
                .collect(),
            default: Some(ColumnKind::Ignored),
        }
    }
}

/// Column-kind mapping used at ingestion.
///
/// Columns without an explicit hint take `default`; when `default` is `None`
/// they are auto-typed: a column whose non-empty cells all parse as finite
/// reals becomes a feature, anything else is ignored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaHints {
    pub kinds: BTreeMap<String, ColumnKind>,
    pub default: Option<ColumnKind>,
}

impl SchemaHints {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, column: impl Into<String>, kind: ColumnKind) -> Self {
        self.kinds.insert(column.into(), kind);
        self
    }

    pub fn with_default(mut self, kind: ColumnKind) -> Self {
        self.default = Some(kind);
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows_read: usize,
    pub dropped: usize,
    /// Unhinted columns that were not numeric and were therefore ignored.
    pub ignored_columns: Vec<String>,
}

pub fn ingest_csv(path: impl AsRef<Path>, hints: &SchemaHints) -> Result<(Relation, IngestReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "relation".to_string());
    read_csv(name, file, hints)
}

pub fn read_csv<R: Read>(
    name: impl Into<String>,
    reader: R,
    hints: &SchemaHints,
) -> Result<(Relation, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(Error::EmptyInput("no header row".into())),
    };
    let header: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(Error::EmptyInput("blank header row".into()));
    }
    for hinted in hints.kinds.keys() {
        if !header.contains(hinted) {
            return Err(Error::UnknownColumn(hinted.clone()));
        }
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    let mut rows_read = 0;
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() == 1 && rec.get(0).is_some_and(|f| f.trim().is_empty()) && header.len() > 1 {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::ArityMismatch {
                row: i + 1,
                expected: header.len(),
                found: rec.len(),
            });
        }
        for (col, field) in raw.iter_mut().zip(rec.iter()) {
            col.push(field.to_string());
        }
        rows_read += 1;
    }

    let mut ignored_columns = Vec::new();
    let kinds: Vec<ColumnKind> = header
        .iter()
        .zip(&raw)
        .map(|(name, values)| match hints.kinds.get(name).copied().or(hints.default) {
            Some(kind) => kind,
            None => {
                let mut non_empty = values.iter().filter(|v| !v.trim().is_empty()).peekable();
                if non_empty.peek().is_some() && non_empty.all(|v| parse_real(v).is_some()) {
                    ColumnKind::Feature
                } else {
                    log::info!("column `{name}` is not numeric; ignoring it");
                    ignored_columns.push(name.clone());
                    ColumnKind::Ignored
                }
            }
        })
        .collect();

    let mut keep = vec![true; rows_read];
    let mut parsed: Vec<Option<Vec<f64>>> = Vec::with_capacity(header.len());
    for (values, kind) in raw.iter().zip(&kinds) {
        if kind.is_numeric() {
            let col: Vec<f64> = values
                .iter()
                .enumerate()
                .map(|(row, v)| {
                    parse_real(v).unwrap_or_else(|| {
                        keep[row] = false;
                        0.0
                    })
                })
                .collect();
            parsed.push(Some(col));
        } else {
            parsed.push(None);
        }
    }
    let dropped = keep.iter().filter(|k| !**k).count();
    if dropped * 2 > rows_read {
        return Err(Error::TooManyDropped {
            dropped,
            total: rows_read,
        });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} of {rows_read} rows with missing or unparsable values");
    }

    let schema: Vec<ColumnDesc> = header
        .iter()
        .zip(&kinds)
        .map(|(n, k)| ColumnDesc::new(n.clone(), *k))
        .collect();
    let columns: Vec<ColumnData> = raw
        .into_iter()
        .zip(parsed)
        .map(|(values, numeric)| match numeric {
            Some(col) => ColumnData::Numeric(
                col.into_iter()
                    .zip(&keep)
                    .filter_map(|(v, k)| k.then_some(v))
                    .collect(),
            ),
            None => ColumnData::Text(
                values
                    .into_iter()
                    .zip(&keep)
                    .filter_map(|(v, k)| k.then_some(v))
                    .collect(),
            ),
        })
        .collect();
    let relation = Relation::new(name, schema, columns)?;
    Ok((
        relation,
        IngestReport {
            rows_read,
            dropped,
            ignored_columns,
        },
    ))
}

fn parse_real(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}
