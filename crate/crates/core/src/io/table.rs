use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a column is to be interpreted. Columns not named in a schema are
/// continuous when every present cell parses as a number, text otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

/// Explicit column kinds. Categorical detection is never inferred from the
/// values, so integer-coded categories must be declared here.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default)]
    pub kinds: BTreeMap<String, ColumnKind>,
}

impl Schema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn categorical<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Schema {
            kinds: names
                .into_iter()
                .map(|n| (n.into(), ColumnKind::Categorical))
                .collect(),
        }
    }

    pub fn with(mut self, name: &str, kind: ColumnKind) -> Self {
        self.kinds.insert(name.to_string(), kind);
        self
    }

    pub fn kind(&self, name: &str) -> Option<ColumnKind> {
        self.kinds.get(name).copied()
    }

    pub fn is_categorical(&self, name: &str) -> bool {
        self.kind(name) == Some(ColumnKind::Categorical)
    }
}

/// Label to dense id, in first-occurrence order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMap {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LevelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        let mut map = LevelMap::new();
        for l in labels {
            if map.get(&l).is_some() {
                return Err(Error::Data(format!("duplicate level label {l:?}")));
            }
            map.insert(&l);
        }
        Ok(map)
    }

    /// Returns the id of `label`, adding it if new.
    pub fn insert(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        let i = self.labels.len();
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), i);
        i
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        if self.index.len() != self.labels.len() {
            // deserialized map; fall back to a scan
            return self.labels.iter().position(|l| l == label);
        }
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    /// Real values; missing cells are NaN.
    Numeric(Vec<f64>),
    /// Integer codes into `levels`; missing cells are `None`.
    Categorical {
        codes: Vec<Option<usize>>,
        levels: LevelMap,
    },
    /// Strings not yet coded.
    Text(Vec<Option<String>>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
            Column::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_missing(&self, i: usize) -> bool {
        match self {
            Column::Numeric(v) => v[i].is_nan(),
            Column::Categorical { codes, .. } => codes[i].is_none(),
            Column::Text(v) => v[i].is_none(),
        }
    }

    /// Cell `i` as a label, or `None` when missing.
    pub fn label(&self, i: usize) -> Option<String> {
        match self {
            Column::Numeric(v) => (!v[i].is_nan()).then(|| format_number(v[i])),
            Column::Categorical { codes, levels } => {
                codes[i].and_then(|c| levels.label(c)).map(str::to_string)
            }
            Column::Text(v) => v[i].clone(),
        }
    }

    pub fn take(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical { codes, levels } => Column::Categorical {
                codes: rows.iter().map(|&r| codes[r]).collect(),
                levels: levels.clone(),
            },
            Column::Text(v) => Column::Text(rows.iter().map(|&r| v[r].clone()).collect()),
        }
    }
}

pub(crate) fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Named, equal-length columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColumnTable {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
}

impl ColumnTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn push(&mut self, name: &str, column: Column) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Data(format!("duplicate column {name:?}")));
        }
        if !self.columns.is_empty() && column.len() != self.n_rows {
            return Err(Error::Column {
                column: name.to_string(),
                msg: format!("length {} but table has {} rows", column.len(), self.n_rows),
            });
        }
        self.n_rows = column.len();
        self.names.push(name.to_string());
        self.columns.push(column);
        Ok(())
    }

    pub fn with_numeric(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        self.push(name, Column::Numeric(values))?;
        Ok(self)
    }

    pub fn with_text<S: Into<String>>(mut self, name: &str, values: Vec<S>) -> Result<Self> {
        self.push(
            name,
            Column::Text(values.into_iter().map(|s| Some(s.into())).collect()),
        )?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Result<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    /// A column as reals. Text cells must parse as numbers.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        match self.get(name)? {
            Column::Numeric(v) => Ok(v.clone()),
            Column::Categorical { .. } => Err(Error::Column {
                column: name.to_string(),
                msg: "categorical column used where a number is required".into(),
            }),
            Column::Text(v) => v
                .iter()
                .map(|c| match c {
                    None => Ok(f64::NAN),
                    Some(s) => s.trim().parse::<f64>().map_err(|_| Error::Column {
                        column: name.to_string(),
                        msg: format!("non-numeric value {s:?}"),
                    }),
                })
                .collect(),
        }
    }

    /// Row subset in the given order.
    pub fn take(&self, rows: &[usize]) -> ColumnTable {
        ColumnTable {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.take(rows)).collect(),
            n_rows: rows.len(),
        }
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &Column)> {
        self.names.iter().map(String::as_str).zip(&self.columns)
    }
}

/// Options for [`load_csv`].
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Rows missing any of these are dropped.
    pub targets: Vec<String>,
    /// Replace missing continuous features by the column mean instead of
    /// failing.
    pub impute_mean: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped_missing_target: usize,
    pub imputed_cells: usize,
}

/// Reads an RFC-4180 CSV file with a header row.
pub fn load_csv(path: &Path, schema: &Schema, opts: &LoadOptions) -> Result<(ColumnTable, LoadReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, opts)
}

/// [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(
    reader: R,
    schema: &Schema,
    opts: &LoadOptions,
) -> Result<(ColumnTable, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); header.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        for (j, field) in rec.iter().enumerate() {
            let f = field.trim();
            cells[j].push((!f.is_empty()).then(|| f.to_string()));
        }
    }
    let rows_read = cells.first().map_or(0, Vec::len);

    for t in &opts.targets {
        if !header.contains(t) {
            return Err(Error::MissingColumn(t.clone()));
        }
    }
    let target_idx: Vec<usize> = opts
        .targets
        .iter()
        .filter_map(|t| header.iter().position(|h| h == t))
        .collect();
    let keep: Vec<usize> = (0..rows_read)
        .filter(|&i| target_idx.iter().all(|&j| cells[j][i].is_some()))
        .collect();
    let dropped = rows_read - keep.len();

    let mut table = ColumnTable::new();
    let mut imputed = 0;
    for (name, col) in header.iter().zip(cells) {
        let col: Vec<Option<String>> = keep.iter().map(|&i| col[i].clone()).collect();
        let column = match schema.kind(name) {
            Some(ColumnKind::Categorical) => {
                let mut levels = LevelMap::new();
                let codes = col
                    .iter()
                    .map(|c| c.as_deref().map(|s| levels.insert(s)))
                    .collect();
                Column::Categorical { codes, levels }
            }
            kind => match parse_numeric(&col) {
                Some(mut v) => {
                    let n_missing = v.iter().filter(|x| x.is_nan()).count();
                    let is_target = opts.targets.contains(name);
                    if n_missing > 0 && !is_target {
                        if !opts.impute_mean {
                            return Err(Error::Column {
                                column: name.clone(),
                                msg: format!("{n_missing} missing values (use mean imputation to fill)"),
                            });
                        }
                        let present: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
                        let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
                        v.iter_mut().filter(|x| x.is_nan()).for_each(|x| *x = mean);
                        imputed += n_missing;
                    }
                    Column::Numeric(v)
                }
                None if kind == Some(ColumnKind::Continuous) => {
                    return Err(Error::Column {
                        column: name.clone(),
                        msg: "declared continuous but holds non-numeric values".into(),
                    })
                }
                None => Column::Text(col),
            },
        };
        table.push(name, column)?;
    }
    Ok((
        table,
        LoadReport {
            rows_read,
            dropped_missing_target: dropped,
            imputed_cells: imputed,
        },
    ))
}

fn parse_numeric(col: &[Option<String>]) -> Option<Vec<f64>> {
    col.iter()
        .map(|c| match c {
            None => Some(f64::NAN),
            Some(s) => s.parse::<f64>().ok(),
        })
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Csv {
        line,
        msg: e.to_string(),
    }
}

/// Writes a table as CSV.
pub fn write_csv<W: std::io::Write>(table: &ColumnTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(table.names()).map_err(csv_error)?;
    for i in 0..table.n_rows() {
        let row: Vec<String> = table
            .columns()
            .map(|(_, c)| match c {
                Column::Numeric(v) if v[i].is_nan() => String::new(),
                Column::Numeric(v) => format!("{}", v[i]),
                other => other.label(i).unwrap_or_default(),
            })
            .collect();
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
