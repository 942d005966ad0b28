use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FormulaAst;
use crate::error::{Error, Result};
use crate::io::table::{Column, ColumnTable, LevelMap, Schema};
use crate::linalg::Mat;

const MAX_LEVELS: usize = 1 << 16;

/// Level maps fixed at training time, reused for prediction data.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Categorical fixed-effect columns.
    pub categorical: BTreeMap<String, LevelMap>,
    /// Grouping columns of random terms.
    pub groups: BTreeMap<String, LevelMap>,
}

impl Vocabulary {
    pub fn reindex(&mut self) {
        self.categorical.values_mut().for_each(LevelMap::reindex);
        self.groups.values_mut().for_each(LevelMap::reindex);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatDesign {
    pub name: String,
    /// Codes in `0..=cardinality`; `cardinality` itself marks an unseen or
    /// missing level.
    pub codes: Vec<usize>,
    pub cardinality: usize,
}

/// Numeric design for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrices {
    pub n: usize,
    pub intercept: bool,
    pub cont_names: Vec<String>,
    /// `n x p_cont`, columns in formula order.
    pub x_cont: Mat<f64>,
    pub x_cat: Vec<CatDesign>,
    /// Per random term, `n x width`: ones column first when the term has an
    /// intercept, then its slopes.
    pub z_slopes: Vec<Mat<f64>>,
    /// Per random term, level id of each row. An id equal to `n_levels[t]`
    /// marks a level not present in the vocabulary (prediction only).
    pub group_index: Vec<Vec<usize>>,
    pub n_levels: Vec<usize>,
    pub vocab: Vocabulary,
}

impl DesignMatrices {
    pub fn p_cont(&self) -> usize {
        self.x_cont.cols()
    }

    /// Rows per level for each random term (unseen rows excluded).
    pub fn group_sizes(&self) -> Vec<Vec<usize>> {
        self.group_index
            .iter()
            .zip(&self.n_levels)
            .map(|(idx, &l)| {
                let mut counts = vec![0; l];
                for &g in idx {
                    if g < l {
                        counts[g] += 1;
                    }
                }
                counts
            })
            .collect()
    }

    /// Row subset, keeping the vocabulary.
    pub fn take(&self, rows: &[usize]) -> DesignMatrices {
        let sub = |m: &Mat<f64>| Mat::from_fn(rows.len(), m.cols(), |i, j| m[(rows[i], j)]);
        DesignMatrices {
            n: rows.len(),
            intercept: self.intercept,
            cont_names: self.cont_names.clone(),
            x_cont: sub(&self.x_cont),
            x_cat: self
                .x_cat
                .iter()
                .map(|c| CatDesign {
                    name: c.name.clone(),
                    codes: rows.iter().map(|&r| c.codes[r]).collect(),
                    cardinality: c.cardinality,
                })
                .collect(),
            z_slopes: self.z_slopes.iter().map(sub).collect(),
            group_index: self
                .group_index
                .iter()
                .map(|g| rows.iter().map(|&r| g[r]).collect())
                .collect(),
            n_levels: self.n_levels.clone(),
            vocab: self.vocab.clone(),
        }
    }
}

/// Builds the design for training data, coding levels in first-occurrence
/// order.
pub fn build_design(ast: &FormulaAst, data: &ColumnTable, schema: &Schema) -> Result<DesignMatrices> {
    build(ast, data, schema, None)
}

/// Builds the design against a frozen vocabulary; unseen levels map to the
/// reserved unknown code.
pub fn build_design_with(
    ast: &FormulaAst,
    data: &ColumnTable,
    schema: &Schema,
    vocab: &Vocabulary,
) -> Result<DesignMatrices> {
    build(ast, data, schema, Some(vocab))
}

fn labels(col: &Column, n: usize) -> Vec<Option<String>> {
    (0..n).map(|i| col.label(i)).collect()
}

fn finite_numeric(data: &ColumnTable, name: &str, role: &str) -> Result<Vec<f64>> {
    let v = data.numeric(name).map_err(|e| match e {
        Error::Column { column, msg } => Error::Column {
            column,
            msg: format!("{role}: {msg}"),
        },
        e => e,
    })?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Column {
            column: name.to_string(),
            msg: format!("{role} has a missing or non-finite value at row {i}"),
        });
    }
    Ok(v)
}

fn build(
    ast: &FormulaAst,
    data: &ColumnTable,
    schema: &Schema,
    frozen: Option<&Vocabulary>,
) -> Result<DesignMatrices> {
    for c in ast.referenced_columns() {
        if !ast.responses.contains(&c) && !data.contains(&c) {
            return Err(Error::MissingColumn(c));
        }
    }
    let n = data.n_rows();
    let mut vocab = frozen.cloned().unwrap_or_default();

    let mut cont_names = Vec::new();
    let mut cont_cols = Vec::new();
    let mut x_cat = Vec::new();
    for name in ast.fixed_columns() {
        if schema.is_categorical(name) {
            let col = data.get(name)?;
            let mut fresh = LevelMap::new();
            let map = match frozen {
                Some(v) => v
                    .categorical
                    .get(name)
                    .ok_or_else(|| Error::Model(format!("no level map for categorical {name:?}")))?,
                None => {
                    for l in labels(col, n).iter().flatten() {
                        fresh.insert(l);
                    }
                    &fresh
                }
            };
            if map.len() > MAX_LEVELS {
                return Err(Error::Column {
                    column: name.to_string(),
                    msg: format!("{} levels exceeds the limit of {MAX_LEVELS}", map.len()),
                });
            }
            let card = map.len();
            let codes = labels(col, n)
                .iter()
                .map(|l| l.as_deref().and_then(|s| map.get(s)).unwrap_or(card))
                .collect();
            if frozen.is_none() {
                vocab.categorical.insert(name.to_string(), fresh.clone());
            }
            x_cat.push(CatDesign {
                name: name.to_string(),
                codes,
                cardinality: card,
            });
        } else {
            cont_cols.push(finite_numeric(data, name, "continuous feature")?);
            cont_names.push(name.to_string());
        }
    }
    let p = cont_cols.len();
    let x_cont = Mat::from_fn(n, p, |i, j| cont_cols[j][i]);

    let mut z_slopes = Vec::new();
    let mut group_index = Vec::new();
    let mut n_levels = Vec::new();
    for term in &ast.random {
        let gcol = data.get(&term.group)?;
        let glabels = labels(gcol, n);
        if let Some(i) = glabels.iter().position(Option::is_none) {
            return Err(Error::Column {
                column: term.group.clone(),
                msg: format!("grouping column has a missing value at row {i}"),
            });
        }
        let map = match frozen {
            Some(v) => v
                .groups
                .get(&term.group)
                .cloned()
                .ok_or_else(|| Error::Model(format!("no level map for group {:?}", term.group)))?,
            None => {
                let map = vocab.groups.entry(term.group.clone()).or_default();
                for l in glabels.iter().flatten() {
                    map.insert(l);
                }
                map.clone()
            }
        };
        let levels = map.len();
        let idx: Vec<usize> = glabels
            .iter()
            .map(|l| l.as_deref().and_then(|s| map.get(s)).unwrap_or(levels))
            .collect();

        let mut cols: Vec<Vec<f64>> = Vec::new();
        if term.include_intercept {
            cols.push(vec![1.0; n]);
        }
        for s in &term.slopes {
            if schema.is_categorical(s) {
                return Err(Error::Column {
                    column: s.clone(),
                    msg: "random slope must be numeric".into(),
                });
            }
            cols.push(finite_numeric(data, s, "random slope")?);
        }
        z_slopes.push(Mat::from_fn(n, cols.len(), |i, j| cols[j][i]));
        group_index.push(idx);
        n_levels.push(levels);
    }

    Ok(DesignMatrices {
        n,
        intercept: ast.has_intercept(),
        cont_names,
        x_cont,
        x_cat,
        z_slopes,
        group_index,
        n_levels,
        vocab,
    })
}
