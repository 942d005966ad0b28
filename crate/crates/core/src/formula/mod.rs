//! Model formulas: `y ~ x1 + x2 + (1 + t | g)`.
//!
//! See `docs/formula.md` for the grammar.

mod design;
mod parse;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use design::{build_design, build_design_with, CatDesign, DesignMatrices, Vocabulary};
pub use parse::parse_formula;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FixedTerm {
    /// A data column. Whether it is continuous or categorical is decided by
    /// the schema when the design is built.
    Column(String),
    Intercept,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomTerm {
    pub slopes: Vec<String>,
    pub include_intercept: bool,
    pub group: String,
}

impl RandomTerm {
    /// Number of z columns: intercept first, then slopes.
    pub fn width(&self) -> usize {
        self.slopes.len() + usize::from(self.include_intercept)
    }

    /// Labels of the z columns, matching [`RandomTerm::width`].
    pub fn slope_labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width());
        if self.include_intercept {
            out.push("(Intercept)".to_string());
        }
        out.extend(self.slopes.iter().cloned());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaAst {
    pub responses: Vec<String>,
    /// Column terms in written order; the intercept, when present, is last.
    pub fixed: Vec<FixedTerm>,
    pub random: Vec<RandomTerm>,
}

impl FormulaAst {
    pub fn has_intercept(&self) -> bool {
        self.fixed.contains(&FixedTerm::Intercept)
    }

    pub fn fixed_columns(&self) -> impl Iterator<Item = &str> {
        self.fixed.iter().filter_map(|t| match t {
            FixedTerm::Column(c) => Some(c.as_str()),
            FixedTerm::Intercept => None,
        })
    }

    /// Every column the formula reads, responses included.
    pub fn referenced_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut add = |s: &str| {
            if !out.iter().any(|o| o == s) {
                out.push(s.to_string());
            }
        };
        self.responses.iter().for_each(|r| add(r));
        self.fixed_columns().for_each(&mut add);
        for r in &self.random {
            r.slopes.iter().for_each(|s| add(s));
            add(&r.group);
        }
        out
    }
}

fn write_name(f: &mut fmt::Formatter<'_>, name: &str) -> fmt::Result {
    if parse::is_plain_identifier(name) {
        f.write_str(name)
    } else {
        write!(f, "`{name}`")
    }
}

impl fmt::Display for RandomTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self;
        f.write_str("(")?;
        let mut inner = Vec::new();
        inner.push(if r.include_intercept { "1" } else { "0" }.to_string());
        for s in &r.slopes {
            inner.push(if parse::is_plain_identifier(s) {
                s.clone()
            } else {
                format!("`{s}`")
            });
        }
        if r.include_intercept && !r.slopes.is_empty() {
            inner.remove(0);
        }
        f.write_str(&inner.join(" + "))?;
        f.write_str(" | ")?;
        write_name(f, &r.group)?;
        f.write_str(")")?;
        Ok(())
    }
}

/// Canonical text: responses, `~`, `0 +` when the intercept is dropped,
/// column terms, `1` for an intercept-only model, then random terms.
impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.responses.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            write_name(f, r)?;
        }
        if !self.responses.is_empty() {
            f.write_str(" ")?;
        }
        f.write_str("~ ")?;
        let mut parts = 0;
        let mut sep = |f: &mut fmt::Formatter<'_>| -> fmt::Result {
            parts += 1;
            if parts > 1 {
                f.write_str(" + ")
            } else {
                Ok(())
            }
        };
        let cols: Vec<&str> = self.fixed_columns().collect();
        if !self.has_intercept() {
            sep(f)?;
            f.write_str("0")?;
        } else if cols.is_empty() {
            sep(f)?;
            f.write_str("1")?;
        }
        for c in cols {
            sep(f)?;
            write_name(f, c)?;
        }
        for r in &self.random {
            sep(f)?;
            write!(f, "{r}")?;
        }
        Ok(())
    }
}
