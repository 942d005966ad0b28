//! Mixed-effects encoder: fixed-effect projection plus variational
//! random-effect tables, combined into one representation per row.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::covariance::{CovarianceSpec, LevelCorrelation};
use crate::error::{Error, Result};
use crate::formula::{DesignMatrices, FormulaAst};
use crate::linalg::Mat;
use crate::params::{Bound, ParamStore};

/// What an unseen group level maps to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownStrategy {
    #[default]
    Zero,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// Overrides of the categorical embedding width, by column.
    pub cat_embed_dims: BTreeMap<String, usize>,
    pub enforce_centering: bool,
    pub unknown_strategy: UnknownStrategy,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 16,
            cat_embed_dims: BTreeMap::new(),
            enforce_centering: true,
            unknown_strategy: UnknownStrategy::Zero,
        }
    }
}

/// Default embedding width for a categorical column.
pub fn cat_embed_dim(cardinality: usize) -> usize {
    cardinality.div_ceil(2).clamp(1, 16)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatLayout {
    pub name: String,
    pub cardinality: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermLayout {
    pub group: String,
    /// `(Intercept)` first when present, then slope columns.
    pub slopes: Vec<String>,
    pub n_levels: usize,
    pub cov: Option<LevelCorrelation>,
}

impl TermLayout {
    pub fn centered(&self, cfg: &EncoderConfig) -> bool {
        cfg.enforce_centering && self.cov.as_ref().is_none_or(|c| c.spec.is_exchangeable())
    }
}

/// Shapes of everything the encoder owns, resolved against a design.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayout {
    pub cfg: EncoderConfig,
    pub p_cont: usize,
    pub intercept: bool,
    pub cats: Vec<CatLayout>,
    pub terms: Vec<TermLayout>,
}

impl EncoderLayout {
    /// `covs[t]` is the (already resolved) level correlation of term `t`.
    pub fn new(cfg: &EncoderConfig, ast: &FormulaAst, design: &DesignMatrices, covs: Vec<Option<LevelCorrelation>>) -> Result<Self> {
        if cfg.embed_dim == 0 {
            return Err(Error::Model("embed_dim must be at least 1".into()));
        }
        if covs.len() != ast.random.len() {
            return Err(Error::Model("one covariance slot per random term expected".into()));
        }
        let cats = design
            .x_cat
            .iter()
            .map(|c| CatLayout {
                name: c.name.clone(),
                cardinality: c.cardinality,
                dim: cfg.cat_embed_dims.get(&c.name).copied().unwrap_or_else(|| cat_embed_dim(c.cardinality)),
            })
            .collect::<Vec<_>>();
        if let Some(c) = cats.iter().find(|c| c.dim == 0) {
            return Err(Error::Model(format!("embedding width of {:?} must be positive", c.name)));
        }
        let terms = ast
            .random
            .iter()
            .zip(covs)
            .enumerate()
            .map(|(t, (term, cov))| TermLayout {
                group: term.group.clone(),
                slopes: term.slope_labels(),
                n_levels: design.n_levels[t],
                cov,
            })
            .collect();
        Ok(EncoderLayout {
            cfg: cfg.clone(),
            p_cont: design.p_cont(),
            intercept: design.intercept,
            cats,
            terms,
        })
    }

    pub fn d(&self) -> usize {
        self.cfg.embed_dim
    }

    /// Width of the encoder output.
    pub fn out_dim(&self) -> usize {
        self.d() + self.cats.iter().map(|c| c.dim).sum::<usize>()
    }

    /// Creates every encoder parameter in `store`.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d = self.d();
        if self.p_cont > 0 {
            let bound = 1.0 / (self.p_cont as f64).sqrt();
            let w = (0..self.p_cont * d).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert("enc.w_cont", Tensor::new(vec![self.p_cont, d], w)?)?;
        }
        if self.intercept {
            store.insert("enc.bias", Tensor::zeros(&[d]))?;
        }
        for c in &self.cats {
            // the extra last row is the unknown code and stays at zero
            let mut v: Vec<f64> = (0..c.cardinality * c.dim).map(|_| StandardNormal.sample(rng)).collect();
            v.extend(std::iter::repeat_n(0.0, c.dim));
            store.insert(&format!("enc.emb.{}", c.name), Tensor::new(vec![c.cardinality + 1, c.dim], v)?)?;
        }
        let mu_init = Normal::new(0.0, 0.01).expect("finite");
        let log_var0 = (0.1f64 * 0.1).ln();
        for (t, term) in self.terms.iter().enumerate() {
            for s in 0..term.slopes.len() {
                let n = term.n_levels * d;
                let mu = (0..n).map(|_| mu_init.sample(rng)).collect();
                store.insert(&mu_name(t, s), Tensor::new(vec![term.n_levels, d], mu)?)?;
                store.insert(&log_var_name(t, s), Tensor::full(&[term.n_levels, d], log_var0))?;
                if self.cfg.unknown_strategy == UnknownStrategy::Learned {
                    store.insert(&unknown_name(t, s), Tensor::zeros(&[d]))?;
                }
            }
            if let Some(raw) = term.cov.as_ref().and_then(LevelCorrelation::raw_init) {
                store.insert(&cov_raw_name(t), Tensor::scalar(raw))?;
            }
        }
        Ok(())
    }
}

pub fn mu_name(t: usize, s: usize) -> String {
    format!("re.{t}.{s}.mu")
}
pub fn log_var_name(t: usize, s: usize) -> String {
    format!("re.{t}.{s}.log_var")
}
pub fn unknown_name(t: usize, s: usize) -> String {
    format!("re.{t}.{s}.unknown")
}
pub fn cov_raw_name(t: usize) -> String {
    format!("re.{t}.cov_raw")
}

/// Randomness for one forward pass.
pub struct Stochastic<'a> {
    pub rng: &'a mut dyn RngCore,
    /// Draw random effects from the variational posterior instead of its mean.
    pub sample_effects: bool,
    pub dropout: bool,
}

/// Group-index codes above the unknown sentinel select rows of
/// `extra_rows[(term, slope)]`, e.g. Henderson predictions for individuals
/// absent from training.
pub type ExtraRows = BTreeMap<(usize, usize), Mat<f64>>;

pub struct EncoderOutput {
    pub h: Var,
    pub kl: Var,
}

/// Bound name of an `n x p_cont` node that replaces the design's continuous
/// matrix, for gradients with respect to the inputs.
pub const INPUT_X_CONT: &str = "input.x_cont";
/// Bound name of a `d` node added to the fixed part, for gradients with
/// respect to the random-effect contribution.
pub const INPUT_H_SHIFT: &str = "input.h_shift";

/// Fixed-effect part: `[X_cont W + b, Embed_1(x_1), ...]`.
pub fn embed_fixed(tape: &mut Tape<f64>, bound: &Bound, layout: &EncoderLayout, design: &DesignMatrices) -> Result<(Var, Vec<Var>)> {
    let n = design.n;
    let d = layout.d();
    let mut h = match bound.get("enc.w_cont") {
        Some(w) => {
            let x = match bound.get(INPUT_X_CONT) {
                Some(x) => x,
                None => tape.constant(Tensor::from_mat(&design.x_cont)),
            };
            tape.matmul(x, w)?
        }
        None => tape.constant(Tensor::zeros(&[n, d])),
    };
    if let Some(b) = bound.get("enc.bias") {
        h = tape.add(h, b)?;
    }
    if let Some(s) = bound.get(INPUT_H_SHIFT) {
        h = tape.add(h, s)?;
    }
    let mut cats = Vec::with_capacity(layout.cats.len());
    for (c, cd) in layout.cats.iter().zip(&design.x_cat) {
        if let Some(&bad) = cd.codes.iter().find(|&&k| k > c.cardinality) {
            return Err(Error::Model(format!("categorical code {bad} out of range for {:?}", c.name)));
        }
        let emb = bound.var(&format!("enc.emb.{}", c.name))?;
        cats.push(tape.gather_rows(emb, &cd.codes)?);
    }
    Ok((h, cats))
}

/// Level-by-`d` random-effect table of one `(term, slope)` pair, plus its
/// KL contribution.
pub fn sample_random_effects(
    tape: &mut Tape<f64>,
    bound: &Bound,
    layout: &EncoderLayout,
    t: usize,
    s: usize,
    stoch: Option<&mut Stochastic<'_>>,
) -> Result<(Var, Var)> {
    let term = &layout.terms[t];
    let (n, d) = (term.n_levels, layout.d());
    let mu = bound.var(&mu_name(t, s))?;
    let log_var = bound.var(&log_var_name(t, s))?;
    let l = match &term.cov {
        Some(c) if !matches!(c.spec, CovarianceSpec::Iid) => Some(c.tape_factor(tape, bound.get(&cov_raw_name(t)))?),
        _ => None,
    };
    let mut m = match l {
        Some(l) => tape.matmul(l, mu)?,
        None => mu,
    };
    if term.centered(&layout.cfg) {
        let cm = tape.mean_axis(m, 0)?;
        m = tape.sub(m, cm)?;
    }
    let u = match stoch {
        Some(st) if st.sample_effects => {
            let eps: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut *st.rng)).collect();
            let half = tape.scale(log_var, 0.5);
            let sd = tape.exp(half);
            let noise = tape.mul_const(sd, Tensor::new(vec![n, d], eps)?)?;
            let noise = match l {
                Some(l) => tape.matmul(l, noise)?,
                None => noise,
            };
            tape.add(m, noise)?
        }
        _ => m,
    };
    // KL(N(mu, sigma^2) || N(0, 1)) summed over entries
    let mu2 = tape.square(mu);
    let var = tape.exp(log_var);
    let a = tape.add(mu2, var)?;
    let a = tape.sub(a, log_var)?;
    let a = tape.add_const(a, -1.0);
    let kl = tape.sum(a);
    let kl = tape.scale(kl, 0.5);
    Ok((u, kl))
}

/// Value used for rows of an unseen level.
pub fn resolve_unknown_group(tape: &mut Tape<f64>, bound: &Bound, layout: &EncoderLayout, t: usize, s: usize) -> Result<Var> {
    match layout.cfg.unknown_strategy {
        UnknownStrategy::Zero => Ok(tape.constant(Tensor::zeros(&[layout.d()]))),
        UnknownStrategy::Learned => bound
            .get(&unknown_name(t, s))
            .ok_or_else(|| Error::Model("learned unknown strategy without a trained unknown row".into())),
    }
}

/// Appends rows under a `levels x d` table (row concatenation).
fn stack_rows(tape: &mut Tape<f64>, table: Var, rows: &[Var]) -> Result<Var> {
    let mut parts = vec![tape.transpose(table)?];
    for &r in rows {
        let k = if tape.shape(r).len() == 1 { 1 } else { tape.shape(r)[0] };
        let d = *tape.shape(r).last().expect("rank >= 1");
        let r2 = tape.reshape(r, &[k, d])?;
        parts.push(tape.transpose(r2)?);
    }
    let cat = tape.concat(&parts)?;
    tape.transpose(cat)
}

/// `H_fixed + sum z_s * u_s[group]` on the first `d` columns; categorical
/// embeddings are appended after.
pub fn combine(tape: &mut Tape<f64>, h_cont: Var, h_cat: &[Var], contributions: &[(Var, &[f64])]) -> Result<Var> {
    let mut h = h_cont;
    let shape = tape.shape(h).to_vec();
    for &(u_rows, z) in contributions {
        if tape.shape(u_rows) != shape.as_slice() || z.len() != shape[0] {
            return Err(Error::shape("combine", format!("{:?} vs {:?}", tape.shape(u_rows), shape)));
        }
        let zt: Vec<f64> = z.iter().flat_map(|&v| std::iter::repeat_n(v, shape[1])).collect();
        let c = tape.mul_const(u_rows, Tensor::new(shape.clone(), zt)?)?;
        h = tape.add(h, c)?;
    }
    if h_cat.is_empty() {
        return Ok(h);
    }
    let mut parts = vec![h];
    parts.extend_from_slice(h_cat);
    tape.concat(&parts)
}

/// Full encoder pass.
pub fn encode(
    tape: &mut Tape<f64>,
    bound: &Bound,
    layout: &EncoderLayout,
    design: &DesignMatrices,
    extra: &ExtraRows,
    mut stoch: Option<&mut Stochastic<'_>>,
) -> Result<EncoderOutput> {
    let (h_cont, h_cat) = embed_fixed(tape, bound, layout, design)?;
    let mut contributions = Vec::new();
    let mut kls = Vec::new();
    for (t, term) in layout.terms.iter().enumerate() {
        let idx = &design.group_index[t];
        let z = &design.z_slopes[t];
        for s in 0..term.slopes.len() {
            let (u, kl) = sample_random_effects(tape, bound, layout, t, s, stoch.as_deref_mut())?;
            kls.push(kl);
            let unk = resolve_unknown_group(tape, bound, layout, t, s)?;
            let mut rows = vec![unk];
            if let Some(x) = extra.get(&(t, s)) {
                rows.push(tape.constant(Tensor::from_mat(x)));
            }
            let n_rows = term.n_levels + 1 + extra.get(&(t, s)).map_or(0, Mat::rows);
            if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
                return Err(Error::Model(format!("level index {bad} out of range for {:?}", term.group)));
            }
            let full = stack_rows(tape, u, &rows)?;
            let g = tape.gather_rows(full, idx)?;
            contributions.push((g, z.col(s)));
        }
    }
    let contribs: Vec<(Var, &[f64])> = contributions.iter().map(|(v, z)| (*v, z.as_slice())).collect();
    let h = combine(tape, h_cont, &h_cat, &contribs)?;
    let kl = if kls.is_empty() {
        tape.scalar(0.0)
    } else {
        tape.add_all(&kls)?
    };
    Ok(EncoderOutput { h, kl })
}

/// Subtracts the column means of `mu` in place.
pub fn enforce_centering(mu: &mut Tensor<f64>) {
    let shape = mu.shape().to_vec();
    let (n, d) = (shape[0], shape.get(1).copied().unwrap_or(1));
    if n == 0 {
        return;
    }
    let data = mu.data_mut();
    for j in 0..d {
        let m = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            data[i * d + j] -= m;
        }
    }
}

/// Re-centers the mean tables of every centered term after an optimizer
/// step. Returns the groups skipped for having a non-exchangeable
/// covariance.
pub fn center_tables(store: &mut ParamStore, layout: &EncoderLayout) -> Vec<String> {
    let mut skipped = Vec::new();
    if !layout.cfg.enforce_centering {
        return skipped;
    }
    for (t, term) in layout.terms.iter().enumerate() {
        if !term.centered(&layout.cfg) {
            skipped.push(term.group.clone());
            continue;
        }
        // correlated tables are centered after the transform inside the
        // forward pass only
        if term.cov.as_ref().is_some_and(|c| !matches!(c.spec, CovarianceSpec::Iid)) {
            continue;
        }
        for s in 0..term.slopes.len() {
            if let Some(mu) = store.get_mut(&mu_name(t, s)) {
                enforce_centering(mu);
            }
        }
    }
    skipped
}

/// Snapshot of one variational table.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalTable {
    pub group_factor: String,
    pub slope_term: String,
    pub mu: Mat<f64>,
    pub log_var: Mat<f64>,
    pub cov: Option<CovarianceSpec>,
    pub unknown_row: Option<Vec<f64>>,
}

impl VariationalTable {
    /// Posterior-mean effects as used at prediction time (`L mu`, centered
    /// when the term is).
    pub fn effects(&self, layout: &EncoderLayout, store: &ParamStore, t: usize) -> Result<Mat<f64>> {
        let term = &layout.terms[t];
        let mut m = match &term.cov {
            Some(c) if !matches!(c.spec, CovarianceSpec::Iid) => {
                let raw = store.get(&cov_raw_name(t)).map(Tensor::item);
                c.factor(raw)?.matmul(&self.mu)?
            }
            _ => self.mu.clone(),
        };
        if term.centered(&layout.cfg) {
            let mut tm = Tensor::from_mat(&m);
            enforce_centering(&mut tm);
            m = tm.to_mat()?;
        }
        Ok(m)
    }
}

pub fn tables(store: &ParamStore, layout: &EncoderLayout) -> Result<Vec<(usize, usize, VariationalTable)>> {
    let mut out = Vec::new();
    for (t, term) in layout.terms.iter().enumerate() {
        for (s, label) in term.slopes.iter().enumerate() {
            out.push((
                t,
                s,
                VariationalTable {
                    group_factor: term.group.clone(),
                    slope_term: label.clone(),
                    mu: store.require(&mu_name(t, s))?.to_mat()?,
                    log_var: store.require(&log_var_name(t, s))?.to_mat()?,
                    cov: term.cov.as_ref().map(|c| c.spec.clone()),
                    unknown_row: store.get(&unknown_name(t, s)).map(|u| u.data().to_vec()),
                },
            ));
        }
    }
    Ok(out)
}
