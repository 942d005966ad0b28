//! Outcome families: link functions, negative log-likelihoods and the
//! structural map across outcome parameters.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::table::{Column, ColumnTable, LevelMap};
use crate::linalg::Mat;
use crate::scalar::{self, Scalar};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
    Multinomial { n_classes: usize },
    Poisson,
    Negbin {
        #[serde(default = "one")]
        phi_init: f64,
    },
    Mvgaussian { n_outcomes: usize },
    Multilabel { n_outcomes: usize },
}

fn one() -> f64 {
    1.0
}

impl Family {
    /// Width of the raw parameter vector the head produces per row.
    pub fn width(&self) -> usize {
        match self {
            Family::Gaussian | Family::Binomial | Family::Poisson | Family::Negbin { .. } => 1,
            Family::Multinomial { n_classes } => *n_classes,
            Family::Mvgaussian { n_outcomes } | Family::Multilabel { n_outcomes } => *n_outcomes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
            Family::Multinomial { .. } => "multinomial",
            Family::Poisson => "poisson",
            Family::Negbin { .. } => "negbin",
            Family::Mvgaussian { .. } => "mvgaussian",
            Family::Multilabel { .. } => "multilabel",
        }
    }

    /// Names of the raw parameters, as used in output-SEM edge lists.
    pub fn param_names(&self) -> Vec<String> {
        match self {
            Family::Gaussian => vec!["mu".into()],
            Family::Binomial => vec!["logit".into()],
            Family::Poisson | Family::Negbin { .. } => vec!["eta".into()],
            Family::Multinomial { n_classes } => (0..*n_classes).map(|k| format!("logit{k}")).collect(),
            Family::Mvgaussian { n_outcomes } => (0..*n_outcomes).map(|k| format!("mu{k}")).collect(),
            Family::Multilabel { n_outcomes } => (0..*n_outcomes).map(|k| format!("logit{k}")).collect(),
        }
    }

    /// Number of target columns.
    pub fn n_targets(&self) -> usize {
        match self {
            Family::Mvgaussian { n_outcomes } | Family::Multilabel { n_outcomes } => *n_outcomes,
            _ => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Family::Binomial | Family::Multinomial { .. } | Family::Multilabel { .. })
    }

    fn validate(&self) -> Result<()> {
        match self {
            Family::Multinomial { n_classes } if *n_classes < 2 => {
                Err(Error::Model("multinomial needs at least 2 classes".into()))
            }
            Family::Mvgaussian { n_outcomes } | Family::Multilabel { n_outcomes } if *n_outcomes == 0 => {
                Err(Error::Model("multivariate family needs at least one outcome".into()))
            }
            Family::Negbin { phi_init } if !(*phi_init > 0.0) => {
                Err(Error::Model("negbin phi_init must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub name: String,
    pub targets: Vec<String>,
    #[serde(flatten)]
    pub family: Family,
    #[serde(default = "one")]
    pub weight: f64,
}

impl OutcomeSpec {
    pub fn new(name: &str, targets: &[&str], family: Family) -> Self {
        OutcomeSpec {
            name: name.to_string(),
            targets: targets.iter().map(|s| s.to_string()).collect(),
            family,
            weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.targets.len() != self.family.n_targets() {
            return Err(Error::Model(format!(
                "outcome {:?}: {} family needs {} target column(s), got {}",
                self.name,
                self.family.name(),
                self.family.n_targets(),
                self.targets.len()
            )));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::Model(format!("outcome {:?}: negative weight", self.name)));
        }
        Ok(())
    }
}

pub fn validate_outcomes(specs: &[OutcomeSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Model("no outcomes specified".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if specs[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::Model(format!("duplicate outcome name {:?}", s.name)));
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ targets

/// Observed outcome values in the form each family consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One real (or 0/1, or count) per row.
    Real(Vec<f64>),
    Classes(Vec<usize>),
    /// `n x m`.
    Matrix(Mat<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Classes(v) => v.len(),
            Targets::Matrix(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn take(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Real(v) => Targets::Real(rows.iter().map(|&r| v[r]).collect()),
            Targets::Classes(v) => Targets::Classes(rows.iter().map(|&r| v[r]).collect()),
            Targets::Matrix(m) => Targets::Matrix(Mat::from_fn(rows.len(), m.cols(), |i, j| m[(rows[i], j)])),
        }
    }

    /// Values as an `n x k` matrix (class ids as reals).
    pub fn as_matrix(&self) -> Mat<f64> {
        match self {
            Targets::Real(v) => Mat::from_fn(v.len(), 1, |i, _| v[i]),
            Targets::Classes(v) => Mat::from_fn(v.len(), 1, |i, _| v[i] as f64),
            Targets::Matrix(m) => m.clone(),
        }
    }
}

fn binary_values(name: &str, v: &[f64]) -> Result<()> {
    if let Some(i) = v.iter().position(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::Column {
            column: name.to_string(),
            msg: format!("binary target must be 0 or 1, row {i} has {}", v[i]),
        });
    }
    Ok(())
}

/// Reads the target columns of `spec`. Class labels go through `levels`
/// (created from the data when `None`), returned for reuse at predict time.
pub fn encode_targets(
    spec: &OutcomeSpec,
    data: &ColumnTable,
    levels: Option<&LevelMap>,
) -> Result<(Targets, Option<LevelMap>)> {
    let col0 = &spec.targets[0];
    match &spec.family {
        Family::Gaussian => Ok((Targets::Real(finite(data, col0)?), None)),
        Family::Poisson | Family::Negbin { .. } => {
            let v = finite(data, col0)?;
            if let Some(i) = v.iter().position(|&x| x < 0.0 || x.fract() != 0.0) {
                return Err(Error::Column {
                    column: col0.clone(),
                    msg: format!("count target must be a non-negative integer, row {i} has {}", v[i]),
                });
            }
            Ok((Targets::Real(v), None))
        }
        Family::Binomial => match data.get(col0)? {
            Column::Numeric(v) if levels.is_none() => {
                binary_values(col0, v)?;
                Ok((Targets::Real(v.clone()), None))
            }
            col => {
                let (codes, map) = code_labels(col0, col, data.n_rows(), levels)?;
                if map.len() > 2 {
                    return Err(Error::Column {
                        column: col0.clone(),
                        msg: format!("binary target has {} distinct labels", map.len()),
                    });
                }
                Ok((Targets::Real(codes.iter().map(|&c| c as f64).collect()), Some(map)))
            }
        },
        Family::Multinomial { n_classes } => {
            let col = data.get(col0)?;
            let (codes, map) = code_labels(col0, col, data.n_rows(), levels)?;
            if map.len() > *n_classes {
                return Err(Error::Column {
                    column: col0.clone(),
                    msg: format!("{} labels but n_classes = {n_classes}", map.len()),
                });
            }
            Ok((Targets::Classes(codes), Some(map)))
        }
        Family::Mvgaussian { .. } | Family::Multilabel { .. } => {
            let cols: Vec<Vec<f64>> = spec.targets.iter().map(|c| finite(data, c)).collect::<Result<_>>()?;
            if matches!(spec.family, Family::Multilabel { .. }) {
                for (c, v) in spec.targets.iter().zip(&cols) {
                    binary_values(c, v)?;
                }
            }
            let n = data.n_rows();
            Ok((Targets::Matrix(Mat::from_fn(n, cols.len(), |i, j| cols[j][i])), None))
        }
    }
}

fn finite(data: &ColumnTable, name: &str) -> Result<Vec<f64>> {
    let v = data.numeric(name)?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Column {
            column: name.to_string(),
            msg: format!("target has a missing or non-finite value at row {i}"),
        });
    }
    Ok(v)
}

fn code_labels(name: &str, col: &Column, n: usize, levels: Option<&LevelMap>) -> Result<(Vec<usize>, LevelMap)> {
    let mut map = levels.cloned().unwrap_or_default();
    let mut codes = Vec::with_capacity(n);
    for i in 0..n {
        let label = col.label(i).ok_or_else(|| Error::Column {
            column: name.to_string(),
            msg: format!("missing class label at row {i}"),
        })?;
        let code = match (levels, map.get(&label)) {
            (_, Some(c)) => c,
            (None, None) => map.insert(&label),
            (Some(_), None) => {
                return Err(Error::Column {
                    column: name.to_string(),
                    msg: format!("class label {label:?} not seen in training"),
                })
            }
        };
        codes.push(code);
    }
    Ok((codes, map))
}

// ------------------------------------------------------- pointwise formulas

/// `0.5 (log 2 pi sigma^2 + (y - mu)^2 / sigma^2)`.
pub fn gaussian_nll<T: Scalar>(mu: T, log_sigma2: T, y: T) -> T {
    let r = y - mu;
    T::lit(0.5) * (T::lit(LN_2PI) + log_sigma2 + r * r * (-log_sigma2).exp())
}

/// `softplus(logit) - y logit`.
pub fn binomial_nll<T: Scalar>(logit: T, y: T) -> T {
    scalar::softplus(logit) - y * logit
}

/// `logsumexp(logits) - logits[y]`.
pub fn multinomial_nll<T: Scalar>(logits: &[T], y: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<T>().ln();
    lse - logits[y]
}

/// `exp(eta) - y eta + log Gamma(y + 1)`.
pub fn poisson_nll<T: Scalar>(eta: T, y: T) -> T {
    eta.exp() - y * eta + scalar::ln_gamma(y + T::one())
}

/// NB2 with mean `exp(eta)` and dispersion `exp(log_phi)`.
pub fn negbin_nll<T: Scalar>(eta: T, log_phi: T, y: T) -> T {
    let phi = log_phi.exp();
    let mu = eta.exp();
    -scalar::ln_gamma(y + phi) + scalar::ln_gamma(phi) + scalar::ln_gamma(y + T::one())
        - phi * (phi / (phi + mu)).ln()
        - y * (mu / (phi + mu)).ln()
}

/// `0.5 (m log 2 pi + 2 sum log L_ii + |L^{-1}(y - mu)|^2)`.
pub fn mvgaussian_nll<T: Scalar>(mu: &[T], chol: &Mat<T>, y: &[T]) -> Result<T> {
    let m = mu.len();
    let r = Mat::from_fn(m, 1, |i, _| y[i] - mu[i]);
    let z = chol.solve_lower(&r, false)?;
    let logdet: T = (0..m).map(|i| chol[(i, i)].ln()).sum();
    Ok(T::lit(0.5) * (T::from_usize_lossy(m) * T::lit(LN_2PI) + T::lit(2.0) * logdet + z.as_slice().iter().map(|&v| v * v).sum::<T>()))
}

pub fn multilabel_nll<T: Scalar>(logits: &[T], y: &[T]) -> T {
    logits.iter().zip(y).map(|(&l, &t)| binomial_nll(l, t)).sum()
}

// ----------------------------------------------------------- head and tape

/// Extra learned quantities of a head besides its affine map.
#[derive(Clone, Copy, Debug)]
pub enum HeadExtras {
    None,
    LogSigma2(Var),
    LogPhi(Var),
    /// Strictly-lower free entries (`m x m`) and the log-diagonal (`m`).
    Chol { off: Var, log_diag: Var },
}

/// `H W + b`.
pub fn head_forward(tape: &mut Tape<f64>, h: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(h, w)?;
    tape.add(z, b)
}

/// Lower Cholesky factor of the outcome covariance on the tape.
pub fn chol_factor(tape: &mut Tape<f64>, off: Var, log_diag: Var) -> Result<Var> {
    let m = tape.shape(log_diag)[0];
    let mask = Mat::from_fn(m, m, |i, j| if j < i { 1.0 } else { 0.0 });
    let lower = tape.mul_const(off, Tensor::from_mat(&mask))?;
    let d = tape.exp(log_diag);
    let eye = tape.constant(Tensor::from_mat(&Mat::identity(m)));
    let diag = tape.mul(eye, d)?;
    tape.add(lower, diag)
}

/// Mean negative log-likelihood over rows.
pub fn nll_tape(tape: &mut Tape<f64>, family: &Family, theta: Var, extras: HeadExtras, y: &Targets) -> Result<Var> {
    let n = tape.shape(theta)[0];
    if y.len() != n {
        return Err(Error::shape("nll", format!("{} targets for {n} rows", y.len())));
    }
    let inv_n = 1.0 / n.max(1) as f64;
    let col = |tape: &mut Tape<f64>, theta: Var| tape.reshape(theta, &[n]);
    let real = |y: &Targets| -> Result<Tensor<f64>> {
        match y {
            Targets::Real(v) => Ok(Tensor::vector(v.clone())),
            _ => Err(Error::Model("expected a real-valued target".into())),
        }
    };
    let rows = match (family, extras) {
        (Family::Gaussian, HeadExtras::LogSigma2(ls2)) => {
            let mu = col(tape, theta)?;
            let yv = tape.constant(real(y)?);
            let r = tape.sub(yv, mu)?;
            let r2 = tape.square(r);
            let neg = tape.neg(ls2);
            let prec = tape.exp(neg);
            let q = tape.mul(r2, prec)?;
            let q = tape.add(q, ls2)?;
            let q = tape.add_const(q, LN_2PI);
            tape.scale(q, 0.5)
        }
        (Family::Binomial, _) => {
            let l = col(tape, theta)?;
            let yv = real(y)?;
            let sp = tape.softplus(l);
            let yl = tape.mul_const(l, yv)?;
            tape.sub(sp, yl)?
        }
        (Family::Multinomial { .. }, _) => {
            let Targets::Classes(c) = y else {
                return Err(Error::Model("multinomial expects class targets".into()));
            };
            let lse = tape.logsumexp(theta);
            let picked = tape.pick(theta, c)?;
            tape.sub(lse, picked)?
        }
        (Family::Poisson, _) => {
            let eta = col(tape, theta)?;
            let yv = real(y)?;
            let lg: Vec<f64> = yv.data().iter().map(|&v| scalar::ln_gamma(v + 1.0)).collect();
            let e = tape.exp(eta);
            let ye = tape.mul_const(eta, yv)?;
            let d = tape.sub(e, ye)?;
            let lg = tape.constant(Tensor::vector(lg));
            tape.add(d, lg)?
        }
        (Family::Negbin { .. }, HeadExtras::LogPhi(lphi)) => {
            // -lgamma(y+phi) + lgamma(phi) + lgamma(y+1)
            //   + (phi + y) softplus(eta - log phi) + y log phi - y eta
            let eta = col(tape, theta)?;
            let yv = real(y)?;
            let lg1: Vec<f64> = yv.data().iter().map(|&v| scalar::ln_gamma(v + 1.0)).collect();
            let phi = tape.exp(lphi);
            let ycon = tape.constant(yv.clone());
            let y_phi = tape.add(ycon, phi)?;
            let a = tape.ln_gamma(y_phi);
            let b = tape.ln_gamma(phi);
            let diff = tape.sub(eta, lphi)?;
            let sp = tape.softplus(diff);
            let w = tape.mul(y_phi, sp)?;
            let ylphi = tape.mul(ycon, lphi)?;
            let yeta = tape.mul_const(eta, yv)?;
            let mut acc = tape.sub(b, a)?;
            acc = tape.add(acc, w)?;
            acc = tape.add(acc, ylphi)?;
            acc = tape.sub(acc, yeta)?;
            let lg1 = tape.constant(Tensor::vector(lg1));
            tape.add(acc, lg1)?
        }
        (Family::Mvgaussian { n_outcomes }, HeadExtras::Chol { off, log_diag }) => {
            let Targets::Matrix(ym) = y else {
                return Err(Error::Model("mvgaussian expects a target matrix".into()));
            };
            let m = *n_outcomes;
            let l = chol_factor(tape, off, log_diag)?;
            let yv = tape.constant(Tensor::from_mat(ym));
            let r = tape.sub(yv, theta)?;
            let rt = tape.transpose(r)?;
            let z = tape.triangular_solve(l, rt, true, false)?;
            let z2 = tape.square(z);
            let quad = tape.sum(z2);
            let quad = tape.scale(quad, 0.5 * inv_n);
            let ld = tape.sum(log_diag);
            let c = tape.add(quad, ld)?;
            let total = tape.add_const(c, 0.5 * m as f64 * LN_2PI);
            return Ok(total);
        }
        (Family::Multilabel { .. }, _) => {
            let Targets::Matrix(ym) = y else {
                return Err(Error::Model("multilabel expects a target matrix".into()));
            };
            let sp = tape.softplus(theta);
            let yl = tape.mul_const(theta, Tensor::from_mat(ym))?;
            let d = tape.sub(sp, yl)?;
            tape.sum_axis(d, 1)?
        }
        (f, _) => return Err(Error::Model(format!("missing head parameters for {}", f.name()))),
    };
    let s = tape.sum(rows);
    Ok(tape.scale(s, inv_n))
}

/// Distribution-scale prediction from raw parameters of one row.
pub fn mean_response(family: &Family, theta: &[f64]) -> Vec<f64> {
    match family {
        Family::Gaussian | Family::Mvgaussian { .. } => theta.to_vec(),
        Family::Binomial | Family::Multilabel { .. } => theta.iter().map(|&l| scalar::sigmoid(l)).collect(),
        Family::Poisson | Family::Negbin { .. } => theta.iter().map(|&e| e.exp()).collect(),
        Family::Multinomial { .. } => {
            let m = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = theta.iter().map(|&t| (t - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        }
    }
}

/// Learned values of a head's extras, off the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum ExtrasValue {
    None,
    Sigma2(f64),
    Phi(f64),
    Chol(Mat<f64>),
}

/// One draw from the observation model of a row; classification families
/// return their mean response.
pub fn sample_observation<R: Rng + ?Sized>(family: &Family, theta: &[f64], extras: &ExtrasValue, rng: &mut R) -> Vec<f64> {
    match (family, extras) {
        (Family::Gaussian, ExtrasValue::Sigma2(s2)) => {
            let e: f64 = StandardNormal.sample(rng);
            vec![theta[0] + s2.sqrt() * e]
        }
        (Family::Mvgaussian { .. }, ExtrasValue::Chol(l)) => {
            let eps: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(rng)).collect();
            let le = l.matvec(&eps).expect("shape");
            theta.iter().zip(le).map(|(m, e)| m + e).collect()
        }
        (Family::Poisson, _) => vec![draw_poisson(theta[0].exp(), rng)],
        (Family::Negbin { .. }, ExtrasValue::Phi(phi)) => {
            let mu = theta[0].exp();
            let lambda = Gamma::new(*phi, mu / phi).map(|g| g.sample(rng)).unwrap_or(mu);
            vec![draw_poisson(lambda, rng)]
        }
        _ => mean_response(family, theta),
    }
}

fn draw_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    if lambda <= 0.0 || !lambda.is_finite() {
        return 0.0;
    }
    Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(lambda)
}

// ----------------------------------------------------------- output SEM

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeWeight {
    Fixed(f64),
    Free(FreeTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreeTag {
    Free,
}

/// Directed edge between outcome parameters named `outcome.param`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub weight: Option<EdgeWeight>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum OutputSem {
    #[default]
    None,
    /// Dense free matrix trained with the acyclicity and sparsity penalties.
    Learned,
    Edges { edges: Vec<Edge> },
}

/// Output SEM resolved against the concatenated parameter axis.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputSemLayout {
    pub dim: usize,
    pub names: Vec<String>,
    /// For edges mode: (target, source, free-parameter slot or fixed value).
    pub edges: Vec<(usize, usize, EdgeSlot)>,
    pub n_free: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EdgeSlot {
    Free(usize),
    Fixed(f64),
}

/// Qualified names of all outcome parameters, in concatenation order.
pub fn parameter_axis(outcomes: &[OutcomeSpec]) -> Vec<String> {
    outcomes
        .iter()
        .flat_map(|o| o.family.param_names().into_iter().map(move |p| format!("{}.{}", o.name, p)))
        .collect()
}

/// Resolves and validates an edge list; cycles are rejected with their path.
pub fn resolve_edges(outcomes: &[OutcomeSpec], edges: &[Edge]) -> Result<OutputSemLayout> {
    let names = parameter_axis(outcomes);
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut out = Vec::with_capacity(edges.len());
    let mut n_free = 0;
    for e in edges {
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Model(format!("unknown outcome parameter {s:?}; known: {names:?}")))
        };
        let (src, dst) = (lookup(&e.from)?, lookup(&e.to)?);
        if src == dst {
            return Err(Error::Cycle(vec![e.from.clone(), e.to.clone()]));
        }
        if out.iter().any(|&(t, s, _)| t == dst && s == src) {
            return Err(Error::Model(format!("duplicate edge {} -> {}", e.from, e.to)));
        }
        let slot = match e.weight {
            Some(EdgeWeight::Fixed(w)) => EdgeSlot::Fixed(w),
            _ => {
                n_free += 1;
                EdgeSlot::Free(n_free - 1)
            }
        };
        out.push((dst, src, slot));
    }
    let adj: Vec<(usize, usize)> = out.iter().map(|&(t, s, _)| (s, t)).collect();
    if let Some(cycle) = find_cycle(names.len(), &adj) {
        return Err(Error::Cycle(cycle.into_iter().map(|i| names[i].clone()).collect()));
    }
    Ok(OutputSemLayout {
        dim: names.len(),
        names,
        edges: out,
        n_free,
    })
}

/// Depth-first search for a directed cycle among `(from, to)` edges. Returns
/// the node sequence with the start repeated at the end.
pub fn find_cycle(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; n];
    let mut stack: Vec<usize> = Vec::new();
    fn visit(v: usize, adj: &[Vec<usize>], state: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        state[v] = 1;
        stack.push(v);
        for &w in &adj[v] {
            if state[w] == 1 {
                let start = stack.iter().position(|&x| x == w).expect("on stack");
                let mut cyc = stack[start..].to_vec();
                cyc.push(w);
                return Some(cyc);
            }
            if state[w] == 0 {
                if let Some(c) = visit(w, adj, state, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        state[v] = 2;
        None
    }
    for v in 0..n {
        if state[v] == 0 {
            if let Some(c) = visit(v, &adj, &mut state, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

/// Builds `B` (`dim x dim`, row = target) on the tape from the free edge
/// weights.
pub fn edges_matrix(tape: &mut Tape<f64>, layout: &OutputSemLayout, free: Option<Var>) -> Result<Var> {
    let d = layout.dim;
    let fixed: Vec<f64> = layout
        .edges
        .iter()
        .filter_map(|&(_, _, s)| match s {
            EdgeSlot::Fixed(w) => Some(w),
            EdgeSlot::Free(_) => None,
        })
        .collect();
    // pool = [free..., fixed..., 0]
    let mut pool_parts = Vec::new();
    if let Some(f) = free {
        pool_parts.push(f);
    }
    let mut tail = fixed.clone();
    tail.push(0.0);
    pool_parts.push(tape.constant(Tensor::vector(tail)));
    let pool = tape.concat(&pool_parts)?;
    let zero_slot = layout.n_free + fixed.len();
    let mut idx = vec![zero_slot; d * d];
    let mut k_fixed = 0;
    for &(t, s, slot) in &layout.edges {
        idx[t * d + s] = match slot {
            EdgeSlot::Free(k) => k,
            EdgeSlot::Fixed(_) => {
                k_fixed += 1;
                layout.n_free + k_fixed - 1
            }
        };
    }
    tape.index_select(pool, idx, &[d, d])
}

/// `theta = (I - B)^{-1} theta_raw` applied to each row of `theta_raw`.
pub fn output_sem(tape: &mut Tape<f64>, theta_raw: Var, b: Var) -> Result<Var> {
    let d = tape.shape(b)[0];
    let eye = tape.constant(Tensor::from_mat(&Mat::identity(d)));
    let a = tape.sub(eye, b)?;
    let rt = tape.transpose(theta_raw)?;
    let x = tape.solve(a, rt)?;
    tape.transpose(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

    #[test]
    fn gaussian_values() {
        assert!((gaussian_nll(1.0, 0.0, 1.0) - HALF_LN_2PI).abs() < 1e-12);
        assert!((gaussian_nll(0.0, 0.0, 2.0) - (HALF_LN_2PI + 2.0)).abs() < 1e-12);
        assert!((HALF_LN_2PI - 0.918939).abs() < 1e-6);
    }

    #[test]
    fn binomial_values() {
        assert!((binomial_nll(0.0, 1.0) - 2f64.ln()).abs() < 1e-12);
        let v = binomial_nll(40.0, 1.0);
        assert!(v >= 0.0 && v < 1e-15);
        assert!(binomial_nll(-800.0f64, 0.0).is_finite());
        for &l in &[-3.0, -0.4, 0.7, 2.5] {
            let p = 1.0 / (1.0 + (-l as f64).exp());
            assert!((binomial_nll(l, 1.0) + p.ln()).abs() < 1e-10);
            assert!((binomial_nll(l, 0.0) + (1.0 - p).ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn multinomial_values() {
        assert!((multinomial_nll(&[0.0; 4], 2) - 4f64.ln()).abs() < 1e-12);
        assert!(multinomial_nll(&[0.0, 50.0, 0.0], 1) < 1e-20);
        let l = [0.3, -1.2, 2.0, 0.5];
        let perm = [2, 0, 3, 1];
        let lp: Vec<f64> = perm.iter().map(|&i| l[i]).collect();
        for (k, &src) in perm.iter().enumerate() {
            assert!((multinomial_nll(&lp, k) - multinomial_nll(&l, src)).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_values() {
        assert!((poisson_nll(0.0f64, 0.0) - 1.0).abs() < 1e-12);
        assert!((poisson_nll(0.0f64, 1.0) - 1.0).abs() < 1e-12);
        let mut fact = 1.0f64;
        for y in 1..=20u32 {
            fact *= y as f64;
            let expect = 1.0 - y as f64 * 0.0 + fact.ln();
            assert!((poisson_nll(0.0, y as f64) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn negbin_values() {
        for &(eta, y) in &[(0.3, 0.0), (1.1, 3.0), (-0.5, 1.0), (2.0, 12.0)] {
            let nb = negbin_nll(eta, 1e6f64.ln(), y);
            assert!((nb - poisson_nll(eta, y)).abs() < 1e-3, "eta={eta} y={y}");
        }
        let (eta, lphi) = (0.7f64, 0.2f64);
        let (mu, phi) = (eta.exp(), lphi.exp());
        assert!((negbin_nll(eta, lphi, 0.0) - phi * (1.0 + mu / phi).ln()).abs() < 1e-12);
    }

    #[test]
    fn negbin_sampler_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fam = Family::Negbin { phi_init: 1.0 };
        let n = 200_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_observation(&fam, &[2f64.ln()], &ExtrasValue::Phi(1.0), &mut rng)[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 6.0).abs() < 0.3, "{var}");
    }

    #[test]
    fn mvgaussian_values() {
        let mu = [0.5f64, -1.0];
        let y = [1.0, 0.3];
        let eye = Mat::identity(2);
        let want = gaussian_nll(mu[0], 0.0, y[0]) + gaussian_nll(mu[1], 0.0, y[1]);
        assert!((mvgaussian_nll(&mu, &eye, &y).unwrap() - want).abs() < 1e-12);
        let l = Mat::from_rows(&[vec![1.7]]).unwrap();
        let uni = gaussian_nll(0.2, (1.7f64 * 1.7).ln(), -0.4);
        assert!((mvgaussian_nll(&[0.2], &l, &[-0.4]).unwrap() - uni).abs() < 1e-12);
    }

    #[test]
    fn mvgaussian_dense_oracle() {
        let s = Mat::from_rows(&[vec![2.0f64, 0.6, 0.1], vec![0.6, 1.5, -0.3], vec![0.1, -0.3, 1.2]]).unwrap();
        let l = s.cholesky().unwrap();
        let mu = [0.1, 0.2, -0.3];
        let y = [1.0, -0.5, 0.4];
        let r = Mat::from_vec(3, 1, vec![y[0] - mu[0], y[1] - mu[1], y[2] - mu[2]]).unwrap();
        let q = r.transpose().matmul(&s.inverse().unwrap()).unwrap().matmul(&r).unwrap()[(0, 0)];
        let det = s.lu().unwrap().det();
        let want: f64 = 0.5 * (3.0 * LN_2PI + det.ln() + q);
        assert!((mvgaussian_nll(&mu, &l, &y).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn multilabel_values() {
        assert!((multilabel_nll(&[0.0; 3], &[1.0, 0.0, 1.0]) - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(multilabel_nll(&[0.4], &[1.0]), binomial_nll(0.4, 1.0));
        let l = [0.3f64, -1.0, 2.0, 0.1];
        let y = [1.0, 0.0, 0.0, 1.0];
        let split = multilabel_nll(&l[..1], &y[..1]) + multilabel_nll(&l[1..], &y[1..]);
        assert!((split - multilabel_nll(&l, &y)).abs() < 1e-12);
    }

    fn tape_nll(family: &Family, theta: Mat<f64>, extra: Option<Tensor<f64>>, extra2: Option<Tensor<f64>>, y: &Targets) -> f64 {
        let mut t = Tape::new();
        let th = t.param(Tensor::from_mat(&theta));
        let extras = match family {
            Family::Gaussian => HeadExtras::LogSigma2(t.param(extra.unwrap())),
            Family::Negbin { .. } => HeadExtras::LogPhi(t.param(extra.unwrap())),
            Family::Mvgaussian { .. } => HeadExtras::Chol {
                off: t.param(extra.unwrap()),
                log_diag: t.param(extra2.unwrap()),
            },
            _ => HeadExtras::None,
        };
        let v = nll_tape(&mut t, family, th, extras, y).unwrap();
        t.item(v)
    }

    #[test]
    fn tape_matches_pointwise() {
        let theta = Mat::from_vec(3, 1, vec![0.2, -1.3, 0.8]).unwrap();
        let yr = vec![1.0, 0.0, 3.0];
        let mean = |f: &dyn Fn(usize) -> f64| (0..3).map(f).sum::<f64>() / 3.0;
        let g = tape_nll(&Family::Gaussian, theta.clone(), Some(Tensor::scalar(0.3)), None, &Targets::Real(yr.clone()));
        assert!((g - mean(&|i| gaussian_nll(theta[(i, 0)], 0.3, yr[i]))).abs() < 1e-12);
        let p = tape_nll(&Family::Poisson, theta.clone(), None, None, &Targets::Real(yr.clone()));
        assert!((p - mean(&|i| poisson_nll(theta[(i, 0)], yr[i]))).abs() < 1e-12);
        let nb = tape_nll(&Family::Negbin { phi_init: 1.0 }, theta.clone(), Some(Tensor::scalar(0.4)), None, &Targets::Real(yr.clone()));
        assert!((nb - mean(&|i| negbin_nll(theta[(i, 0)], 0.4, yr[i]))).abs() < 1e-12);
        let yb = vec![1.0, 0.0, 1.0];
        let b = tape_nll(&Family::Binomial, theta.clone(), None, None, &Targets::Real(yb.clone()));
        assert!((b - mean(&|i| binomial_nll(theta[(i, 0)], yb[i]))).abs() < 1e-12);

        let logits = Mat::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.4);
        let cls = vec![0, 3, 2];
        let m = tape_nll(&Family::Multinomial { n_classes: 4 }, logits.clone(), None, None, &Targets::Classes(cls.clone()));
        assert!((m - mean(&|i| multinomial_nll(logits.row(i), cls[i]))).abs() < 1e-12);
        let ym = Mat::from_fn(3, 4, |i, j| ((i + j) % 2) as f64);
        let ml = tape_nll(&Family::Multilabel { n_outcomes: 4 }, logits.clone(), None, None, &Targets::Matrix(ym.clone()));
        assert!((ml - mean(&|i| multilabel_nll(logits.row(i), ym.row(i)))).abs() < 1e-12);

        let mu = Mat::from_fn(3, 2, |i, j| i as f64 * 0.3 - j as f64);
        let yv = Mat::from_fn(3, 2, |i, j| (i * j) as f64 * 0.5);
        let off = Tensor::matrix(2, 2, vec![9.0, 9.0, 0.4, 9.0]).unwrap();
        let ld = Tensor::vector(vec![0.1, -0.2]);
        let l = Mat::from_rows(&[vec![0.1f64.exp(), 0.0], vec![0.4, (-0.2f64).exp()]]).unwrap();
        let mv = tape_nll(&Family::Mvgaussian { n_outcomes: 2 }, mu.clone(), Some(off), Some(ld), &Targets::Matrix(yv.clone()));
        assert!((mv - mean(&|i| mvgaussian_nll(mu.row(i), &l, yv.row(i)).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn gradients_vanish_at_observation() {
        let mut t = Tape::new();
        let mu = t.param(Tensor::matrix(2, 1, vec![1.5, -0.2]).unwrap());
        let ls = t.param(Tensor::scalar(0.0));
        let v = nll_tape(&mut t, &Family::Gaussian, mu, HeadExtras::LogSigma2(ls), &Targets::Real(vec![1.5, -0.2])).unwrap();
        t.backward(v).unwrap();
        assert!(t.grad(mu).unwrap().data().iter().all(|g| g.abs() < 1e-15));

        let mut t = Tape::new();
        let eta = t.param(Tensor::matrix(1, 1, vec![3f64.ln()]).unwrap());
        let v = nll_tape(&mut t, &Family::Poisson, eta, HeadExtras::None, &Targets::Real(vec![3.0])).unwrap();
        t.backward(v).unwrap();
        assert!(t.grad(eta).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let theta = Tensor::matrix(3, 1, vec![0.2, -0.5, 0.9]).unwrap();
        let y = Targets::Real(vec![2.0, 0.0, 5.0]);
        let r = finite_diff_check(
            |t, v| nll_tape(t, &Family::Negbin { phi_init: 1.0 }, v[0], HeadExtras::LogPhi(v[1]), &y),
            &[theta.clone(), Tensor::scalar(0.3)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
        let mu = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.5, 1.0, -1.0]).unwrap();
        let ym = Targets::Matrix(Mat::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.3));
        let r = finite_diff_check(
            |t, v| nll_tape(t, &Family::Mvgaussian { n_outcomes: 2 }, v[0], HeadExtras::Chol { off: v[1], log_diag: v[2] }, &ym),
            &[mu, Tensor::matrix(2, 2, vec![0.0, 0.0, 0.3, 0.0]).unwrap(), Tensor::vector(vec![0.2, -0.1])],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
    }

    #[test]
    fn head_forward_bias_broadcast() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let w = t.param(Tensor::zeros(&[3, 2]));
        let b = t.param(Tensor::vector(vec![0.5, -1.0]));
        let o = head_forward(&mut t, h, w, b).unwrap();
        assert_eq!(t.value(o).data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    fn two_outcomes() -> Vec<OutcomeSpec> {
        vec![
            OutcomeSpec::new("a", &["ya"], Family::Gaussian),
            OutcomeSpec::new("b", &["yb"], Family::Binomial),
        ]
    }

    #[test]
    fn output_sem_single_edge() {
        let outcomes = two_outcomes();
        let edges = vec![Edge {
            from: "a.mu".into(),
            to: "b.logit".into(),
            weight: Some(EdgeWeight::Fixed(0.5)),
        }];
        let layout = resolve_edges(&outcomes, &edges).unwrap();
        let mut t = Tape::new();
        let b = edges_matrix(&mut t, &layout, None).unwrap();
        let raw = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.0]).unwrap());
        let th = output_sem(&mut t, raw, b).unwrap();
        assert_eq!(t.value(th).data(), &[1.0, 2.5, -1.0, -0.5]);
    }

    #[test]
    fn output_sem_rejects_cycles() {
        let outcomes = two_outcomes();
        let edges: Vec<Edge> = serde_json::from_str(
            r#"[{"from":"a.mu","to":"b.logit"},{"from":"b.logit","to":"a.mu","weight":"free"}]"#,
        )
        .unwrap();
        match resolve_edges(&outcomes, &edges).unwrap_err() {
            Error::Cycle(path) => assert_eq!(path.first(), path.last()),
            e => panic!("{e:?}"),
        }
        assert_eq!(find_cycle(3, &[(0, 1), (1, 2)]), None);
        assert_eq!(find_cycle(3, &[(0, 1), (1, 2), (2, 1)]), Some(vec![1, 2, 1]));
    }

    #[test]
    fn triangular_output_sem_is_exact() {
        let mut t = Tape::new();
        let bm = Mat::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.7, 0.0, 0.0], vec![-0.4, 1.3, 0.0]]).unwrap();
        let b = t.constant(Tensor::from_mat(&bm));
        let raw = Mat::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.25 - 1.0);
        let rv = t.constant(Tensor::from_mat(&raw));
        let th = output_sem(&mut t, rv, b).unwrap();
        let theta = t.value(th).to_mat().unwrap();
        let resid = Mat::identity(3).sub(&bm).unwrap().matmul(&theta.transpose()).unwrap();
        assert!(resid.max_abs_diff(&raw.transpose()) < 1e-10);
    }

    #[test]
    fn outcome_spec_json() {
        let s: OutcomeSpec = serde_json::from_str(r#"{"name":"n","targets":["k"],"family":"negbin"}"#).unwrap();
        assert_eq!(s.family, Family::Negbin { phi_init: 1.0 });
        assert_eq!(s.weight, 1.0);
        let s: OutcomeSpec =
            serde_json::from_str(r#"{"name":"c","targets":["k"],"family":"multinomial","n_classes":3}"#).unwrap();
        assert_eq!(s.family.width(), 3);
    }
}
