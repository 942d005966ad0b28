//! GSEM backbone: hidden layers with optional structural transforms over
//! their latent coordinates, plus the acyclicity, sparsity and contraction
//! penalties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::Stochastic;
use crate::error::{Error, Result};
use crate::families::find_cycle;
use crate::linalg::{spectral_norm_sq, Mat};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Gelu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureMode {
    #[default]
    None,
    Static,
    Dynamic,
    Hybrid,
}

/// How the static adjacency is kept acyclic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StaticVariant {
    /// Free entries only below the diagonal.
    #[default]
    Masked,
    /// Free off-diagonal entries, acyclicity from the penalty.
    Penalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GsemConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub layer_norm: bool,
    pub residual: bool,
    pub structure: StructureMode,
    pub static_variant: StaticVariant,
    pub n_heads: usize,
    /// Width of the per-feature token embedding used by attention.
    pub attn_dim: usize,
    pub edge_threshold: f64,
}

impl Default for GsemConfig {
    fn default() -> Self {
        GsemConfig {
            hidden_dims: vec![64, 32],
            activation: Activation::Relu,
            dropout: 0.1,
            layer_norm: true,
            residual: false,
            structure: StructureMode::None,
            static_variant: StaticVariant::Masked,
            n_heads: 2,
            attn_dim: 8,
            edge_threshold: 0.3,
        }
    }
}

impl GsemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.contains(&0) {
            return Err(Error::Model("hidden dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Model(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if matches!(self.structure, StructureMode::Dynamic | StructureMode::Hybrid)
            && (self.n_heads == 0 || self.attn_dim == 0 || !self.attn_dim.is_multiple_of(self.n_heads)) {
                return Err(Error::Model(format!(
                    "attention width {} is not divisible into {} heads",
                    self.attn_dim, self.n_heads
                )));
            }
        Ok(())
    }
}

const FP_DAMPING: f64 = 0.5;
const FP_MAX_ITERS: usize = 50;
const FP_TOL: f64 = 1e-8;
const POWER_ITERS: usize = 20;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GsemLayout {
    pub cfg: GsemConfig,
    pub in_dim: usize,
}

fn p(l: usize, what: &str) -> String {
    format!("gsem.{l}.{what}")
}

impl GsemLayout {
    pub fn new(cfg: &GsemConfig, in_dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(GsemLayout { cfg: cfg.clone(), in_dim })
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.hidden_dims.last().copied().unwrap_or(self.in_dim)
    }

    fn dims(&self, l: usize) -> (usize, usize) {
        let i = if l == 0 { self.in_dim } else { self.cfg.hidden_dims[l - 1] };
        (i, self.cfg.hidden_dims[l])
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.hidden_dims.len()
    }

    pub fn has_static(&self) -> bool {
        matches!(self.cfg.structure, StructureMode::Static | StructureMode::Hybrid)
    }

    pub fn has_dynamic(&self) -> bool {
        matches!(self.cfg.structure, StructureMode::Dynamic | StructureMode::Hybrid)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for l in 0..self.n_layers() {
            let (i, o) = self.dims(l);
            let bound = 1.0 / (i as f64).sqrt();
            let w = (0..i * o).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert(&p(l, "w"), Tensor::new(vec![i, o], w)?)?;
            store.insert(&p(l, "b"), Tensor::zeros(&[o]))?;
            if self.has_static() {
                store.insert(&p(l, "bs"), Tensor::zeros(&[o, o]))?;
            }
            if self.has_dynamic() {
                let e = self.cfg.attn_dim;
                let dk = e / self.cfg.n_heads;
                let tok = Normal::new(0.0, 1.0).expect("finite");
                let a = (0..o * e).map(|_| tok.sample(rng)).collect();
                let c = (0..o * e).map(|_| tok.sample(rng)).collect();
                store.insert(&p(l, "att_a"), Tensor::new(vec![o, e], a)?)?;
                store.insert(&p(l, "att_c"), Tensor::new(vec![o, e], c)?)?;
                let bq = 1.0 / (e as f64).sqrt();
                for h in 0..self.cfg.n_heads {
                    let wq = (0..e * dk).map(|_| rng.random_range(-bq..bq)).collect();
                    let wk = (0..e * dk).map(|_| rng.random_range(-bq..bq)).collect();
                    store.insert(&p(l, &format!("att_wq{h}")), Tensor::new(vec![e, dk], wq)?)?;
                    store.insert(&p(l, &format!("att_wk{h}")), Tensor::new(vec![e, dk], wk)?)?;
                }
            }
            if self.cfg.structure == StructureMode::Hybrid {
                store.insert(&p(l, "gamma"), Tensor::scalar(0.25))?;
            }
            if self.cfg.layer_norm {
                store.insert(&p(l, "ln_g"), Tensor::full(&[o], 1.0))?;
                store.insert(&p(l, "ln_b"), Tensor::zeros(&[o]))?;
            }
        }
        Ok(())
    }
}

/// Strict-lower (masked variant) or zero-diagonal (penalized variant) mask.
pub fn adjacency_mask(d: usize, variant: StaticVariant) -> Mat<f64> {
    Mat::from_fn(d, d, |i, j| match variant {
        StaticVariant::Masked => (j < i) as u8 as f64,
        StaticVariant::Penalized => (j != i) as u8 as f64,
    })
}

/// Effective adjacency `B` of layer `l` on the tape.
pub fn adjacency(tape: &mut Tape<f64>, bound: &Bound, layout: &GsemLayout, l: usize) -> Result<Var> {
    let raw = bound.var(&p(l, "bs"))?;
    let d = tape.shape(raw)[0];
    tape.mul_const(raw, Tensor::from_mat(&adjacency_mask(d, layout.cfg.static_variant)))
}

/// `eta = (I - B)^{-1} xi` for each row of `xi` (`n x d`). With
/// `triangular` the solve is a unit-lower forward substitution.
pub fn static_transform(tape: &mut Tape<f64>, xi: Var, b: Var, triangular: bool) -> Result<Var> {
    let d = tape.shape(b)[0];
    let eye = tape.constant(Tensor::from_mat(&Mat::identity(d)));
    let a = tape.sub(eye, b)?;
    let xt = tape.transpose(xi)?;
    let et = if triangular {
        tape.triangular_solve(a, xt, true, true)?
    } else {
        tape.solve(a, xt)?
    };
    tape.transpose(et)
}

/// `trace(exp(B ⊙ B)) - d`.
pub fn dag_penalty(tape: &mut Tape<f64>, b: Var) -> Result<Var> {
    let d = tape.shape(b)[0];
    let sq = tape.square(b);
    let t = tape.trace_expm(sq)?;
    Ok(tape.add_const(t, -(d as f64)))
}

/// Off-tape value of [`dag_penalty`].
pub fn dag_penalty_value(b: &Mat<f64>) -> Result<f64> {
    Ok(b.hadamard(b)?.expm()?.trace() - b.rows() as f64)
}

pub fn sparse_penalty(tape: &mut Tape<f64>, b: Var) -> Var {
    tape.l1_norm(b)
}

/// Per-sample attention over features. Returns the attended output
/// (`n x d`) and the head-averaged weights (`n x d x d`).
pub fn dynamic_attention(tape: &mut Tape<f64>, bound: &Bound, layout: &GsemLayout, l: usize, eta: Var) -> Result<(Var, Var)> {
    let (n, d) = (tape.shape(eta)[0], tape.shape(eta)[1]);
    let heads = layout.cfg.n_heads;
    let dk = layout.cfg.attn_dim / heads;
    let a = bound.var(&p(l, "att_a"))?;
    let c = bound.var(&p(l, "att_c"))?;
    // token t_j = eta_j a_j + c_j, so q_j . k_k expands into four d x d maps
    let col = tape.reshape(eta, &[n, d, 1])?;
    let row = tape.reshape(eta, &[n, 1, d])?;
    let outer = tape.matmul(col, row)?;
    let ones_r = tape.constant(Tensor::full(&[1, d], 1.0));
    let ones_c = tape.constant(Tensor::full(&[d, 1], 1.0));
    let eta_j = tape.matmul(col, ones_r)?;
    let eta_k = tape.matmul(ones_c, row)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = bound.var(&p(l, &format!("att_wq{h}")))?;
        let wk = bound.var(&p(l, &format!("att_wk{h}")))?;
        let qa = tape.matmul(a, wq)?;
        let qc = tape.matmul(c, wq)?;
        let ka = tape.matmul(a, wk)?;
        let kc = tape.matmul(c, wk)?;
        let bil = |tape: &mut Tape<f64>, x: Var, y: Var| -> Result<Var> {
            let yt = tape.transpose(y)?;
            tape.matmul(x, yt)
        };
        let m_aa = bil(tape, qa, ka)?;
        let m_ac = bil(tape, qa, kc)?;
        let m_ca = bil(tape, qc, ka)?;
        let m_cc = bil(tape, qc, kc)?;
        let s1 = tape.mul(outer, m_aa)?;
        let s2 = tape.mul(eta_j, m_ac)?;
        let s3 = tape.mul(eta_k, m_ca)?;
        let s = tape.add_all(&[s1, s2, s3])?;
        let s = tape.add(s, m_cc)?;
        let s = tape.scale(s, scale);
        weights.push(tape.softmax(s));
    }
    let w = if heads == 1 {
        weights[0]
    } else {
        let s = tape.add_all(&weights)?;
        tape.scale(s, 1.0 / heads as f64)
    };
    let out = tape.matmul(w, col)?;
    let out = tape.reshape(out, &[n, d])?;
    Ok((out, w))
}

/// Damped fixed-point solve of `eta = xi + (B_s + B_d(eta)) eta`, unrolled
/// on the tape. `b_d` maps the current iterate to an `n x d x d` adjacency.
/// Returns the solution and whether it met the tolerance.
pub fn hybrid_transform<F>(tape: &mut Tape<f64>, xi: Var, b_s: Option<Var>, mut b_d: F) -> Result<(Var, bool, f64)>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let (n, d) = (tape.shape(xi)[0], tape.shape(xi)[1]);
    let mut eta = xi;
    let mut residual = f64::INFINITY;
    for _ in 0..FP_MAX_ITERS {
        let bd = b_d(tape, eta)?;
        let col = tape.reshape(eta, &[n, d, 1])?;
        let dyn_part = tape.matmul(bd, col)?;
        let mut rhs = tape.reshape(dyn_part, &[n, d])?;
        if let Some(bs) = b_s {
            let bst = tape.transpose(bs)?;
            let st = tape.matmul(eta, bst)?;
            rhs = tape.add(rhs, st)?;
        }
        rhs = tape.add(rhs, xi)?;
        let a = tape.scale(eta, FP_DAMPING);
        let b = tape.scale(rhs, 1.0 - FP_DAMPING);
        let next = tape.add(a, b)?;
        residual = tape.value(next).max_abs_diff(tape.value(eta));
        eta = next;
        if residual < FP_TOL {
            return Ok((eta, true, residual));
        }
    }
    Ok((eta, false, residual))
}

/// Fixed unit start vector for power iteration.
fn power_start(d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    (0..d).map(|_| rng.random_range(0.5..1.5)).collect()
}

/// Squared spectral norm of `m` (`d x d`) by power iteration; the singular
/// vector is detached so the recorded value is `|M v|^2`.
pub fn contraction_penalty(tape: &mut Tape<f64>, m: Var) -> Result<Var> {
    let mm = tape.value(m).to_mat()?;
    let (_, v) = spectral_norm_sq(&mm, POWER_ITERS, &power_start(mm.cols()))?;
    let vc = tape.constant(Tensor::new(vec![v.len(), 1], v)?);
    let mv = tape.matmul(m, vc)?;
    let sq = tape.square(mv);
    Ok(tape.sum(sq))
}

/// Largest singular value squared, off the tape.
pub fn contraction_value(m: &Mat<f64>) -> Result<f64> {
    Ok(spectral_norm_sq(m, POWER_ITERS, &power_start(m.cols()))?.0)
}

/// Penalty terms collected during a forward pass (summed over layers).
#[derive(Clone, Debug, Default)]
pub struct Penalties {
    pub dag: Option<Var>,
    pub sparse: Option<Var>,
    pub contract: Option<Var>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GsemStats {
    pub fixed_point_failures: usize,
    pub last_residual: f64,
}

fn accumulate(tape: &mut Tape<f64>, slot: &mut Option<Var>, v: Var) -> Result<()> {
    *slot = Some(match *slot {
        Some(s) => tape.add(s, v)?,
        None => v,
    });
    Ok(())
}

/// One hidden layer: linear, structure, activation, layer norm, dropout,
/// residual.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    tape: &mut Tape<f64>,
    bound: &Bound,
    layout: &GsemLayout,
    l: usize,
    h_in: Var,
    stoch: Option<&mut Stochastic<'_>>,
    pens: &mut Penalties,
    stats: &mut GsemStats,
) -> Result<Var> {
    let cfg = &layout.cfg;
    let w = bound.var(&p(l, "w"))?;
    let b = bound.var(&p(l, "b"))?;
    let xi = tape.matmul(h_in, w)?;
    let xi = tape.add(xi, b)?;
    let mut eta = match cfg.structure {
        StructureMode::None => xi,
        StructureMode::Static => {
            let bs = adjacency(tape, bound, layout, l)?;
            let dp = dag_penalty(tape, bs)?;
            accumulate(tape, &mut pens.dag, dp)?;
            let sp = sparse_penalty(tape, bs);
            accumulate(tape, &mut pens.sparse, sp)?;
            static_transform(tape, xi, bs, cfg.static_variant == StaticVariant::Masked)?
        }
        StructureMode::Dynamic => dynamic_attention(tape, bound, layout, l, xi)?.0,
        StructureMode::Hybrid => {
            let bs = adjacency(tape, bound, layout, l)?;
            let dp = dag_penalty(tape, bs)?;
            accumulate(tape, &mut pens.dag, dp)?;
            let sp = sparse_penalty(tape, bs);
            accumulate(tape, &mut pens.sparse, sp)?;
            let gamma = bound.var(&p(l, "gamma"))?;
            let mut last_bd = None;
            let (eta, ok, res) = hybrid_transform(tape, xi, Some(bs), |tape, e| {
                let (_, wts) = dynamic_attention(tape, bound, layout, l, e)?;
                let g = tape.mul(wts, gamma)?;
                last_bd = Some(g);
                Ok(g)
            })?;
            if !ok {
                stats.fixed_point_failures += 1;
            }
            stats.last_residual = res;
            if let Some(bd) = last_bd {
                let mean_bd = tape.mean_axis(bd, 0)?;
                let m = tape.add(bs, mean_bd)?;
                let cp = contraction_penalty(tape, m)?;
                accumulate(tape, &mut pens.contract, cp)?;
            }
            eta
        }
    };
    eta = match cfg.activation {
        Activation::Relu => tape.relu(eta),
        Activation::Tanh => tape.tanh(eta),
        Activation::Gelu => tape.gelu(eta),
    };
    if cfg.layer_norm {
        let n = tape.layer_norm(eta, LN_EPS);
        let g = bound.var(&p(l, "ln_g"))?;
        let bb = bound.var(&p(l, "ln_b"))?;
        let n = tape.mul(n, g)?;
        eta = tape.add(n, bb)?;
    }
    if let Some(st) = stoch {
        eta = tape.dropout(eta, cfg.dropout, st.dropout, &mut *st.rng)?;
    }
    if cfg.residual && tape.shape(eta) == tape.shape(h_in) {
        eta = tape.add(eta, h_in)?;
    }
    Ok(eta)
}

pub fn gsem_forward(
    tape: &mut Tape<f64>,
    bound: &Bound,
    layout: &GsemLayout,
    x: Var,
    mut stoch: Option<&mut Stochastic<'_>>,
    pens: &mut Penalties,
    stats: &mut GsemStats,
) -> Result<Var> {
    let mut h = x;
    for l in 0..layout.n_layers() {
        h = layer_forward(tape, bound, layout, l, h, stoch.as_deref_mut(), pens, stats)?;
    }
    Ok(h)
}

/// Adjacency of the first structured layer, un-thresholded.
pub fn get_structure_matrix(store: &ParamStore, layout: &GsemLayout) -> Result<Mat<f64>> {
    if !layout.has_static() || layout.n_layers() == 0 {
        return Err(Error::Model("no structured layer".into()));
    }
    let raw = store.require(&p(0, "bs"))?.to_mat()?;
    raw.hadamard(&adjacency_mask(raw.rows(), layout.cfg.static_variant))
}

/// Zeroes entries with magnitude below `threshold`.
pub fn threshold(b: &Mat<f64>, threshold: f64) -> Mat<f64> {
    b.map(|v| if v.abs() >= threshold { v } else { 0.0 })
}

/// Directed edges `(source, target)` of a thresholded adjacency, where
/// `B[target][source]` carries the weight.
pub fn edges(b: &Mat<f64>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in 0..b.rows() {
        for s in 0..b.cols() {
            if b[(t, s)] != 0.0 {
                out.push((s, t));
            }
        }
    }
    out
}

pub fn is_acyclic(b: &Mat<f64>) -> bool {
    find_cycle(b.rows(), &edges(b)).is_none()
}

/// CSV with row = source, column = target.
pub fn structure_csv(b: &Mat<f64>, names: &[String]) -> Result<String> {
    if names.len() != b.rows() || !b.is_square() {
        return Err(Error::shape("structure_csv", "one name per node expected"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["source".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for s in 0..b.rows() {
        let mut rec = vec![names[s].clone()];
        rec.extend((0..b.rows()).map(|t| format!("{}", b[(t, s)])));
        w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Options for [`learn_structure`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureLearnConfig {
    pub lambda_dag: f64,
    pub lambda_sparse: f64,
    /// L-BFGS iterations per augmented-Lagrangian subproblem.
    pub max_inner: usize,
    pub max_outer: usize,
    pub h_tol: f64,
    pub rho_max: f64,
}

impl Default for StructureLearnConfig {
    fn default() -> Self {
        StructureLearnConfig {
            lambda_dag: 0.1,
            lambda_sparse: 0.01,
            max_inner: 500,
            max_outer: 30,
            h_tol: 1e-8,
            rho_max: 1e16,
        }
    }
}

// smoothing of |b| inside the L1 term so the subproblem is differentiable
const L1_SMOOTH: f64 = 1e-8;

/// Limited-memory BFGS with Armijo backtracking.
fn lbfgs<F>(mut f: F, x0: Vec<f64>, max_iter: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const MEM: usize = 10;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    for _ in 0..max_iter {
        if g.iter().all(|v| v.abs() < 1e-12) {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let gn = dot(&g, &g).sqrt();
            q.iter_mut().for_each(|v| *v /= gn.max(1.0));
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let (xn, fnew, gn) = loop {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fv, gv) = f(&xn)?;
            if fv.is_finite() && fv <= fx + 1e-4 * step * slope {
                break (xn, fv, gv);
            }
            step *= 0.5;
            if step < 1e-20 {
                return Ok(x);
            }
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 {
            if hist.len() == MEM {
                hist.remove(0);
            }
            hist.push((s, y, 1.0 / sy));
        }
        let done = (fx - fnew).abs() <= 1e-15 * fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if done {
            break;
        }
    }
    Ok(x)
}

/// Fits a linear SEM `x = B x + e` over the columns of `x` with the
/// acyclicity and L1 penalties, tightened by an augmented Lagrangian until
/// `h(B) < h_tol`. Columns are centered first. Returns the raw `B`
/// (row = target).
pub fn learn_structure(x: &Mat<f64>, cfg: &StructureLearnConfig) -> Result<Mat<f64>> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 || d == 0 {
        return Err(Error::Data("structure learning needs at least two rows".into()));
    }
    let means: Vec<f64> = (0..d).map(|j| x.col(j).iter().sum::<f64>() / n as f64).collect();
    let xc = Mat::from_fn(n, d, |i, j| x[(i, j)] - means[j]);
    // least squares through the covariance: 0.5 tr((I-B) S (I-B)^T)
    let s = xc.transpose().matmul(&xc)?.scale(1.0 / n as f64);
    let mask = adjacency_mask(d, StaticVariant::Penalized);
    let objective = |b: &[f64], alpha: f64, rho: f64| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let raw = tape.param(Tensor::new(vec![d, d], b.to_vec())?);
        let bv = tape.mul_const(raw, Tensor::from_mat(&mask))?;
        let eye = tape.constant(Tensor::from_mat(&Mat::identity(d)));
        let r = tape.sub(eye, bv)?;
        let sc = tape.constant(Tensor::from_mat(&s));
        let rs = tape.matmul(r, sc)?;
        let rt = tape.transpose(r)?;
        let q = tape.matmul(rs, rt)?;
        let diag = tape.mul_const(q, Tensor::from_mat(&Mat::identity(d)))?;
        let ls = tape.sum(diag);
        let ls = tape.scale(ls, 0.5);
        let h = dag_penalty(&mut tape, bv)?;
        let sq = tape.square(bv);
        let sm = tape.add_const(sq, L1_SMOOTH * L1_SMOOTH);
        let l1 = tape.sqrt(sm);
        let l1 = tape.sum(l1);
        let l1 = tape.scale(l1, cfg.lambda_sparse);
        let hl = tape.scale(h, cfg.lambda_dag + alpha);
        let h2 = tape.square(h);
        let h2 = tape.scale(h2, 0.5 * rho);
        let loss = tape.add_all(&[ls, l1, hl, h2])?;
        tape.backward(loss)?;
        let g = tape.grad(raw).map_or_else(|| vec![0.0; d * d], |g| g.data().to_vec());
        Ok((tape.item(loss), g))
    };
    let mut b = vec![0.0; d * d];
    let (mut alpha, mut rho) = (0.0, 1.0);
    let mut h = f64::INFINITY;
    for _ in 0..cfg.max_outer {
        let mut h_new;
        let mut b_new;
        loop {
            b_new = lbfgs(|v| objective(v, alpha, rho), b.clone(), cfg.max_inner)?;
            let bm = Mat::from_vec(d, d, b_new.clone())?.hadamard(&mask)?;
            h_new = dag_penalty_value(&bm)?;
            if h_new > 0.25 * h && rho < cfg.rho_max {
                rho *= 10.0;
            } else {
                break;
            }
        }
        b = b_new;
        h = h_new;
        alpha += rho * h;
        if h <= cfg.h_tol || rho >= cfg.rho_max {
            break;
        }
    }
    Mat::from_vec(d, d, b)?.hadamard(&mask)
}
