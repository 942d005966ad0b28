//! Grid backbone: grid mapping, SPDE Matérn precisions, sparse field sampling,
//! a grid-aware SEM layer and block aggregation.
//!
//! A block maps `H [n, p]` to `G = H W + b` with one column per grid cell,
//! then optionally smooths each row with `kappa^(2 alpha) Q^{-1}` and
//! optionally applies `(I - B(s))^{-1}`. The smoothing operator keeps
//! constant fields fixed, so it acts as a Matérn low-pass filter whose range
//! is learned through `kappa`.

pub mod sparse;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
pub use sparse::{rcm_ordering, EnvelopeCholesky, SparseMat};

pub const MAX_CELLS: usize = 4096;

fn default_alpha() -> u32 {
    2
}
fn default_kappa() -> f64 {
    0.3
}
fn default_lengthscale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldBlockConfig {
    pub grid_shape: Vec<usize>,
    #[serde(default)]
    pub use_spde: bool,
    #[serde(default = "default_alpha")]
    pub spde_alpha: u32,
    #[serde(default = "default_kappa")]
    pub spde_kappa_init: f64,
    #[serde(default)]
    pub use_sem: bool,
    /// RBF length-scale of the spatial SEM prior, in grid units.
    #[serde(default = "default_lengthscale")]
    pub sem_lengthscale: f64,
}

impl ManifoldBlockConfig {
    pub fn new(grid_shape: &[usize]) -> Self {
        ManifoldBlockConfig {
            grid_shape: grid_shape.to_vec(),
            use_spde: false,
            spde_alpha: default_alpha(),
            spde_kappa_init: default_kappa(),
            use_sem: false,
            sem_lengthscale: default_lengthscale(),
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(m));
        if self.grid_shape.is_empty() || self.grid_shape.len() > 2 {
            return bad(format!("grid_shape must be 1-D or 2-D, got {:?}", self.grid_shape));
        }
        if self.grid_shape.contains(&0) {
            return bad(format!("grid_shape {:?} has an empty axis", self.grid_shape));
        }
        if self.cells() > MAX_CELLS {
            return bad(format!("grid has {} cells, limit is {MAX_CELLS}", self.cells()));
        }
        if !(1..=3).contains(&self.spde_alpha) {
            return bad(format!("spde_alpha must be 1, 2 or 3, got {}", self.spde_alpha));
        }
        if !(self.spde_kappa_init > 0.0 && self.spde_kappa_init.is_finite()) {
            return bad(format!("spde_kappa_init must be positive, got {}", self.spde_kappa_init));
        }
        if !(self.sem_lengthscale > 0.0 && self.sem_lengthscale.is_finite()) {
            return bad(format!("sem_lengthscale must be positive, got {}", self.sem_lengthscale));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Concat,
    Sum,
    Attention,
}

/// Raster coordinates of cell `i`.
pub fn cell_coords(grid_shape: &[usize], i: usize) -> (usize, usize) {
    match grid_shape {
        [_] => (0, i),
        [_, c] => (i / c, i % c),
        _ => (0, i),
    }
}

fn grid_dist_sq(grid_shape: &[usize], i: usize, j: usize) -> f64 {
    let (ri, ci) = cell_coords(grid_shape, i);
    let (rj, cj) = cell_coords(grid_shape, j);
    let dr = ri as f64 - rj as f64;
    let dc = ci as f64 - cj as f64;
    dr * dr + dc * dc
}

/// Second-difference Laplacian with reflecting boundaries: every row sums
/// to zero.
pub fn discrete_laplacian(grid_shape: &[usize]) -> Result<SparseMat> {
    let n: usize = grid_shape.iter().product();
    let mut t = Vec::new();
    let link = |a: usize, b: usize, t: &mut Vec<(usize, usize, f64)>| {
        t.extend([(a, b, 1.0), (b, a, 1.0), (a, a, -1.0), (b, b, -1.0)]);
    };
    match grid_shape {
        [len] => {
            for i in 1..*len {
                link(i - 1, i, &mut t);
            }
        }
        [r, c] => {
            for i in 0..*r {
                for j in 0..*c {
                    let k = i * c + j;
                    if j + 1 < *c {
                        link(k, k + 1, &mut t);
                    }
                    if i + 1 < *r {
                        link(k, k + c, &mut t);
                    }
                }
            }
        }
        _ => return Err(Error::Model(format!("grid_shape must be 1-D or 2-D, got {grid_shape:?}"))),
    }
    SparseMat::from_triplets(n, &t)
}

/// `kappa^2 I - lap`.
pub fn shifted_operator(kappa: f64, lap: &SparseMat) -> Result<SparseMat> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::domain(format!("kappa must be positive, got {kappa}")));
    }
    SparseMat::identity(lap.dim()).axpby(kappa * kappa, lap, -1.0)
}

/// SPDE precision `(kappa^2 I - lap)^alpha` with its factor.
#[derive(Clone, Debug)]
pub struct SparsePrecision {
    pub kappa: f64,
    pub alpha: u32,
    pub q: SparseMat,
    pub factor: EnvelopeCholesky,
}

impl SparsePrecision {
    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    /// Dense `Q^{-1}` by column solves (small grids only).
    pub fn dense_inverse(&self) -> crate::linalg::Mat<f64> {
        let n = self.dim();
        let mut m = crate::linalg::Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.factor.solve(&e);
            e[j] = 0.0;
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        m
    }

    /// Marginal variances `diag(Q^{-1})`.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let n = self.dim();
        let mut e = vec![0.0; n];
        (0..n)
            .map(|j| {
                e[j] = 1.0;
                let v = self.factor.solve(&e)[j];
                e[j] = 0.0;
                v
            })
            .collect()
    }
}

pub fn spde_precision(kappa: f64, alpha: u32, lap: &SparseMat) -> Result<SparsePrecision> {
    if alpha == 0 {
        return Err(Error::domain("spde alpha must be at least 1"));
    }
    let a = shifted_operator(kappa, lap)?;
    let mut q = a.clone();
    for _ in 1..alpha {
        q = q.matmul(&a)?;
    }
    let factor = EnvelopeCholesky::factor(&q).map_err(|e| match e {
        Error::NotPositiveDefinite { index } => {
            Error::Model(format!("SPDE precision factorization failed at pivot {index} for kappa = {kappa}"))
        }
        other => other,
    })?;
    Ok(SparsePrecision { kappa, alpha, q, factor })
}

/// One field draw `u = P^T L^{-T} P eps` with covariance `Q^{-1}`.
pub fn spde_sample(q: &SparsePrecision, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != q.dim() {
        return Err(Error::shape("spde_sample", format!("eps has {} entries, grid has {}", eps.len(), q.dim())));
    }
    Ok(q.factor.sample(eps))
}

pub fn spde_sample_rng<R: Rng + ?Sized>(q: &SparsePrecision, rng: &mut R) -> Vec<f64> {
    let eps: Vec<f64> = (0..q.dim()).map(|_| rng.sample(StandardNormal)).collect();
    q.factor.sample(&eps)
}

/// A field as CSV rows following the grid layout.
pub fn field_csv(field: &[f64], grid_shape: &[usize]) -> Result<String> {
    let cols = *grid_shape.last().ok_or_else(|| Error::Model("empty grid shape".into()))?;
    if field.len() != grid_shape.iter().product::<usize>() {
        return Err(Error::shape("field_csv", format!("{} values for grid {grid_shape:?}", field.len())));
    }
    let mut s = String::new();
    for row in field.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    Ok(s)
}

// ------------------------------------------------------------- SPDE smoother

/// Factors of `kappa^2 I - lap` reused while kappa is unchanged.
#[derive(Debug, Default)]
pub struct FactorCache {
    entries: RefCell<HashMap<u64, Rc<EnvelopeCholesky>>>,
}

impl FactorCache {
    pub fn get(&self, kappa: f64, lap: &SparseMat) -> Result<Rc<EnvelopeCholesky>> {
        let key = kappa.to_bits();
        if let Some(f) = self.entries.borrow().get(&key) {
            return Ok(Rc::clone(f));
        }
        let a = shifted_operator(kappa, lap)?;
        let f = Rc::new(EnvelopeCholesky::factor(&a).map_err(|_| {
            Error::Model(format!("SPDE operator factorization failed for kappa = {kappa}"))
        })?);
        let mut entries = self.entries.borrow_mut();
        if entries.len() >= 8 {
            entries.clear();
        }
        entries.insert(key, Rc::clone(&f));
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    pub fn clear(&self) {
        self.entries.borrow_mut().clear();
    }
}

fn solve_power(f: &EnvelopeCholesky, b: &[f64], alpha: u32) -> Vec<f64> {
    let mut x = b.to_vec();
    for _ in 0..alpha {
        x = f.solve(&x);
    }
    x
}

struct SpdeSmoothOp {
    factor: Rc<EnvelopeCholesky>,
    kappa: f64,
    alpha: u32,
}

impl CustomOp<f64> for SpdeSmoothOp {
    fn name(&self) -> &'static str {
        "spde_smooth"
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad: &Tensor<f64>) -> Result<Vec<Option<Tensor<f64>>>> {
        let g = inputs[0];
        let cells = g.last_dim();
        let a = self.alpha as i32;
        let c = self.kappa.powi(2 * a);
        let k2 = self.kappa * self.kappa;
        let mut dg = Vec::with_capacity(g.numel());
        let mut dk = 0.0;
        for (grow, up) in g.data().chunks(cells).zip(grad.data().chunks(cells)) {
            dg.extend(solve_power(&self.factor, up, self.alpha).into_iter().map(|v| c * v));
            // dS/dk = 2 a c A^{-a} (I - kappa^2 A^{-1}) g
            let ainv = self.factor.solve(grow);
            let inner: Vec<f64> = grow.iter().zip(&ainv).map(|(x, y)| x - k2 * y).collect();
            let ds = solve_power(&self.factor, &inner, self.alpha);
            dk += 2.0 * f64::from(self.alpha) * c * ds.iter().zip(up).map(|(x, y)| x * y).sum::<f64>();
        }
        Ok(vec![
            Some(Tensor::new(g.shape().to_vec(), dg)?),
            Some(Tensor::scalar(dk)),
        ])
    }
}

/// Row-wise `kappa^(2 alpha) (kappa^2 I - lap)^{-alpha} g` with
/// `kappa = exp(log_kappa)`; differentiable in both `g` and `log_kappa`.
pub fn spde_smooth(tape: &mut Tape<f64>, g: Var, log_kappa: Var, alpha: u32, lap: &SparseMat, cache: &FactorCache) -> Result<Var> {
    let cells = lap.dim();
    if tape.shape(g).last() != Some(&cells) {
        return Err(Error::shape("spde_smooth", format!("{:?} vs {cells} cells", tape.shape(g))));
    }
    let kappa = tape.item(log_kappa).exp();
    let factor = cache.get(kappa, lap)?;
    let c = kappa.powi(2 * alpha as i32);
    let gv = tape.value(g);
    let mut out = Vec::with_capacity(gv.numel());
    for row in gv.data().chunks(cells) {
        out.extend(solve_power(&factor, row, alpha).into_iter().map(|v| c * v));
    }
    let value = Tensor::new(gv.shape().to_vec(), out)?;
    Ok(tape.custom(&[g, log_kappa], value, Box::new(SpdeSmoothOp { factor, kappa, alpha })))
}

// -------------------------------------------------------------- spatial SEM

/// Free coefficient slots of the spatial SEM: raster-order pairs `(i, j)`,
/// `j < i`, within three length-scales, with their RBF prior weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialSemPattern {
    pub cells: usize,
    pub lengthscale: f64,
    /// `(target, source, rbf)`, sorted by target.
    pub pairs: Vec<(usize, usize, f64)>,
}

pub fn rbf_weight(dist_sq: f64, lengthscale: f64) -> f64 {
    (-dist_sq / (2.0 * lengthscale * lengthscale)).exp()
}

impl SpatialSemPattern {
    pub fn new(grid_shape: &[usize], lengthscale: f64) -> Self {
        let cells: usize = grid_shape.iter().product();
        let cutoff = (3.0 * lengthscale).powi(2);
        let mut pairs = Vec::new();
        for i in 0..cells {
            for j in 0..i {
                let d2 = grid_dist_sq(grid_shape, i, j);
                if d2 <= cutoff {
                    pairs.push((i, j, rbf_weight(d2, lengthscale)));
                }
            }
        }
        SpatialSemPattern { cells, lengthscale, pairs }
    }

    pub fn n_free(&self) -> usize {
        self.pairs.len()
    }

    /// Dense `B` for parameters `theta` (diagnostics and tests).
    pub fn dense_b(&self, theta: &[f64]) -> crate::linalg::Mat<f64> {
        let mut b = crate::linalg::Mat::zeros(self.cells, self.cells);
        for (&(i, j, w), &t) in self.pairs.iter().zip(theta) {
            b[(i, j)] = t * w;
        }
        b
    }

    fn forward_row(&self, theta: &[f64], xi: &[f64]) -> Vec<f64> {
        let mut eta = xi.to_vec();
        for (&(i, j, w), &t) in self.pairs.iter().zip(theta) {
            // pairs are sorted by target and sources precede targets
            eta[i] += t * w * eta[j];
        }
        eta
    }

    /// Solves `(I - B)^T lam = g`.
    fn adjoint_row(&self, theta: &[f64], g: &[f64]) -> Vec<f64> {
        let mut lam = g.to_vec();
        for (&(i, j, w), &t) in self.pairs.iter().zip(theta).rev() {
            lam[j] += t * w * lam[i];
        }
        lam
    }
}

struct SpatialSemOp {
    pattern: Rc<SpatialSemPattern>,
}

impl CustomOp<f64> for SpatialSemOp {
    fn name(&self) -> &'static str {
        "spatial_sem"
    }

    fn backward(&self, inputs: &[&Tensor<f64>], output: &Tensor<f64>, grad: &Tensor<f64>) -> Result<Vec<Option<Tensor<f64>>>> {
        let (xi, theta) = (inputs[0], inputs[1].data());
        let cells = self.pattern.cells;
        let mut dxi = Vec::with_capacity(xi.numel());
        let mut dtheta = vec![0.0; theta.len()];
        for (eta, g) in output.data().chunks(cells).zip(grad.data().chunks(cells)) {
            let lam = self.pattern.adjoint_row(theta, g);
            for (p, &(i, j, w)) in self.pattern.pairs.iter().enumerate() {
                dtheta[p] += lam[i] * w * eta[j];
            }
            dxi.extend(lam);
        }
        Ok(vec![
            Some(Tensor::new(xi.shape().to_vec(), dxi)?),
            Some(Tensor::vector(dtheta)),
        ])
    }
}

/// `eta = (I - B(s))^{-1} xi` row by row, `B` strictly lower in raster order.
pub fn sem_layer_spatial(tape: &mut Tape<f64>, xi: Var, theta: Var, pattern: &Rc<SpatialSemPattern>) -> Result<Var> {
    let cells = pattern.cells;
    if tape.shape(xi).last() != Some(&cells) || tape.value(theta).numel() != pattern.n_free() {
        return Err(Error::shape(
            "sem_layer_spatial",
            format!("xi {:?}, theta {:?}, {cells} cells / {} slots", tape.shape(xi), tape.shape(theta), pattern.n_free()),
        ));
    }
    let th = tape.value(theta).data().to_vec();
    let mut out = Vec::with_capacity(tape.value(xi).numel());
    for row in tape.value(xi).data().chunks(cells) {
        out.extend(pattern.forward_row(&th, row));
    }
    let value = Tensor::new(tape.shape(xi).to_vec(), out)?;
    Ok(tape.custom(&[xi, theta], value, Box::new(SpatialSemOp { pattern: Rc::clone(pattern) })))
}

// ------------------------------------------------------------------ blocks

/// `H W + b`, one output column per grid cell.
pub fn grid_map(tape: &mut Tape<f64>, h: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let g = tape.matmul(h, w)?;
    match b {
        Some(b) => tape.add(g, b),
        None => Ok(g),
    }
}

pub fn aggregate(tape: &mut Tape<f64>, blocks: &[Var], mode: Aggregation, logits: Option<Var>) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::Model("no manifold blocks to aggregate".into()));
    }
    match mode {
        Aggregation::Concat => tape.concat(blocks),
        Aggregation::Sum => tape.add_all(blocks),
        Aggregation::Attention => {
            let logits = logits.ok_or_else(|| Error::Model("attention aggregation needs logits".into()))?;
            if tape.value(logits).numel() != blocks.len() {
                return Err(Error::shape("aggregate", format!("{} logits for {} blocks", tape.value(logits).numel(), blocks.len())));
            }
            let w = tape.softmax(logits);
            let mut terms = Vec::with_capacity(blocks.len());
            for (l, &blk) in blocks.iter().enumerate() {
                let wl = tape.slice(w, l, l + 1)?;
                terms.push(tape.mul(blk, wl)?);
            }
            tape.add_all(&terms)
        }
    }
}

/// Shapes and fixed operators for a stack of blocks.
#[derive(Debug)]
pub struct ManifoldLayout {
    pub blocks: Vec<ManifoldBlockConfig>,
    pub aggregation: Aggregation,
    pub in_dim: usize,
    laplacians: Vec<SparseMat>,
    patterns: Vec<Option<Rc<SpatialSemPattern>>>,
    caches: Vec<FactorCache>,
}

impl Clone for ManifoldLayout {
    fn clone(&self) -> Self {
        ManifoldLayout {
            blocks: self.blocks.clone(),
            aggregation: self.aggregation,
            in_dim: self.in_dim,
            laplacians: self.laplacians.clone(),
            patterns: self.patterns.clone(),
            caches: self.blocks.iter().map(|_| FactorCache::default()).collect(),
        }
    }
}

impl ManifoldLayout {
    pub fn new(blocks: Vec<ManifoldBlockConfig>, aggregation: Aggregation, in_dim: usize) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Model("manifold backbone needs at least one block".into()));
        }
        for b in &blocks {
            b.validate()?;
        }
        if aggregation != Aggregation::Concat {
            let w = blocks[0].cells();
            if blocks.iter().any(|b| b.cells() != w) {
                return Err(Error::Model(format!("{aggregation:?} aggregation needs equal cell counts")));
            }
        }
        let laplacians = blocks.iter().map(|b| discrete_laplacian(&b.grid_shape)).collect::<Result<_>>()?;
        let patterns = blocks
            .iter()
            .map(|b| b.use_sem.then(|| Rc::new(SpatialSemPattern::new(&b.grid_shape, b.sem_lengthscale))))
            .collect();
        let caches = blocks.iter().map(|_| FactorCache::default()).collect();
        Ok(ManifoldLayout { blocks, aggregation, in_dim, laplacians, patterns, caches })
    }

    pub fn block_in_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.in_dim
        } else {
            self.blocks[l - 1].cells()
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.aggregation {
            Aggregation::Concat => self.blocks.iter().map(ManifoldBlockConfig::cells).sum(),
            _ => self.blocks[0].cells(),
        }
    }

    pub fn laplacian(&self, l: usize) -> &SparseMat {
        &self.laplacians[l]
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for (l, b) in self.blocks.iter().enumerate() {
            let (p, c) = (self.block_in_dim(l), b.cells());
            let s = (6.0 / (p + c) as f64).sqrt();
            let w: Vec<f64> = (0..p * c).map(|_| rng.random_range(-s..s)).collect();
            store.insert(&format!("manifold.{l}.w"), Tensor::matrix(p, c, w)?)?;
            store.insert(&format!("manifold.{l}.b"), Tensor::zeros(&[c]))?;
            if b.use_spde {
                store.insert(&format!("manifold.{l}.log_kappa"), Tensor::scalar(b.spde_kappa_init.ln()))?;
            }
            if let Some(p) = &self.patterns[l] {
                store.insert(&format!("manifold.{l}.sem"), Tensor::zeros(&[p.n_free()]))?;
            }
        }
        if self.aggregation == Aggregation::Attention {
            store.insert("manifold.agg_logits", Tensor::zeros(&[self.blocks.len()]))?;
        }
        Ok(())
    }

    /// Learned `kappa` per block (`None` without SPDE).
    pub fn kappas(&self, store: &ParamStore) -> Vec<Option<f64>> {
        (0..self.blocks.len())
            .map(|l| store.get(&format!("manifold.{l}.log_kappa")).map(|t| t.item().exp()))
            .collect()
    }

    /// Drops cached factors, e.g. at an epoch boundary.
    pub fn clear_caches(&self) {
        self.caches.iter().for_each(FactorCache::clear);
    }
}

pub fn manifold_forward(tape: &mut Tape<f64>, bound: &Bound, layout: &ManifoldLayout, x: Var) -> Result<Var> {
    let mut h = x;
    let mut outs = Vec::with_capacity(layout.blocks.len());
    for (l, cfg) in layout.blocks.iter().enumerate() {
        let w = bound.var(&format!("manifold.{l}.w"))?;
        let b = bound.var(&format!("manifold.{l}.b"))?;
        let mut g = grid_map(tape, h, w, Some(b))?;
        if cfg.use_spde {
            let k = bound.var(&format!("manifold.{l}.log_kappa"))?;
            g = spde_smooth(tape, g, k, cfg.spde_alpha, &layout.laplacians[l], &layout.caches[l])?;
        }
        if let Some(p) = &layout.patterns[l] {
            let theta = bound.var(&format!("manifold.{l}.sem"))?;
            g = sem_layer_spatial(tape, g, theta, p)?;
        }
        outs.push(g);
        h = g;
    }
    let logits = bound.get("manifold.agg_logits");
    aggregate(tape, &outs, layout.aggregation, logits)
}
