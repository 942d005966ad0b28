//! Closed-form mixed-model reference: Henderson's mixed-model equations and
//! a profiled marginal likelihood for the variance ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::DesignMatrices;
use crate::linalg::Mat;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const GRID_POINTS: usize = 61;
const GRID_LO: f64 = 1e-3;
const GRID_HI: f64 = 1e3;
const GOLDEN_ITERS: usize = 80;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Reml,
    Ml,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFit {
    pub beta: Vec<f64>,
    pub u: Vec<f64>,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    /// `sigma_u2 / sigma_e2` at the optimum.
    pub ratio: f64,
    pub loglik: f64,
}

/// Solves the mixed-model equations for `(beta, u)`. An infinite
/// `sigma_u2` drops the shrinkage term; an empty `z` gives least squares.
pub fn mme_solve(x: &Mat<f64>, z: &Mat<f64>, y: &[f64], sigma_u2: f64, sigma_e2: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, p, q) = (x.rows(), x.cols(), z.cols());
    if y.len() != n || (q > 0 && z.rows() != n) {
        return Err(Error::shape("mme_solve", format!("{n} rows in X, {} in Z, {} targets", z.rows(), y.len())));
    }
    if !(sigma_e2 > 0.0) || !(sigma_u2 > 0.0) {
        return Err(Error::Domain("variances must be positive".into()));
    }
    let lambda = if sigma_u2.is_infinite() { 0.0 } else { sigma_e2 / sigma_u2 };
    let w = Mat::from_fn(n, p + q, |i, j| if j < p { x[(i, j)] } else { z[(i, j - p)] });
    let wt = w.transpose();
    let mut lhs = wt.matmul(&w)?;
    for j in p..p + q {
        lhs[(j, j)] += lambda;
    }
    let rhs = wt.matmul(&Mat::from_fn(n, 1, |i, _| y[i]))?;
    let sol = lhs.solve(&rhs)?;
    let v = sol.into_vec();
    Ok((v[..p].to_vec(), v[p..].to_vec()))
}

/// Profiled log-likelihood at variance ratio `r = sigma_u2 / sigma_e2`,
/// with the implied `sigma_e2`.
pub fn profile_loglik(x: &Mat<f64>, z: &Mat<f64>, y: &[f64], r: f64, crit: Criterion) -> Result<(f64, f64)> {
    let (n, p) = (x.rows(), x.cols());
    let zzt = z.matmul(&z.transpose())?;
    let mut h = zzt.scale(r);
    h.add_diag(1.0);
    let l = h.cholesky()?;
    let logdet_h: f64 = (0..n).map(|i| 2.0 * l[(i, i)].ln()).sum();
    let ym = Mat::from_fn(n, 1, |i, _| y[i]);
    let hinv_x = h.cholesky_solve(x)?;
    let hinv_y = h.cholesky_solve(&ym)?;
    let xthx = x.transpose().matmul(&hinv_x)?;
    let beta = xthx.solve(&x.transpose().matmul(&hinv_y)?)?;
    let resid = ym.sub(&x.matmul(&beta)?)?;
    let quad = resid.transpose().matmul(&h.cholesky_solve(&resid)?)?[(0, 0)];
    Ok(match crit {
        Criterion::Ml => {
            let s2 = quad / n as f64;
            (-0.5 * (n as f64 * (s2.ln() + 1.0 + LN_2PI) + logdet_h), s2)
        }
        Criterion::Reml => {
            let m = (n - p) as f64;
            let s2 = quad / m;
            let lx = xthx.cholesky()?;
            let logdet_x: f64 = (0..p).map(|i| 2.0 * lx[(i, i)].ln()).sum();
            (-0.5 * (m * (s2.ln() + 1.0 + LN_2PI) + logdet_h + logdet_x), s2)
        }
    })
}

/// Grid search over 61 log-spaced ratios in `[1e-3, 1e3]`, refined by
/// golden-section search between the best point's neighbours, then the
/// mixed-model equations at the optimum.
pub fn profile_fit(x: &Mat<f64>, z: &Mat<f64>, y: &[f64], crit: Criterion) -> Result<OracleFit> {
    if z.cols() == 0 {
        let (beta, _) = mme_solve(x, z, y, 1.0, 1.0)?;
        let n = y.len();
        let rss: f64 = (0..n)
            .map(|i| {
                let f: f64 = (0..x.cols()).map(|j| x[(i, j)] * beta[j]).sum();
                (y[i] - f).powi(2)
            })
            .sum();
        let denom = if crit == Criterion::Reml { n - x.cols() } else { n };
        return Ok(OracleFit {
            beta,
            u: Vec::new(),
            sigma_u2: 0.0,
            sigma_e2: rss / denom as f64,
            ratio: 0.0,
            loglik: f64::NAN,
        });
    }
    let (a, b) = (GRID_LO.ln(), GRID_HI.ln());
    let grid: Vec<f64> = (0..GRID_POINTS).map(|k| a + (b - a) * k as f64 / (GRID_POINTS - 1) as f64).collect();
    let f = |lr: f64| profile_loglik(x, z, y, lr.exp(), crit).map(|v| v.0);
    let vals = grid.iter().map(|&g| f(g)).collect::<Result<Vec<_>>>()?;
    let best = (0..GRID_POINTS).fold(0, |bi, k| if vals[k] > vals[bi] { k } else { bi });
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(GRID_POINTS - 1)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..GOLDEN_ITERS {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = f(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = f(d)?;
        }
    }
    let mut lr = 0.5 * (lo + hi);
    let mut ll = f(lr)?;
    if vals[best] > ll {
        lr = grid[best];
        ll = vals[best];
    }
    let ratio = lr.exp();
    let (_, s2e) = profile_loglik(x, z, y, ratio, crit)?;
    let s2u = ratio * s2e;
    let (beta, u) = mme_solve(x, z, y, s2u, s2e)?;
    Ok(OracleFit {
        beta,
        u,
        sigma_u2: s2u,
        sigma_e2: s2e,
        ratio,
        loglik: ll,
    })
}

/// `X` (intercept column first, then continuous columns) and `Z` (one
/// indicator block per random term and slope, scaled by the slope column)
/// from a design. Categorical fixed effects are not supported here.
pub fn design_matrices(design: &DesignMatrices) -> Result<(Mat<f64>, Mat<f64>)> {
    if !design.x_cat.is_empty() {
        return Err(Error::Model("the oracle handles continuous fixed effects only".into()));
    }
    let n = design.n;
    let off = usize::from(design.intercept);
    let x = Mat::from_fn(n, off + design.p_cont(), |i, j| {
        if j < off {
            1.0
        } else {
            design.x_cont[(i, j - off)]
        }
    });
    let mut blocks: Vec<(usize, usize, usize)> = Vec::new();
    let mut q = 0;
    for (t, zs) in design.z_slopes.iter().enumerate() {
        for s in 0..zs.cols() {
            blocks.push((t, s, q));
            q += design.n_levels[t];
        }
    }
    let mut z = Mat::zeros(n, q);
    for &(t, s, start) in &blocks {
        for i in 0..n {
            let g = design.group_index[t][i];
            if g < design.n_levels[t] {
                z[(i, start + g)] = design.z_slopes[t][(i, s)];
            }
        }
    }
    Ok((x, z))
}
