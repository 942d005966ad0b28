//! Synthetic datasets with known ground truth.

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{build_gp_rbf, correlated_sample};
use crate::error::{Error, Result};
use crate::io::table::ColumnTable;
use crate::linalg::Mat;

/// Random-intercept LMM: `y = b0 + Σ b_j x_j + u_g + e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmmParams {
    pub n_groups: usize,
    pub per_group: usize,
    /// Intercept first, then one coefficient per covariate `x1, x2, ...`.
    pub beta: Vec<f64>,
    pub sigma_u: f64,
    pub sigma_e: f64,
}

impl Default for LmmParams {
    fn default() -> Self {
        LmmParams {
            n_groups: 30,
            per_group: 20,
            beta: vec![2.0, -1.0],
            sigma_u: 1.0,
            sigma_e: 0.5,
        }
    }
}

/// Random intercept and slope over `days` time points per subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SleepParams {
    pub n_subjects: usize,
    pub days: usize,
    pub beta: [f64; 2],
    pub sigma_intercept: f64,
    pub sigma_slope: f64,
    pub sigma_e: f64,
}

impl Default for SleepParams {
    fn default() -> Self {
        SleepParams {
            n_subjects: 18,
            days: 10,
            beta: [251.4, 10.5],
            sigma_intercept: 24.7,
            sigma_slope: 5.9,
            sigma_e: 25.6,
        }
    }
}

/// Linear chain `x1 -> x2 -> x3 -> y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainParams {
    pub n: usize,
    pub weights: [f64; 3],
    pub noise: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams {
            n: 2000,
            weights: [1.5, -1.2, 1.0],
            noise: 0.1,
        }
    }
}

/// RBF Gaussian-process surface observed on a regular grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpatialParams {
    pub rows: usize,
    pub cols: usize,
    pub per_cell: usize,
    pub lengthscale: f64,
    pub sigma_f: f64,
    pub sigma_e: f64,
}

impl Default for SpatialParams {
    fn default() -> Self {
        SpatialParams {
            rows: 8,
            cols: 8,
            per_cell: 4,
            lengthscale: 2.0,
            sigma_f: 1.0,
            sigma_e: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimSpec {
    Lmm(LmmParams),
    SleepstudyLike(SleepParams),
    SemChain(ChainParams),
    Spatial(SpatialParams),
}

impl SimSpec {
    /// Default parameters for a kind name as used on the command line.
    pub fn from_kind(kind: &str) -> Result<SimSpec> {
        Ok(match kind {
            "lmm" => SimSpec::Lmm(LmmParams::default()),
            "sleepstudy_like" => SimSpec::SleepstudyLike(SleepParams::default()),
            "sem_chain" => SimSpec::SemChain(ChainParams::default()),
            "spatial" => SimSpec::Spatial(SpatialParams::default()),
            other => return Err(Error::Data(format!("unknown simulation kind {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: Vec<f64>,
    /// Per level, one effect per slope column (intercept first).
    pub u: Vec<Vec<f64>>,
    /// `B[target][source]` over the simulated variables.
    pub adjacency: Option<Vec<Vec<f64>>>,
    /// Noise-free surface per grid cell, row-major.
    pub field: Option<Vec<f64>>,
}

pub struct Simulated {
    pub data: ColumnTable,
    pub truth: GroundTruth,
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|_| Error::Data(format!("invalid standard deviation {sd}")))
}

pub fn simulate(spec: &SimSpec, seed: u64) -> Result<Simulated> {
    let mut rng = crate::rng(seed);
    match spec {
        SimSpec::Lmm(p) => {
            if p.beta.is_empty() {
                return Err(Error::Data("lmm needs at least an intercept".into()));
            }
            let n = p.n_groups * p.per_group;
            let p_x = p.beta.len() - 1;
            let (du, de) = (normal(p.sigma_u)?, normal(p.sigma_e)?);
            let u: Vec<f64> = (0..p.n_groups).map(|_| du.sample(&mut rng)).collect();
            let mut xs = vec![Vec::with_capacity(n); p_x];
            let mut y = Vec::with_capacity(n);
            let mut g = Vec::with_capacity(n);
            for (gi, ug) in u.iter().enumerate() {
                for _ in 0..p.per_group {
                    let mut v = p.beta[0] + ug;
                    for (j, col) in xs.iter_mut().enumerate() {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        v += p.beta[j + 1] * x;
                        col.push(x);
                    }
                    y.push(v + de.sample(&mut rng));
                    g.push(format!("g{gi:03}"));
                }
            }
            let mut data = ColumnTable::new().with_numeric("y", y)?;
            for (j, col) in xs.into_iter().enumerate() {
                data = data.with_numeric(&format!("x{}", j + 1), col)?;
            }
            let data = data.with_text("group", g)?;
            Ok(Simulated {
                data,
                truth: GroundTruth {
                    beta: p.beta.clone(),
                    u: u.into_iter().map(|v| vec![v]).collect(),
                    ..Default::default()
                },
            })
        }
        SimSpec::SleepstudyLike(p) => {
            let (d0, d1, de) = (normal(p.sigma_intercept)?, normal(p.sigma_slope)?, normal(p.sigma_e)?);
            let mut u = Vec::with_capacity(p.n_subjects);
            let (mut y, mut days, mut subj) = (Vec::new(), Vec::new(), Vec::new());
            for s in 0..p.n_subjects {
                let (a, b) = (d0.sample(&mut rng), d1.sample(&mut rng));
                u.push(vec![a, b]);
                for d in 0..p.days {
                    let t = d as f64;
                    y.push(p.beta[0] + a + (p.beta[1] + b) * t + de.sample(&mut rng));
                    days.push(t);
                    subj.push(format!("s{s:03}"));
                }
            }
            let data = ColumnTable::new()
                .with_numeric("Reaction", y)?
                .with_numeric("Days", days)?
                .with_text("Subject", subj)?;
            Ok(Simulated {
                data,
                truth: GroundTruth {
                    beta: p.beta.to_vec(),
                    u,
                    ..Default::default()
                },
            })
        }
        SimSpec::SemChain(p) => {
            let de = normal(p.noise.max(0.0))?;
            let mut cols = vec![Vec::with_capacity(p.n); 4];
            for _ in 0..p.n {
                let mut prev: f64 = StandardNormal.sample(&mut rng);
                cols[0].push(prev);
                for (k, w) in p.weights.iter().enumerate() {
                    let e = if p.noise > 0.0 { de.sample(&mut rng) } else { 0.0 };
                    prev = w * prev + e;
                    cols[k + 1].push(prev);
                }
            }
            let mut adj = vec![vec![0.0; 4]; 4];
            for (k, w) in p.weights.iter().enumerate() {
                adj[k + 1][k] = *w;
            }
            let mut it = cols.into_iter();
            let data = ColumnTable::new()
                .with_numeric("x1", it.next().unwrap_or_default())?
                .with_numeric("x2", it.next().unwrap_or_default())?
                .with_numeric("x3", it.next().unwrap_or_default())?
                .with_numeric("y", it.next().unwrap_or_default())?;
            Ok(Simulated {
                data,
                truth: GroundTruth {
                    adjacency: Some(adj),
                    ..Default::default()
                },
            })
        }
        SimSpec::Spatial(p) => {
            let cells = p.rows * p.cols;
            if cells == 0 {
                return Err(Error::Data("spatial grid must have at least one cell".into()));
            }
            let coords = Mat::from_fn(cells, 2, |i, j| if j == 0 { (i / p.cols) as f64 } else { (i % p.cols) as f64 });
            let factor = build_gp_rbf(&coords, p.sigma_f * p.sigma_f, p.lengthscale)?;
            let eps: Vec<f64> = (0..cells).map(|_| StandardNormal.sample(&mut rng)).collect();
            let field = correlated_sample(&factor, &eps)?;
            let de = normal(p.sigma_e)?;
            let (mut y, mut gx, mut gy, mut cell) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (c, f) in field.iter().enumerate() {
                for _ in 0..p.per_cell {
                    y.push(f + de.sample(&mut rng));
                    gx.push(coords[(c, 0)]);
                    gy.push(coords[(c, 1)]);
                    cell.push(format!("c{c:04}"));
                }
            }
            let data = ColumnTable::new()
                .with_numeric("y", y)?
                .with_numeric("gx", gx)?
                .with_numeric("gy", gy)?
                .with_text("cell", cell)?;
            Ok(Simulated {
                data,
                truth: GroundTruth {
                    u: field.iter().map(|&v| vec![v]).collect(),
                    field: Some(field),
                    ..Default::default()
                },
            })
        }
    }
}
