//! Prediction-time inference and statistical summaries: intervals,
//! linearized coefficients, variance decomposition, Shapley values and the
//! mixed-model summary table.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{self, Stochastic, INPUT_H_SHIFT, INPUT_X_CONT};
use crate::error::{Error, Result};
use crate::families::{mean_response, nll_tape, sample_observation, ExtrasValue, Family};
use crate::formula::DesignMatrices;
use crate::gsem::GsemStats;
use crate::io::table::ColumnTable;
use crate::linalg::Mat;
use crate::model::{Backbone, Model, OutcomePrediction, Prepared};
use crate::params::Bound;

pub const MAX_EXACT_FEATURES: usize = 12;
pub const MAX_RANDOM_PLAYERS: usize = 8;

/// Eval-mode predictions: posterior-mean random effects, no dropout.
pub fn predict_point(model: &Model, data: &ColumnTable) -> Result<Vec<OutcomePrediction>> {
    model.predict(data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionInterval {
    pub outcome: String,
    pub point: Mat<f64>,
    pub lower: Mat<f64>,
    pub upper: Mat<f64>,
}

/// Type-7 quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Monte Carlo intervals from `m_samples` forward passes with random
/// effects drawn from the variational posterior. With `observation_noise`
/// each pass also draws from the outcome distribution.
pub fn predict_interval(
    model: &Model,
    data: &ColumnTable,
    m_samples: usize,
    alpha: f64,
    observation_noise: bool,
    seed: u64,
) -> Result<Vec<PredictionInterval>> {
    if m_samples == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Model("intervals need at least one sample and alpha in (0, 1)".into()));
    }
    let prepared = model.prepare(data)?;
    let point = model.predict_prepared(&prepared)?;
    let extras = model.extras_values()?;
    let mut rng = crate::rng(seed);
    // draws[k][i * width + j] collects samples of outcome k, row i, column j
    let mut draws: Vec<Vec<Vec<f64>>> =
        point.iter().map(|p| vec![Vec::with_capacity(m_samples); p.mean.rows() * p.mean.cols()]).collect();
    for _ in 0..m_samples {
        let thetas = {
            let mut st = Stochastic {
                rng: &mut rng,
                sample_effects: true,
                dropout: false,
            };
            model.thetas(&prepared, Some(&mut st))?
        };
        for (k, th) in thetas.iter().enumerate() {
            let fam = &model.outcomes[k].family;
            for i in 0..th.rows() {
                let y = if observation_noise {
                    sample_observation(fam, th.row(i), &extras[k], &mut rng)
                } else {
                    mean_response(fam, th.row(i))
                };
                for (j, v) in y.into_iter().enumerate() {
                    draws[k][i * th.cols() + j].push(v);
                }
            }
        }
    }
    Ok(point
        .into_iter()
        .zip(draws)
        .map(|(p, mut d)| {
            let (n, w) = (p.mean.rows(), p.mean.cols());
            let mut lower = Mat::zeros(n, w);
            let mut upper = Mat::zeros(n, w);
            for i in 0..n {
                for j in 0..w {
                    let s = &mut d[i * w + j];
                    s.sort_by(f64::total_cmp);
                    lower[(i, j)] = quantile_sorted(s, alpha / 2.0);
                    upper[(i, j)] = quantile_sorted(s, 1.0 - alpha / 2.0);
                }
            }
            PredictionInterval {
                outcome: p.outcome,
                point: p.mean,
                lower,
                upper,
            }
        })
        .collect())
}

// ------------------------------------------------------------ background

/// Reference point for coalitions and linearization: continuous means and
/// the most frequent code of each categorical column.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub x_cont: Vec<Vec<f64>>,
    pub cat_codes: Vec<Vec<usize>>,
}

impl Background {
    pub fn means(design: &DesignMatrices) -> Background {
        let n = design.n.max(1) as f64;
        let x: Vec<f64> = (0..design.p_cont()).map(|j| design.x_cont.col(j).iter().sum::<f64>() / n).collect();
        let codes = design
            .x_cat
            .iter()
            .map(|c| {
                let mut counts = vec![0usize; c.cardinality + 1];
                c.codes.iter().for_each(|&k| counts[k] += 1);
                (0..counts.len()).fold(0, |b, k| if counts[k] > counts[b] { k } else { b })
            })
            .collect();
        Background {
            x_cont: vec![x],
            cat_codes: vec![codes],
        }
    }

    /// Every row of `design` as a background sample.
    pub fn rows(design: &DesignMatrices) -> Background {
        Background {
            x_cont: (0..design.n).map(|i| design.x_cont.row(i).to_vec()).collect(),
            cat_codes: (0..design.n).map(|i| design.x_cat.iter().map(|c| c.codes[i]).collect()).collect(),
        }
    }

    fn len(&self) -> usize {
        self.x_cont.len()
    }
}

/// Copy of `design` with every random-term column zeroed except those
/// flagged in `keep`.
fn mask_random(design: &mut DesignMatrices, keep: &[bool]) {
    for (t, z) in design.z_slopes.iter_mut().enumerate() {
        if !keep.get(t).copied().unwrap_or(false) {
            *z = Mat::zeros(z.rows(), z.cols());
        }
    }
}

fn population_row(design: &DesignMatrices, bg: &Background) -> Result<DesignMatrices> {
    if design.n == 0 {
        return Err(Error::Data("no rows to linearize around".into()));
    }
    let mut row = design.take(&[0]);
    for j in 0..row.p_cont() {
        row.x_cont[(0, j)] = bg.x_cont[0][j];
    }
    for (c, &code) in row.x_cat.iter_mut().zip(&bg.cat_codes[0]) {
        c.codes[0] = code;
    }
    mask_random(&mut row, &[]);
    Ok(row)
}

// ------------------------------------------------------------ parameters

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponent {
    pub group: String,
    pub slope: String,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedParameters {
    pub outcome: String,
    /// `(Intercept)` first when the formula has one, then continuous columns.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Feature means the expansion is taken at.
    pub x_bar: Vec<f64>,
    pub variance_components: Vec<VarianceComponent>,
    /// Within-term correlations of the per-level effects in output space.
    pub correlations: Vec<(String, String, String, f64)>,
    /// Residual variance for Gaussian outcomes.
    pub sigma2_eps: Option<f64>,
}

/// Gradients of column `col` of outcome `k`'s raw output at the population
/// row, with respect to the continuous inputs and to the shared
/// random-effect shift.
fn population_gradients(model: &Model, row: &DesignMatrices, k: usize, col: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let xv = tape.param(Tensor::from_mat(&row.x_cont));
    let shift = tape.param(Tensor::zeros(&[model.encoder.d()]));
    let mut names = model.params.names().to_vec();
    names.extend([INPUT_X_CONT.to_string(), INPUT_H_SHIFT.to_string()]);
    let mut vars = bound.vars().to_vec();
    vars.extend([xv, shift]);
    let bound = Bound::from_parts(&names, &vars);
    let prepared = Prepared {
        design: row.clone(),
        extra: Default::default(),
    };
    let mut stats = GsemStats::default();
    let out = model.forward(&mut tape, &bound, &prepared, None, &mut stats)?;
    let th = tape.slice(out.thetas[k], col, col + 1)?;
    let f = tape.sum(th);
    let value = tape.item(f);
    tape.backward(f)?;
    let gx = tape.grad(xv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; row.p_cont()]);
    let gh = tape.grad(shift).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; model.encoder.d()]);
    Ok((value, gx, gh))
}

/// Linearized fixed effects at the feature means and variance components
/// mapped to output column `col` of outcome `k` through the head Jacobian.
pub fn extract_parameters(model: &Model, data: &ColumnTable, k: usize, col: usize) -> Result<ExtractedParameters> {
    let outcome = model
        .outcomes
        .get(k)
        .ok_or_else(|| Error::Model(format!("no outcome {k}")))?;
    if col >= outcome.family.width() {
        return Err(Error::Model(format!("outcome {:?} has no column {col}", outcome.name)));
    }
    let prepared = model.prepare(data)?;
    let design = &prepared.design;
    let bg = Background::means(design);
    let row = population_row(design, &bg)?;
    let (f0, gx, jac) = population_gradients(model, &row, k, col)?;
    let mut names = Vec::new();
    let mut coefficients = Vec::new();
    if design.intercept {
        names.push("(Intercept)".to_string());
        coefficients.push(f0 - gx.iter().zip(&bg.x_cont[0]).map(|(g, x)| g * x).sum::<f64>());
    }
    names.extend(design.cont_names.iter().cloned());
    coefficients.extend(gx.iter().copied());
    let mut variance_components = Vec::new();
    let mut correlations = Vec::new();
    let tables = encoder::tables(&model.params, &model.encoder)?;
    let mut per_term: BTreeMap<usize, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    for (t, s, table) in &tables {
        let eff = table.effects(&model.encoder, &model.params, *t)?;
        let n = eff.rows().max(1) as f64;
        let proj: Vec<f64> = (0..eff.rows()).map(|g| eff.row(g).iter().zip(&jac).map(|(a, b)| a * b).sum()).collect();
        let second = proj.iter().map(|v| v * v).sum::<f64>() / n;
        let post = (0..table.log_var.rows())
            .map(|g| table.log_var.row(g).iter().zip(&jac).map(|(lv, j)| lv.exp() * j * j).sum::<f64>())
            .sum::<f64>()
            / n;
        variance_components.push(VarianceComponent {
            group: table.group_factor.clone(),
            slope: table.slope_term.clone(),
            variance: second + post,
        });
        per_term.entry(*t).or_default().push((table.slope_term.clone(), proj));
        let _ = s;
    }
    for (t, slopes) in &per_term {
        for a in 0..slopes.len() {
            for b in a + 1..slopes.len() {
                let r = correlation(&slopes[a].1, &slopes[b].1);
                correlations.push((model.encoder.terms[*t].group.clone(), slopes[a].0.clone(), slopes[b].0.clone(), r));
            }
        }
    }
    let sigma2_eps = match model.extras_values()?.get(k) {
        Some(ExtrasValue::Sigma2(s)) => Some(*s),
        Some(ExtrasValue::Chol(l)) => Some(l.matmul(&l.transpose())?[(col, col)]),
        _ => None,
    };
    Ok(ExtractedParameters {
        outcome: outcome.name.clone(),
        names,
        coefficients,
        x_bar: bg.x_cont[0].clone(),
        variance_components,
        correlations,
        sigma2_eps,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len().max(1) as f64
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

// ------------------------------------------------------ variance decomposition

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub outcome: String,
    pub sigma2_fixed: f64,
    pub sigma2_u: Vec<VarianceComponent>,
    /// Learned residual variance; `None` for non-Gaussian outcomes.
    pub sigma2_eps: Option<f64>,
    /// Per grouping column, summed over its slopes. Gaussian outcomes only.
    pub icc: BTreeMap<String, f64>,
    /// `1 - sigma2_eps / Var(y)`, or Efron's pseudo-R² on the mean scale
    /// when `pseudo` is set.
    pub r_squared: f64,
    pub pseudo: bool,
    /// Variance of the full prediction, for comparison with the sum of the
    /// predictive parts.
    pub var_prediction: f64,
    pub var_y: f64,
}

fn theta_col(model: &Model, design: DesignMatrices, extra: &crate::encoder::ExtraRows, k: usize, col: usize) -> Result<Vec<f64>> {
    let th = model.thetas(
        &Prepared {
            design,
            extra: extra.clone(),
        },
        None,
    )?;
    Ok(th[k].col(col))
}

/// Empirical decomposition on the link scale: fixed path, each random term
/// switched on alone, and for Gaussian outcomes the learned residual
/// variance with ICCs.
pub fn variance_decomposition(model: &Model, data: &ColumnTable, k: usize) -> Result<VarianceDecomposition> {
    let outcome = model
        .outcomes
        .get(k)
        .ok_or_else(|| Error::Model(format!("no outcome {k}")))?;
    let sigma2_eps = match (&outcome.family, model.extras_values()?.get(k)) {
        (Family::Gaussian, Some(ExtrasValue::Sigma2(s))) => Some(*s),
        (f, _) if f.width() == 1 => None,
        (f, _) => {
            return Err(Error::Model(format!(
                "variance decomposition needs a single-column outcome, {:?} is {}",
                outcome.name,
                f.name()
            )))
        }
    };
    let prepared = model.prepare(data)?;
    let n_terms = model.ast.random.len();
    let mut fixed_design = prepared.design.clone();
    mask_random(&mut fixed_design, &[]);
    let f_fixed = theta_col(model, fixed_design.clone(), &prepared.extra, k, 0)?;
    let full = theta_col(model, prepared.design.clone(), &prepared.extra, k, 0)?;
    let mut sigma2_u = Vec::new();
    let mut icc = BTreeMap::new();
    for t in 0..n_terms {
        let labels = model.ast.random[t].slope_labels();
        let mut group_total = 0.0;
        for (s, label) in labels.iter().enumerate() {
            let mut d = prepared.design.clone();
            mask_random(&mut d, &[]);
            for i in 0..d.n {
                d.z_slopes[t][(i, s)] = prepared.design.z_slopes[t][(i, s)];
            }
            let f = theta_col(model, d, &prepared.extra, k, 0)?;
            let contrib: Vec<f64> = f.iter().zip(&f_fixed).map(|(a, b)| a - b).collect();
            let v = variance(&contrib);
            group_total += v;
            sigma2_u.push(VarianceComponent {
                group: model.ast.random[t].group.clone(),
                slope: label.clone(),
                variance: v,
            });
        }
        *icc.entry(model.ast.random[t].group.clone()).or_insert(0.0) += group_total;
    }
    let y = model.targets(data)?[k].as_matrix().col(0);
    let var_y = variance(&y);
    let r_squared = match sigma2_eps {
        Some(s2) => {
            for v in icc.values_mut() {
                *v /= *v + s2;
            }
            if var_y > 0.0 {
                1.0 - s2 / var_y
            } else {
                0.0
            }
        }
        None => {
            icc.clear();
            let mu: Vec<f64> = full.iter().map(|&t| mean_response(&outcome.family, &[t])[0]).collect();
            let sse: f64 = y.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum();
            if var_y > 0.0 {
                1.0 - sse / (var_y * y.len() as f64)
            } else {
                0.0
            }
        }
    };
    Ok(VarianceDecomposition {
        outcome: outcome.name.clone(),
        sigma2_fixed: variance(&f_fixed),
        sigma2_u,
        sigma2_eps,
        icc,
        r_squared,
        pseudo: sigma2_eps.is_none(),
        var_prediction: variance(&full),
        var_y,
    })
}

// ------------------------------------------------------------ Shapley

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapMode {
    #[default]
    Exact,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeImportance {
    pub layer: String,
    pub source: String,
    pub target: String,
    pub weight: f64,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    pub outcome: String,
    pub features: Vec<String>,
    /// `n x p` attributions.
    pub phi: Vec<Vec<f64>>,
    /// Monte Carlo standard errors (sampled mode).
    pub phi_se: Option<Vec<Vec<f64>>>,
    /// Coalition value of the empty set, per row.
    pub baseline: Vec<f64>,
    /// Full prediction per row.
    pub prediction: Vec<f64>,
    pub random_terms: Vec<String>,
    /// `n x T` attributions of the random terms.
    pub random_phi: Vec<Vec<f64>>,
    /// Mean absolute attribution per random term.
    pub random_contribution: Vec<f64>,
    pub edges: Vec<EdgeImportance>,
}

/// Shapley weights `|S|! (p-|S|-1)! / p!` indexed by `|S|`.
fn shapley_weights(p: usize) -> Vec<f64> {
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    (0..p).map(|s| fact(s) * fact(p - s - 1) / fact(p)).collect()
}

/// Exact attributions from the values of all `2^p` coalitions (bit `j` of
/// the index marks player `j`).
pub fn shapley_from_values(p: usize, values: &[f64]) -> Vec<f64> {
    let w = shapley_weights(p);
    let mut phi = vec![0.0; p];
    for (j, out) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        for mask in 0..(1usize << p) {
            if mask & bit == 0 {
                *out += w[mask.count_ones() as usize] * (values[mask | bit] - values[mask]);
            }
        }
    }
    phi
}

/// Players of the fixed-effect game: continuous columns then categoricals.
fn feature_names(design: &DesignMatrices) -> Vec<String> {
    let mut f = design.cont_names.clone();
    f.extend(design.x_cat.iter().map(|c| c.name.clone()));
    f
}

/// Evaluates `f` on rows built from `(row, mask, background)` triples.
fn coalition_values(
    model: &Model,
    prepared: &Prepared,
    bg: &Background,
    jobs: &[(usize, usize)],
    k: usize,
    col: usize,
) -> Result<Vec<f64>> {
    let design = &prepared.design;
    let p_cont = design.p_cont();
    let nb = bg.len();
    let rows: Vec<usize> = jobs.iter().flat_map(|&(i, _)| std::iter::repeat_n(i, nb)).collect();
    let mut d = design.take(&rows);
    for (r, &(_, mask)) in jobs.iter().enumerate() {
        for b in 0..nb {
            let ri = r * nb + b;
            for j in 0..p_cont {
                if mask & (1 << j) == 0 {
                    d.x_cont[(ri, j)] = bg.x_cont[b][j];
                }
            }
            for (c, cat) in d.x_cat.iter_mut().enumerate() {
                if mask & (1 << (p_cont + c)) == 0 {
                    cat.codes[ri] = bg.cat_codes[b][c];
                }
            }
        }
    }
    let th = model.thetas(
        &Prepared {
            design: d,
            extra: prepared.extra.clone(),
        },
        None,
    )?;
    let fam = &model.outcomes[k].family;
    let vals: Vec<f64> = (0..th[k].rows()).map(|i| mean_response(fam, th[k].row(i))[col]).collect();
    Ok(vals.chunks(nb).map(mean).collect())
}

/// Shapley attributions of the fixed-effect features for column `col` of
/// outcome `k` on the prediction scale. Random effects stay at their
/// posterior means in every coalition.
#[allow(clippy::too_many_arguments)]
pub fn shapley_values(
    model: &Model,
    data: &ColumnTable,
    k: usize,
    col: usize,
    mode: ShapMode,
    background: Option<&ColumnTable>,
    n_permutations: usize,
    seed: u64,
) -> Result<ShapReport> {
    let outcome = model
        .outcomes
        .get(k)
        .ok_or_else(|| Error::Model(format!("no outcome {k}")))?;
    let prepared = model.prepare(data)?;
    let bg = match background {
        Some(b) => Background::rows(&model.prepare(b)?.design),
        None => Background::means(&prepared.design),
    };
    if bg.len() == 0 {
        return Err(Error::Data("background has no rows".into()));
    }
    let features = feature_names(&prepared.design);
    let p = features.len();
    let n = prepared.design.n;
    let full_mask = (1usize << p) - 1;
    let (phi, phi_se, baseline, prediction) = match mode {
        ShapMode::Exact => {
            if p > MAX_EXACT_FEATURES {
                return Err(Error::Model(format!(
                    "exact Shapley values support at most {MAX_EXACT_FEATURES} features, got {p}"
                )));
            }
            let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..=full_mask).map(move |m| (i, m))).collect();
            let mut vals = Vec::with_capacity(jobs.len());
            for chunk in jobs.chunks(1 << 14) {
                vals.extend(coalition_values(model, &prepared, &bg, chunk, k, col)?);
            }
            let per_row: Vec<&[f64]> = vals.chunks(full_mask + 1).collect();
            (
                per_row.iter().map(|v| shapley_from_values(p, v)).collect::<Vec<_>>(),
                None,
                per_row.iter().map(|v| v[0]).collect(),
                per_row.iter().map(|v| v[full_mask]).collect(),
            )
        }
        ShapMode::Sampled => {
            let pairs = n_permutations.max(1);
            let mut rng = crate::rng(seed);
            let mut perms = Vec::with_capacity(2 * pairs);
            for _ in 0..pairs {
                let mut pi: Vec<usize> = (0..p).collect();
                pi.shuffle(&mut rng);
                let rev: Vec<usize> = pi.iter().rev().copied().collect();
                perms.push(pi);
                perms.push(rev);
            }
            // prefix coalitions of every permutation
            let masks: Vec<Vec<usize>> = perms
                .iter()
                .map(|pi| {
                    let mut m = 0;
                    let mut out = vec![0];
                    for &j in pi {
                        m |= 1 << j;
                        out.push(m);
                    }
                    out
                })
                .collect();
            let mut phi = vec![vec![0.0; p]; n];
            let mut se = vec![vec![0.0; p]; n];
            let mut baseline = vec![0.0; n];
            let mut prediction = vec![0.0; n];
            for i in 0..n {
                let jobs: Vec<(usize, usize)> = masks.iter().flatten().map(|&m| (i, m)).collect();
                let vals = coalition_values(model, &prepared, &bg, &jobs, k, col)?;
                let per_perm: Vec<&[f64]> = vals.chunks(p + 1).collect();
                baseline[i] = per_perm[0][0];
                prediction[i] = per_perm[0][p];
                let mut pair_means = vec![Vec::with_capacity(pairs); p];
                for pr in 0..pairs {
                    let mut contrib = vec![0.0; p];
                    for q in [2 * pr, 2 * pr + 1] {
                        for (pos, &j) in perms[q].iter().enumerate() {
                            contrib[j] += 0.5 * (per_perm[q][pos + 1] - per_perm[q][pos]);
                        }
                    }
                    for j in 0..p {
                        pair_means[j].push(contrib[j]);
                    }
                }
                for j in 0..p {
                    phi[i][j] = mean(&pair_means[j]);
                    se[i][j] = if pairs > 1 {
                        (variance(&pair_means[j]) * pairs as f64 / (pairs - 1) as f64 / pairs as f64).sqrt()
                    } else {
                        f64::NAN
                    };
                }
            }
            (phi, Some(se), baseline, prediction)
        }
    };
    let (random_terms, random_phi) = random_effect_shapley(model, &prepared, k, col)?;
    let random_contribution = (0..random_terms.len())
        .map(|t| mean(&random_phi.iter().map(|r| r[t].abs()).collect::<Vec<_>>()))
        .collect();
    Ok(ShapReport {
        outcome: outcome.name.clone(),
        features,
        phi,
        phi_se,
        baseline,
        prediction,
        random_terms,
        random_phi,
        random_contribution,
        edges: edge_importance(model, &prepared, k, col)?,
    })
}

fn random_effect_shapley(model: &Model, prepared: &Prepared, k: usize, col: usize) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let t_count = model.ast.random.len();
    if t_count > MAX_RANDOM_PLAYERS {
        return Err(Error::Model(format!("at most {MAX_RANDOM_PLAYERS} random terms can be attributed")));
    }
    let names: Vec<String> = model
        .ast
        .random
        .iter()
        .map(|t| t.to_string())
        .collect();
    if t_count == 0 {
        return Ok((names, vec![Vec::new(); prepared.design.n]));
    }
    let fam = &model.outcomes[k].family;
    let mut values = Vec::with_capacity(1 << t_count);
    for mask in 0..(1usize << t_count) {
        let keep: Vec<bool> = (0..t_count).map(|t| mask & (1 << t) != 0).collect();
        let mut d = prepared.design.clone();
        mask_random(&mut d, &keep);
        let th = model.thetas(
            &Prepared {
                design: d,
                extra: prepared.extra.clone(),
            },
            None,
        )?;
        values.push((0..th[k].rows()).map(|i| mean_response(fam, th[k].row(i))[col]).collect::<Vec<_>>());
    }
    let phi = (0..prepared.design.n)
        .map(|i| {
            let v: Vec<f64> = values.iter().map(|vals| vals[i]).collect();
            shapley_from_values(t_count, &v)
        })
        .collect();
    Ok((names, phi))
}

/// `|B ⊙ ∂f/∂B|` for every structured adjacency, with `f` the mean output:
/// edge weight scaled by the gradient flowing through it. A heuristic, not
/// a Shapley value.
pub fn edge_importance(model: &Model, prepared: &Prepared, k: usize, col: usize) -> Result<Vec<EdgeImportance>> {
    let mut layers: Vec<(String, String, Vec<String>)> = Vec::new();
    if let Backbone::Gsem(g) = &model.backbone {
        if g.has_static() && g.n_layers() > 0 {
            let d = g.cfg.hidden_dims[0];
            layers.push(("gsem.0".into(), "gsem.0.bs".into(), (0..d).map(|i| format!("h{i}")).collect()));
        }
    }
    if model.params.contains("osem.b") {
        let names = crate::model::output_axis(model).unwrap_or_default();
        layers.push(("output_sem".into(), "osem.b".into(), names));
    }
    if layers.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut stats = GsemStats::default();
    let out = model.forward(&mut tape, &bound, prepared, None, &mut stats)?;
    let th = tape.slice(out.thetas[k], col, col + 1)?;
    let f = tape.mean(th);
    tape.backward(f)?;
    let mut edges = Vec::new();
    for (layer, pname, names) in layers {
        let b = model.params.require(&pname)?.to_mat()?;
        let v = bound.var(&pname)?;
        let g = tape.grad(v).map(|g| g.to_mat()).transpose()?.unwrap_or_else(|| Mat::zeros(b.rows(), b.cols()));
        for t in 0..b.rows() {
            for s in 0..b.cols() {
                if t == s || b[(t, s)] == 0.0 || (layer == "gsem.0" && s > t && g[(t, s)] == 0.0) {
                    continue;
                }
                edges.push(EdgeImportance {
                    layer: layer.clone(),
                    source: names.get(s).cloned().unwrap_or_else(|| s.to_string()),
                    target: names.get(t).cloned().unwrap_or_else(|| t.to_string()),
                    weight: b[(t, s)],
                    importance: (b[(t, s)] * g[(t, s)]).abs(),
                });
            }
        }
    }
    Ok(edges)
}

/// Random-term attributions alone: `(term names, n x T values)`.
pub fn shapley_random_effects(model: &Model, data: &ColumnTable, k: usize, col: usize) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let prepared = model.prepare(data)?;
    random_effect_shapley(model, &prepared, k, col)
}

impl ShapReport {
    /// One row per data row: `row,baseline,prediction,<features>,<random terms>`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row".to_string(), "baseline".into(), "prediction".into()];
        header.extend(self.features.iter().cloned());
        header.extend(self.random_terms.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
        for i in 0..self.phi.len() {
            let mut rec = vec![i.to_string(), self.baseline[i].to_string(), self.prediction[i].to_string()];
            rec.extend(self.phi[i].iter().map(f64::to_string));
            rec.extend(self.random_phi[i].iter().map(f64::to_string));
            w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

// ------------------------------------------------------------ summary

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z_value: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub formula: String,
    pub outcome: String,
    pub family: String,
    pub n_obs: usize,
    pub fixed: Vec<FixedEffectRow>,
    pub random: Vec<VarianceComponent>,
    pub correlations: Vec<(String, String, String, f64)>,
    pub sigma2_eps: Option<f64>,
    pub loglik: f64,
    /// Statistical parameters: fixed coefficients plus variance components.
    pub k: usize,
    pub aic: f64,
    pub bic: f64,
}

pub fn aic(loglik: f64, k: usize) -> f64 {
    2.0 * k as f64 - 2.0 * loglik
}

pub fn bic(loglik: f64, k: usize, n: usize) -> f64 {
    k as f64 * (n as f64).ln() - 2.0 * loglik
}

/// Total log-likelihood of `data` under eval-mode predictions, summed over
/// outcomes with their weights.
pub fn log_likelihood(model: &Model, data: &ColumnTable) -> Result<f64> {
    let prepared = model.prepare(data)?;
    let targets = model.targets(data)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut stats = GsemStats::default();
    let out = model.forward(&mut tape, &bound, &prepared, None, &mut stats)?;
    let n = prepared.design.n as f64;
    let mut ll = 0.0;
    for (k, o) in model.outcomes.iter().enumerate() {
        let m = nll_tape(&mut tape, &o.family, out.thetas[k], out.extras[k], &targets[k])?;
        ll -= o.weight * n * tape.item(m);
    }
    Ok(ll)
}

/// Working weight of the Gauss-Newton surrogate at a raw output value.
fn working_weight(family: &Family, theta: f64, extras: &ExtrasValue) -> f64 {
    match (family, extras) {
        (Family::Gaussian, ExtrasValue::Sigma2(s2)) => 1.0 / s2,
        (Family::Binomial, _) => {
            let p = crate::scalar::sigmoid(theta);
            p * (1.0 - p)
        }
        (Family::Poisson, _) => theta.exp(),
        (Family::Negbin { .. }, ExtrasValue::Phi(phi)) => {
            let mu = theta.exp();
            mu / (1.0 + mu / phi)
        }
        _ => 1.0,
    }
}

/// lme4-style table for column `col` of outcome `k`. Standard errors are
/// approximate: the inverse Gauss-Newton curvature of the linearized
/// model, with normal-reference p-values.
pub fn summary(model: &Model, data: &ColumnTable, k: usize, col: usize) -> Result<Summary> {
    let params = extract_parameters(model, data, k, col)?;
    let prepared = model.prepare(data)?;
    let design = &prepared.design;
    let n = design.n;
    let off = usize::from(design.intercept);
    let p = off + design.p_cont();
    let theta = model.thetas(&prepared, None)?[k].col(col);
    let extras = model.extras_values()?;
    let fam = &model.outcomes[k].family;
    let mut xtwx: Mat<f64> = Mat::zeros(p, p);
    for i in 0..n {
        let w = working_weight(fam, theta[i], &extras[k]);
        let xi: Vec<f64> = (0..p).map(|j| if j < off { 1.0 } else { design.x_cont[(i, j - off)] }).collect();
        for a in 0..p {
            for b in 0..p {
                xtwx[(a, b)] += w * xi[a] * xi[b];
            }
        }
    }
    let cov = xtwx.inverse().ok();
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let fixed = params
        .names
        .iter()
        .zip(&params.coefficients)
        .enumerate()
        .map(|(j, (name, &est))| {
            let se = cov.as_ref().map_or(f64::NAN, |c| c[(j, j)].max(0.0).sqrt());
            let z = est / se;
            FixedEffectRow {
                name: name.clone(),
                estimate: est,
                std_error: se,
                z_value: z,
                p_value: 2.0 * (1.0 - std_normal.cdf(z.abs())),
            }
        })
        .collect::<Vec<_>>();
    let loglik = log_likelihood(model, data)?;
    let family_params = match &extras[k] {
        ExtrasValue::Sigma2(_) | ExtrasValue::Phi(_) => 1,
        ExtrasValue::Chol(l) => l.rows() * (l.rows() + 1) / 2,
        ExtrasValue::None => 0,
    };
    let kk = fixed.len() + params.variance_components.len() + params.correlations.len() + family_params;
    Ok(Summary {
        formula: model.config.formula.clone(),
        outcome: params.outcome.clone(),
        family: fam.name().to_string(),
        n_obs: n,
        fixed,
        random: params.variance_components,
        correlations: params.correlations,
        sigma2_eps: params.sigma2_eps,
        loglik,
        k: kk,
        aic: aic(loglik, kk),
        bic: bic(loglik, kk, n),
    })
}

fn fmt_cell(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

impl Summary {
    pub const CSV_HEADER: [&'static str; 6] = ["section", "name", "value", "std_error", "z_value", "p_value"];

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut put = |rec: [String; 6]| w.write_record(&rec).map_err(|e| Error::Data(e.to_string()));
        put(Self::CSV_HEADER.map(String::from))?;
        for f in &self.fixed {
            put([
                "fixed".into(),
                f.name.clone(),
                fmt_cell(f.estimate),
                fmt_cell(f.std_error),
                fmt_cell(f.z_value),
                fmt_cell(f.p_value),
            ])?;
        }
        for r in &self.random {
            put([
                "random".into(),
                format!("{}:{}", r.group, r.slope),
                fmt_cell(r.variance),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        for (g, a, b, r) in &self.correlations {
            put([
                "correlation".into(),
                format!("{g}:{a}~{b}"),
                fmt_cell(*r),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        if let Some(s2) = self.sigma2_eps {
            put(["residual".into(), "sigma2".into(), fmt_cell(s2), String::new(), String::new(), String::new()])?;
        }
        for (name, v) in [
            ("loglik", self.loglik),
            ("aic", self.aic),
            ("bic", self.bic),
            ("k", self.k as f64),
            ("n", self.n_obs as f64),
        ] {
            put(["fit".into(), name.into(), fmt_cell(v), String::new(), String::new(), String::new()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    /// Plain-text rendering in the usual mixed-model layout.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("Formula: {}\nOutcome: {} ({})\n\n", self.formula, self.outcome, self.family));
        s.push_str("Random effects:\n");
        s.push_str(&format!(" {:<14} {:<14} {:>12} {:>10}\n", "Groups", "Name", "Variance", "Std.Dev."));
        for r in &self.random {
            s.push_str(&format!(" {:<14} {:<14} {:>12.5} {:>10.5}\n", r.group, r.slope, r.variance, r.variance.sqrt()));
        }
        if let Some(s2) = self.sigma2_eps {
            s.push_str(&format!(" {:<14} {:<14} {:>12.5} {:>10.5}\n", "Residual", "", s2, s2.sqrt()));
        }
        for (g, a, b, r) in &self.correlations {
            s.push_str(&format!(" Corr {g}: {a} ~ {b} = {r:.3}\n"));
        }
        s.push_str(&format!("Number of obs: {}\n\nFixed effects (approximate standard errors):\n", self.n_obs));
        s.push_str(&format!(" {:<14} {:>12} {:>12} {:>9} {:>10}\n", "", "Estimate", "Std. Error", "z value", "Pr(>|z|)"));
        for f in &self.fixed {
            s.push_str(&format!(
                " {:<14} {:>12.5} {:>12.5} {:>9.3} {:>10.4}\n",
                f.name, f.estimate, f.std_error, f.z_value, f.p_value
            ));
        }
        s.push_str(&format!(
            "\nlogLik {:.3}  AIC {:.3}  BIC {:.3}  (k = {})\n",
            self.loglik, self.aic, self.bic, self.k
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsem::GsemConfig;
    use crate::io::simulate::{simulate, LmmParams, SimSpec};
    use crate::model::ModelConfig;
    use crate::trainer::{fit, TrainConfig};
    use proptest::prelude::*;

    fn lmm(groups: usize, per: usize) -> ColumnTable {
        let p = LmmParams {
            n_groups: groups,
            per_group: per,
            ..Default::default()
        };
        simulate(&SimSpec::Lmm(p), 4).unwrap().data
    }

    fn config(formula: &str, hidden: Vec<usize>) -> ModelConfig {
        ModelConfig {
            gsem: GsemConfig {
                hidden_dims: hidden,
                ..Default::default()
            },
            ..ModelConfig::new(formula)
        }
    }

    fn trained(formula: &str, hidden: Vec<usize>, data: &ColumnTable) -> Model {
        let mut model = Model::build(config(formula, hidden), data, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            lr: 0.01,
            batch_size: 32,
            ..Default::default()
        };
        fit(&mut model, data, None, &cfg).unwrap();
        model
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.25), 1.75);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&[5.0], 0.3), 5.0);
    }

    #[test]
    fn additive_game_attributions() {
        // v(S) = sum of member weights plus one interaction split evenly
        let w = [1.0, -2.0, 0.5];
        let values: Vec<f64> = (0..8usize)
            .map(|m| {
                let base: f64 = (0..3).filter(|j| m & (1 << j) != 0).map(|j| w[j]).sum();
                base + if m & 3 == 3 { 0.6 } else { 0.0 }
            })
            .collect();
        let phi = shapley_from_values(3, &values);
        assert!((phi[0] - 1.3).abs() < 1e-12 && (phi[1] + 1.7).abs() < 1e-12 && (phi[2] - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn efficiency_and_null_player(vals in prop::collection::vec(-5.0f64..5.0, 8)) {
            // player 2 never changes the value: copy the lower half
            let mut v = vals.clone();
            for m in 4..8 { v[m] = v[m - 4]; }
            let phi = shapley_from_values(3, &v);
            prop_assert!((phi.iter().sum::<f64>() - (v[7] - v[0])).abs() < 1e-10);
            prop_assert!(phi[2].abs() < 1e-12);
        }

        #[test]
        fn symmetric_players_share_credit(vals in prop::collection::vec(-5.0f64..5.0, 8)) {
            // players 0 and 1 are interchangeable: v(S+0) = v(S+1)
            let mut v = vals.clone();
            v[2] = v[1];
            v[6] = v[5];
            let phi = shapley_from_values(3, &v);
            prop_assert!((phi[0] - phi[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn linearized_coefficients_match_finite_differences() {
        let data = lmm(6, 8);
        let model = trained("y ~ x1 + (1|group)", vec![6], &data);
        let p = extract_parameters(&model, &data, 0, 0).unwrap();
        assert_eq!(p.names, vec!["(Intercept)", "x1"]);
        let prepared = model.prepare(&data).unwrap();
        let bg = Background::means(&prepared.design);
        let row = population_row(&prepared.design, &bg).unwrap();
        let eval = |x: f64| {
            let mut r = row.clone();
            r.x_cont[(0, 0)] = x;
            theta_col(&model, r, &Default::default(), 0, 0).unwrap()[0]
        };
        let (x0, h) = (p.x_bar[0], 1e-5);
        let fd = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
        assert!((fd - p.coefficients[1]).abs() < 1e-6, "{fd} vs {}", p.coefficients[1]);
        assert!((p.coefficients[0] + p.coefficients[1] * x0 - eval(x0)).abs() < 1e-10);
        assert_eq!(p.variance_components.len(), 1);
        assert!(p.variance_components[0].variance > 0.0);
        assert!(p.sigma2_eps.unwrap() > 0.0);
    }

    #[test]
    fn exact_shap_is_efficient_and_sampled_agrees() {
        let data = lmm(5, 6);
        let model = trained("y ~ x1 + (1|group)", vec![6], &data);
        let exact = shapley_values(&model, &data, 0, 0, ShapMode::Exact, None, 0, 1).unwrap();
        assert_eq!(exact.features, vec!["x1"]);
        let pred = model.predict(&data).unwrap()[0].mean.col(0);
        for i in 0..exact.phi.len() {
            let s: f64 = exact.phi[i].iter().sum();
            assert!((exact.baseline[i] + s - exact.prediction[i]).abs() < 1e-10);
            assert!((exact.prediction[i] - pred[i]).abs() < 1e-10);
            let r: f64 = exact.random_phi[i].iter().sum();
            assert!(r.is_finite());
        }
        let sampled = shapley_values(&model, &data, 0, 0, ShapMode::Sampled, None, 4, 1).unwrap();
        // one player: every permutation gives the exact value
        for i in 0..exact.phi.len() {
            assert!((sampled.phi[i][0] - exact.phi[i][0]).abs() < 1e-10);
        }
        assert_eq!(exact.random_terms, vec!["(1 | group)"]);
        assert!(exact.to_csv().unwrap().starts_with("row,baseline,prediction,x1,(1 | group)"));
    }

    #[test]
    fn random_term_attribution_is_the_effect() {
        let data = lmm(5, 6);
        let model = trained("y ~ x1 + (1|group)", vec![], &data);
        let (_, phi) = shapley_random_effects(&model, &data, 0, 0).unwrap();
        let prepared = model.prepare(&data).unwrap();
        let full = theta_col(&model, prepared.design.clone(), &prepared.extra, 0, 0).unwrap();
        let mut off = prepared.design.clone();
        mask_random(&mut off, &[]);
        let pop = theta_col(&model, off, &prepared.extra, 0, 0).unwrap();
        for i in 0..phi.len() {
            assert!((phi[i][0] - (full[i] - pop[i])).abs() < 1e-10);
        }
    }

    fn zero_effects(model: &mut Model) {
        for name in model.params.names().to_vec() {
            if name.starts_with("re.") && name.ends_with(".mu") {
                model.params.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn decomposition_parts_and_icc() {
        let data = lmm(8, 10);
        let mut model = trained("y ~ x1 + (1|group)", vec![], &data);
        let d = variance_decomposition(&model, &data, 0).unwrap();
        let u = d.sigma2_u[0].variance;
        let s2 = d.sigma2_eps.unwrap();
        assert!(d.sigma2_fixed > 0.0 && u > 0.0 && !d.pseudo);
        assert!((d.icc["group"] - u / (u + s2)).abs() < 1e-12);
        assert!((d.r_squared - (1.0 - s2 / d.var_y)).abs() < 1e-12);
        zero_effects(&mut model);
        let d = variance_decomposition(&model, &data, 0).unwrap();
        assert_eq!(d.icc["group"], 0.0);
        let (_, phi) = shapley_random_effects(&model, &data, 0, 0).unwrap();
        assert!(phi.iter().all(|r| r[0] == 0.0));
    }

    #[test]
    fn decomposition_sums_and_recovers_half_icc() {
        let sim = simulate(
            &SimSpec::Lmm(LmmParams {
                n_groups: 80,
                per_group: 20,
                beta: vec![0.5, 1.0],
                sigma_u: 1.0,
                sigma_e: 1.0,
            }),
            31,
        )
        .unwrap();
        let mut model = Model::build(config("y ~ x1 + (1|group)", vec![]), &sim.data, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 150,
            lr: 0.02,
            batch_size: 100,
            ..Default::default()
        };
        fit(&mut model, &sim.data, None, &cfg).unwrap();
        let d = variance_decomposition(&model, &sim.data, 0).unwrap();
        let parts = d.sigma2_fixed + d.sigma2_u.iter().map(|c| c.variance).sum::<f64>();
        assert!((parts - d.var_prediction).abs() <= 0.02 * d.var_prediction, "{parts} vs {}", d.var_prediction);
        assert!((d.icc["group"] - 0.5).abs() <= 0.05, "icc {}", d.icc["group"]);
    }

    #[test]
    fn count_outcomes_report_pseudo_r_squared() {
        let data = lmm(6, 8);
        let counts: Vec<f64> = data.numeric("y").unwrap().iter().map(|v| v.abs().round()).collect();
        let mut t = ColumnTable::new().with_numeric("n", counts).unwrap();
        for c in ["x1", "group"] {
            t.push(c, data.get(c).unwrap().clone()).unwrap();
        }
        let mut cfg = config("n ~ x1 + (1|group)", vec![]);
        cfg.outcomes = vec![crate::families::OutcomeSpec::new("n", &["n"], Family::Poisson)];
        let model = Model::build(cfg, &t, 1).unwrap();
        let d = variance_decomposition(&model, &t, 0).unwrap();
        assert!(d.pseudo && d.sigma2_eps.is_none() && d.icc.is_empty());
        assert!(d.r_squared.is_finite() && d.r_squared <= 1.0);
    }

    #[test]
    fn additive_model_attributions_are_weighted_deviations() {
        let sim = simulate(
            &SimSpec::Lmm(LmmParams {
                n_groups: 4,
                per_group: 6,
                beta: vec![1.0, 2.0, -0.5],
                ..Default::default()
            }),
            5,
        )
        .unwrap();
        let model = trained("y ~ x1 + x2 + (1|group)", vec![], &sim.data);
        let w = extract_parameters(&model, &sim.data, 0, 0).unwrap();
        let rep = shapley_values(&model, &sim.data, 0, 0, ShapMode::Exact, None, 0, 0).unwrap();
        let x = [sim.data.numeric("x1").unwrap(), sim.data.numeric("x2").unwrap()];
        for i in 0..sim.data.n_rows() {
            for j in 0..2 {
                let expect = w.coefficients[j + 1] * (x[j][i] - w.x_bar[j]);
                assert!((rep.phi[i][j] - expect).abs() < 1e-9, "{} vs {expect}", rep.phi[i][j]);
            }
        }
        let sampled = shapley_values(&model, &sim.data, 0, 0, ShapMode::Sampled, None, 8, 2).unwrap();
        let se = sampled.phi_se.unwrap();
        for i in 0..sim.data.n_rows() {
            for j in 0..2 {
                // additive game: every permutation gives the exact value
                assert!((sampled.phi[i][j] - rep.phi[i][j]).abs() < 1e-9 && se[i][j] < 1e-9);
            }
        }
    }

    #[test]
    fn exact_mode_rejects_too_many_features() {
        let mut t = ColumnTable::new().with_numeric("y", vec![0.0, 1.0, 2.0]).unwrap();
        let mut terms = Vec::new();
        for j in 0..13 {
            t = t.with_numeric(&format!("f{j}"), vec![0.0, 1.0, j as f64]).unwrap();
            terms.push(format!("f{j}"));
        }
        let model = Model::build(config(&format!("y ~ {}", terms.join(" + ")), vec![]), &t, 0).unwrap();
        assert!(shapley_values(&model, &t, 0, 0, ShapMode::Exact, None, 0, 0).is_err());
    }

    #[test]
    fn point_predictions_follow_row_order() {
        let data = lmm(4, 5);
        let model = trained("y ~ x1 + (1|group)", vec![4], &data);
        let order: Vec<usize> = (0..data.n_rows()).rev().collect();
        let a = predict_point(&model, &data).unwrap()[0].mean.col(0);
        let b = predict_point(&model, &data.take(&order)).unwrap()[0].mean.col(0);
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(a[i], b[k]);
        }
    }

    #[test]
    fn linear_summary_matches_normal_equations() {
        let n = 60;
        let x1: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let x2: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).cos()).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x1[i] - x2[i] + 0.05 * (i as f64 * 1.3).sin()).collect();
        let data = ColumnTable::new()
            .with_numeric("y", y.clone())
            .unwrap()
            .with_numeric("x1", x1.clone())
            .unwrap()
            .with_numeric("x2", x2.clone())
            .unwrap();
        let x = Mat::from_fn(n, 3, |i, j| [1.0, x1[i], x2[i]][j]);
        let xty = x.transpose().matmul(&Mat::from_vec(n, 1, y).unwrap()).unwrap();
        let ols = x.transpose().matmul(&x).unwrap().solve(&xty).unwrap().col(0);
        let mut model = Model::build(config("y ~ x1 + x2", vec![]), &data, 1).unwrap();
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: n,
            epochs: 2000,
            lambda_sparse: 0.0,
            lambda_dag: 0.0,
            ..Default::default()
        };
        fit(&mut model, &data, None, &cfg).unwrap();
        let s = summary(&model, &data, 0, 0).unwrap();
        for (row, b) in s.fixed.iter().zip(&ols) {
            assert!((row.estimate - b).abs() < 1e-3, "{} {} vs {b}", row.name, row.estimate);
        }
    }

    #[test]
    fn information_criteria_on_fixed_inputs() {
        assert_eq!(aic(-10.0, 3), 26.0);
        assert!((bic(-10.0, 3, 100) - (3.0 * 100f64.ln() + 20.0)).abs() < 1e-12);
    }

    #[test]
    fn summary_csv_layout_is_stable() {
        let s = Summary {
            formula: "y ~ x + (1 | g)".into(),
            outcome: "y".into(),
            family: "gaussian".into(),
            n_obs: 10,
            fixed: vec![FixedEffectRow {
                name: "x".into(),
                estimate: 1.5,
                std_error: 0.5,
                z_value: 3.0,
                p_value: 0.25,
            }],
            random: vec![VarianceComponent {
                group: "g".into(),
                slope: "(Intercept)".into(),
                variance: 0.75,
            }],
            correlations: vec![("g".into(), "(Intercept)".into(), "x".into(), -0.5)],
            sigma2_eps: Some(0.125),
            loglik: -4.0,
            k: 4,
            aic: 16.0,
            bic: 17.5,
        };
        let golden = "section,name,value,std_error,z_value,p_value\n\
                      fixed,x,1.5,0.5,3,0.25\n\
                      random,g:(Intercept),0.75,,,\n\
                      correlation,g:(Intercept)~x,-0.5,,,\n\
                      residual,sigma2,0.125,,,\n\
                      fit,loglik,-4,,,\n\
                      fit,aic,16,,,\n\
                      fit,bic,17.5,,,\n\
                      fit,k,4,,,\n\
                      fit,n,10,,,\n";
        assert_eq!(s.to_csv().unwrap(), golden);
        let back: Summary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn degenerate_and_nested_intervals() {
        let data = lmm(4, 5);
        let mut model = trained("y ~ x1 + (1|group)", vec![4], &data);
        let wide = &predict_interval(&model, &data, 300, 0.05, true, 1).unwrap()[0];
        let narrow = &predict_interval(&model, &data, 300, 0.2, true, 1).unwrap()[0];
        for i in 0..wide.point.rows() {
            assert!(wide.lower[(i, 0)] <= narrow.lower[(i, 0)] && narrow.upper[(i, 0)] <= wide.upper[(i, 0)]);
        }
        for name in model.params.names().to_vec() {
            if name.ends_with(".log_var") {
                model.params.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = -800.0);
            }
        }
        let iv = &predict_interval(&model, &data, 20, 0.1, false, 1).unwrap()[0];
        for i in 0..iv.point.rows() {
            assert_eq!(iv.lower[(i, 0)], iv.point[(i, 0)]);
            assert_eq!(iv.upper[(i, 0)], iv.point[(i, 0)]);
        }
    }

    #[test]
    fn intervals_bracket_and_are_reproducible() {
        let data = lmm(4, 5);
        let model = trained("y ~ x1 + (1|group)", vec![4], &data);
        let a = predict_interval(&model, &data, 200, 0.1, true, 3).unwrap();
        let b = predict_interval(&model, &data, 200, 0.1, true, 3).unwrap();
        assert_eq!(a, b);
        let iv = &a[0];
        for i in 0..iv.point.rows() {
            assert!(iv.lower[(i, 0)] < iv.upper[(i, 0)]);
            assert!(iv.lower[(i, 0)] <= iv.point[(i, 0)] && iv.point[(i, 0)] <= iv.upper[(i, 0)]);
        }
        let narrow = predict_interval(&model, &data, 200, 0.1, false, 3).unwrap();
        let width = |p: &PredictionInterval| (0..p.point.rows()).map(|i| p.upper[(i, 0)] - p.lower[(i, 0)]).sum::<f64>();
        assert!(width(&narrow[0]) < width(iv));
        assert!(predict_interval(&model, &data, 0, 0.1, true, 3).is_err());
    }

    #[test]
    fn summary_table_and_information_criteria() {
        let data = lmm(6, 8);
        let model = trained("y ~ x1 + (1|group)", vec![], &data);
        let s = summary(&model, &data, 0, 0).unwrap();
        assert_eq!(s.fixed.len(), 2);
        // two coefficients, one variance component, the residual
        assert_eq!(s.k, 4);
        assert!((s.aic - (8.0 - 2.0 * s.loglik)).abs() < 1e-9);
        assert!((s.bic - (4.0 * 48f64.ln() - 2.0 * s.loglik)).abs() < 1e-9);
        for f in &s.fixed {
            assert!(f.std_error > 0.0 && (0.0..=1.0).contains(&f.p_value));
        }
        let csv = s.to_csv().unwrap();
        assert!(csv.starts_with("section,name,value,std_error,z_value,p_value\n"));
        assert!(csv.contains("random,group:(Intercept)") || csv.contains("random,group:"));
        assert!(s.render().contains("Fixed effects"));
    }

    #[test]
    fn edge_importance_scales_with_gradient() {
        let data = lmm(4, 5);
        let mut cfg = config("y ~ x1 + (1|group)", vec![4]);
        cfg.gsem.structure = crate::gsem::StructureMode::Static;
        let model = Model::build(cfg, &data, 2).unwrap();
        let prepared = model.prepare(&data).unwrap();
        let edges = edge_importance(&model, &prepared, 0, 0).unwrap();
        assert!(edges.iter().all(|e| e.importance >= 0.0 && e.layer == "gsem.0"));
    }
}
