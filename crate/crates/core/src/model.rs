//! Model assembly: encoder, backbone, outcome heads and output SEM bound to
//! one parameter store.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::covariance::{henderson_predict, CovarianceSpec, LevelCorrelation};
use crate::encoder::{self, cov_raw_name, encode, EncoderConfig, EncoderLayout, ExtraRows, Stochastic};
use crate::error::{Error, Result};
use crate::families::{
    edges_matrix, encode_targets, head_forward, mean_response, output_sem, parameter_axis, resolve_edges,
    validate_outcomes, ExtrasValue, Family, HeadExtras, OutcomeSpec, OutputSem, OutputSemLayout, Targets,
};
use crate::formula::{build_design, build_design_with, parse_formula, CatDesign, DesignMatrices, FormulaAst, Vocabulary};
use crate::gsem::{dag_penalty, gsem_forward, sparse_penalty, GsemConfig, GsemLayout, GsemStats, Penalties};
use crate::io::table::{ColumnTable, LevelMap, Schema};
use crate::linalg::Mat;
use crate::manifold::{manifold_forward, Aggregation, ManifoldBlockConfig, ManifoldLayout};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Gsem,
    Manifold,
}

/// Everything needed to build a model, as read from a JSON config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub formula: String,
    /// Empty means one Gaussian outcome per formula response.
    pub outcomes: Vec<OutcomeSpec>,
    pub schema: Schema,
    /// Covariance structure per grouping column.
    pub covariances: BTreeMap<String, CovarianceSpec>,
    pub encoder: EncoderConfig,
    pub architecture: Architecture,
    pub gsem: GsemConfig,
    pub manifold_configs: Vec<ManifoldBlockConfig>,
    pub aggregation: Aggregation,
    pub output_sem: OutputSem,
}

impl ModelConfig {
    pub fn new(formula: &str) -> Self {
        ModelConfig {
            formula: formula.to_string(),
            ..Default::default()
        }
    }

    /// Outcomes as configured, or Gaussian defaults for the responses.
    pub fn resolved_outcomes(&self, ast: &FormulaAst) -> Result<Vec<OutcomeSpec>> {
        let out = if self.outcomes.is_empty() {
            if ast.responses.is_empty() {
                return Err(Error::Model("formula has no response and no outcomes are configured".into()));
            }
            ast.responses
                .iter()
                .map(|r| OutcomeSpec::new(r, &[r.as_str()], Family::Gaussian))
                .collect()
        } else {
            self.outcomes.clone()
        };
        validate_outcomes(&out)?;
        Ok(out)
    }
}

/// Data-derived state that fixes the parameter shapes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub vocab: Vocabulary,
    pub cont_names: Vec<String>,
    pub target_levels: Vec<Option<LevelMap>>,
    /// Per random term: one coordinate row per level (GP terms only).
    pub level_coords: Vec<Option<Vec<Vec<f64>>>>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Gsem(GsemLayout),
    Manifold(ManifoldLayout),
}

impl Backbone {
    pub fn out_dim(&self) -> usize {
        match self {
            Backbone::Gsem(g) => g.out_dim(),
            Backbone::Manifold(m) => m.out_dim(),
        }
    }
}

/// A design plus the rows appended to random-effect tables for levels that
/// are new but predictable (kinship or GP relatives of training levels).
#[derive(Clone, Debug)]
pub struct Prepared {
    pub design: DesignMatrices,
    pub extra: ExtraRows,
}

pub struct ForwardOut {
    /// Per outcome, `n x width` raw parameters.
    pub thetas: Vec<Var>,
    pub extras: Vec<HeadExtras>,
    pub hidden: Var,
    pub kl: Var,
    pub pens: Penalties,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutcomePrediction {
    pub outcome: String,
    pub family: Family,
    /// Raw head output, `n x width`.
    pub theta: Mat<f64>,
    /// Distribution-scale prediction (mean or class probabilities).
    pub mean: Mat<f64>,
    /// Argmax class for multinomial, thresholded label for binomial.
    pub class: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub ast: FormulaAst,
    pub outcomes: Vec<OutcomeSpec>,
    pub meta: ModelMeta,
    pub encoder: EncoderLayout,
    pub backbone: Backbone,
    pub output_sem: Option<OutputSemLayout>,
    pub params: ParamStore,
}

fn head_name(k: usize, what: &str) -> String {
    format!("head.{k}.{what}")
}

fn group_labels(data: &ColumnTable, group: &str) -> Result<Vec<String>> {
    let col = data.get(group)?;
    (0..data.n_rows())
        .map(|i| {
            col.label(i).ok_or_else(|| Error::Column {
                column: group.to_string(),
                msg: format!("grouping column has a missing value at row {i}"),
            })
        })
        .collect()
}

/// First-occurrence coordinates of each level in `map`.
fn level_coordinates(data: &ColumnTable, group: &str, coords: &[String], map: &LevelMap) -> Result<Vec<Vec<f64>>> {
    let labels = group_labels(data, group)?;
    let cols: Vec<Vec<f64>> = coords.iter().map(|c| data.numeric(c)).collect::<Result<_>>()?;
    let mut out: Vec<Option<Vec<f64>>> = vec![None; map.len()];
    for (i, l) in labels.iter().enumerate() {
        if let Some(id) = map.get(l) {
            if out[id].is_none() {
                out[id] = Some(cols.iter().map(|c| c[i]).collect());
            }
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(id, c)| c.ok_or_else(|| Error::Data(format!("no coordinates for level {id} of {group:?}"))))
        .collect()
}

fn kinship_submatrix(ids: &[String], matrix: &[Vec<f64>], rows: &[String], cols: &[String]) -> Result<Mat<f64>> {
    let pos = |label: &String| {
        ids.iter()
            .position(|i| i == label)
            .ok_or_else(|| Error::Model(format!("individual {label:?} missing from the kinship matrix")))
    };
    let r: Vec<usize> = rows.iter().map(pos).collect::<Result<_>>()?;
    let c: Vec<usize> = cols.iter().map(pos).collect::<Result<_>>()?;
    if matrix.len() != ids.len() || matrix.iter().any(|row| row.len() != ids.len()) {
        return Err(Error::Model(format!("kinship matrix must be {0} x {0}", ids.len())));
    }
    Ok(Mat::from_fn(r.len(), c.len(), |i, j| matrix[r[i]][c[j]]))
}

fn skeleton_design(ast: &FormulaAst, schema: &Schema, meta: &ModelMeta) -> Result<DesignMatrices> {
    let mut x_cat = Vec::new();
    for name in ast.fixed_columns() {
        if schema.is_categorical(name) {
            let map = meta
                .vocab
                .categorical
                .get(name)
                .ok_or_else(|| Error::Model(format!("no level map for categorical {name:?}")))?;
            x_cat.push(CatDesign {
                name: name.to_string(),
                codes: Vec::new(),
                cardinality: map.len(),
            });
        }
    }
    let n_levels = ast
        .random
        .iter()
        .map(|t| {
            meta.vocab
                .groups
                .get(&t.group)
                .map(LevelMap::len)
                .ok_or_else(|| Error::Model(format!("no level map for group {:?}", t.group)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DesignMatrices {
        n: 0,
        intercept: ast.has_intercept(),
        cont_names: meta.cont_names.clone(),
        x_cont: Mat::zeros(0, meta.cont_names.len()),
        x_cat,
        z_slopes: ast.random.iter().map(|t| Mat::zeros(0, t.width())).collect(),
        group_index: vec![Vec::new(); ast.random.len()],
        n_levels,
        vocab: meta.vocab.clone(),
    })
}

impl Model {
    /// Builds a model against training data and initializes its parameters.
    pub fn build(config: ModelConfig, data: &ColumnTable, seed: u64) -> Result<Model> {
        let ast = parse_formula(&config.formula)?;
        let outcomes = config.resolved_outcomes(&ast)?;
        let design = build_design(&ast, data, &config.schema)?;
        let mut target_levels = Vec::with_capacity(outcomes.len());
        let mut targets = Vec::with_capacity(outcomes.len());
        for o in &outcomes {
            let (t, lv) = encode_targets(o, data, None)?;
            targets.push(t);
            target_levels.push(lv);
        }
        let mut level_coords = Vec::with_capacity(ast.random.len());
        for term in &ast.random {
            level_coords.push(match config.covariances.get(&term.group) {
                Some(CovarianceSpec::Gp { coords, .. }) => {
                    Some(level_coordinates(data, &term.group, coords, &design.vocab.groups[&term.group])?)
                }
                _ => None,
            });
        }
        let meta = ModelMeta {
            vocab: design.vocab.clone(),
            cont_names: design.cont_names.clone(),
            target_levels,
            level_coords,
            seed,
        };
        let mut model = Model::assemble(config, meta, None)?;
        let mut rng = crate::rng(seed);
        model.init_params(&targets, &mut rng)?;
        Ok(model)
    }

    /// Rebuilds layouts from saved state. With `params` the store is used
    /// as is; otherwise it is left empty for [`Model::init_params`].
    pub fn assemble(config: ModelConfig, meta: ModelMeta, params: Option<ParamStore>) -> Result<Model> {
        let ast = parse_formula(&config.formula)?;
        let outcomes = config.resolved_outcomes(&ast)?;
        if meta.target_levels.len() != outcomes.len() {
            return Err(Error::Model("target level maps do not match the outcomes".into()));
        }
        let skel = skeleton_design(&ast, &config.schema, &meta)?;
        let covs = Model::level_correlations(&config, &ast, &meta)?;
        let encoder = EncoderLayout::new(&config.encoder, &ast, &skel, covs)?;
        let backbone = match config.architecture {
            Architecture::Gsem => Backbone::Gsem(GsemLayout::new(&config.gsem, encoder.out_dim())?),
            Architecture::Manifold => Backbone::Manifold(ManifoldLayout::new(
                config.manifold_configs.clone(),
                config.aggregation,
                encoder.out_dim(),
            )?),
        };
        let output_sem = match &config.output_sem {
            OutputSem::None => None,
            OutputSem::Learned => Some(resolve_edges(&outcomes, &[])?),
            OutputSem::Edges { edges } => Some(resolve_edges(&outcomes, edges)?),
        };
        Ok(Model {
            config,
            ast,
            outcomes,
            meta,
            encoder,
            backbone,
            output_sem,
            params: params.unwrap_or_default(),
        })
    }

    fn level_correlations(config: &ModelConfig, ast: &FormulaAst, meta: &ModelMeta) -> Result<Vec<Option<LevelCorrelation>>> {
        let mut out = Vec::with_capacity(ast.random.len());
        for (t, term) in ast.random.iter().enumerate() {
            let Some(spec) = config.covariances.get(&term.group) else {
                out.push(None);
                continue;
            };
            let levels = &meta.vocab.groups[&term.group];
            let n = levels.len();
            let lc = match spec {
                CovarianceSpec::Kinship { ids, matrix } => {
                    let k = kinship_submatrix(ids, matrix, levels.labels(), levels.labels())?;
                    LevelCorrelation::new(spec, n, None, Some(&k))?
                }
                CovarianceSpec::Gp { .. } => {
                    let rows = meta.level_coords.get(t).and_then(Option::as_ref).ok_or_else(|| {
                        Error::Model(format!("no level coordinates stored for {:?}", term.group))
                    })?;
                    let c = Mat::from_rows(rows)?;
                    LevelCorrelation::new(spec, n, Some(&c), None)?
                }
                _ => LevelCorrelation::new(spec, n, None, None)?,
            };
            out.push(Some(lc));
        }
        Ok(out)
    }

    /// Fresh parameters for every component; head biases start at the
    /// training targets' location.
    pub fn init_params<R: Rng + ?Sized>(&mut self, targets: &[Targets], rng: &mut R) -> Result<()> {
        let mut store = ParamStore::new();
        self.encoder.init_params(&mut store, rng)?;
        match &self.backbone {
            Backbone::Gsem(g) => g.init_params(&mut store, rng)?,
            Backbone::Manifold(m) => m.init_params(&mut store, rng)?,
        }
        let hd = self.backbone.out_dim();
        for (k, o) in self.outcomes.iter().enumerate() {
            let width = o.family.width();
            let bound = 1.0 / (hd as f64).sqrt();
            let w = (0..hd * width).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert(&head_name(k, "w"), Tensor::new(vec![hd, width], w)?)?;
            let (loc, scale2) = target_moments(targets.get(k), width);
            let b = match &o.family {
                Family::Gaussian => vec![loc[0]],
                Family::Mvgaussian { .. } => loc.clone(),
                Family::Poisson | Family::Negbin { .. } => vec![loc[0].max(1e-3).ln()],
                _ => vec![0.0; width],
            };
            store.insert(&head_name(k, "b"), Tensor::vector(b))?;
            match &o.family {
                Family::Gaussian => {
                    store.insert(&head_name(k, "log_s2"), Tensor::scalar(scale2[0].max(1e-6).ln()))?;
                }
                Family::Negbin { phi_init } => {
                    store.insert(&head_name(k, "log_phi"), Tensor::scalar(phi_init.ln()))?;
                }
                Family::Mvgaussian { n_outcomes } => {
                    let m = *n_outcomes;
                    store.insert(&head_name(k, "chol_off"), Tensor::zeros(&[m, m]))?;
                    let ld = (0..m).map(|j| 0.5 * scale2.get(j).copied().unwrap_or(1.0).max(1e-6).ln()).collect();
                    store.insert(&head_name(k, "chol_log_diag"), Tensor::vector(ld))?;
                }
                _ => {}
            }
        }
        if let Some(layout) = &self.output_sem {
            match &self.config.output_sem {
                OutputSem::Learned => store.insert("osem.b", Tensor::zeros(&[layout.dim, layout.dim]))?,
                OutputSem::Edges { .. } if layout.n_free > 0 => {
                    store.insert("osem.free", Tensor::zeros(&[layout.n_free]))?
                }
                _ => {}
            }
        }
        self.params = store;
        Ok(())
    }

    pub fn head_in_dim(&self) -> usize {
        self.backbone.out_dim()
    }

    /// Design for new data under the training vocabulary. Rows of unseen
    /// levels that the covariance can place (kinship ids, GP coordinates)
    /// receive Henderson predictions.
    pub fn prepare(&self, data: &ColumnTable) -> Result<Prepared> {
        let mut design = build_design_with(&self.ast, data, &self.config.schema, &self.meta.vocab)?;
        let mut extra = ExtraRows::new();
        for (t, term) in self.ast.random.iter().enumerate() {
            let n_levels = design.n_levels[t];
            if !design.group_index[t].contains(&n_levels) {
                continue;
            }
            let Some(spec) = self.config.covariances.get(&term.group) else {
                continue;
            };
            let labels = group_labels(data, &term.group)?;
            let train = &self.meta.vocab.groups[&term.group];
            let mut new_labels: Vec<String> = Vec::new();
            let mut new_coords: Vec<Vec<f64>> = Vec::new();
            let coord_cols: Option<Vec<Vec<f64>>> = match spec {
                CovarianceSpec::Gp { coords, .. } => Some(coords.iter().map(|c| data.numeric(c)).collect::<Result<_>>()?),
                _ => None,
            };
            for (i, idx) in design.group_index[t].iter_mut().enumerate() {
                if *idx != n_levels {
                    continue;
                }
                let placeable = match spec {
                    CovarianceSpec::Kinship { ids, .. } => ids.contains(&labels[i]),
                    CovarianceSpec::Gp { .. } => true,
                    _ => false,
                };
                if !placeable {
                    continue;
                }
                let k = match new_labels.iter().position(|l| l == &labels[i]) {
                    Some(k) => k,
                    None => {
                        new_labels.push(labels[i].clone());
                        if let Some(cols) = &coord_cols {
                            new_coords.push(cols.iter().map(|c| c[i]).collect());
                        }
                        new_labels.len() - 1
                    }
                };
                *idx = n_levels + 1 + k;
            }
            if new_labels.is_empty() {
                continue;
            }
            let (k_nt, k_tt) = match spec {
                CovarianceSpec::Kinship { ids, matrix } => (
                    kinship_submatrix(ids, matrix, &new_labels, train.labels())?,
                    kinship_submatrix(ids, matrix, train.labels(), train.labels())?,
                ),
                CovarianceSpec::Gp { .. } => {
                    let cov = self.encoder.terms[t].cov.as_ref().expect("gp term has a correlation");
                    let raw = self.params.get(&cov_raw_name(t)).map(Tensor::item);
                    let ell = raw.and_then(|r| cov.natural(r)).unwrap_or(1.0);
                    let train_c = self.meta.level_coords[t].as_ref().expect("gp coordinates");
                    let k_nt = Mat::from_fn(new_coords.len(), train_c.len(), |a, b| {
                        let d2: f64 = new_coords[a].iter().zip(&train_c[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                        (-d2 / (2.0 * ell * ell)).exp()
                    });
                    (k_nt, cov.correlation(raw)?)
                }
                _ => unreachable!("only kinship and gp terms are placeable"),
            };
            for (tt, s, table) in encoder::tables(&self.params, &self.encoder)? {
                if tt != t {
                    continue;
                }
                let u = table.effects(&self.encoder, &self.params, t)?;
                extra.insert((t, s), henderson_predict(&k_nt, &k_tt, &u)?);
            }
        }
        Ok(Prepared { design, extra })
    }

    pub fn targets(&self, data: &ColumnTable) -> Result<Vec<Targets>> {
        self.outcomes
            .iter()
            .zip(&self.meta.target_levels)
            .map(|(o, lv)| encode_targets(o, data, lv.as_ref()).map(|r| r.0))
            .collect()
    }

    /// One pass of encoder, backbone and heads.
    pub fn forward(
        &self,
        tape: &mut Tape<f64>,
        bound: &Bound,
        prepared: &Prepared,
        mut stoch: Option<&mut Stochastic<'_>>,
        stats: &mut GsemStats,
    ) -> Result<ForwardOut> {
        let enc = encode(tape, bound, &self.encoder, &prepared.design, &prepared.extra, stoch.as_deref_mut())?;
        let mut pens = Penalties::default();
        let hidden = match &self.backbone {
            Backbone::Gsem(g) => gsem_forward(tape, bound, g, enc.h, stoch, &mut pens, stats)?,
            Backbone::Manifold(m) => manifold_forward(tape, bound, m, enc.h)?,
        };
        let mut raws = Vec::with_capacity(self.outcomes.len());
        let mut extras = Vec::with_capacity(self.outcomes.len());
        for (k, o) in self.outcomes.iter().enumerate() {
            let w = bound.var(&head_name(k, "w"))?;
            let b = bound.var(&head_name(k, "b"))?;
            raws.push(head_forward(tape, hidden, w, b)?);
            extras.push(match o.family {
                Family::Gaussian => HeadExtras::LogSigma2(bound.var(&head_name(k, "log_s2"))?),
                Family::Negbin { .. } => HeadExtras::LogPhi(bound.var(&head_name(k, "log_phi"))?),
                Family::Mvgaussian { .. } => HeadExtras::Chol {
                    off: bound.var(&head_name(k, "chol_off"))?,
                    log_diag: bound.var(&head_name(k, "chol_log_diag"))?,
                },
                _ => HeadExtras::None,
            });
        }
        let thetas = match &self.output_sem {
            None => raws,
            Some(layout) => {
                let all = if raws.len() == 1 { raws[0] } else { tape.concat(&raws)? };
                let b = match &self.config.output_sem {
                    OutputSem::Learned => {
                        let raw = bound.var("osem.b")?;
                        let d = layout.dim;
                        let mask = Mat::from_fn(d, d, |i, j| if i == j { 0.0 } else { 1.0 });
                        let b = tape.mul_const(raw, Tensor::from_mat(&mask))?;
                        let dp = dag_penalty(tape, b)?;
                        add_penalty(tape, &mut pens.dag, dp)?;
                        let sp = sparse_penalty(tape, b);
                        add_penalty(tape, &mut pens.sparse, sp)?;
                        b
                    }
                    _ => edges_matrix(tape, layout, bound.get("osem.free"))?,
                };
                let th = output_sem(tape, all, b)?;
                let mut out = Vec::with_capacity(self.outcomes.len());
                let mut start = 0;
                for o in &self.outcomes {
                    let w = o.family.width();
                    out.push(tape.slice(th, start, start + w)?);
                    start += w;
                }
                out
            }
        };
        Ok(ForwardOut {
            thetas,
            extras,
            hidden,
            kl: enc.kl,
            pens,
        })
    }

    /// Learned extras of each head, off the tape.
    pub fn extras_values(&self) -> Result<Vec<ExtrasValue>> {
        self.outcomes
            .iter()
            .enumerate()
            .map(|(k, o)| {
                Ok(match o.family {
                    Family::Gaussian => ExtrasValue::Sigma2(self.params.require(&head_name(k, "log_s2"))?.item().exp()),
                    Family::Negbin { .. } => ExtrasValue::Phi(self.params.require(&head_name(k, "log_phi"))?.item().exp()),
                    Family::Mvgaussian { n_outcomes } => {
                        let off = self.params.require(&head_name(k, "chol_off"))?.to_mat()?;
                        let ld = self.params.require(&head_name(k, "chol_log_diag"))?;
                        let m = n_outcomes;
                        ExtrasValue::Chol(Mat::from_fn(m, m, |i, j| match i.cmp(&j) {
                            std::cmp::Ordering::Greater => off[(i, j)],
                            std::cmp::Ordering::Equal => ld.data()[i].exp(),
                            std::cmp::Ordering::Less => 0.0,
                        }))
                    }
                    _ => ExtrasValue::None,
                })
            })
            .collect()
    }

    /// Raw head outputs for one pass; `stoch = None` is the eval-mode pass.
    pub fn thetas(&self, prepared: &Prepared, stoch: Option<&mut Stochastic<'_>>) -> Result<Vec<Mat<f64>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut stats = GsemStats::default();
        let out = self.forward(&mut tape, &bound, prepared, stoch, &mut stats)?;
        out.thetas.iter().map(|&v| tape.value(v).to_mat()).collect()
    }

    pub fn predict_prepared(&self, prepared: &Prepared) -> Result<Vec<OutcomePrediction>> {
        let thetas = self.thetas(prepared, None)?;
        Ok(self
            .outcomes
            .iter()
            .zip(thetas)
            .map(|(o, theta)| {
                let n = theta.rows();
                let rows: Vec<Vec<f64>> = (0..n).map(|i| mean_response(&o.family, theta.row(i))).collect();
                let mean = Mat::from_fn(n, theta.cols(), |i, j| rows[i][j]);
                let class = match o.family {
                    Family::Multinomial { .. } => Some(
                        rows.iter()
                            .map(|r| {
                                r.iter()
                                    .enumerate()
                                    .fold((0, f64::NEG_INFINITY), |b, (j, &p)| if p > b.1 { (j, p) } else { b })
                                    .0
                            })
                            .collect(),
                    ),
                    Family::Binomial => Some(rows.iter().map(|r| usize::from(r[0] >= 0.5)).collect()),
                    _ => None,
                };
                OutcomePrediction {
                    outcome: o.name.clone(),
                    family: o.family.clone(),
                    theta,
                    mean,
                    class,
                }
            })
            .collect())
    }

    /// Eval-mode predictions: posterior-mean random effects, no dropout.
    pub fn predict(&self, data: &ColumnTable) -> Result<Vec<OutcomePrediction>> {
        let prepared = self.prepare(data)?;
        self.predict_prepared(&prepared)
    }

    /// Appends levels of `data` absent from the vocabulary to every table of
    /// their term. Returns `(group, added)` per term that grew.
    pub fn extend_levels(&mut self, data: &ColumnTable, rng: &mut dyn RngCore) -> Result<Vec<(String, usize)>> {
        let mut grown = Vec::new();
        let mut vocab = self.meta.vocab.clone();
        for term in &self.ast.random {
            let labels = group_labels(data, &term.group)?;
            let map = vocab.groups.entry(term.group.clone()).or_default();
            let before = map.len();
            for l in &labels {
                map.insert(l);
            }
            if map.len() > before {
                grown.push((term.group.clone(), map.len() - before));
            }
        }
        if grown.is_empty() {
            return Ok(grown);
        }
        let mut meta = self.meta.clone();
        meta.vocab = vocab;
        for (t, term) in self.ast.random.iter().enumerate() {
            if let Some(CovarianceSpec::Gp { coords, .. }) = self.config.covariances.get(&term.group) {
                let mut rows = self.meta.level_coords[t].clone().unwrap_or_default();
                let map = &meta.vocab.groups[&term.group];
                let fresh = level_coordinates(data, &term.group, coords, map)
                    .map_err(|_| Error::Data(format!("coordinates for new levels of {:?} are missing", term.group)))?;
                rows.extend(fresh.into_iter().skip(rows.len()));
                meta.level_coords[t] = Some(rows);
            }
        }
        let rebuilt = Model::assemble(self.config.clone(), meta, None)?;
        let normal = rand_distr::Normal::new(0.0, 0.01).expect("finite");
        let log_var0 = (0.1f64 * 0.1).ln();
        let mut store = self.params.clone();
        let d = self.encoder.d();
        for (t, term) in rebuilt.encoder.terms.iter().enumerate() {
            let old = self.encoder.terms[t].n_levels;
            if term.n_levels == old {
                continue;
            }
            let add = term.n_levels - old;
            for s in 0..term.slopes.len() {
                let mu_n = encoder::mu_name(t, s);
                let lv_n = encoder::log_var_name(t, s);
                let mut mu = store.require(&mu_n)?.data().to_vec();
                mu.extend((0..add * d).map(|_| rand_distr::Distribution::sample(&normal, rng)));
                store.replace(&mu_n, Tensor::new(vec![term.n_levels, d], mu)?)?;
                let mut lv = store.require(&lv_n)?.data().to_vec();
                lv.extend(std::iter::repeat_n(log_var0, add * d));
                store.replace(&lv_n, Tensor::new(vec![term.n_levels, d], lv)?)?;
            }
        }
        self.meta = rebuilt.meta;
        self.encoder = rebuilt.encoder;
        self.params = store;
        Ok(grown)
    }
}

fn add_penalty(tape: &mut Tape<f64>, slot: &mut Option<Var>, v: Var) -> Result<()> {
    *slot = Some(match *slot {
        Some(s) => tape.add(s, v)?,
        None => v,
    });
    Ok(())
}

/// Per-column mean and variance of a target (defaults when absent).
fn target_moments(t: Option<&Targets>, width: usize) -> (Vec<f64>, Vec<f64>) {
    let moments = |v: &[f64]| {
        let n = v.len().max(1) as f64;
        let m = v.iter().sum::<f64>() / n;
        let s2 = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        (m, if s2 > 0.0 { s2 } else { 1.0 })
    };
    match t {
        Some(Targets::Real(v)) if !v.is_empty() => {
            let (m, s2) = moments(v);
            (vec![m], vec![s2])
        }
        Some(Targets::Matrix(m)) if m.rows() > 0 => {
            let (a, b): (Vec<f64>, Vec<f64>) = (0..m.cols()).map(|j| moments(&m.col(j))).unzip();
            (a, b)
        }
        _ => (vec![0.0; width], vec![1.0; width]),
    }
}

/// Columns read by a model, for building prediction tables.
pub fn referenced_columns(model: &Model) -> Vec<String> {
    let mut cols = model.ast.referenced_columns();
    for o in &model.outcomes {
        for t in &o.targets {
            if !cols.contains(t) {
                cols.push(t.clone());
            }
        }
    }
    cols
}

/// Parameter axis names of the output SEM, when one is configured.
pub fn output_axis(model: &Model) -> Option<Vec<String>> {
    model.output_sem.as_ref().map(|_| parameter_axis(&model.outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsem::GsemConfig;
    use crate::io::simulate::{simulate, LmmParams, SimSpec};

    pub(crate) fn linear_config(formula: &str) -> ModelConfig {
        ModelConfig {
            gsem: GsemConfig {
                hidden_dims: vec![],
                ..Default::default()
            },
            encoder: EncoderConfig {
                embed_dim: 4,
                ..Default::default()
            },
            ..ModelConfig::new(formula)
        }
    }

    fn small_lmm() -> ColumnTable {
        let p = LmmParams {
            n_groups: 5,
            per_group: 4,
            ..Default::default()
        };
        simulate(&SimSpec::Lmm(p), 1).unwrap().data
    }

    #[test]
    fn build_forward_and_predict() {
        let data = small_lmm();
        let model = Model::build(linear_config("y ~ x1 + (1|group)"), &data, 3).unwrap();
        assert!(model.params.contains("head.0.log_s2"));
        let y = data.numeric("y").unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert_eq!(model.params.require("head.0.b").unwrap().item(), mean);
        let a = model.predict(&data).unwrap();
        let b = model.predict(&data).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].mean.rows(), 20);
        assert_eq!(a[0].outcome, "y");
        assert!(a[0].class.is_none());
    }

    #[test]
    fn unseen_group_with_zero_strategy_is_population_prediction() {
        let data = small_lmm();
        let model = Model::build(linear_config("y ~ x1 + (1|group)"), &data, 3).unwrap();
        let x1 = data.numeric("x1").unwrap()[..3].to_vec();
        let new = ColumnTable::new()
            .with_numeric("y", vec![0.0; 3])
            .unwrap()
            .with_numeric("x1", x1.clone())
            .unwrap()
            .with_text("group", vec!["zz", "zz", "yy"])
            .unwrap();
        let pred = model.predict(&new).unwrap();
        let pop = Model::build(linear_config("y ~ x1"), &data, 3).unwrap();
        // same encoder/head weights, no random term
        let mut pop_params = ParamStore::new();
        for (n, _) in pop.params.iter() {
            pop_params.insert(n, model.params.require(n).unwrap().clone()).unwrap();
        }
        let pop = Model { params: pop_params, ..pop };
        let pp = pop.predict(&new).unwrap();
        for i in 0..3 {
            assert!((pred[0].mean[(i, 0)] - pp[0].mean[(i, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn outcomes_default_and_validation() {
        let ast = parse_formula("a + b ~ x").unwrap();
        let outs = ModelConfig::new("a + b ~ x").resolved_outcomes(&ast).unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(outs[1].family, Family::Gaussian);
        let ast = parse_formula("~ x").unwrap();
        assert!(ModelConfig::new("~ x").resolved_outcomes(&ast).is_err());
    }

    fn kinship_data() -> (ColumnTable, CovarianceSpec) {
        let ids: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        // "e" duplicates "b" exactly, including its relationships
        let base = [
            [1.0, 0.5, 0.25, 0.0],
            [0.5, 1.0, 0.1, 0.2],
            [0.25, 0.1, 1.0, 0.3],
            [0.0, 0.2, 0.3, 1.0],
        ];
        let idx = [0, 1, 2, 3, 1];
        let matrix = (0..5).map(|i| (0..5).map(|j| base[idx[i]][idx[j]]).collect()).collect();
        let spec = CovarianceSpec::Kinship { ids, matrix };
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut g = Vec::new();
        for (k, id) in ["a", "b", "c", "d"].iter().enumerate() {
            for r in 0..3 {
                y.push(k as f64 + 0.1 * r as f64);
                x.push(r as f64);
                g.push(id.to_string());
            }
        }
        let data = ColumnTable::new()
            .with_numeric("y", y)
            .unwrap()
            .with_numeric("x", x)
            .unwrap()
            .with_text("id", g)
            .unwrap();
        (data, spec)
    }

    #[test]
    fn henderson_rows_for_new_kinship_individual() {
        let (data, spec) = kinship_data();
        let mut cfg = linear_config("y ~ x + (1|id)");
        cfg.covariances.insert("id".into(), spec.clone());
        let mut model = Model::build(cfg, &data, 5).unwrap();
        // give the table non-trivial values
        let mu = model.params.get_mut(&encoder::mu_name(0, 0)).unwrap();
        for (i, v) in mu.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let new = ColumnTable::new()
            .with_numeric("y", vec![0.0, 0.0])
            .unwrap()
            .with_numeric("x", vec![1.0, 1.0])
            .unwrap()
            .with_text("id", vec!["e", "b"])
            .unwrap();
        let prepared = model.prepare(&new).unwrap();
        assert_eq!(prepared.design.group_index[0], vec![5, 1]);
        let tables = encoder::tables(&model.params, &model.encoder).unwrap();
        let u = tables[0].2.effects(&model.encoder, &model.params, 0).unwrap();
        let extra = &prepared.extra[&(0, 0)];
        for j in 0..u.cols() {
            assert!((extra[(0, j)] - u[(1, j)]).abs() < 1e-8);
        }
        let pred = model.predict_prepared(&prepared).unwrap();
        assert!((pred[0].mean[(0, 0)] - pred[0].mean[(1, 0)]).abs() < 1e-8);
        // unknown individual without a kinship row falls back to the sentinel
        let other = new.take(&[0]);
        let mut cfg2 = model.config.clone();
        if let Some(CovarianceSpec::Kinship { ids, .. }) = cfg2.covariances.get_mut("id") {
            ids[4] = "zzz".into();
        }
        model.config = cfg2;
        assert_eq!(model.prepare(&other).unwrap().design.group_index[0], vec![4]);
    }

    #[test]
    fn extend_levels_appends_rows() {
        let data = small_lmm();
        let mut model = Model::build(linear_config("y ~ x1 + (1|group)"), &data, 3).unwrap();
        let before = model.params.require("re.0.0.mu").unwrap().clone();
        let new = data.take(&[0, 1]);
        assert!(model.extend_levels(&new, &mut crate::rng(1)).unwrap().is_empty());
        let fresh = ColumnTable::new()
            .with_numeric("y", vec![0.0; 3])
            .unwrap()
            .with_numeric("x1", vec![0.0; 3])
            .unwrap()
            .with_text("group", vec!["n1", "n2", "n1"])
            .unwrap();
        let grown = model.extend_levels(&fresh, &mut crate::rng(1)).unwrap();
        assert_eq!(grown, vec![("group".to_string(), 2)]);
        let after = model.params.require("re.0.0.mu").unwrap();
        assert_eq!(after.shape(), &[7, 4]);
        assert_eq!(&after.data()[..20], before.data());
        assert_eq!(model.encoder.terms[0].n_levels, 7);
        assert_eq!(model.prepare(&fresh).unwrap().design.group_index[0], vec![5, 6, 5]);
    }

    #[test]
    fn output_sem_edges_shift_parameters() {
        use crate::families::{Edge, EdgeWeight};
        let data = small_lmm().with_numeric("y2", vec![0.5; 20]).unwrap();
        let mut cfg = linear_config("y + y2 ~ x1");
        let plain = Model::build(cfg.clone(), &data, 2).unwrap();
        cfg.output_sem = OutputSem::Edges {
            edges: vec![Edge {
                from: "y.mu".into(),
                to: "y2.mu".into(),
                weight: Some(EdgeWeight::Fixed(2.0)),
            }],
        };
        let sem = Model::build(cfg, &data, 2).unwrap();
        let a = plain.predict(&data).unwrap();
        let b = sem.predict(&data).unwrap();
        for i in 0..20 {
            assert!((a[0].theta[(i, 0)] - b[0].theta[(i, 0)]).abs() < 1e-12);
            let want = a[1].theta[(i, 0)] + 2.0 * a[0].theta[(i, 0)];
            assert!((b[1].theta[(i, 0)] - want).abs() < 1e-12);
        }
        assert_eq!(output_axis(&sem).unwrap(), vec!["y.mu", "y2.mu"]);
    }
}
