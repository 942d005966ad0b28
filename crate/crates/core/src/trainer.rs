//! Training loop: objective assembly, Adam, clipping, schedulers and early
//! stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{center_tables, Stochastic, UnknownStrategy};
use crate::error::{Error, Result};
use crate::families::{nll_tape, Targets};
use crate::gsem::GsemStats;
use crate::io::table::ColumnTable;
use crate::model::{Model, Prepared};

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Vec<usize>]) -> Self {
        let zeros = |s: &Vec<usize>| vec![0.0; s.iter().product()];
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[Tensor<f64>]) -> Self {
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        Adam::new(lr, &shapes)
    }

    pub fn step(&mut self, params: &mut [Tensor<f64>], grads: &[Tensor<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Appends zero moments for rows added to parameter `k` (warm starts).
    pub fn resize(&mut self, k: usize, numel: usize) {
        self.m[k].resize(numel, 0.0);
        self.v[k].resize(numel, 0.0);
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied.
pub fn clip_gradients(grads: &mut [Tensor<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let f = max_norm / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= f);
    }
    f
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    #[default]
    None,
    Plateau,
    Cosine,
}

/// Learning-rate schedule state.
#[derive(Clone, Debug, PartialEq)]
pub struct Scheduler {
    kind: SchedulerKind,
    base_lr: f64,
    epochs: usize,
    best: f64,
    bad: usize,
}

const PLATEAU_FACTOR: f64 = 0.5;
const PLATEAU_PATIENCE: usize = 10;
const MIN_LR: f64 = 1e-5;

impl Scheduler {
    pub fn new(kind: SchedulerKind, base_lr: f64, epochs: usize) -> Self {
        Scheduler {
            kind,
            base_lr,
            epochs,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Learning rate for the epoch after `epoch` given its monitored loss.
    pub fn next_lr(&mut self, epoch: usize, current_lr: f64, monitored: f64) -> f64 {
        match self.kind {
            SchedulerKind::None => current_lr,
            SchedulerKind::Plateau => {
                if monitored < self.best {
                    self.best = monitored;
                    self.bad = 0;
                    current_lr
                } else {
                    self.bad += 1;
                    if self.bad > PLATEAU_PATIENCE {
                        self.bad = 0;
                        (current_lr * PLATEAU_FACTOR).max(MIN_LR)
                    } else {
                        current_lr
                    }
                }
            }
            SchedulerKind::Cosine => {
                let t = ((epoch + 1) as f64 / self.epochs.max(1) as f64).min(1.0);
                MIN_LR + 0.5 * (self.base_lr - MIN_LR) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// `1 / mean group size` over the levels of all grouping factors.
pub fn kl_scale_auto(group_sizes: &[Vec<usize>]) -> f64 {
    let (total, count) = group_sizes
        .iter()
        .flatten()
        .fold((0usize, 0usize), |(t, c), &s| (t + s, c + 1));
    if total == 0 {
        1.0
    } else {
        count as f64 / total as f64
    }
}

/// KL weight: `"auto"` (inverse mean group size) or a fixed value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KlWeight {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Default for KlWeight {
    fn default() -> Self {
        KlWeight::Auto(AutoTag::Auto)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_kl: KlWeight,
    pub lambda_dag: f64,
    pub lambda_contract: f64,
    pub lambda_sparse: f64,
    pub clip_norm: Option<f64>,
    pub patience: usize,
    pub scheduler: SchedulerKind,
    pub seed: u64,
    /// Train on reparameterized draws of the random effects.
    pub sample_effects: bool,
    /// Fraction of rows routed to the unknown level each epoch when the
    /// learned unknown strategy is active.
    pub unknown_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 256,
            epochs: 100,
            lambda_kl: KlWeight::default(),
            lambda_dag: 0.1,
            lambda_contract: 0.0,
            lambda_sparse: 0.001,
            clip_norm: None,
            patience: 20,
            scheduler: SchedulerKind::None,
            seed: 0,
            sample_effects: true,
            unknown_rate: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_dag", self.lambda_dag),
            ("lambda_contract", self.lambda_contract),
            ("lambda_sparse", self.lambda_sparse),
            ("lambda_kl", if let KlWeight::Fixed(v) = self.lambda_kl { v } else { 0.0 }),
        ];
        if let Some((name, v)) = lambdas.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(Error::Model(format!("{name} must be non-negative, got {v}")));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Model(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Model("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Model("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Model(format!("clip_norm must be positive, got {c}")));
            }
        }
        if !(0.0..=1.0).contains(&self.unknown_rate) {
            return Err(Error::Model(format!("unknown_rate {} outside [0, 1]", self.unknown_rate)));
        }
        Ok(())
    }
}

/// Weighted loss terms; `total` is their sum in field order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub nll: f64,
    pub kl: f64,
    pub dag: f64,
    pub contract: f64,
    pub sparse: f64,
    pub total: f64,
}

impl LossComponents {
    fn accumulate(&mut self, other: &LossComponents) {
        self.nll += other.nll;
        self.kl += other.kl;
        self.dag += other.dag;
        self.contract += other.contract;
        self.sparse += other.sparse;
        self.total += other.total;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Summed over the epoch's batches.
    pub train: LossComponents,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    /// Validation loss of the parameters before the first update.
    pub initial_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    /// Epoch whose parameters were kept (0 = the starting parameters).
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub lambda_kl: f64,
    pub fixed_point_failures: usize,
    /// Groups whose tables were left uncentered (non-exchangeable covariance).
    pub centering_skipped: Vec<String>,
}

impl FitReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Loss graph for one batch: `N * Σ_k w_k mean_nll_k + λ_kl KL b/N + penalties`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape<f64>,
    model: &Model,
    bound: &crate::params::Bound,
    batch: &Prepared,
    targets: &[Targets],
    n_total: usize,
    lambda_kl: f64,
    cfg: &TrainConfig,
    stoch: Option<&mut Stochastic<'_>>,
    stats: &mut GsemStats,
) -> Result<(Var, LossComponents)> {
    let out = model.forward(tape, bound, batch, stoch, stats)?;
    let n = n_total as f64;
    let b = batch.design.n as f64;
    let mut nlls = Vec::with_capacity(model.outcomes.len());
    for (k, o) in model.outcomes.iter().enumerate() {
        let m = nll_tape(tape, &o.family, out.thetas[k], out.extras[k], &targets[k])?;
        nlls.push(tape.scale(m, n * o.weight));
    }
    let nll = tape.add_all(&nlls)?;
    let kl = tape.scale(out.kl, lambda_kl * b / n);
    let mut terms = vec![nll, kl];
    let mut comps = LossComponents {
        nll: tape.item(nll),
        kl: tape.item(kl),
        ..Default::default()
    };
    for (pen, lambda, slot) in [
        (out.pens.dag, cfg.lambda_dag, &mut comps.dag),
        (out.pens.contract, cfg.lambda_contract, &mut comps.contract),
        (out.pens.sparse, cfg.lambda_sparse, &mut comps.sparse),
    ] {
        if let Some(p) = pen {
            if lambda > 0.0 {
                let v = tape.scale(p, lambda);
                *slot = tape.item(v);
                terms.push(v);
            }
        }
    }
    let total = tape.add_all(&terms)?;
    comps.total = tape.item(total);
    Ok((total, comps))
}

/// Eval-mode validation loss: `Σ_k w_k mean_nll_k`.
pub fn validation_loss(model: &Model, prepared: &Prepared, targets: &[Targets]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut stats = GsemStats::default();
    let out = model.forward(&mut tape, &bound, prepared, None, &mut stats)?;
    let mut total = 0.0;
    for (k, o) in model.outcomes.iter().enumerate() {
        let m = nll_tape(&mut tape, &o.family, out.thetas[k], out.extras[k], &targets[k])?;
        total += o.weight * tape.item(m);
    }
    Ok(total)
}

fn as_nan_loss(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NanLoss { epoch, batch },
        other => other,
    }
}

/// Runs the training loop on the model's current parameters.
pub fn fit(model: &mut Model, train: &ColumnTable, val: Option<&ColumnTable>, cfg: &TrainConfig) -> Result<FitReport> {
    fit_logged(model, train, val, cfg, None)
}

/// [`fit`] that also streams one JSON object per epoch to `log`.
pub fn fit_logged(
    model: &mut Model,
    train: &ColumnTable,
    val: Option<&ColumnTable>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.n_rows() == 0 {
        return Err(Error::Data("training data is empty".into()));
    }
    let prepared = model.prepare(train)?;
    let targets = model.targets(train)?;
    let val_set = match val {
        Some(v) if v.n_rows() > 0 => Some((model.prepare(v)?, model.targets(v)?)),
        _ => None,
    };
    let n = prepared.design.n;
    let lambda_kl = match cfg.lambda_kl {
        KlWeight::Fixed(v) => v,
        KlWeight::Auto(_) => kl_scale_auto(&prepared.design.group_sizes()),
    };
    let mut rng = crate::rng(cfg.seed);
    let mut adam = Adam::for_params(cfg.lr, model.params.values());
    let mut scheduler = Scheduler::new(cfg.scheduler, cfg.lr, cfg.epochs);
    let mut report = FitReport {
        lambda_kl,
        ..Default::default()
    };
    let mut best_params = model.params.clone();
    let mut best = f64::INFINITY;
    if let Some((vp, vt)) = &val_set {
        best = validation_loss(model, vp, vt)?;
        report.initial_val_loss = Some(best);
        report.best_val_loss = Some(best);
    }
    let mut bad_epochs = 0;
    let learned_unknown = model.encoder.cfg.unknown_strategy == UnknownStrategy::Learned;
    let mut order: Vec<usize> = (0..n).collect();
    let mut lr = cfg.lr;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossComponents::default();
        let mut stats = GsemStats::default();
        for (bi, rows) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = Prepared {
                design: prepared.design.take(rows),
                extra: prepared.extra.clone(),
            };
            if learned_unknown && cfg.unknown_rate > 0.0 {
                for (t, idx) in batch.design.group_index.iter_mut().enumerate() {
                    let sentinel = batch.design.n_levels[t];
                    for g in idx.iter_mut() {
                        if rng.random::<f64>() < cfg.unknown_rate {
                            *g = sentinel;
                        }
                    }
                }
            }
            let bt: Vec<Targets> = targets.iter().map(|t| t.take(rows)).collect();
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let mut stoch = Stochastic {
                rng: &mut rng,
                sample_effects: cfg.sample_effects,
                dropout: true,
            };
            let (loss, comps) =
                total_loss(&mut tape, model, &bound, &batch, &bt, n, lambda_kl, cfg, Some(&mut stoch), &mut stats)
                    .map_err(|e| as_nan_loss(e, epoch, bi))?;
            if !comps.total.is_finite() {
                return Err(Error::NanLoss { epoch, batch: bi });
            }
            tape.backward(loss).map_err(|e| as_nan_loss(e, epoch, bi))?;
            let mut grads = bound.grads(&tape);
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NanLoss { epoch, batch: bi });
            }
            if let Some(c) = cfg.clip_norm {
                clip_gradients(&mut grads, c);
            }
            adam.lr = lr;
            adam.step(model.params.values_mut(), &grads);
            let skipped = center_tables(&mut model.params, &model.encoder);
            if epoch == 1 && bi == 0 {
                report.centering_skipped = skipped;
            }
            epoch_loss.accumulate(&comps);
        }
        report.fixed_point_failures += stats.fixed_point_failures;
        let val_loss = match &val_set {
            Some((vp, vt)) => Some(validation_loss(model, vp, vt)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train: epoch_loss,
            val_loss,
            lr,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::Io {
                path: "<log>".into(),
                source: e,
            })?;
        }
        report.epochs.push(record);
        report.stopped_epoch = epoch;
        lr = scheduler.next_lr(epoch, lr, val_loss.unwrap_or(epoch_loss.total));
        if let Some(v) = val_loss {
            if v < best {
                best = v;
                report.best_val_loss = Some(v);
                report.best_epoch = epoch;
                best_params = model.params.clone();
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs >= cfg.patience {
                    report.early_stopped = true;
                    break;
                }
            }
        }
    }
    if val_set.is_some() {
        model.params = best_params;
    } else {
        report.best_epoch = report.stopped_epoch;
    }
    Ok(report)
}

/// Continues training a loaded model; group levels unseen so far are
/// appended to its tables first.
pub fn warm_start_fit(model: &mut Model, train: &ColumnTable, val: Option<&ColumnTable>, cfg: &TrainConfig) -> Result<FitReport> {
    let mut rng = crate::rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    model.extend_levels(train, &mut rng)?;
    fit(model, train, val, cfg)
}
