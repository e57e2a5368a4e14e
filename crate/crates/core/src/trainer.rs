//! Training loop, optimizers, evaluation metrics and the harmonization probe.
//!
//! One step on a batch:
//! 1. every head `φ_t` takes an optimizer step on its own task loss;
//! 2. per-task trunk gradients `g_i` are computed with the updated heads;
//! 3. the configured strategy maps them to `ĝ_i`;
//! 4. the trunk takes one optimizer step on `Σ_i w_i ĝ_i`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_indices, make_batch, DataError, MultiTaskDataset};
use crate::gradmod::{
    cosine, transfer_exact, transfer_first_order, GradError, StepContext, StrategyConfig,
    TransferenceRecord,
};
use crate::model::{bce_mean, probabilities, ModelError, SharedBottomNet};
use crate::tensor::{DenseMatrix, ParamVector, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("probe did not converge for task {task}: gradient norm {grad_norm:.3e} after {iterations} iterations")]
    ProbeConvergence {
        task: usize,
        grad_norm: f64,
        iterations: usize,
    },
    #[error("probe failed: {0}")]
    Probe(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("length mismatch: {0}")]
    Length(String),
}

/// Bias-corrected Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(params: &ParamVector) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

pub fn adam_step(
    params: &ParamVector,
    grad: &ParamVector,
    state: &mut AdamState,
    eta: f64,
) -> std::result::Result<ParamVector, TensorError> {
    params.check_same_len(grad)?;
    params.check_same_len(&state.m)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut out = params.clone();
    for k in 0..params.len() {
        let g = grad.values[k];
        let m = b1 * state.m.values[k] + (1.0 - b1) * g;
        let v = b2 * state.v.values[k] + (1.0 - b2) * g * g;
        state.m.values[k] = m;
        state.v.values[k] = v;
        out.values[k] -= eta * (m / c1) / ((v / c2).sqrt() + state.eps_hat);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    fn new(kind: OptimizerKind, params: &ParamVector) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(params)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    fn step(&mut self, params: &ParamVector, grad: &ParamVector, eta: f64) -> Result<ParamVector> {
        match self {
            Optimizer::Adam(state) => Ok(adam_step(params, grad, state, eta)?),
            Optimizer::Sgd => {
                params.check_same_len(grad)?;
                let mut out = params.clone();
                out.axpy(-eta, grad);
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Steps(usize),
    Epochs(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossWeights {
    #[default]
    Uniform,
    /// Inverse label entropy of each task on the training split.
    Prior,
    Explicit(Vec<f64>),
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

fn default_transference_gamma() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "StrategyConfig::sum")]
    pub strategy: StrategyConfig,
    /// Validation metrics every this many steps; 0 disables.
    #[serde(default)]
    pub eval_every: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Step records every this many steps.
    #[serde(default = "default_one")]
    pub log_every: usize,
    /// Transference measurements every this many steps; 0 disables.
    #[serde(default)]
    pub transference_every: usize,
    #[serde(default = "default_transference_gamma")]
    pub transference_gamma: f64,
}

impl TrainConfig {
    pub fn new(schedule: Schedule, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            schedule,
            batch_size,
            learning_rate,
            loss_weights: LossWeights::Uniform,
            strategy: StrategyConfig::sum(),
            eval_every: 0,
            seed,
            optimizer: OptimizerKind::Adam,
            shuffle: true,
            log_every: 1,
            transference_every: 0,
            transference_gamma: 0.1,
        }
    }

    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if let LossWeights::Explicit(w) = &self.loss_weights {
            if w.len() != num_tasks {
                return Err(TrainError::Config(format!(
                    "{} loss weights given for {num_tasks} tasks",
                    w.len()
                )));
            }
            if w.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(TrainError::Config("loss weights must be positive".into()));
            }
        }
        if self.log_every == 0 {
            return Err(TrainError::Config("log_every must be positive".into()));
        }
        if self.transference_every > 0 && !(self.transference_gamma > 0.0) {
            return Err(TrainError::Config("transference_gamma must be positive".into()));
        }
        self.strategy.validate(num_tasks)?;
        Ok(())
    }
}

/// Index pairs `(i, j)` with `i < j`, in row-major order.
pub fn task_pairs(num_tasks: usize) -> Vec<(usize, usize)> {
    (0..num_tasks)
        .flat_map(|i| (i + 1..num_tasks).map(move |j| (i, j)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: Vec<f64>,
    /// Cosine of raw trunk gradients, one entry per [`task_pairs`] pair.
    pub cosine: Vec<f64>,
    /// Same, after the strategy.
    pub modified_cosine: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// AUC, or GAUC when the split has groups; NaN where undefined.
    pub metrics: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub num_tasks: usize,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub transference: Vec<TransferenceRecord>,
}

impl MetricsLog {
    /// Header: `step,loss_0..,cos_0_1..,mod_cos_0_1..`.
    pub fn write_steps_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let pairs = task_pairs(self.num_tasks);
        let mut header = vec!["step".to_string()];
        header.extend((0..self.num_tasks).map(|t| format!("loss_{t}")));
        header.extend(pairs.iter().map(|(i, j)| format!("cos_{i}_{j}")));
        header.extend(pairs.iter().map(|(i, j)| format!("mod_cos_{i}_{j}")));
        w.write_record(&header)?;
        for r in &self.steps {
            let mut row = vec![r.step.to_string()];
            row.extend(r.losses.iter().map(f64::to_string));
            row.extend(r.cosine.iter().map(f64::to_string));
            row.extend(r.modified_cosine.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Header: `step,metric_0..`.
    pub fn write_evals_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step".to_string()];
        header.extend((0..self.num_tasks).map(|t| format!("metric_{t}")));
        w.write_record(&header)?;
        for r in &self.evals {
            let mut row = vec![r.step.to_string()];
            row.extend(r.metrics.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Header: `step,source_task,target_task,exact_delta,first_order,gamma_used`.
    pub fn write_transference_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.transference {
            w.serialize(r)?;
        }
        if self.transference.is_empty() {
            w.write_record([
                "step",
                "source_task",
                "target_task",
                "exact_delta",
                "first_order",
                "gamma_used",
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Raw-gradient cosine of one pair across all step records.
    pub fn cosine_trace(&self, pair: usize) -> Vec<f64> {
        self.steps.iter().map(|r| r.cosine[pair]).collect()
    }
}

/// SplitMix64 finaliser; derives independent seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;

/// Resolves the configured loss weights against a training split.
pub fn resolve_loss_weights(weights: &LossWeights, train: &MultiTaskDataset) -> Result<Vec<f64>> {
    match weights {
        LossWeights::Uniform => Ok(vec![1.0; train.num_tasks()]),
        LossWeights::Prior => loss_weights_from_prior(train),
        LossWeights::Explicit(w) => Ok(w.clone()),
    }
}

/// Runs the training loop. Returns the trained network and its metrics.
pub fn train(
    net: SharedBottomNet,
    train_ds: &MultiTaskDataset,
    val_ds: Option<&MultiTaskDataset>,
    cfg: &TrainConfig,
) -> Result<(SharedBottomNet, MetricsLog)> {
    train_with_callback(net, train_ds, val_ds, cfg, |_, _| Ok(()))
}

/// [`train`], calling `after_step(step, net)` once each step is complete.
pub fn train_with_callback<F>(
    mut net: SharedBottomNet,
    train_ds: &MultiTaskDataset,
    val_ds: Option<&MultiTaskDataset>,
    cfg: &TrainConfig,
    mut after_step: F,
) -> Result<(SharedBottomNet, MetricsLog)>
where
    F: FnMut(usize, &SharedBottomNet) -> Result<()>,
{
    let num_tasks = net.num_tasks();
    cfg.validate(num_tasks)?;
    if train_ds.num_tasks() != num_tasks {
        return Err(TrainError::Config(format!(
            "dataset has {} tasks, network has {num_tasks}",
            train_ds.num_tasks()
        )));
    }
    if train_ds.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    let weights = resolve_loss_weights(&cfg.loss_weights, train_ds)?;
    let mut strategy = cfg.strategy.clone();
    strategy.reset();

    let mut theta_opt = Optimizer::new(cfg.optimizer, &net.theta());
    let mut phi_opts: Vec<Optimizer> = (0..num_tasks)
        .map(|t| Optimizer::new(cfg.optimizer, &net.phi(t)))
        .collect();

    let per_epoch = train_ds.len().div_ceil(cfg.batch_size);
    let total_steps = match cfg.schedule {
        Schedule::Steps(n) => n,
        Schedule::Epochs(e) => e * per_epoch,
    };
    let mut log = MetricsLog {
        num_tasks,
        ..MetricsLog::default()
    };
    let pairs = task_pairs(num_tasks);

    let mut epoch_batches: Vec<Vec<usize>> = Vec::new();
    for step in 1..=total_steps {
        let pos = (step - 1) % per_epoch;
        if pos == 0 {
            let epoch = ((step - 1) / per_epoch) as u64;
            let shuffle = cfg
                .shuffle
                .then(|| derive_seed(cfg.seed, SHUFFLE_STREAM, epoch));
            epoch_batches = batch_indices(train_ds.len(), cfg.batch_size, shuffle);
        }
        let batch = make_batch(train_ds, epoch_batches[pos].clone());
        let targets = batch.targets();

        // heads first, each on its own loss
        let (logits, cache) = forward_checked(&net, &batch.features, step)?;
        let losses: Vec<f64> = (0..num_tasks)
            .map(|t| bce_mean(&logits[t], &targets[t]))
            .collect();
        if let Some(t) = losses.iter().position(|l| !l.is_finite()) {
            return Err(TrainError::Divergence {
                step,
                detail: format!("non-finite loss for task {t}"),
            });
        }
        for t in 0..num_tasks {
            let (_, g_phi) = net.backward_task(&cache, &targets[t], t)?;
            let phi = phi_opts[t].step(&net.phi(t), &g_phi, cfg.learning_rate)?;
            check_finite(&phi, step, &format!("head {t}"))?;
            net.set_phi(t, &phi)?;
        }

        let (_, cache) = forward_checked(&net, &batch.features, step)?;
        let mut grads = Vec::with_capacity(num_tasks);
        for t in 0..num_tasks {
            let (g, _) = net.backward_task(&cache, &targets[t], t)?;
            check_finite(&g, step, &format!("trunk gradient of task {t}"))?;
            grads.push(g);
        }

        let theta = net.theta();
        if cfg.transference_every > 0 && step % cfg.transference_every == 0 {
            for i in 0..num_tasks {
                for j in (0..num_tasks).filter(|&j| j != i) {
                    let loss_j = |th: &ParamVector| {
                        net.task_loss_at(th, &batch.features, &targets[j], j)
                            .unwrap_or(f64::NAN)
                    };
                    let gamma = cfg.transference_gamma;
                    let exact = transfer_exact(loss_j, &theta, &grads[i], gamma)
                        .map_err(|e| TrainError::Divergence { step, detail: e.to_string() })?;
                    log.transference.push(TransferenceRecord {
                        step,
                        source_task: i,
                        target_task: j,
                        exact_delta: exact,
                        first_order: transfer_first_order(&grads[i], &grads[j], gamma)?,
                        gamma_used: gamma,
                    });
                }
            }
        }

        let grad_fn = |t: usize, th: &ParamVector| -> ParamVector {
            net.task_grad_at(th, &batch.features, &targets[t], t)
                .unwrap_or_else(|_| th.with_values(vec![f64::NAN; th.len()]).expect("same layout"))
        };
        let ctx = StepContext {
            step,
            order_seed: derive_seed(cfg.seed, ORDER_STREAM, step as u64),
            theta: &theta,
            grad_fn: Some(&grad_fn),
        };
        let modified = strategy.apply(&grads, &ctx)?;

        if step % cfg.log_every == 0 {
            log.steps.push(StepRecord {
                step,
                losses,
                cosine: pairs.iter().map(|&(i, j)| cosine(&grads[i], &grads[j])).collect(),
                modified_cosine: pairs
                    .iter()
                    .map(|&(i, j)| cosine(&modified[i], &modified[j]))
                    .collect(),
            });
        }

        let mut total = theta.zeros_like();
        for (w, g) in weights.iter().zip(&modified) {
            total.axpy(*w, g);
        }
        let new_theta = theta_opt.step(&theta, &total, cfg.learning_rate)?;
        check_finite(&new_theta, step, "trunk")?;
        net.set_theta(&new_theta)?;

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            if let Some(val) = val_ds {
                log.evals.push(EvalRecord {
                    step,
                    metrics: evaluate_dataset(&net, val)?,
                });
            }
        }
        after_step(step, &net)?;
    }
    Ok((net, log))
}

fn forward_checked(
    net: &SharedBottomNet,
    x: &DenseMatrix,
    step: usize,
) -> Result<(Vec<Vec<f64>>, crate::model::ForwardCache)> {
    match net.forward(x) {
        Err(ModelError::Data(detail)) => Err(TrainError::Divergence { step, detail }),
        r => Ok(r?),
    }
}

fn check_finite(p: &ParamVector, step: usize, what: &str) -> Result<()> {
    if p.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Divergence {
            step,
            detail: format!("non-finite {what}"),
        })
    }
}

/// Twice the Mann-Whitney U statistic of `scores` w.r.t. `labels`, plus
/// the positive and negative counts. Ties contribute half a pair.
fn doubled_u(scores: &[f64], labels: &[u8]) -> std::result::Result<(u128, u128, u128), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Undefined("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined("labels contain a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum over positives of 2·(1-based average rank)
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let tied_pos = order[start..=end].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += tied_pos * (start as u128 + end as u128 + 2);
        start = end + 1;
    }
    Ok((rank_sum2 - pos * (pos + 1), pos, neg))
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn evaluate_auc(scores: &[f64], labels: &[u8]) -> std::result::Result<f64, MetricError> {
    let (u2, pos, neg) = doubled_u(scores, labels)?;
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Group-size weighted mean of per-group AUC over groups holding both
/// classes.
pub fn evaluate_gauc(
    scores: &[f64],
    labels: &[u8],
    group_ids: &[String],
) -> std::result::Result<f64, MetricError> {
    if scores.len() != labels.len() || scores.len() != group_ids.len() {
        return Err(MetricError::Length(format!(
            "{} scores, {} labels, {} group ids",
            scores.len(),
            labels.len(),
            group_ids.len()
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, g) in group_ids.iter().enumerate() {
        groups.entry(g.as_str()).or_default().push(k);
    }
    let mut valid = Vec::new();
    for rows in groups.values() {
        let s: Vec<f64> = rows.iter().map(|&k| scores[k]).collect();
        let y: Vec<u8> = rows.iter().map(|&k| labels[k]).collect();
        match evaluate_auc(&s, &y) {
            Ok(auc) => valid.push((rows.len(), auc)),
            Err(MetricError::Undefined(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if valid.is_empty() {
        return Err(MetricError::Undefined("no group holds both classes".into()));
    }
    let total: usize = valid.iter().map(|(n, _)| n).sum();
    Ok(valid
        .iter()
        .map(|&(n, auc)| (n as f64 / total as f64) * auc)
        .sum())
}

/// Per-task AUC (GAUC when the dataset has groups). NaN where undefined.
pub fn evaluate_dataset(net: &SharedBottomNet, ds: &MultiTaskDataset) -> Result<Vec<f64>> {
    let (logits, _) = net.forward(ds.features())?;
    let mut out = Vec::with_capacity(ds.num_tasks());
    for (t, z) in logits.iter().enumerate() {
        let p = probabilities(z);
        let metric = match ds.group_ids() {
            Some(g) => evaluate_gauc(&p, ds.labels(t), g),
            None => evaluate_auc(&p, ds.labels(t)),
        };
        out.push(match metric {
            Ok(v) => v,
            Err(MetricError::Undefined(_)) => f64::NAN,
            Err(e) => return Err(e.into()),
        });
    }
    Ok(out)
}

/// `w_t ∝ 1/H(p_t)`, scaled so the weights sum to the task count.
pub fn loss_weights_from_prior(ds: &MultiTaskDataset) -> Result<Vec<f64>> {
    let inv: Vec<f64> = (0..ds.num_tasks())
        .map(|t| {
            let p = ds.positive_rate(t);
            if !(p > 0.0 && p < 1.0) {
                return Err(DataError::Invalid(format!(
                    "task {t} has a single class (positive rate {p})"
                )));
            }
            let h = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
            Ok(1.0 / h)
        })
        .collect::<std::result::Result<_, _>>()?;
    let total: f64 = inv.iter().sum();
    let scale = ds.num_tasks() as f64 / total;
    Ok(inv.iter().map(|w| w * scale).collect())
}

fn default_probe_lr() -> f64 {
    0.1
}

fn default_probe_tol() -> f64 {
    1e-6
}

fn default_probe_iters() -> usize {
    5000
}

fn default_bins() -> usize {
    41
}

fn default_range() -> f64 {
    0.05
}

fn default_band() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSolver {
    /// Damped Newton steps with backtracking.
    #[default]
    Newton,
    /// Fixed-step full-batch gradient descent.
    GradientDescent,
}

/// Settings of the frozen-trunk linear probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub solver: ProbeSolver,
    /// Step size of the gradient-descent solver.
    #[serde(default = "default_probe_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_probe_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_probe_iters")]
    pub max_iters: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Histogram covers `[-range, range]`; values outside are clipped.
    #[serde(default = "default_range")]
    pub range: f64,
    /// `|diff| < band` counts toward the general-knowledge share.
    #[serde(default = "default_band")]
    pub band: f64,
    /// Scale each trunk unit to zero mean and unit variance before fitting.
    #[serde(default)]
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            solver: ProbeSolver::Newton,
            learning_rate: default_probe_lr(),
            grad_tol: default_probe_tol(),
            max_iters: default_probe_iters(),
            bins: default_bins(),
            range: default_range(),
            band: default_band(),
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Normalized absolute probe weights, one vector per task.
    pub importances: Vec<Vec<f64>>,
    /// Task 0 importance minus task 1 importance, per trunk unit.
    pub differences: Vec<f64>,
    pub bin_centers: Vec<f64>,
    pub counts: Vec<usize>,
    pub general_share: f64,
    pub iterations: Vec<usize>,
}

impl ProbeReport {
    /// Header: `bin_center,count`.
    pub fn write_histogram_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_center", "count"])?;
        for (c, n) in self.bin_centers.iter().zip(&self.counts) {
            w.write_record([c.to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean logistic loss, gradient and (optionally) Hessian of a linear probe
/// with parameters `[w..., b]`.
fn logistic_eval(x: &DenseMatrix, y: &[f64], v: &[f64], hessian: bool) -> (f64, Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    let mut hess = if hessian { vec![0.0; (d + 1) * (d + 1)] } else { Vec::new() };
    let mut feat = vec![1.0; d + 1];
    for r in 0..n {
        feat[..d].copy_from_slice(x.row(r));
        let z: f64 = feat.iter().zip(v).map(|(a, c)| a * c).sum();
        loss += (z.max(0.0) - z * y[r] + (-z.abs()).exp().ln_1p()) * inv_n;
        let p = 1.0 / (1.0 + (-z).exp());
        let e = (p - y[r]) * inv_n;
        for (g, a) in grad.iter_mut().zip(&feat) {
            *g += e * a;
        }
        if hessian {
            let s = p * (1.0 - p) * inv_n;
            for i in 0..=d {
                for j in 0..=d {
                    hess[i * (d + 1) + j] += s * feat[i] * feat[j];
                }
            }
        }
    }
    (loss, grad, hess)
}

/// Fits a logistic probe until the gradient norm drops below the tolerance.
/// Returns the weights (without bias) and the iteration count.
fn fit_logistic(
    x: &DenseMatrix,
    y: &[f64],
    cfg: &ProbeConfig,
    task: usize,
) -> Result<(Vec<f64>, usize)> {
    let d = x.cols();
    let mut v = vec![0.0; d + 1];
    let mut grad_norm = f64::INFINITY;
    let newton = cfg.solver == ProbeSolver::Newton;
    for iter in 0..=cfg.max_iters {
        let (loss, grad, hess) = logistic_eval(x, y, &v, newton);
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            break;
        }
        if grad_norm < cfg.grad_tol {
            v.truncate(d);
            return Ok((v, iter));
        }
        if iter == cfg.max_iters {
            break;
        }
        if newton {
            // damped so dead units (all-zero columns) keep a solvable system
            let mut h = nalgebra::DMatrix::from_row_slice(d + 1, d + 1, &hess);
            for k in 0..=d {
                h[(k, k)] += 1e-10;
            }
            let g = nalgebra::DVector::from_column_slice(&grad);
            let Some(step) = h.cholesky().map(|c| c.solve(&g)) else {
                return Err(TrainError::Probe(format!("singular probe Hessian for task {task}")));
            };
            let slope: f64 = step.iter().zip(&grad).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = v.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
                let (trial_loss, _, _) = logistic_eval(x, y, &trial, false);
                if trial_loss <= loss - 1e-4 * t * slope || t < 1e-12 {
                    v = trial;
                    break;
                }
                t *= 0.5;
            }
        } else {
            for (vk, g) in v.iter_mut().zip(&grad) {
                *vk -= cfg.learning_rate * g;
            }
        }
    }
    Err(TrainError::ProbeConvergence {
        task,
        grad_norm,
        iterations: cfg.max_iters,
    })
}

fn standardize_columns(x: &DenseMatrix) -> DenseMatrix {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for c in 0..d {
        let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in 0..n {
            out.set(r, c, (x.get(r, c) - mean) / sd);
        }
    }
    out
}

/// Freezes the trunk and fits one logistic probe per task on the last
/// shared layer. Compares the normalized absolute weights of tasks 0 and 1.
pub fn probe_harmonization(
    net: &SharedBottomNet,
    ds: &MultiTaskDataset,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if ds.num_tasks() < 2 || net.num_tasks() != ds.num_tasks() {
        return Err(TrainError::Probe(format!(
            "need at least 2 tasks matching the network ({} in data, {} in network)",
            ds.num_tasks(),
            net.num_tasks()
        )));
    }
    if cfg.bins == 0 || !(cfg.range > 0.0) {
        return Err(TrainError::Probe("histogram needs bins > 0 and range > 0".into()));
    }
    let mut acts = net.trunk_activations(ds.features())?;
    if cfg.standardize {
        acts = standardize_columns(&acts);
    }
    let mut importances = Vec::new();
    let mut iterations = Vec::new();
    for t in 0..2 {
        let (w, iters) = fit_logistic(&acts, &ds.targets(t), cfg, t)?;
        let mass: f64 = w.iter().map(|v| v.abs()).sum();
        if !(mass > 0.0) {
            return Err(TrainError::Probe(format!("probe weights of task {t} are all zero")));
        }
        importances.push(w.iter().map(|v| v.abs() / mass).collect::<Vec<f64>>());
        iterations.push(iters);
    }
    let differences: Vec<f64> = importances[0]
        .iter()
        .zip(&importances[1])
        .map(|(a, b)| a - b)
        .collect();
    let width = 2.0 * cfg.range / cfg.bins as f64;
    let bin_centers = (0..cfg.bins)
        .map(|k| -cfg.range + (k as f64 + 0.5) * width)
        .collect();
    let mut counts = vec![0; cfg.bins];
    for d in &differences {
        let k = ((d + cfg.range) / width).floor();
        counts[k.clamp(0.0, (cfg.bins - 1) as f64) as usize] += 1;
    }
    let general = differences.iter().filter(|d| d.abs() < cfg.band).count();
    Ok(ProbeReport {
        general_share: general as f64 / differences.len() as f64,
        importances,
        differences,
        bin_centers,
        counts,
        iterations,
    })
}
