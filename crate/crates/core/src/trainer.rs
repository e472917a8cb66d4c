//! Windowing, weighted cross-entropy, optimisation and grid tuning.
//!
//! A window ending at step `t` feeds `X[:, :, t + 1 − T_in ..= t]` and is
//! scored against the labels at `t + horizon`. With split index `s`, training
//! windows satisfy `t + horizon < s` and test windows `t ≥ s`; windows whose
//! input precedes `s` but whose label does not are dropped.

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::graph::RegionGraph;
use crate::metrics::{confusion, macro_metrics, ConfusionMatrix, MetricsReport, N_CLASSES};
use crate::model::{forward_on_tape, ModelConfig, ModelParams, Mode};
use crate::tensor::{self, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    None,
    #[default]
    InverseFrequency,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Time windows per optimiser step.
    pub batch_size: usize,
    pub class_weights: ClassWeighting,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Stop after this many epochs without a better checkpoint.
    pub patience: Option<usize>,
    /// First test step; the training span is `0..split`.
    pub split: usize,
    /// Share of training windows (the latest ones) held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            dropout: 0.0,
            epochs: 30,
            batch_size: 8,
            class_weights: ClassWeighting::InverseFrequency,
            optimizer: Optimizer::Adam,
            seed: 0,
            patience: None,
            split: 288,
            val_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is accepted as a no-op run.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::usage(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::usage("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::usage(format!("validation fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    /// Last input step.
    pub end: usize,
    /// Labelled step.
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSets {
    pub train: Vec<Window>,
    pub test: Vec<Window>,
}

pub fn make_windows(n_steps: usize, t_in: usize, horizon: usize, split: usize) -> Result<WindowSets> {
    if t_in == 0 {
        return Err(Error::usage("T_in must be at least 1"));
    }
    if n_steps < t_in + horizon {
        return Err(Error::usage(format!(
            "{n_steps} steps cannot hold one window of T_in = {t_in} with horizon {horizon}"
        )));
    }
    if split > n_steps {
        return Err(Error::usage(format!("split {split} beyond {n_steps} steps")));
    }
    let mut sets = WindowSets {
        train: vec![],
        test: vec![],
    };
    for end in t_in - 1..n_steps - horizon {
        let w = Window {
            end,
            target: end + horizon,
        };
        if w.target < split {
            sets.train.push(w);
        } else if end >= split {
            sets.test.push(w);
        }
    }
    Ok(sets)
}

/// Splits training windows into (fit, validation), validation being the
/// latest `val_fraction` share (at least one window when there are two or
/// more and the fraction is positive).
pub fn split_validation(train: &[Window], val_fraction: f64) -> (Vec<Window>, Vec<Window>) {
    let n = train.len();
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = n_val.min(n.saturating_sub(1));
    }
    let (fit, val) = train.split_at(n - n_val);
    (fit.to_vec(), val.to_vec())
}

/// Inverse-frequency weights normalized to mean 1 over the classes that
/// occur; absent classes get 0. Balanced counts give exactly uniform weights.
pub fn class_weights(labels: &[usize], mode: ClassWeighting) -> Result<[f64; N_CLASSES]> {
    let mut counts = [0usize; N_CLASSES];
    for &y in labels {
        if y >= N_CLASSES {
            return Err(Error::usage(format!("label {y} out of range")));
        }
        counts[y] += 1;
    }
    if mode == ClassWeighting::None {
        return Ok([1.0; N_CLASSES]);
    }
    let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if present.is_empty() {
        return Err(Error::usage("no labels to derive class weights from"));
    }
    let mut w = [0.0; N_CLASSES];
    if present.iter().all(|&c| c == present[0]) {
        for (wi, &c) in w.iter_mut().zip(&counts) {
            *wi = if c > 0 { 1.0 } else { 0.0 };
        }
        return Ok(w);
    }
    let inv_mean = present.iter().map(|&c| 1.0 / c as f64).sum::<f64>() / present.len() as f64;
    for (wi, &c) in w.iter_mut().zip(&counts) {
        *wi = if c > 0 { (1.0 / c as f64) / inv_mean } else { 0.0 };
    }
    Ok(w)
}

/// Mean over rows of `w_y · (−log softmax(logits)_y)`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize], weights: &[f64; N_CLASSES]) -> Result<Var<'t>> {
    logits.log_softmax(1)?.weighted_nll(labels, weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_macro_f1: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub class_weights: Vec<f64>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_macro_f1\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.train_acc, r.val_macro_f1));
        }
        out
    }
}

/// Scores of a model over a set of windows.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub node: usize,
    /// Labelled step.
    pub timestep: usize,
    pub probs: [f64; N_CLASSES],
    pub class: usize,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_alignment(data: &FeatureTensor, graph: &RegionGraph, model: &ModelConfig) -> Result<()> {
    if graph.node_ids() != data.node_ids() {
        return Err(Error::usage("graph and dataset list different nodes or node order"));
    }
    if model.n_nodes != data.n_nodes() {
        return Err(Error::usage(format!(
            "model expects {} nodes, dataset has {}",
            model.n_nodes,
            data.n_nodes()
        )));
    }
    Ok(())
}

/// Eval-mode loss, metrics and per-node predictions over `windows`.
pub fn evaluate(
    data: &FeatureTensor,
    graph: &RegionGraph,
    params: &ModelParams,
    windows: &[Window],
    weights: &[f64; N_CLASSES],
) -> Result<Evaluation> {
    let cfg = params.config();
    check_alignment(data, graph, cfg)?;
    if windows.is_empty() {
        return Err(Error::usage("no windows to evaluate"));
    }
    let mut loss = 0.0;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut predictions = Vec::new();
    for w in windows {
        let x = data.window(w.end, cfg.t_in)?;
        let y = data.labels_at(w.target);
        // A fresh tape per window keeps memory flat.
        let tape = Tape::new();
        let vars = params.vars(&tape, false);
        let logits = forward_on_tape(&tape, &x, graph, cfg, &vars, &mut Mode::Eval)?;
        loss += cross_entropy(logits, &y, weights)?.value().data()[0];
        let probs = tensor::softmax(&logits.value(), 1)?;
        for (node, &label) in y.iter().enumerate() {
            let row = &probs.data()[node * N_CLASSES..(node + 1) * N_CLASSES];
            let class = argmax(row);
            preds.push(class);
            labels.push(label);
            predictions.push(Prediction {
                node,
                timestep: w.target,
                probs: [row[0], row[1], row[2]],
                class,
            });
        }
    }
    let cm = confusion(&preds, &labels, N_CLASSES)?;
    Ok(Evaluation {
        loss: loss / windows.len() as f64,
        report: macro_metrics(&cm)?,
        confusion: cm,
        predictions,
    })
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(params: &mut ModelParams, grads: &[Tensor], cfg: &TrainConfig, adam: &mut AdamState) {
    let lr = cfg.learning_rate;
    adam.step += 1;
    let (c1, c2) = (1.0 - BETA1.powi(adam.step), 1.0 - BETA2.powi(adam.step));
    for (i, (p, g)) in params.tensors_mut().into_iter().zip(grads).enumerate() {
        let data = p.data_mut();
        match cfg.optimizer {
            Optimizer::Sgd => data.iter_mut().zip(g.data()).for_each(|(w, g)| *w -= lr * g),
            Optimizer::Adam => {
                let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
                for j in 0..data.len() {
                    let gj = g.data()[j];
                    m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                    v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                    data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Mean loss of one batch and the gradient of every parameter group.
pub fn batch_gradients(
    data: &FeatureTensor,
    graph: &RegionGraph,
    params: &ModelParams,
    batch: &[Window],
    weights: &[f64; N_CLASSES],
    mode: &mut Mode<'_>,
) -> Result<(f64, Vec<Tensor>)> {
    let cfg = params.config();
    let tape = Tape::new();
    let vars = params.vars(&tape, true);
    let mut total: Option<Var<'_>> = None;
    for w in batch {
        let x = data.window(w.end, cfg.t_in)?;
        let logits = forward_on_tape(&tape, &x, graph, cfg, &vars, mode)?;
        let loss = cross_entropy(logits, &data.labels_at(w.target), weights)?;
        total = Some(match total {
            Some(t) => t.add(loss)?,
            None => loss,
        });
    }
    let loss = total
        .ok_or_else(|| Error::usage("empty batch"))?
        .scale(1.0 / batch.len() as f64)?;
    let grads = tape.backward(loss)?;
    let value = loss.value().data()[0];
    Ok((value, vars.all().into_iter().map(|v| grads.wrt(v).clone()).collect()))
}

/// Max relative error per parameter group between the tape gradient of the
/// weighted cross-entropy on one window and central differences, using
/// `|a - fd| / max(|a|, |fd|, 1e-8)`.
pub fn parameter_gradient_check(
    x: &Tensor,
    labels: &[usize],
    graph: &RegionGraph,
    params: &ModelParams,
    eps: f64,
) -> Result<Vec<(String, f64)>> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::usage(format!("eps {eps} outside (0, 1e-2]")));
    }
    let cfg = params.config();
    let weights = [1.0; N_CLASSES];
    let loss_at = |p: &ModelParams| -> Result<f64> {
        let tape = Tape::new();
        let vars = p.vars(&tape, false);
        let logits = forward_on_tape(&tape, x, graph, cfg, &vars, &mut Mode::Eval)?;
        Ok(cross_entropy(logits, labels, &weights)?.value().data()[0])
    };
    let tape = Tape::new();
    let vars = params.vars(&tape, true);
    let logits = forward_on_tape(&tape, x, graph, cfg, &vars, &mut Mode::Eval)?;
    let loss = cross_entropy(logits, labels, &weights)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.all().into_iter().map(|v| grads.wrt(v).clone()).collect();

    let names = ModelParams::group_names(cfg);
    let mut out = Vec::with_capacity(names.len());
    let mut probe = params.clone();
    for (g, name) in names.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..analytic[g].len() {
            let orig = probe.tensors()[g].data()[i];
            probe.tensors_mut()[g].data_mut()[i] = orig + eps;
            let up = loss_at(&probe)?;
            probe.tensors_mut()[g].data_mut()[i] = orig - eps;
            let down = loss_at(&probe)?;
            probe.tensors_mut()[g].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[g].data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
        }
        out.push((name, worst));
    }
    Ok(out)
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Domain(detail) => Error::Diverged { epoch, detail },
        other => other,
    }
}

/// Trains from a seeded initialisation and returns the checkpoint with the
/// best validation macro-F1 (ties: lower validation loss, then earlier).
pub fn train(
    data: &FeatureTensor,
    graph: &RegionGraph,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    let mut model = model.clone();
    model.dropout = cfg.dropout;
    model.seed = cfg.seed;
    model.validate()?;
    check_alignment(data, graph, &model)?;
    if cfg.split > data.n_steps() {
        return Err(Error::usage(format!("split {} beyond {} steps", cfg.split, data.n_steps())));
    }
    let windows = make_windows(data.n_steps(), model.t_in, model.horizon, cfg.split)?;
    if windows.train.is_empty() {
        return Err(Error::usage("no training windows before the split"));
    }
    let (fit, val) = split_validation(&windows.train, cfg.val_fraction);
    let val = if val.is_empty() { fit.clone() } else { val };

    let train_labels: Vec<usize> = windows.train.iter().flat_map(|w| data.labels_at(w.target)).collect();
    let distinct = (0..N_CLASSES).filter(|c| train_labels.contains(c)).count();
    if distinct < 2 {
        warn!("training span has only {distinct} label class(es)");
    }
    let weights = class_weights(&train_labels, cfg.class_weights)?;

    let mut params = ModelParams::init(&model)?;
    let mut adam = AdamState {
        m: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        v: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        step: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut history = TrainHistory {
        class_weights: weights.to_vec(),
        ..TrainHistory::default()
    };
    let mut best: Option<(f64, f64, ModelParams)> = None;
    let mut since_best = 0;
    let mut order = fit.clone();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(data, graph, &params, batch, &weights, &mut Mode::Train(&mut rng))
                .map_err(diverged(epoch))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch loss {loss}"),
                });
            }
            apply_update(&mut params, &grads, cfg, &mut adam);
        }
        if let Some(bad) = params.tensors().iter().find(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                epoch,
                detail: format!("non-finite parameter of shape {:?}", bad.shape()),
            });
        }
        let on_train = evaluate(data, graph, &params, &windows.train, &weights).map_err(diverged(epoch))?;
        let on_val = evaluate(data, graph, &params, &val, &weights).map_err(diverged(epoch))?;
        let record = EpochRecord {
            epoch,
            train_loss: on_train.loss,
            train_acc: on_train.report.accuracy,
            val_macro_f1: on_val.report.macro_f1,
            val_loss: on_val.loss,
        };
        debug!(
            "epoch {epoch}: train loss {:.5} acc {:.4} val F1 {:.4} loss {:.5}",
            record.train_loss, record.train_acc, record.val_macro_f1, record.val_loss
        );
        let better = match &best {
            None => true,
            Some((f1, loss, _)) => record.val_macro_f1 > *f1 || (record.val_macro_f1 == *f1 && record.val_loss < *loss),
        };
        if better {
            best = Some((record.val_macro_f1, record.val_loss, params.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.epochs.push(record);
        if cfg.patience.is_some_and(|p| since_best >= p) {
            info!("early stop at epoch {epoch}");
            break;
        }
    }
    let (_, _, best) = best.expect("at least one epoch");
    Ok((best, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub val_macro_f1: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
    /// Position in the grid enumeration.
    pub grid_index: usize,
}

#[derive(Clone, Debug)]
pub struct TuneResult {
    pub best_config: TrainConfig,
    pub best_params: ModelParams,
    pub best_history: TrainHistory,
    pub leaderboard: Vec<LeaderboardEntry>,
}

/// Trains every `learning_rate × dropout` combination with the same seed,
/// `jobs` at a time, and ranks them by validation macro-F1 (ties: lower
/// validation loss, then grid order).
pub fn tune(
    data: &FeatureTensor,
    graph: &RegionGraph,
    model: &ModelConfig,
    base: &TrainConfig,
    learning_rates: &[f64],
    dropouts: &[f64],
    jobs: usize,
) -> Result<TuneResult> {
    if learning_rates.is_empty() || dropouts.is_empty() {
        return Err(Error::usage("tuning grid is empty"));
    }
    let grid: Vec<TrainConfig> = learning_rates
        .iter()
        .flat_map(|&lr| {
            dropouts.iter().map(move |&d| TrainConfig {
                learning_rate: lr,
                dropout: d,
                ..base.clone()
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::usage(format!("thread pool: {e}")))?;
    let runs: Vec<(ModelParams, TrainHistory)> = pool.install(|| {
        grid.par_iter()
            .map(|cfg| train(data, graph, model, cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut entries: Vec<LeaderboardEntry> = grid
        .iter()
        .zip(&runs)
        .enumerate()
        .map(|(i, (cfg, (_, h)))| {
            let best = h.best().expect("trained at least one epoch");
            LeaderboardEntry {
                rank: 0,
                learning_rate: cfg.learning_rate,
                dropout: cfg.dropout,
                val_macro_f1: best.val_macro_f1,
                val_loss: best.val_loss,
                best_epoch: h.best_epoch,
                grid_index: i,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        b.val_macro_f1
            .total_cmp(&a.val_macro_f1)
            .then(a.val_loss.total_cmp(&b.val_loss))
            .then(a.grid_index.cmp(&b.grid_index))
    });
    for (r, e) in entries.iter_mut().enumerate() {
        e.rank = r + 1;
    }
    let winner = entries[0].grid_index;
    let (best_params, best_history) = runs.into_iter().nth(winner).expect("winner index in range");
    Ok(TuneResult {
        best_config: grid[winner].clone(),
        best_params,
        best_history,
        leaderboard: entries,
    })
}
