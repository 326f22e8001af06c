//! Training loop: mini-batch gradient descent with early stopping on
//! validation AUC, best-epoch weight restoration, and divergence
//! detection.
//!
//! Each sample runs on its own tape; per-sample gradients are merged
//! in a fixed order, so results are independent of worker-thread
//! scheduling. Batch-norm running statistics advance once per batch
//! from the batch-averaged per-sample statistics.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Acquisition;
use crate::eval::{self, EvalError, ScoredSet};
use crate::fusion::{FusionError, FusionModel, SampleBackprop};
use crate::nn::BatchNormLayer;
use crate::rng;
use crate::tensor::TensorError;

/// Momentum of the batch-norm running statistic update.
pub const BN_MOMENTUM: f32 = 0.1;

// ── Configuration ────────────────────────────────────────────────────

fn d_lr() -> f64 {
    1e-3
}
fn d_momentum() -> f64 {
    0.0
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd {
        #[serde(default = "d_lr")]
        lr: f64,
        #[serde(default = "d_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "d_lr")]
        lr: f64,
        #[serde(default = "d_beta1")]
        beta1: f64,
        #[serde(default = "d_beta2")]
        beta2: f64,
        #[serde(default = "d_eps")]
        eps: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
        }
    }
}

impl Optimizer {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        match *self {
            Optimizer::Sgd { lr, momentum } => {
                if !(lr.is_finite() && lr > 0.0) {
                    return bad(format!("sgd lr must be positive, got {lr}"));
                }
                if !(0.0..1.0).contains(&momentum) {
                    return bad(format!("sgd momentum must lie in [0, 1), got {momentum}"));
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                if !(lr.is_finite() && lr > 0.0) {
                    return bad(format!("adam lr must be positive, got {lr}"));
                }
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        return bad(format!("adam {name} must lie in [0, 1), got {b}"));
                    }
                }
                if !(eps.is_finite() && eps > 0.0) {
                    return bad(format!("adam eps must be positive, got {eps}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation AUC before stopping.
    pub patience: usize,
    /// Weight of the positive BCE term; `None` derives
    /// `n_neg / n_pos` from the training split.
    pub pos_class_weight: Option<f32>,
    /// Optional epoch-loss target: stop once the epoch's mean training
    /// loss falls below it (used by fast-overfit harnesses).
    pub loss_stop: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::default(),
            batch_size: 4,
            max_epochs: 100,
            patience: 10,
            pos_class_weight: None,
            loss_stop: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.optimizer.validate()?;
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if let Some(w) = self.pos_class_weight {
            if !(w.is_finite() && w > 0.0) {
                return bad(format!("pos_class_weight must be positive, got {w}"));
            }
        }
        if let Some(t) = self.loss_stop {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("loss_stop must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

// ── Errors ───────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] FusionError),
    #[error("validation metric: {0}")]
    Eval(#[from] EvalError),
    #[error("history line {line}: {msg}")]
    HistoryParse { line: usize, msg: String },
    #[error("io error for {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

// ── Optimizer steps ──────────────────────────────────────────────────

/// Classic momentum SGD: `v ← momentum·v + g`, `p ← p − lr·v`.
pub fn sgd_step(param: &mut [f32], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for i in 0..param.len() {
        velocity[i] = momentum * velocity[i] + grad[i];
        param[i] = (param[i] as f64 - lr * velocity[i]) as f32;
    }
}

/// Adam with bias correction; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f32],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = (param[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
    }
}

/// First- and second-moment state per part, per parameter, in
/// registry order.
struct OptState {
    /// `slot[part][param]` → per-element state vectors.
    first: Vec<Vec<Vec<f64>>>,
    second: Vec<Vec<Vec<f64>>>,
    steps: u64,
}

impl OptState {
    fn new(model: &FusionModel) -> Self {
        let mut first = Vec::new();
        let mut second = Vec::new();
        for part in model.parts() {
            let mut f = Vec::new();
            let mut s = Vec::new();
            for (_, t) in part.params().iter() {
                f.push(vec![0.0f64; t.numel()]);
                s.push(vec![0.0f64; t.numel()]);
            }
            first.push(f);
            second.push(s);
        }
        OptState {
            first,
            second,
            steps: 0,
        }
    }
}

// ── Early stopping ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    NewBest,
    Continue,
    Stop,
}

/// Tracks the best validation AUC; only a strict improvement resets
/// the patience counter, so ties keep the earlier epoch.
#[derive(Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, val_auc: f64) -> StopDecision {
        let improved = self.best.map_or(true, |(_, b)| val_auc > b);
        if improved {
            self.best = Some((epoch, val_auc));
            self.since_best = 0;
            return StopDecision::NewBest;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

// ── History ──────────────────────────────────────────────────────────

pub const HISTORY_VERSION: u32 = 1;

/// One completed epoch. Equality ignores the wall-clock field so that
/// repeated runs of the same seed compare equal.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub wall_ms: u64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss == other.train_loss
            && self.val_auc == other.val_auc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoppingReason {
    EarlyStopped,
    MaxEpochs,
    LossTarget,
    Diverged,
}

impl StoppingReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StoppingReason::EarlyStopped => "early-stopped",
            StoppingReason::MaxEpochs => "max-epochs",
            StoppingReason::LossTarget => "loss-target",
            StoppingReason::Diverged => "diverged",
        }
    }
}

impl std::str::FromStr for StoppingReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "early-stopped" => Ok(StoppingReason::EarlyStopped),
            "max-epochs" => Ok(StoppingReason::MaxEpochs),
            "loss-target" => Ok(StoppingReason::LossTarget),
            "diverged" => Ok(StoppingReason::Diverged),
            other => Err(format!("unknown stopping reason '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept; `None` if no epoch
    /// completed (immediate divergence).
    pub best_epoch: Option<usize>,
    pub stopping: StoppingReason,
}

impl TrainHistory {
    pub fn best_val_auc(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == best).map(|e| e.val_auc)
    }

    /// Line-delimited rendering; floats use the shortest round-trip
    /// form so parse(render(h)) == h.
    pub fn render(&self) -> String {
        let mut out = format!("history-version {HISTORY_VERSION}\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch {} train_loss {} val_auc {} wall_ms {}\n",
                e.epoch, e.train_loss, e.val_auc, e.wall_ms
            ));
        }
        out.push_str(&format!("best_epoch {}\n", self.best_epoch.unwrap_or(0)));
        out.push_str(&format!("stopping {}\n", self.stopping.as_str()));
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut epochs = Vec::new();
        let mut best_epoch: Option<Option<usize>> = None;
        let mut stopping: Option<StoppingReason> = None;
        let mut version_seen = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |msg: String| TrainError::HistoryParse { line: line_no, msg };
            let toks: Vec<&str> = line.split_whitespace().collect();
            if !version_seen {
                if toks.len() == 2 && toks[0] == "history-version" {
                    let v: u32 = toks[1]
                        .parse()
                        .map_err(|_| fail(format!("unparseable version '{}'", toks[1])))?;
                    if v != HISTORY_VERSION {
                        return Err(fail(format!(
                            "unsupported history version {v} (supported: {HISTORY_VERSION})"
                        )));
                    }
                    version_seen = true;
                    continue;
                }
                return Err(fail("expected 'history-version <n>' first".into()));
            }
            match toks.as_slice() {
                ["epoch", e, "train_loss", tl, "val_auc", va, "wall_ms", wm] => {
                    let parse_f = |s: &str, what: &str| {
                        s.parse::<f64>()
                            .map_err(|_| fail(format!("unparseable {what} '{s}'")))
                            .and_then(|v| {
                                if v.is_finite() {
                                    Ok(v)
                                } else {
                                    Err(fail(format!("non-finite {what} '{s}'")))
                                }
                            })
                    };
                    epochs.push(EpochRecord {
                        epoch: e.parse().map_err(|_| fail(format!("unparseable epoch '{e}'")))?,
                        train_loss: parse_f(tl, "train_loss")?,
                        val_auc: parse_f(va, "val_auc")?,
                        wall_ms: wm.parse().map_err(|_| fail(format!("unparseable wall_ms '{wm}'")))?,
                    });
                }
                ["best_epoch", b] => {
                    let v: usize =
                        b.parse().map_err(|_| fail(format!("unparseable best_epoch '{b}'")))?;
                    best_epoch = Some(if v == 0 { None } else { Some(v) });
                }
                ["stopping", s] => {
                    stopping = Some(s.parse().map_err(fail)?);
                }
                _ => return Err(fail(format!("unrecognized line '{line}'"))),
            }
        }
        let fail_end = |msg: &str| TrainError::HistoryParse {
            line: text.lines().count().max(1),
            msg: msg.into(),
        };
        if !version_seen {
            return Err(fail_end("empty history: missing version line"));
        }
        let best_epoch = best_epoch.ok_or_else(|| fail_end("missing best_epoch line"))?;
        let stopping = stopping.ok_or_else(|| fail_end("missing stopping line"))?;
        if let Some(b) = best_epoch {
            if !epochs.iter().any(|e| e.epoch == b) {
                return Err(fail_end(&format!("best_epoch {b} not among recorded epochs")));
            }
        }
        Ok(TrainHistory {
            epochs,
            best_epoch,
            stopping,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }
}

// ── Training ─────────────────────────────────────────────────────────

/// Positive-class weight: configured value, or `n_neg / n_pos` over
/// the training split.
pub fn resolve_pos_weight(cfg: &TrainConfig, train_set: &[Acquisition]) -> Result<f32> {
    if let Some(w) = cfg.pos_class_weight {
        return Ok(w);
    }
    let n_pos = train_set.iter().filter(|a| a.label()).count();
    let n_neg = train_set.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::BadConfig(format!(
            "cannot derive pos_class_weight: training split has {n_pos} positives and {n_neg} negatives"
        )));
    }
    Ok(n_neg as f32 / n_pos as f32)
}

fn val_auc_of(model: &FusionModel, val_set: &[Acquisition]) -> Result<f64> {
    let scores: Vec<f32> = val_set
        .par_iter()
        .map(|a| model.predict(a).map(|p| p as f32))
        .collect::<Result<Vec<_>, FusionError>>()?;
    let set = ScoredSet::new(
        val_set.iter().map(|a| a.acquisition_id.clone()).collect(),
        scores,
        val_set.iter().map(|a| a.label()).collect(),
    )?;
    Ok(eval::auc(&set)?)
}

/// Outcome of a batch's backward passes.
enum BatchOutcome {
    Ok { mean_loss: f64 },
    Diverged,
}

/// Merge per-sample gradients (fixed order), step the optimizer, and
/// fold batch-norm statistics into the running buffers.
fn apply_batch(
    model: &mut FusionModel,
    opt: &Optimizer,
    state: &mut OptState,
    backprops: Vec<SampleBackprop>,
) -> Result<BatchOutcome> {
    let n = backprops.len();
    debug_assert!(n > 0);
    let scale = 1.0 / n as f64;

    // name → accumulated gradient, per part.
    let n_parts = model.parts().len();
    let mut acc: Vec<HashMap<String, Vec<f64>>> = vec![HashMap::new(); n_parts];
    // bn key → (sum_mean, sum_var, count), per part.
    let mut bn_acc: Vec<HashMap<String, (Vec<f64>, Vec<f64>, usize)>> = vec![HashMap::new(); n_parts];

    let mut loss_sum = 0.0;
    for bp in &backprops {
        if !bp.loss.is_finite() {
            return Ok(BatchOutcome::Diverged);
        }
        loss_sum += bp.loss;
        for (pi, part) in bp.parts.iter().enumerate() {
            for (name, g) in &part.grads {
                let slot = acc[pi]
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0f64; g.len()]);
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s += v as f64;
                }
            }
            for stats in &part.bn {
                let slot = bn_acc[pi].entry(stats.key.clone()).or_insert_with(|| {
                    (vec![0.0; stats.mean.len()], vec![0.0; stats.var.len()], 0)
                });
                for (s, &v) in slot.0.iter_mut().zip(&stats.mean) {
                    *s += v as f64;
                }
                for (s, &v) in slot.1.iter_mut().zip(&stats.var) {
                    *s += v as f64;
                }
                slot.2 += 1;
            }
        }
    }

    state.steps += 1;
    for (pi, acc_part) in acc.iter().enumerate() {
        let part = &mut model.parts_mut()[pi];
        let names: Vec<String> = part.params().names().map(str::to_string).collect();
        for (qi, name) in names.iter().enumerate() {
            let grad: Vec<f64> = acc_part
                .get(name)
                .map(|g| g.iter().map(|v| v * scale).collect())
                .unwrap_or_else(|| vec![0.0; part.params().get(name).map(|t| t.numel()).unwrap_or(0)]);
            let param = part.params_mut().get_mut(name).map_err(FusionError::from)?;
            match *opt {
                Optimizer::Sgd { lr, momentum } => {
                    sgd_step(
                        param.data_mut(),
                        &grad,
                        &mut state.first[pi][qi],
                        lr,
                        momentum,
                    );
                }
                Optimizer::Adam { lr, beta1, beta2, eps } => {
                    adam_step(
                        param.data_mut(),
                        &grad,
                        &mut state.first[pi][qi],
                        &mut state.second[pi][qi],
                        state.steps,
                        lr,
                        beta1,
                        beta2,
                        eps,
                    );
                }
            }
            if param.data().iter().any(|v| !v.is_finite()) {
                return Ok(BatchOutcome::Diverged);
            }
        }
        // Batch-norm running updates from batch-averaged statistics.
        let mut keys: Vec<String> = bn_acc[pi].keys().cloned().collect();
        keys.sort();
        for key in keys {
            let (sum_mean, sum_var, count) = &bn_acc[pi][&key];
            let mean: Vec<f32> = sum_mean.iter().map(|v| (v / *count as f64) as f32).collect();
            let var: Vec<f32> = sum_var.iter().map(|v| (v / *count as f64) as f32).collect();
            BatchNormLayer::update_running(part.buffers_mut(), &key, &mean, &var, BN_MOMENTUM)
                .map_err(FusionError::from)?;
        }
    }
    Ok(BatchOutcome::Ok {
        mean_loss: loss_sum * scale,
    })
}

/// Train in place. On return the model holds the best-epoch weights
/// (or the initial weights if no epoch improved on nothing / training
/// diverged immediately) and the history says why training stopped.
pub fn train(
    model: &mut FusionModel,
    train_set: &[Acquisition],
    val_set: &[Acquisition],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::BadConfig(format!(
            "empty split: {} train / {} val acquisitions",
            train_set.len(),
            val_set.len()
        )));
    }
    let pos_weight = resolve_pos_weight(cfg, train_set)?;
    let shuffle_tag = rng::str_tag("shuffle");

    let mut state = OptState::new(model);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_snapshot = model.snapshot();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: None,
        stopping: StoppingReason::MaxEpochs,
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut r = rng::stream(cfg.seed, &[shuffle_tag, epoch as u64]);
        order.shuffle(&mut r);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let backprops: std::result::Result<Vec<SampleBackprop>, FusionError> = batch
                .par_iter()
                .map(|&i| model.train_sample(&train_set[i], pos_weight))
                .collect();
            let backprops = match backprops {
                Ok(b) => b,
                // Non-finite intermediate values are how divergence
                // surfaces when debug assertions are on.
                Err(FusionError::Tensor(TensorError::NonFinite { .. })) => {
                    history.stopping = StoppingReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            match apply_batch(model, &cfg.optimizer, &mut state, backprops)? {
                BatchOutcome::Diverged => {
                    history.stopping = StoppingReason::Diverged;
                    break 'epochs;
                }
                BatchOutcome::Ok { mean_loss } => {
                    loss_sum += mean_loss;
                    batches += 1;
                }
            }
        }
        let train_loss = loss_sum / batches as f64;
        let val_auc = val_auc_of(model, val_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6} val_auc {val_auc:.6} ({} ms)",
            history.epochs.last().unwrap().wall_ms
        );

        match stopper.observe(epoch, val_auc) {
            StopDecision::NewBest => {
                best_snapshot = model.snapshot();
                history.best_epoch = Some(epoch);
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopping = StoppingReason::EarlyStopped;
                break;
            }
        }
        if let Some(target) = cfg.loss_stop {
            if train_loss < target {
                history.stopping = StoppingReason::LossTarget;
                break;
            }
        }
    }

    model.restore(&best_snapshot)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ComplementarityMode, GridSpec, SynthConfig};
    use crate::fusion::{build_single_modality_model, ModalityId};

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(TrainConfig::default().validate().is_ok());
        let cases: Vec<TrainConfig> = vec![
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                max_epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                patience: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                pos_class_weight: Some(-1.0),
                ..TrainConfig::default()
            },
            TrainConfig {
                loss_stop: Some(0.0),
                ..TrainConfig::default()
            },
            TrainConfig {
                optimizer: Optimizer::Sgd {
                    lr: 0.0,
                    momentum: 0.0,
                },
                ..TrainConfig::default()
            },
            TrainConfig {
                optimizer: Optimizer::Sgd {
                    lr: 0.1,
                    momentum: 1.0,
                },
                ..TrainConfig::default()
            },
            TrainConfig {
                optimizer: Optimizer::Adam {
                    lr: 1e-3,
                    beta1: 1.0,
                    beta2: 0.999,
                    eps: 1e-8,
                },
                ..TrainConfig::default()
            },
            TrainConfig {
                optimizer: Optimizer::Adam {
                    lr: 1e-3,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 0.0,
                },
                ..TrainConfig::default()
            },
        ];
        for (i, cfg) in cases.iter().enumerate() {
            assert!(
                matches!(cfg.validate(), Err(TrainError::BadConfig(_))),
                "case {i} should be rejected"
            );
        }
    }

    #[test]
    fn sgd_step_matches_hand_computation() {
        // No momentum: p ← p − lr·g.
        let mut p = [0.0f32];
        let mut v = [0.0f64];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0);
        assert!((p[0] + 0.1).abs() < 1e-7);

        // Momentum 0.9, two unit gradients:
        // v1 = 1, p = −0.1; v2 = 1.9, p = −0.29.
        let mut p = [0.0f32];
        let mut v = [0.0f64];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9);
        assert!((p[0] + 0.1).abs() < 1e-7);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9);
        assert!((v[0] - 1.9).abs() < 1e-12);
        assert!((p[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let mut p = [0.25f32, -3.5, 1e-7];
        let before = p;
        let mut v = [0.0f64; 3];
        for _ in 0..5 {
            sgd_step(&mut p, &[0.0; 3], &mut v, 10.0, 0.9);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // With bias correction, step 1 moves by ~lr regardless of the
        // gradient's magnitude.
        for g in [3.7, -120.0, 1e-4] {
            let mut p = [0.0f32];
            let (mut m, mut v) = ([0.0f64], [0.0f64]);
            adam_step(&mut p, &[g], &mut m, &mut v, 1, 1e-3, 0.9, 0.999, 1e-8);
            assert!(
                (p[0].abs() as f64 - 1e-3).abs() < 1e-5,
                "grad {g}: step {}",
                p[0]
            );
            assert_eq!(p[0] > 0.0, g < 0.0, "step opposes gradient");
        }
    }

    #[test]
    fn early_stopper_full_patience_sequence() {
        // Strictly decreasing AUC with patience 3 stops after the
        // fourth epoch and keeps epoch 1.
        let mut s = EarlyStopper::new(3);
        assert_eq!(s.observe(1, 0.9), StopDecision::NewBest);
        assert_eq!(s.observe(2, 0.8), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.7), StopDecision::Continue);
        assert_eq!(s.observe(4, 0.6), StopDecision::Stop);
        assert_eq!(s.best(), Some((1, 0.9)));

        // A tie is not an improvement.
        let mut s = EarlyStopper::new(2);
        assert_eq!(s.observe(1, 0.5), StopDecision::NewBest);
        assert_eq!(s.observe(2, 0.5), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.5), StopDecision::Stop);
        assert_eq!(s.best(), Some((1, 0.5)));
    }

    #[test]
    fn history_roundtrip_preserves_everything() {
        let h = TrainHistory {
            epochs: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 0.6931471805599453,
                    val_auc: 0.5,
                    wall_ms: 1234,
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 0.1234567890123456,
                    val_auc: 0.9217391304347826,
                    wall_ms: 987,
                },
            ],
            best_epoch: Some(2),
            stopping: StoppingReason::EarlyStopped,
        };
        let text = h.render();
        let back = TrainHistory::parse(&text).unwrap();
        assert_eq!(back, h);
        // Equality skips wall_ms; the rendering must still carry it.
        assert_eq!(back.epochs[0].wall_ms, 1234);
        assert_eq!(back.epochs[1].wall_ms, 987);
        assert_eq!(h.best_val_auc(), Some(0.9217391304347826));

        // wall_ms differences do not break equality.
        let mut other = h.clone();
        other.epochs[0].wall_ms = 0;
        assert_eq!(other, h);

        // A no-epoch divergence history also round-trips.
        let dead = TrainHistory {
            epochs: vec![],
            best_epoch: None,
            stopping: StoppingReason::Diverged,
        };
        assert_eq!(TrainHistory::parse(&dead.render()).unwrap(), dead);
    }

    #[test]
    fn history_parse_rejects_malformed_text() {
        let bad = [
            "",
            "epoch 1 train_loss 0.5 val_auc 0.5 wall_ms 1",
            "history-version 2\nbest_epoch 0\nstopping diverged\n",
            "history-version 1\nbest_epoch 0\n",
            "history-version 1\nstopping diverged\n",
            "history-version 1\nbest_epoch 0\nstopping gave-up\n",
            "history-version 1\nepoch 1 train_loss nan val_auc 0.5 wall_ms 1\nbest_epoch 1\nstopping max-epochs\n",
            "history-version 1\nepoch one train_loss 0.5 val_auc 0.5 wall_ms 1\nbest_epoch 1\nstopping max-epochs\n",
            "history-version 1\nbest_epoch 3\nstopping max-epochs\n",
            "history-version 1\nbest_epoch 0\nstopping max-epochs\nwat is this\n",
        ];
        for (i, text) in bad.iter().enumerate() {
            assert!(
                TrainHistory::parse(text).is_err(),
                "case {i} should fail: {text:?}"
            );
        }
    }

    #[test]
    fn optimizer_config_toml_roundtrip() {
        let cfg = TrainConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);

        // Omitted optimizer fields take their defaults.
        let partial: TrainConfig = toml::from_str(
            "optimizer = { kind = \"sgd\", lr = 0.01 }\nbatch_size = 2\n",
        )
        .unwrap();
        assert_eq!(
            partial.optimizer,
            Optimizer::Sgd {
                lr: 0.01,
                momentum: 0.0
            }
        );
        assert_eq!(partial.batch_size, 2);
        assert_eq!(partial.max_epochs, 100);
    }

    #[test]
    fn pos_weight_derivation() {
        let cfg = SynthConfig {
            n_patients: 8,
            acq_per_patient: [1, 1],
            total_acquisitions: Some(8),
            grid: GridSpec {
                d: 8,
                h: 24,
                w: 24,
                lso_h: 24,
                lso_w: 24,
            },
            positive_rate: 0.25,
            mode: ComplementarityMode::Redundant,
            seed: 11,
            ..SynthConfig::default()
        };
        let acqs = crate::data::synth_generate(&cfg).unwrap();
        let n_pos = acqs.iter().filter(|a| a.label()).count();
        let n_neg = acqs.len() - n_pos;
        assert!(n_pos > 0 && n_neg > 0);

        let auto = resolve_pos_weight(&TrainConfig::default(), &acqs).unwrap();
        assert!((auto - n_neg as f32 / n_pos as f32).abs() < 1e-6);

        let explicit = TrainConfig {
            pos_class_weight: Some(2.5),
            ..TrainConfig::default()
        };
        assert_eq!(resolve_pos_weight(&explicit, &acqs).unwrap(), 2.5);

        let positives: Vec<_> = acqs.iter().filter(|a| a.label()).cloned().collect();
        assert!(resolve_pos_weight(&TrainConfig::default(), &positives).is_err());
    }

    /// Small learnable dataset shared by the loop tests.
    fn tiny_dataset(seed: u64) -> Vec<crate::data::Acquisition> {
        let cfg = SynthConfig {
            n_patients: 8,
            acq_per_patient: [1, 1],
            total_acquisitions: Some(8),
            grid: GridSpec {
                d: 8,
                h: 24,
                w: 24,
                lso_h: 24,
                lso_w: 24,
            },
            positive_rate: 0.5,
            mode: ComplementarityMode::Redundant,
            seed,
            ..SynthConfig::default()
        };
        crate::data::synth_generate(&cfg).unwrap()
    }

    #[test]
    fn train_runs_deterministically_and_restores_best_epoch() {
        let acqs = tiny_dataset(3);
        let cfg = TrainConfig {
            optimizer: Optimizer::Adam {
                lr: 1e-2,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            batch_size: 4,
            max_epochs: 6,
            patience: 6,
            seed: 7,
            ..TrainConfig::default()
        };

        let run = |acqs: &[crate::data::Acquisition]| {
            let mut model =
                build_single_modality_model(ModalityId::Structure, "mini-res-a", 21).unwrap();
            let history = train(&mut model, acqs, acqs, &cfg).unwrap();
            (model, history)
        };

        let (model, history) = run(&acqs);
        assert!(!history.epochs.is_empty());
        assert!(history.epochs.iter().all(|e| e.train_loss.is_finite()));
        assert!(history.epochs.iter().all(|e| (0.0..=1.0).contains(&e.val_auc)));

        // Best epoch is the first argmax of val AUC.
        let best = history.best_epoch.expect("some epoch completed");
        let max_auc = history
            .epochs
            .iter()
            .map(|e| e.val_auc)
            .fold(f64::NEG_INFINITY, f64::max);
        let first_argmax = history
            .epochs
            .iter()
            .find(|e| e.val_auc == max_auc)
            .unwrap()
            .epoch;
        assert_eq!(best, first_argmax);

        // The returned model reproduces the recorded best AUC exactly.
        let recomputed = val_auc_of(&model, &acqs).unwrap();
        assert!(
            (recomputed - history.best_val_auc().unwrap()).abs() < 1e-12,
            "restored model gives {recomputed}, history says {:?}",
            history.best_val_auc()
        );

        // Same seeds, same data → identical history and weights.
        let (model2, history2) = run(&acqs);
        assert_eq!(history2, history);
        assert_eq!(model2.snapshot(), model.snapshot());
    }

    #[test]
    fn train_stops_on_loss_target() {
        let acqs = tiny_dataset(5);
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 3,
            patience: 3,
            // Any epoch beats a loss bound this loose, so the loop
            // must stop right after the first one.
            loss_stop: Some(1e6),
            seed: 1,
            ..TrainConfig::default()
        };
        let mut model =
            build_single_modality_model(ModalityId::Structure, "mini-res-a", 2).unwrap();
        let history = train(&mut model, &acqs, &acqs, &cfg).unwrap();
        assert_eq!(history.stopping, StoppingReason::LossTarget);
        assert_eq!(history.epochs.len(), 1);
    }

    #[test]
    fn train_reports_divergence_and_keeps_last_good_weights() {
        let acqs = tiny_dataset(9);
        let cfg = TrainConfig {
            // A step this large pushes f32 parameters straight to ±inf.
            optimizer: Optimizer::Sgd {
                lr: 1e45,
                momentum: 0.0,
            },
            batch_size: 4,
            max_epochs: 4,
            patience: 4,
            seed: 2,
            ..TrainConfig::default()
        };
        let mut model =
            build_single_modality_model(ModalityId::Structure, "mini-res-a", 5).unwrap();
        let initial = model.snapshot();
        let history = train(&mut model, &acqs, &acqs, &cfg).unwrap();
        assert_eq!(history.stopping, StoppingReason::Diverged);
        assert!(history.epochs.is_empty(), "no epoch completed cleanly");
        assert_eq!(history.best_epoch, None);
        // The model is back at the last good (initial) weights.
        assert_eq!(model.snapshot(), initial);
        assert!(model.predict(&acqs[0]).unwrap().is_finite());
    }

    #[test]
    fn train_rejects_empty_splits() {
        let acqs = tiny_dataset(3);
        let mut model =
            build_single_modality_model(ModalityId::Structure, "mini-res-a", 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&mut model, &[], &acqs, &cfg),
            Err(TrainError::BadConfig(_))
        ));
        assert!(matches!(
            train(&mut model, &acqs, &[], &cfg),
            Err(TrainError::BadConfig(_))
        ));
    }
}
