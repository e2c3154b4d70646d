//! Huber-loss Adam training with classic L2, early stopping on a chronological
//! validation tail, and leave-one-battery-out orchestration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_composite, AugmentConfig};
use crate::dataset::{batch_tensors, make_loocv_splits, make_windows, BatterySeries, NormalizationState, WindowedSample};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, rollout, Aggregate, EvalReport, RolloutMode};
use crate::model::{CdformerModel, Checkpoint, ModelConfig};
use crate::nn::{Forward, Mode, ParamId, ParamStore};
use crate::tape::huber_value;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainProfile {
    Nasa,
    Calce,
    #[default]
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub huber_delta: f64,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    pub profile: TrainProfile,
    /// Chronological tail of each training battery's windows held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 15,
            huber_delta: 1.0,
            seed: 0,
            augment: None,
            profile: TrainProfile::Custom,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn nasa() -> Self {
        Self {
            lr: 5e-4,
            max_epochs: 200,
            profile: TrainProfile::Nasa,
            ..Self::default()
        }
    }

    pub fn calce() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 500,
            profile: TrainProfile::Calce,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr > 0.0) {
            bad.push("lr must be > 0");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            bad.push("beta1 and beta2 must lie in (0,1)");
        }
        if !(self.weight_decay >= 0.0) {
            bad.push("weight_decay must be ≥ 0");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be ≥ 1");
        }
        if self.patience == 0 {
            bad.push("patience must be ≥ 1");
        }
        if !(self.huber_delta > 0.0) {
            bad.push("huber_delta must be > 0");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            bad.push("val_fraction must lie in [0,1)");
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad.join("; ")));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// First and second moment buffers in store order, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

/// One bias-corrected Adam step with the L2 term `λ·w` added to each gradient.
///
/// `grads` must list parameters in a stable order across calls.
pub fn adam_step(store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for (id, g) in grads {
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{} (element {bad})", store.entry(*id).name)));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != grads.len() {
        return Err(Error::Contract("adam state does not match the parameter list".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, (id, g)) in grads.iter().enumerate() {
        let w = store.get_mut(*id).data_mut();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..w.len() {
            let gi = g[i] + cfg.weight_decay * w[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            w[i] -= cfg.lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    /// Records an epoch's monitored loss; returns true when this epoch is the new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

/// One optimizer step on a batch in training mode; returns the batch loss.
pub fn train_step(
    model: &mut CdformerModel,
    batch: &[&WindowedSample],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (x, y) = batch_tensors(batch.iter().copied())?;
    let (loss, grads, bn) = {
        let mut f = Forward::new(model.params(), Mode::Train, true);
        let xv = f.input(x);
        let yv = f.input(y);
        let pred = model.forward(&mut f, xv)?;
        let loss = f.tape.huber(pred, yv, cfg.huber_delta)?;
        let value = f.tape.value(loss).item()?;
        f.backward(loss)?;
        let grads = f.param_grads();
        (value, grads, f.into_bn_updates())
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    adam_step(model.params_mut(), &grads, state, cfg)?;
    model.params_mut().apply_bn_updates(&bn);
    Ok(loss)
}

/// Mean Huber loss of evaluation-mode predictions.
pub fn evaluate_loss(model: &CdformerModel, samples: &[WindowedSample], delta: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySequence("evaluate_loss"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(256) {
        let (x, y) = batch_tensors(chunk)?;
        let pred = model.predict(&x)?;
        total += pred.iter().zip(y.data()).map(|(p, t)| huber_value(p - t, delta)).sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the best monitored epoch (the initial weights if no epoch ran).
    pub model: CdformerModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_loss: f64,
    pub steps: u64,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// Writes `epoch,train_loss,val_loss` rows.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        let val = h.val_loss.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, val));
    }
    s
}

/// Seeded mini-batch training with online augmentation of training inputs.
///
/// The monitored loss is the validation loss, or the training loss when `val`
/// is empty. Returns the best-epoch weights.
pub fn train_split(model: CdformerModel, train: &[WindowedSample], val: &[WindowedSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySequence("train_split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let aug = cfg.augment.clone().map(|a| AugmentConfig {
        seed: a.seed ^ cfg.seed.rotate_left(32),
        ..a
    });
    let mut model = model;
    let mut best = model.clone();
    let mut state = AdamState::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut counter = 0u64;
    let mut diverged = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let augmented: Vec<WindowedSample>;
            let batch: Vec<&WindowedSample> = match &aug {
                None => idx.iter().map(|&i| &train[i]).collect(),
                Some(a) => {
                    augmented = idx
                        .iter()
                        .map(|&i| {
                            let mut s = train[i].clone();
                            let out = apply_composite(&s.time_major(), a, counter)?;
                            counter += 1;
                            s.set_time_major(&out.values);
                            Ok(s)
                        })
                        .collect::<Result<_>>()?;
                    augmented.iter().collect()
                }
            };
            match train_step(&mut model, &batch, &mut state, cfg) {
                Ok(l) => loss_sum += l * batch.len() as f64,
                Err(e @ (Error::NonFinite(_) | Error::NonFiniteGradient(_))) => {
                    log::error!("epoch {epoch}: {e}; keeping the last good checkpoint");
                    diverged = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = if val.is_empty() { None } else { Some(evaluate_loss(&model, val, cfg.huber_delta)?) };
        let monitored = val_loss.unwrap_or(train_loss);
        history.push(EpochRecord { epoch, train_loss, val_loss });
        if !monitored.is_finite() {
            diverged = Some(format!("epoch {epoch}: monitored loss is {monitored}"));
            break;
        }
        if stopper.observe(epoch, monitored) {
            best = model.clone();
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} monitored {monitored:.6}");
        if stopper.should_stop() {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch: stopper.best_epoch,
        best_loss: stopper.best,
        steps: state.t,
        diverged,
    })
}

/// Training windows and validation windows (chronological tail of each battery).
pub fn split_train_val(
    batteries: &[&BatterySeries],
    norm: &NormalizationState,
    window_len: usize,
    val_fraction: f64,
) -> Result<(Vec<WindowedSample>, Vec<WindowedSample>)> {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for b in batteries {
        let mut w = make_windows(b, window_len, Some(norm))?;
        let n_val = ((w.len() as f64) * val_fraction).round() as usize;
        let n_val = n_val.min(w.len().saturating_sub(1));
        val.extend(w.split_off(w.len() - n_val));
        train.extend(w);
    }
    Ok((train, val))
}

#[derive(Clone, Debug)]
pub struct SplitResult {
    pub battery_id: String,
    pub outcome: Result<(Checkpoint, EvalReport, Vec<EpochRecord>), String>,
}

#[derive(Clone, Debug)]
pub struct LoocvResult {
    pub splits: Vec<SplitResult>,
    /// Mean metrics over the splits that succeeded.
    pub aggregate: Option<Aggregate>,
}

impl LoocvResult {
    pub fn reports(&self) -> Vec<EvalReport> {
        self.splits
            .iter()
            .filter_map(|s| s.outcome.as_ref().ok().map(|(_, r, _)| r.clone()))
            .collect()
    }
}

fn run_split(
    batteries: &[BatterySeries],
    train_idx: &[usize],
    test_idx: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mode: RolloutMode,
) -> Result<(Checkpoint, EvalReport, Vec<EpochRecord>)> {
    let train: Vec<&BatterySeries> = train_idx.iter().map(|&i| &batteries[i]).collect();
    let owned: Vec<BatterySeries> = train.iter().map(|b| (*b).clone()).collect();
    let features = batteries[test_idx].profile.features();
    let norm = NormalizationState::fit(&owned, features)?;
    let (tr, va) = split_train_val(&train, &norm, model_cfg.window_len, train_cfg.val_fraction)?;
    let mut cfg = train_cfg.clone();
    // each split gets its own stream
    cfg.seed = train_cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(test_idx as u64);
    let model = CdformerModel::build(model_cfg.clone(), cfg.seed)?;
    let out = train_split(model, &tr, &va, &cfg)?;
    let test = &batteries[test_idx];
    let r = rollout(&out.model, test, &norm, model_cfg.window_len, mode)?;
    let report = evaluate(test, &r, mode)?;
    Ok((out.model.to_checkpoint(Some(norm)), report, out.history))
}

/// Leave-one-battery-out: normalizer fitted on the training batteries, model
/// trained, held-out battery rolled out. A failing split is recorded and the
/// others continue. `parallel > 1` runs splits on a thread pool of that size.
pub fn run_loocv(
    batteries: &[BatterySeries],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mode: RolloutMode,
    parallel: usize,
) -> Result<LoocvResult> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let splits = make_loocv_splits(batteries)?;
    let run = |s: &crate::dataset::Split| SplitResult {
        battery_id: batteries[s.test].battery_id.clone(),
        outcome: run_split(batteries, &s.train, s.test, model_cfg, train_cfg, mode).map_err(|e| {
            log::error!("split {}: {e}", batteries[s.test].battery_id);
            e.to_string()
        }),
    };
    let results: Vec<SplitResult> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| splits.par_iter().map(run).collect())
    } else {
        splits.iter().map(run).collect()
    };
    let reports: Vec<EvalReport> = results
        .iter()
        .filter_map(|s| s.outcome.as_ref().ok().map(|(_, r, _)| r.clone()))
        .collect();
    let aggregate = if reports.is_empty() { None } else { Some(aggregate(&reports)?) };
    Ok(LoocvResult { splits: results, aggregate })
}
