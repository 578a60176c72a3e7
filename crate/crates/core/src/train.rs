//! Initialization, Adam and the epoch loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{group_windows, Dataset, GapSplit, TrainWindow};
use crate::eval::{score_examples, EvalError, Metric};
use crate::model::{CaseqConfig, CaseqParams, ModelError, UnitParams};
use crate::objective::{default_pseudo_lengths, loss_and_grad, sample_pseudo_sequences, LossBreakdown, ObjectiveError};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("empty training split")]
    EmptyTrain,
    #[error("non-finite gradient at step {0}")]
    NonFinite(usize),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<CaseqParams>,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidMetric {
    Accuracy,
    Ndcg,
}

impl ValidMetric {
    pub fn metric(self) -> Metric {
        match self {
            Self::Accuracy => Metric::Accuracy,
            Self::Ndcg => Metric::Ndcg(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Sequences (training windows) per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Pseudo sequences per epoch.
    pub pseudo_count: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub valid_metric: ValidMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            epochs: 20,
            seed: 0,
            alpha: 0.1,
            pseudo_count: 16,
            patience: 5,
            valid_metric: ValidMetric::Accuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 || self.pseudo_count == 0 {
            return bad("batch_size and pseudo_count must be positive");
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be non-negative");
        }
        Ok(())
    }
}

fn xavier<R: Rng + ?Sized>(t: &mut Tensor, rng: &mut R) {
    let (fan_in, fan_out) = t.dims2();
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// Xavier-uniform weights, zero biases.
pub fn init_params(config: &CaseqConfig, seed: u64) -> CaseqParams {
    let mut p = CaseqParams::zeros(config);
    let mut rng = stream(seed, &[0x1417]);
    xavier(&mut p.event_emb, &mut rng);
    if let Some(pos) = &mut p.positional {
        xavier(pos, &mut rng);
    }
    for layer in &mut p.layers {
        xavier(&mut layer.context_emb, &mut rng);
        for unit in &mut layer.units {
            match unit {
                UnitParams::Gru { w_x, w_h, .. } => {
                    xavier(w_x, &mut rng);
                    xavier(w_h, &mut rng);
                }
                UnitParams::Attention { w_q, w_k, w_v, w_1, w_2, .. } => {
                    for w in [w_q, w_k, w_v, w_1, w_2] {
                        xavier(w, &mut rng);
                    }
                }
            }
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Steps taken so far.
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &CaseqParams) -> Self {
        let z: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(params: &mut CaseqParams, grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite(state.t + 1));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Position-weighted mean over the epoch's steps.
    pub loss: LossBreakdown,
    pub valid: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; `None` means the initial ones.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,prediction,kl,alpha,floor_hits,valid,seconds\n");
        for r in &self.epochs {
            let valid = r.valid.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{},{},{},{:.3}",
                r.epoch, r.loss.total, r.loss.prediction, r.loss.kl, r.loss.alpha, r.loss.floor_hits, valid, r.seconds
            );
        }
        out
    }
}

fn accumulate(acc: &mut LossBreakdown, step: &LossBreakdown) {
    let n = (acc.positions + step.positions) as f64;
    let w_old = acc.positions as f64 / n;
    let w_new = step.positions as f64 / n;
    acc.total = acc.total * w_old + step.total * w_new;
    acc.prediction = acc.prediction * w_old + step.prediction * w_new;
    acc.kl = acc.kl * w_old + step.kl * w_new;
    acc.alpha = step.alpha;
    acc.floor_hits += step.floor_hits;
    acc.positions += step.positions;
}

/// Trains from scratch and returns the parameters of the best validation
/// epoch (the last epoch when no validation examples exist).
pub fn train(ds: &Dataset, split: &GapSplit, config: &CaseqConfig, tcfg: &TrainConfig) -> Result<(CaseqParams, TrainHistory)> {
    train_from(init_params(config, tcfg.seed), ds, split, config, tcfg)
}

pub fn train_from(
    mut params: CaseqParams,
    ds: &Dataset,
    split: &GapSplit,
    config: &CaseqConfig,
    tcfg: &TrainConfig,
) -> Result<(CaseqParams, TrainHistory)> {
    config.validate()?;
    tcfg.validate()?;
    params.check(config)?;
    let windows = group_windows(ds, &split.train, config.max_len);
    if windows.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let lengths: Vec<usize> = windows.iter().map(|w| ds.sequences[w.seq].len()).collect();
    let pseudo_lengths = default_pseudo_lengths(&lengths, config.max_len);
    let metric = tcfg.valid_metric.metric();

    let mut state = AdamState::new(&params);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, CaseqParams)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 0..tcfg.epochs {
        let started = Instant::now();
        let e = epoch as u64;
        let pseudo = sample_pseudo_sequences(tcfg.pseudo_count, config.event_types, pseudo_lengths, &mut stream(tcfg.seed, &[e, 1]));
        order.shuffle(&mut stream(tcfg.seed, &[e, 2]));
        let mut epoch_loss = LossBreakdown::default();
        for (step, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<TrainWindow> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let seed = derive_seed(tcfg.seed, &[e, 3, step as u64]);
            let (loss, grads) = loss_and_grad(&params, config, &batch, tcfg.alpha, &pseudo, config.routing, seed)?;
            let last_good = params.clone();
            if !loss.total.is_finite() || adam_step(&mut params, &grads, &mut state, tcfg).is_err() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    last_good: Box::new(last_good),
                });
            }
            accumulate(&mut epoch_loss, &loss);
        }
        let valid = score_examples(&params, config, ds, &split.valid, &[metric], 0, tcfg.seed)?[0];
        log::info!(
            "epoch {epoch}: loss {:.4} (ce {:.4}, kl {:.4}) valid {:?}",
            epoch_loss.total,
            epoch_loss.prediction,
            epoch_loss.kl,
            valid
        );
        history.epochs.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            valid,
            seconds: started.elapsed().as_secs_f64(),
        });
        match valid {
            Some(v) if best.as_ref().is_none_or(|(b, _)| v >= *b) => {
                // Ties go to the later epoch.
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                best = Some((v, params.clone()));
                history.best_epoch = Some(epoch);
                if tcfg.patience > 0 && since_best >= tcfg.patience {
                    break;
                }
            }
            Some(_) => {
                since_best += 1;
                if tcfg.patience > 0 && since_best >= tcfg.patience {
                    break;
                }
            }
            None => history.best_epoch = Some(epoch),
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    Ok((params, history))
}
