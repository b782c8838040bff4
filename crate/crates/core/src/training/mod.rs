//! Multi-label training: binary cross-entropy summed over the batch, Adam
//! with bias correction, seeded mini-batch shuffling and checkpointing of
//! the model with the lowest held-out loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{UtteranceExample, MAX_SPEAKERS_PER_UTTERANCE};
use crate::error::{Error, Result};
use crate::layers::{apply_norm_updates, ForwardCtx, Mode, ParamStore};
use crate::models::Model;
use crate::par::Execution;
use crate::tensor::{Graph, Tensor, Var};

/// Predictions are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the old running statistic in batch-norm updates.
    pub bn_momentum: f64,
    /// Fraction of the training utterances held out for checkpoint selection.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.95,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            bn_momentum: 0.9,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.bn_momentum)
            && (0.0..1.0).contains(&self.holdout_fraction);
        if !ok {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// Multi-hot target over K speakers.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector(Vec<f64>);

impl LabelVector {
    pub fn from_speakers(speakers: &[usize], num_speakers: usize) -> Result<Self> {
        if speakers.is_empty() || speakers.len() > MAX_SPEAKERS_PER_UTTERANCE {
            return Err(Error::Data(format!("label set {speakers:?} must hold 1 to 3 speakers")));
        }
        let mut y = vec![0.0; num_speakers];
        for &s in speakers {
            if s >= num_speakers || y[s] == 1.0 {
                return Err(Error::Data(format!("invalid label set {speakers:?} for {num_speakers} speakers")));
            }
            y[s] = 1.0;
        }
        Ok(LabelVector(y))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Stack label vectors into `[B×K]`.
pub fn label_matrix(examples: &[&UtteranceExample], num_speakers: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(examples.len() * num_speakers);
    for ex in examples {
        data.extend_from_slice(LabelVector::from_speakers(&ex.speakers, num_speakers)?.as_slice());
    }
    Tensor::new(vec![examples.len(), num_speakers], data)
}

/// `−Σ [Y log Ŷ + (1 − Y) log(1 − Ŷ)]` over every entry, with `Ŷ` clamped.
pub fn bce_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!("predictions {:?} vs targets {:?}", g.shape(pred), target.shape()),
        ));
    }
    let p = g.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let y = g.constant(target.clone());
    let not_y = g.constant(target.map(|v| 1.0 - v));
    let log_p = g.log(p)?;
    let q = g.mul_scalar(p, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.log(q)?;
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let total = g.add(pos, neg)?;
    let total = g.sum(total);
    Ok(g.mul_scalar(total, -1.0))
}

/// The same sum on plain values.
pub fn bce_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("bce_value", format!("{} vs {}", pred.len(), target.len())));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum())
}

/// First and second moment estimates aligned with a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update of every trainable tensor that has a gradient.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients and {} moments for {} parameters", grads.len(), state.m.len(), store.len()),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let Some(g) = &grads[i] else { continue };
        if !store.entry(id).trainable {
            continue;
        }
        let theta = store.get_mut(id);
        if g.shape() != theta.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient {:?} for parameter {:?}", g.shape(), theta.shape()),
            ));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((p, &g), m), v) in theta.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Hold out `fraction` of the examples, chosen by a seeded shuffle. Both
/// parts keep their original order.
pub fn split_holdout(
    examples: Vec<UtteranceExample>,
    fraction: f64,
    seed: u64,
) -> (Vec<UtteranceExample>, Vec<UtteranceExample>) {
    let n = examples.len();
    let held = ((n as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut is_held = vec![false; n];
    for &i in &order[..held.min(n)] {
        is_held[i] = true;
    }
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (ex, held) in examples.into_iter().zip(is_held) {
        if held {
            holdout.push(ex);
        } else {
            train.push(ex);
        }
    }
    (train, holdout)
}

/// Seeded mini-batches of indices; a trailing batch of one utterance joins
/// the previous batch so batch statistics are never taken over one row.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: AdamState,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(model.store());
        Ok(Trainer {
            model,
            cfg,
            adam,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One optimizer step on a batch; returns the summed batch loss.
    pub fn step(&mut self, batch: &[&UtteranceExample]) -> Result<f64> {
        let k = self.model.config().num_speakers;
        let labels = label_matrix(batch, k)?;
        let inputs: Vec<&Tensor> = batch.iter().map(|ex| &ex.features).collect();
        let (loss, grads, updates) = {
            let mut ctx = ForwardCtx::new(self.model.store(), Mode::Train);
            let pred = self.model.forward(&mut ctx, &inputs)?;
            let loss = bce_loss(&mut ctx.graph, pred, &labels)?;
            let value = ctx.graph.value(loss).data()[0];
            if !value.is_finite() {
                return Ok(value);
            }
            ctx.graph.backward(loss)?;
            (value, ctx.param_grads(), ctx.norm_updates().to_vec())
        };
        adam_step(self.model.store_mut(), &grads, &mut self.adam, &self.cfg)?;
        apply_norm_updates(self.model.store_mut(), &updates, self.cfg.bn_momentum);
        Ok(loss)
    }

    /// One pass over `data`; returns the mean per-utterance training loss.
    pub fn run_epoch(&mut self, data: &[UtteranceExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("no training utterances".into()));
        }
        let dim = self.model.config().feature_dim;
        if let Some(bad) = data.iter().find(|ex| ex.features.cols() != dim) {
            return Err(Error::Data(format!(
                "utterance {} has {} features per frame, model expects {dim}",
                bad.id,
                bad.features.cols()
            )));
        }
        let batches = epoch_batches(data.len(), self.cfg.batch_size, self.cfg.seed, self.epoch);
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&UtteranceExample> = idx.iter().map(|&i| &data[i]).collect();
            let loss = self.step(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    batch: b + 1,
                    value: loss,
                });
            }
            total += loss;
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }
}

/// Mean per-utterance loss with eval-mode predictions.
pub fn mean_loss(model: &Model, data: &[UtteranceExample], exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("no utterances to score".into()));
    }
    let k = model.config().num_speakers;
    let features: Vec<Tensor> = data.iter().map(|ex| ex.features.clone()).collect();
    let scores = model.predict_all(&features, exec)?;
    let mut total = 0.0;
    for (ex, s) in data.iter().zip(&scores) {
        let y = LabelVector::from_speakers(&ex.speakers, k)?;
        total += bce_value(s.as_slice(), y.as_slice())?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSplit {
    Train,
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: LossSplit,
    pub loss: f64,
}

pub struct TrainReport {
    pub curve: Vec<LossRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_loss: f64,
    /// Parameters from the best epoch.
    pub model: Model,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss\n");
        for r in &self.curve {
            let split = match r.split {
                LossSplit::Train => "train",
                LossSplit::Holdout => "holdout",
            };
            writeln!(out, "{},{},{}", r.epoch, split, r.loss).expect("write to String");
        }
        out
    }
}

/// Train for `cfg.epochs` epochs. The kept model is the one with the lowest
/// held-out loss, or the lowest training loss when `holdout` is empty. With
/// `out` set, writes `loss.csv` and the kept model under `checkpoint/`.
pub fn train(
    model: Model,
    cfg: &TrainConfig,
    data: &[UtteranceExample],
    holdout: &[UtteranceExample],
    out: Option<&Path>,
    exec: Execution,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut curve = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let loss = trainer.run_epoch(data)?;
        curve.push(LossRecord {
            epoch,
            split: LossSplit::Train,
            loss,
        });
        let score = if holdout.is_empty() {
            loss
        } else {
            let h = mean_loss(trainer.model(), holdout, exec)?;
            if !h.is_finite() {
                return Err(Error::Data(format!("non-finite held-out loss at epoch {epoch}: {h}")));
            }
            curve.push(LossRecord {
                epoch,
                split: LossSplit::Holdout,
                loss: h,
            });
            h
        };
        if best.as_ref().is_none_or(|(_, b, _)| score < *b) {
            best = Some((epoch, score, trainer.model().store().clone()));
        }
    }
    let mut model = trainer.into_model();
    let (best_epoch, best_loss) = match best {
        Some((epoch, loss, store)) => {
            model.store_mut().copy_from(&store)?;
            (epoch, loss)
        }
        None => (0, f64::NAN),
    };
    let report = TrainReport {
        curve,
        best_epoch,
        best_loss,
        model,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("loss.csv");
        fs::write(&csv, report.curve_csv()).map_err(|e| Error::io(&csv, e))?;
        report.model.save(&dir.join("checkpoint"))?;
    }
    Ok(report)
}
