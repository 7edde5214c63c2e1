use serde::{Deserialize, Serialize};

use super::corpus::{DialogueDataset, Pair};
use super::model::{GradMode, TinyLM};
use crate::error::{Error, Result};
use crate::numkit::{AdamState, ParamSet, Rng, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Every base tensor (and the adapter factors, if one is attached).
    #[default]
    All,
    /// Only the attached adapter's factors; base weights stay frozen.
    AdapterOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub trainable: Trainable,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 16,
            trainable: Trainable::All,
            seed: 0,
        }
    }
}

/// Epoch-at-a-time trainer, so callers can inspect the model between epochs.
pub struct Trainer {
    model: TinyLM,
    cfg: TrainConfig,
    opt: AdamState,
    rng: Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: TinyLM, cfg: TrainConfig) -> Result<Self> {
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(Error::input(format!("learning rate {} must be > 0", cfg.lr)));
        }
        if cfg.batch_size == 0 {
            return Err(Error::input("batch_size must be positive"));
        }
        if cfg.trainable == Trainable::AdapterOnly && model.adapter().is_none() {
            return Err(Error::State("adapter-only training needs an attached adapter".into()));
        }
        let rng = Rng::derive(cfg.seed, "train");
        Ok(Trainer {
            model,
            cfg,
            opt: AdamState::new(),
            rng,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &TinyLM {
        &self.model
    }

    pub fn into_model(self) -> TinyLM {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `data` in a seeded shuffled order; returns the mean
    /// per-token training loss.
    pub fn epoch(&mut self, data: &DialogueDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::input("training data is empty"));
        }
        self.epoch += 1;
        let order = self.rng.permutation(data.len());
        let mode = match self.cfg.trainable {
            Trainable::All => GradMode::All,
            Trainable::AdapterOnly => GradMode::AdapterOnly,
        };
        let mut loss_sum = 0.0f64;
        let mut tokens = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &data.pairs[i]).collect();
            let loss = self.step(&batch, mode).map_err(|e| match e {
                Error::NonFinite(_) => Error::TrainingDiverged { epoch: self.epoch },
                e => e,
            })?;
            let n: usize = batch.iter().map(|p| p.output.len()).sum();
            loss_sum += loss * n as f64;
            tokens += n;
        }
        let mean = loss_sum / tokens as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch: self.epoch });
        }
        Ok(mean)
    }

    fn step(&mut self, batch: &[&Pair], mode: GradMode) -> Result<f64> {
        let mut tape = Tape::new();
        let ((sel, graph), targets) = self.model.output_selection(&mut tape, batch, mode)?;
        let loss = tape.cross_entropy(sel, &targets)?;
        let value = f64::from(tape.value(loss).data()[0]);
        let mut grads = tape.backward(loss)?;

        if mode == GradMode::All {
            let mut g = ParamSet::new();
            for (name, v) in &graph.base {
                g.insert(name.clone(), grads.take(*v));
            }
            self.opt.step(self.model.params_mut(), &g, self.cfg.lr)?;
        }
        if let Some(adapter) = self.model.adapter_mut() {
            let mut g = ParamSet::new();
            for (name, v) in &graph.adapter {
                g.insert(name.clone(), grads.take(*v));
            }
            let mut factors = adapter.factors();
            self.opt.step(&mut factors, &g, self.cfg.lr)?;
            adapter.set_factors(&factors)?;
        }
        let finite = self.model.params().is_finite()
            && self.model.adapter().is_none_or(|a| a.factors().is_finite());
        if !finite {
            return Err(Error::NonFinite("optimizer step".into()));
        }
        Ok(value)
    }
}

/// Per-epoch mean training losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Trains `model` on `data` for `cfg.epochs` epochs and returns the new model.
pub fn train(model: &TinyLM, data: &DialogueDataset, cfg: &TrainConfig) -> Result<(TinyLM, TrainLog)> {
    if data.is_empty() {
        return Err(Error::input("training data is empty"));
    }
    data.validate(model.config().context_len)?;
    let mut trainer = Trainer::new(model.clone(), cfg.clone())?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        losses.push(trainer.epoch(data)?);
    }
    Ok((trainer.into_model(), TrainLog { losses }))
}

/// Mean per-token cross-entropy over `pairs` and its gradient with respect
/// to every base tensor. An attached adapter is merged first.
pub fn loss_gradients(model: &TinyLM, pairs: &[&Pair]) -> Result<(f64, ParamSet)> {
    if pairs.is_empty() {
        return Err(Error::input("no pairs to differentiate"));
    }
    let model = model.merged()?;
    let mut tape = Tape::new();
    let ((sel, graph), targets) = model.output_selection(&mut tape, pairs, GradMode::All)?;
    let loss = tape.cross_entropy(sel, &targets)?;
    let value = f64::from(tape.value(loss).data()[0]);
    let mut grads = tape.backward(loss)?;
    let g = graph
        .base
        .iter()
        .map(|(name, v)| (name.clone(), grads.take(*v)))
        .collect();
    Ok((value, g))
}

/// Mean per-token cross-entropy of `data` under `model`.
pub fn dataset_loss(model: &TinyLM, data: &DialogueDataset) -> Result<f64> {
    let lp = super::eval::target_logprobs(model, data)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}
