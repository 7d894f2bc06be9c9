//! Mini-batch training, evaluation and checkpoints.
//!
//! Every random choice is drawn from a generator seeded by
//! [`stream_seed`](crate::seeds::stream_seed)`(seed, stream, epoch, index)`:
//! the epoch's sample order uses the shuffle stream with index 0, the
//! temporal subsample of dataset sample `i` uses the subsample stream with
//! index `i`. Model initialization derives from the same global seed.

mod checkpoint;
pub mod gradcheck;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{clip_global_norm, global_norm, Optimizer, OptimizerConfig, OptimizerKind, StepReport};

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{argmax_map, Encoder, EncoderConfig, SequenceSample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::seeds::{rng, stream, stream_seed};
use crate::synthdata::{Dataset, Split};
use crate::tensor::{Mode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Observations kept per sample and step; `None` uses all of them.
    pub n_keep: Option<usize>,
    pub seed: u64,
    /// Steps between checkpoints.
    pub checkpoint_every: Option<usize>,
    pub clip: Option<f64>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        TrainConfig {
            optimizer: o.kind,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            batch: 4,
            epochs: 10,
            n_keep: Some(20),
            seed: 0,
            checkpoint_every: None,
            clip: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.n_keep == Some(0) {
            return Err(Error::Config("n_keep must be >= 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig { kind: self.optimizer, lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, clip: self.clip }
    }
}

/// Strictly increasing, order-preserving random subset of `0..available`
/// of size `min(n_keep, available)`.
pub fn subsample_sequence(available: usize, n_keep: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if available == 0 {
        return Err(Error::AllPadded);
    }
    if n_keep >= available {
        return Ok((0..available).collect());
    }
    let mut v = index::sample(rng, available, n_keep).into_vec();
    v.sort_unstable();
    Ok(v)
}

/// A sample restricted to a seeded subset of its observed frames.
pub fn subsample(sample: &SequenceSample, n_keep: usize, rng: &mut ChaCha8Rng) -> Result<SequenceSample> {
    let observed = sample.observed();
    let keep = subsample_sequence(observed.len(), n_keep, rng)?;
    sample.select(&keep.into_iter().map(|i| observed[i]).collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// `step,epoch,loss` rows; wall-clock time is kept out so equal runs give
/// equal files.
pub fn write_history_csv<W: Write>(rows: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Model, optimizer and counters of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub encoder: Encoder,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    pub step: usize,
    pub epoch: usize,
    pub history: Vec<HistoryRow>,
}

impl Trainer {
    pub fn new(encoder_config: EncoderConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(encoder_config, config.seed)?;
        let optimizer = Optimizer::new(config.optimizer_config(), &encoder.parameters())?;
        Ok(Trainer { encoder, optimizer, config, step: 0, epoch: 0, history: Vec::new() })
    }

    /// Resume from a checkpoint (falls back to a fresh optimizer state when
    /// the checkpoint has none).
    pub fn from_checkpoint(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = match ck.optimizer {
            Some(o) => o,
            None => Optimizer::new(config.optimizer_config(), &ck.encoder.parameters())?,
        };
        Ok(Trainer { encoder: ck.encoder, optimizer, config, step: ck.step as usize, epoch: ck.epoch as usize, history: Vec::new() })
    }

    /// One update on a batch of `(dataset index, sample)` pairs; returns the mean loss.
    pub fn train_step(&mut self, batch: &[(usize, &SequenceSample)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptySplit("empty batch".into()));
        }
        let (seed, epoch, n_keep) = (self.config.seed, self.epoch as u64, self.config.n_keep);
        let enc = &self.encoder;
        let results: Vec<Result<_>> = batch
            .par_iter()
            .map(|&(i, s)| {
                let owned;
                let s = match n_keep {
                    Some(k) => {
                        owned = subsample(s, k, &mut rng(stream_seed(seed, stream::SUBSAMPLE, epoch, i as u64)))?;
                        &owned
                    }
                    None => s,
                };
                let pass = enc.forward(s, Mode::Train)?;
                let grads = enc.backward(&pass)?;
                Ok((pass, grads.params))
            })
            .collect();
        let mut total = 0.0;
        let mut sum: Option<Vec<Tensor>> = None;
        let mut passes = Vec::with_capacity(batch.len());
        for r in results {
            let (pass, grads) = r?;
            total += pass.loss;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g)?;
                    }
                }
            }
            passes.push(pass);
        }
        let scale = 1.0 / batch.len() as f64;
        let grads: Vec<Tensor> = sum.expect("non-empty batch").iter().map(|g| g.scale(scale)).collect();
        self.optimizer.step(self.encoder.parameters_mut(), grads)?;
        for pass in &passes {
            self.encoder.commit_batch_stats(pass);
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "train_step" });
        }
        self.step += 1;
        self.history.push(HistoryRow { step: self.step, epoch: self.epoch, loss });
        Ok(loss)
    }

    fn done(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// One pass over `train` in a seeded order. `after_step` runs after every
    /// update and may stop training by returning `false`. Returns `false`
    /// when training should stop.
    pub fn run_epoch(
        &mut self,
        train: &[&SequenceSample],
        after_step: &mut dyn FnMut(&Trainer) -> Result<bool>,
    ) -> Result<bool> {
        if train.is_empty() {
            return Err(Error::EmptySplit("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng(stream_seed(self.config.seed, stream::SHUFFLE, self.epoch as u64, 0)));
        for chunk in order.chunks(self.config.batch) {
            if self.done() {
                return Ok(false);
            }
            let batch: Vec<(usize, &SequenceSample)> = chunk.iter().map(|&i| (i, train[i])).collect();
            self.train_step(&batch)?;
            if !after_step(self)? {
                return Ok(false);
            }
        }
        self.epoch += 1;
        Ok(!self.done())
    }

    pub fn checkpoint(&self, metrics: serde_json::Value) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.clone(),
            optimizer: Some(self.optimizer.clone()),
            train: Some(self.config.clone()),
            step: self.step as u64,
            epoch: self.epoch as u64,
            metrics,
        }
    }
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitResult {
    pub trainer: Trainer,
    pub validation: Option<MetricsReport>,
}

/// Train for `config.epochs` epochs (or `max_steps`), then evaluate on
/// `validation` when it is non-empty. `on_checkpoint` receives a snapshot
/// every `checkpoint_every` steps.
pub fn fit(
    train: &[&SequenceSample],
    validation: &[&SequenceSample],
    encoder_config: EncoderConfig,
    config: TrainConfig,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<FitResult> {
    let mut trainer = Trainer::new(encoder_config, config)?;
    check_samples(&trainer.encoder.config, train)?;
    check_samples(&trainer.encoder.config, validation)?;
    let every = trainer.config.checkpoint_every;
    let mut hook = |t: &Trainer| -> Result<bool> {
        if every.is_some_and(|e| t.step % e == 0) {
            let last = t.history.last().map_or(f64::NAN, |h| h.loss);
            on_checkpoint(&t.checkpoint(serde_json::json!({ "loss": last })))?;
        }
        Ok(true)
    };
    while trainer.epoch < trainer.config.epochs {
        if !trainer.run_epoch(train, &mut hook)? {
            break;
        }
    }
    let validation = if validation.is_empty() { None } else { Some(evaluate(&trainer.encoder, validation, false)?) };
    Ok(FitResult { trainer, validation })
}

fn check_samples(config: &EncoderConfig, samples: &[&SequenceSample]) -> Result<()> {
    for s in samples {
        let (_, _, _, d) = s.dims();
        if d != config.cell.d {
            return Err(Error::Config(format!("dataset depth {d} does not match model depth {}", config.cell.d)));
        }
        s.labels.check_classes(config.n_classes)?;
    }
    Ok(())
}

/// Inference-mode metrics over full (unsubsampled) sequences.
pub fn evaluate(encoder: &Encoder, samples: &[&SequenceSample], precision_side: bool) -> Result<MetricsReport> {
    let cm = confusion(encoder, samples)?;
    Ok(MetricsReport::new(&cm, precision_side))
}

pub fn confusion(encoder: &Encoder, samples: &[&SequenceSample]) -> Result<ConfusionMatrix> {
    check_samples(&encoder.config, samples)?;
    let parts: Vec<Result<ConfusionMatrix>> = samples
        .par_iter()
        .map(|s| {
            let y = encoder.predict(s, Mode::Infer)?;
            let mut cm = ConfusionMatrix::new(encoder.config.n_classes);
            cm.update_map(&argmax_map(&y)?, &s.labels)?;
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(encoder.config.n_classes);
    for p in parts {
        cm.merge(&p?)?;
    }
    Ok(cm)
}

/// [`evaluate`] on one split of a dataset, checking class count and depth.
pub fn evaluate_split(encoder: &Encoder, dataset: &Dataset, split: Split, precision_side: bool) -> Result<MetricsReport> {
    if dataset.n_classes != encoder.config.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            dataset.n_classes, encoder.config.n_classes
        )));
    }
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::EmptySplit(format!("{split} split is empty")));
    }
    evaluate(encoder, &samples, precision_side)
}
