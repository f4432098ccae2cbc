//! The two-head model, task weighting and the training loop.
//!
//! Randomness is split into independent substreams of the run seed:
//! the train/val partition uses stream 0, model initialization
//! [`INIT_STREAM`], per-epoch shuffling and label sampling [`DATA_STREAM`],
//! and the fixed validation labels [`VAL_STREAM`].

pub mod config;
pub mod metrics;
mod mgda;
pub mod model;

use std::fs;
use std::path::Path;
use std::time::Instant;

pub use config::{AlphaMode, RunConfig, TrainMode};
pub use metrics::{EpochMetrics, CSV_HEADER};
pub use mgda::{joint_loss, mgda_alpha, TIE_EPS};
pub use model::{forward_two_head, images_to_tensor, Head, ProbePoint, TwoHeadModel, FEATURE_DIM};

use crate::dataio::{dataset_stats, split_indices, ChannelStats, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::imgops::{IeKind, Image};
use crate::nn::{sgd_nesterov_step, softmax_cross_entropy, Checkpoint, Tape, Tensor};
use crate::pretext::{build_ierot_batch, build_rotation_batch, build_rotda_batch, EnhancementOnly};
use crate::rng::{Rng, RngState};

pub const INIT_STREAM: u64 = 1;
pub const DATA_STREAM: u64 = 2;
pub const VAL_STREAM: u64 = 3;

/// Inputs evaluated per forward pass during validation.
const EVAL_CHUNK: usize = 256;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const NONFINITE_FILE: &str = "nonfinite.ckpt";

/// Mean softmax cross-entropy of one head.
pub fn task_loss(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    softmax_cross_entropy(logits, labels).map(|(loss, _)| loss)
}

/// Model inputs with the labels of each task the mode trains.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextBatch {
    pub images: Vec<Image>,
    pub rotation: Option<Vec<usize>>,
    pub enhancement: Option<Vec<usize>>,
}

impl PretextBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Number of model inputs produced from `sources` source images.
pub fn inputs_per_batch(mode: TrainMode, sources: usize) -> usize {
    if mode.four_rotations() {
        4 * sources
    } else {
        sources
    }
}

/// Builds the model inputs for one step, drawing labels from `rng`.
pub fn build_batch(
    mode: TrainMode,
    ie: IeKind,
    sources: &[Image],
    rng: &mut Rng,
) -> Result<PretextBatch> {
    Ok(match mode {
        TrainMode::Ierot => {
            let samples = build_ierot_batch(sources, ie, rng)?;
            let rotation = samples.iter().map(|s| s.rotation_label).collect();
            let enhancement = samples.iter().map(|s| s.ie_label).collect();
            PretextBatch {
                images: samples.into_iter().map(|s| s.image).collect(),
                rotation: Some(rotation),
                enhancement: Some(enhancement),
            }
        }
        TrainMode::IeOnly => {
            let samples = build_ierot_batch(sources, ie, &mut EnhancementOnly(rng))?;
            let enhancement = samples.iter().map(|s| s.ie_label).collect();
            PretextBatch {
                images: samples.into_iter().map(|s| s.image).collect(),
                rotation: None,
                enhancement: Some(enhancement),
            }
        }
        TrainMode::Rotation | TrainMode::RotDa => {
            let pairs = if mode == TrainMode::Rotation {
                build_rotation_batch(sources)?
            } else {
                build_rotda_batch(sources, ie, rng)?
            };
            let (images, labels) = pairs.into_iter().unzip();
            PretextBatch {
                images,
                rotation: Some(labels),
                enhancement: None,
            }
        }
    })
}

/// Per-epoch visiting order of the training images.
pub fn epoch_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// One optimizer step as it happened.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_r: f32,
    pub loss_i: f32,
    pub alpha: f32,
    pub total: f32,
}

/// Shared representation gradient `dL/dZ = dL/dlogits . W`.
fn feature_grad(g_logits: &Tensor, weight: &Tensor) -> Vec<f32> {
    let n = g_logits.shape()[0];
    let (k, d) = (weight.shape()[0], weight.shape()[1]);
    let (g, w) = (g_logits.data(), weight.data());
    let mut out = vec![0f32; n * d];
    for i in 0..n {
        let row = &mut out[i * d..(i + 1) * d];
        for c in 0..k {
            let gc = g[i * k + c];
            for (o, &wv) in row.iter_mut().zip(&w[c * d..(c + 1) * d]) {
                *o += gc * wv;
            }
        }
    }
    out
}

fn argmax_accuracy(logits: &Tensor, labels: &[usize]) -> (usize, usize) {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == y
        })
        .count();
    (hits, labels.len())
}

fn mean(xs: impl Iterator<Item = f32>) -> f64 {
    let (mut sum, mut n) = (0f64, 0usize);
    for x in xs {
        sum += x as f64;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn rng_state_string(state: &RngState) -> String {
    let seed: String = state.seed.iter().map(|b| format!("{b:02x}")).collect();
    format!("{seed}:{}:{}", state.stream, state.word_pos)
}

fn parse_rng_state(s: &str) -> Result<RngState> {
    let bad = || Error::Config(format!("malformed rng state {s:?} in checkpoint"));
    let mut parts = s.split(':');
    let hex = parts.next().ok_or_else(bad)?;
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let stream = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let word_pos = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    Ok(RngState {
        seed,
        stream,
        word_pos,
    })
}

/// Settings that shape the training trajectory; a resumed run must match them.
fn run_fingerprint(cfg: &RunConfig) -> String {
    format!(
        "mode={} ie_kind={} variant={} seed={} batch_size={} lr0={} momentum={} weight_decay={} \
         alpha_mode={} alpha_fixed={} nesterov={} decay_norm_params={} lr_milestones={:?} max_images={:?}",
        cfg.mode,
        cfg.ie_kind,
        cfg.dataset_variant,
        cfg.seed,
        cfg.batch_size,
        cfg.lr0,
        cfg.momentum,
        cfg.weight_decay,
        cfg.alpha_mode,
        cfg.alpha_fixed,
        cfg.nesterov,
        cfg.decay_norm_params,
        cfg.lr_milestones,
        cfg.max_images,
    )
}

fn norm_tensor(values: [f32; 3]) -> Tensor {
    Tensor::new(&[3], values.to_vec()).expect("three channels")
}

fn norm_values(ck: &Checkpoint, name: &str) -> Result<[f32; 3]> {
    let t = ck
        .tensor(name)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
    t.data()
        .try_into()
        .map_err(|_| Error::Config(format!("checkpoint tensor {name} must hold 3 values")))
}

/// A model and the input normalization it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained {
    pub model: TwoHeadModel,
    pub norm: ChannelStats,
}

impl Pretrained {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Pretrained {
            model: TwoHeadModel::read_from(ck)?,
            norm: ChannelStats {
                mean: norm_values(ck, "norm.mean")?,
                std: norm_values(ck, "norm.std")?,
            },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Resumable training state for one run.
pub struct Trainer {
    config: RunConfig,
    model: TwoHeadModel,
    norm: ChannelStats,
    train: Vec<Image>,
    val: PretextBatch,
    data_rng: Rng,
    epoch: usize,
    step: usize,
    history: Vec<EpochMetrics>,
    step_log: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(config: RunConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let dataset = match config.max_images {
            Some(n) => dataset.truncated(n),
            None => dataset.clone(),
        };
        let (train_idx, val_idx) =
            split_indices(dataset.len(), SplitSpec::nine_to_one(config.seed))?;
        if train_idx.is_empty() || val_idx.is_empty() {
            return Err(Error::Config(format!(
                "{} images leave an empty train or validation split",
                dataset.len()
            )));
        }
        let train = dataset.subset(&train_idx);
        let val_sources = dataset.subset(&val_idx);
        let norm = dataset_stats(&train)?;
        let mut model = TwoHeadModel::new(&mut Rng::substream(config.seed, INIT_STREAM))?;
        model.set_norm_decay(config.decay_norm_params);
        let val = build_batch(
            config.mode,
            config.ie_kind,
            val_sources.images(),
            &mut Rng::substream(config.seed, VAL_STREAM),
        )?;
        Ok(Trainer {
            data_rng: Rng::substream(config.seed, DATA_STREAM),
            train: train.images().to_vec(),
            config,
            model,
            norm,
            val,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            step_log: Vec::new(),
        })
    }

    /// Restores a run saved by [`Trainer::checkpoint`]. The config may extend
    /// `epochs` but must otherwise match the saved run.
    pub fn from_checkpoint(config: RunConfig, dataset: &Dataset, ck: &Checkpoint) -> Result<Self> {
        let saved = ck.meta("run").unwrap_or("");
        let current = run_fingerprint(&config);
        if saved != current {
            return Err(Error::Config(format!(
                "checkpoint was written by a different run\n  checkpoint: {saved}\n  config:     {current}"
            )));
        }
        let mut t = Trainer::new(config, dataset)?;
        let pre = Pretrained::from_checkpoint(ck)?;
        t.model = pre.model;
        t.model.set_norm_decay(t.config.decay_norm_params);
        t.norm = pre.norm;
        let meta = |key: &str| {
            ck.meta(key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks metadata {key}")))
        };
        let bad = |key: &str| Error::Config(format!("malformed checkpoint metadata {key}"));
        t.epoch = meta("epoch")?.parse().map_err(|_| bad("epoch"))?;
        t.step = meta("step")?.parse().map_err(|_| bad("step"))?;
        t.data_rng = Rng::from_state(parse_rng_state(meta("data_rng")?)?);
        t.history = metrics::history_from_csv(meta("history")?)?;
        if t.history.len() != t.epoch {
            return Err(bad("history"));
        }
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &TwoHeadModel {
        &self.model
    }

    pub fn norm(&self) -> &ChannelStats {
        &self.norm
    }

    pub fn train_images(&self) -> &[Image] {
        &self.train
    }

    pub fn val_batch(&self) -> &PretextBatch {
        &self.val
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    /// Steps taken by this process (not restored from checkpoints).
    pub fn step_log(&self) -> &[StepRecord] {
        &self.step_log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.set_meta("run", run_fingerprint(&self.config));
        ck.set_meta("mode", self.config.mode.name());
        ck.set_meta("ie_kind", self.config.ie_kind.name());
        ck.set_meta("seed", self.config.seed.to_string());
        ck.set_meta("epoch", self.epoch.to_string());
        ck.set_meta("step", self.step.to_string());
        ck.set_meta("data_rng", rng_state_string(&self.data_rng.state()));
        ck.set_meta("history", metrics::history_to_csv(&self.history));
        self.model.write_to(&mut ck);
        ck.push_tensor("norm.mean", norm_tensor(self.norm.mean));
        ck.push_tensor("norm.std", norm_tensor(self.norm.std));
        ck
    }

    /// Whether the configured objective ever updates this head.
    fn head_trained(&self, head: Head) -> bool {
        let cfg = &self.config;
        let fixed = cfg.alpha_mode == AlphaMode::Fixed && cfg.mode == TrainMode::Ierot;
        match head {
            Head::Rotation => cfg.mode != TrainMode::IeOnly && !(fixed && cfg.alpha_fixed == 0.0),
            Head::Enhancement => {
                matches!(cfg.mode, TrainMode::Ierot | TrainMode::IeOnly)
                    && !(fixed && cfg.alpha_fixed == 1.0)
            }
        }
    }

    fn step(&mut self, batch: &PretextBatch, lr: f32) -> Result<StepRecord> {
        let input = images_to_tensor(&batch.images, &self.norm)?;
        let mut tape = Tape::new();
        let fwd = self.model.forward(&mut tape, input, true)?;
        let head_loss = |logits, labels: &Option<Vec<usize>>| -> Result<Option<(f32, Tensor)>> {
            labels
                .as_ref()
                .map(|l| softmax_cross_entropy(tape.value(logits), l))
                .transpose()
        };
        let r = head_loss(fwd.logits_r, &batch.rotation)?;
        let i = head_loss(fwd.logits_i, &batch.enhancement)?;
        let loss_r = r.as_ref().map_or(f32::NAN, |(l, _)| *l);
        let loss_i = i.as_ref().map_or(f32::NAN, |(l, _)| *l);
        let alpha = match (&r, &i) {
            (Some(_), None) => 1.0,
            (None, Some(_)) => 0.0,
            (Some((_, gr)), Some((_, gi))) => match self.config.alpha_mode {
                AlphaMode::Fixed => self.config.alpha_fixed,
                AlphaMode::MgdaUb => mgda_alpha(
                    &feature_grad(gr, self.model.head_weight(Head::Rotation)),
                    &feature_grad(gi, self.model.head_weight(Head::Enhancement)),
                )?,
            },
            (None, None) => return Err(Error::Empty("pretext batch labels")),
        };
        let total = match (&r, &i) {
            (Some(_), Some(_)) => joint_loss(loss_r, loss_i, alpha),
            (Some(_), None) => loss_r,
            _ => loss_i,
        };
        if !total.is_finite()
            || r.is_some() && !loss_r.is_finite()
            || i.is_some() && !loss_i.is_finite()
        {
            return Err(Error::NonFinite(format!(
                "loss at epoch {} step {}: R={loss_r} I={loss_i} total={total}",
                self.epoch, self.step
            )));
        }

        let scaled_r: Option<Vec<f32>> = r
            .as_ref()
            .filter(|_| alpha != 0.0)
            .map(|(_, g)| g.data().iter().map(|&v| alpha * v).collect());
        let scaled_i: Option<Vec<f32>> = i
            .as_ref()
            .filter(|_| alpha != 1.0)
            .map(|(_, g)| g.data().iter().map(|&v| (1.0 - alpha) * v).collect());
        let mut seeds = Vec::new();
        if let Some(g) = &scaled_r {
            seeds.push((fwd.logits_r, g.as_slice()));
        }
        if let Some(g) = &scaled_i {
            seeds.push((fwd.logits_i, g.as_slice()));
        }
        let mut grads = tape.backward(&seeds)?;

        let frozen: Vec<usize> = [Head::Rotation, Head::Enhancement]
            .into_iter()
            .filter(|&h| !self.head_trained(h))
            .flat_map(TwoHeadModel::head_params)
            .collect();
        let opt = self.config.optimizer();
        for (idx, (param, &var)) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(&fwd.param_vars)
            .enumerate()
        {
            if frozen.contains(&idx) {
                continue;
            }
            let grad = grads
                .take(var)
                .unwrap_or_else(|| Tensor::zeros(param.value.shape()));
            sgd_nesterov_step(param, &grad, lr, &opt)?;
        }
        self.model.update_running_stats(&fwd.batch_stats)?;

        let record = StepRecord {
            epoch: self.epoch,
            step: self.step,
            loss_r,
            loss_i,
            alpha,
            total,
        };
        self.step += 1;
        Ok(record)
    }

    /// Eval-mode top-1 accuracy of each head on the validation batch.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let mut hits = [(0usize, 0usize); 2];
        for start in (0..self.val.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(self.val.len());
            let input = images_to_tensor(&self.val.images[start..end], &self.norm)?;
            let mut tape = Tape::new();
            let fwd = self.model.forward(&mut tape, input, false)?;
            for (slot, (logits, labels)) in hits.iter_mut().zip([
                (fwd.logits_r, &self.val.rotation),
                (fwd.logits_i, &self.val.enhancement),
            ]) {
                if let Some(labels) = labels {
                    let (h, n) = argmax_accuracy(tape.value(logits), &labels[start..end]);
                    slot.0 += h;
                    slot.1 += n;
                }
            }
        }
        let acc = |(h, n): (usize, usize)| {
            if n == 0 {
                f64::NAN
            } else {
                h as f64 / n as f64
            }
        };
        Ok((acc(hits[0]), acc(hits[1])))
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        if self.is_done() {
            return Err(Error::InvalidArgument(format!(
                "run already finished its {} epochs",
                self.config.epochs
            )));
        }
        let started = Instant::now();
        let lr = self.config.schedule().lr_at(self.epoch)?;
        let order = epoch_order(self.train.len(), &mut self.data_rng);
        let mut records = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            if inputs_per_batch(self.config.mode, chunk.len()) < 2 {
                continue;
            }
            let sources: Vec<Image> = chunk.iter().map(|&j| self.train[j].clone()).collect();
            let batch = build_batch(
                self.config.mode,
                self.config.ie_kind,
                &sources,
                &mut self.data_rng,
            )?;
            let record = self.step(&batch, lr as f32)?;
            self.step_log.push(record);
            records.push(record);
        }
        let (val_acc_r, val_acc_i) = self.validate()?;
        let alphas = || records.iter().map(|r| r.alpha as f64);
        let row = EpochMetrics {
            epoch: self.epoch,
            lr,
            train_loss_r: mean(records.iter().map(|r| r.loss_r)),
            train_loss_i: mean(records.iter().map(|r| r.loss_i)),
            train_loss_total: mean(records.iter().map(|r| r.total)),
            val_acc_r,
            val_acc_i,
            alpha_mean: mean(records.iter().map(|r| r.alpha)),
            alpha_min: alphas().reduce(f64::min).unwrap_or(f64::NAN),
            alpha_max: alphas().reduce(f64::max).unwrap_or(f64::NAN),
            wall_seconds: if self.config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.history.push(row);
        self.epoch += 1;
        Ok(row)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn drive(mut trainer: Trainer) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let cfg = trainer.config().clone();
    ensure_dir(&cfg.checkpoint_dir)?;
    metrics::write_metrics(&cfg.metrics_path, trainer.history())?;
    let ck_path = cfg.checkpoint_path();
    trainer.checkpoint().save(&ck_path)?;
    while !trainer.is_done() {
        match trainer.run_epoch() {
            Ok(row) => {
                metrics::append_metrics(&cfg.metrics_path, &row)?;
                trainer.checkpoint().save(&ck_path)?;
            }
            Err(e @ Error::NonFinite(_)) => {
                trainer
                    .checkpoint()
                    .save(&cfg.checkpoint_dir.join(NONFINITE_FILE))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((trainer.checkpoint(), trainer.history().to_vec()))
}

/// Trains from scratch, writing the metrics CSV and `checkpoint_dir/checkpoint.bin`
/// after every epoch. With `epochs = 0` the checkpoint holds the initial model.
pub fn train(config: RunConfig, dataset: &Dataset) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    drive(Trainer::new(config, dataset)?)
}

/// Continues a run from a saved checkpoint. The metrics file is rewritten
/// from the checkpoint's history before new rows are appended.
pub fn resume(
    config: RunConfig,
    dataset: &Dataset,
    checkpoint: &Path,
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let ck = Checkpoint::load(checkpoint)?;
    drive(Trainer::from_checkpoint(config, dataset, &ck)?)
}
