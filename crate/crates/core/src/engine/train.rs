//! Gradient accumulation, the epoch loop and model evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{AccDevMode, MetricsReport, WindowRecord};
use super::optim::{adam_step, clip_lstm_gradients, Grads, OptimConfig, OptimizerState};
use crate::config::RunConfig;
use crate::data::{Dataset, SampleSource, SequenceSample};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{batch_loss, meter_class, mse_regression_loss, ClassWeights, LossConfig, LossKind};
use crate::model::checkpoint::{save_checkpoint, Checkpoint};
use crate::model::{dropout_streams, BatchInput, HeadKind, Model};
use crate::rng::{stream, Purpose};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub eval_batch: usize,
    /// Write a checkpoint every this many epochs (the final epoch always writes one).
    pub checkpoint_every: usize,
    /// Stop after this many epochs without a validation RMSE improvement; 0 disables.
    pub early_stop_patience: usize,
    /// Stop once validation Acc and RMSE both reach these targets.
    pub target_acc: Option<f64>,
    pub target_rmse: Option<f64>,
    pub acc_dev_mode: AccDevMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            effective_batch: 32,
            micro_batch: 8,
            eval_batch: 32,
            checkpoint_every: 1,
            early_stop_patience: 0,
            target_acc: None,
            target_rmse: None,
            acc_dev_mode: AccDevMode::Rounded,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.effective_batch == 0 || self.micro_batch == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.micro_batch > self.effective_batch {
            return Err(Error::config("micro_batch cannot exceed effective_batch"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// Decoded windows of a dataset, optionally with the frozen encoder prefix
/// precomputed for the plain and mirrored orientation.
pub struct WindowStore<T> {
    dataset: Dataset,
    means: [f64; 3],
    resolution: (usize, usize),
    prefix: Vec<[Option<Tensor<T>>; 2]>,
}

impl<T: Real> WindowStore<T> {
    pub fn new(dataset: Dataset, means: [f64; 3], resolution: (usize, usize)) -> Self {
        WindowStore { dataset, means, resolution, prefix: Vec::new() }
    }

    /// Precomputes prefix features for every window (and its mirror when
    /// `mirrored`). Does nothing when the model has trainable per-frame layers.
    pub fn precompute(&mut self, model: &Model<T>, mirrored: bool) -> Result<()> {
        if model.prefix_depth().is_none() {
            self.prefix.clear();
            return Ok(());
        }
        let t = Instant::now();
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let s = self.sample(i, false)?;
            let plain = model.prefix_features(&s.frames)?;
            let flipped = if mirrored { Some(model.prefix_features(&s.mirrored().frames)?) } else { None };
            out.push([Some(plain), flipped]);
        }
        self.prefix = out;
        info!("precomputed encoder prefix for {} windows in {:.1}s", self.len(), t.elapsed().as_secs_f64());
        Ok(())
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn gt(&self, i: usize) -> f64 {
        self.dataset.item(i).gt_distance
    }

    pub fn source(&self, i: usize) -> &SampleSource {
        &self.dataset.item(i).source
    }

    pub fn sample(&self, i: usize, mirrored: bool) -> Result<SequenceSample<T>> {
        let s = self.dataset.load_sample(i, self.means, self.resolution)?;
        Ok(if mirrored { s.mirrored() } else { s })
    }

    /// Builds the encoder input for `items` (`(window, mirrored)`) and hands it to `f`.
    pub fn with_batch<R>(&self, items: &[(usize, bool)], f: impl FnOnce(&BatchInput<T>) -> Result<R>) -> Result<R> {
        let cached: Option<Vec<&Tensor<T>>> =
            items.iter().map(|&(i, m)| self.prefix.get(i).and_then(|p| p[m as usize].as_ref())).collect();
        match cached {
            Some(c) if !c.is_empty() => f(&BatchInput::Prefix(c)),
            _ => {
                let samples: Vec<SequenceSample<T>> = items.iter().map(|&(i, m)| self.sample(i, m)).collect::<Result<_>>()?;
                f(&BatchInput::Frames(samples.iter().map(|s| s.frames.as_slice()).collect()))
            }
        }
    }
}

/// Settings shared by every micro batch of one optimizer step.
pub struct LossContext<'a> {
    pub loss: &'a LossConfig,
    pub weights: &'a ClassWeights,
    pub seed: u64,
    pub epoch: u64,
}

/// Records the training loss of one batch on `g`.
pub fn record_loss<T: Real>(model: &Model<T>, g: &mut Graph<T>, output: Var, gt: &[f64], loss: &LossConfig, weights: &ClassWeights) -> Result<Var> {
    match model.config().head {
        HeadKind::Ordinal => {
            let codec = &model.config().codec;
            let k = codec.k;
            let mut targets = Vec::with_capacity(gt.len() * k);
            for &d in gt {
                targets.extend(codec.encode(d.max(0.0))?.into_iter().map(T::lit));
            }
            let targets = Tensor::new(vec![gt.len(), k], targets)?;
            let classes: Vec<usize> = gt.iter().map(|&d| meter_class(d)).collect();
            batch_loss(g, output, &targets, &classes, loss, weights)
        }
        HeadKind::Regression => {
            if loss.kind != LossKind::MseRegression {
                return Err(Error::config("the regression head trains with mse_regression"));
            }
            let t = g.constant(&[gt.len()], gt.iter().map(|&d| T::lit(d)).collect())?;
            mse_regression_loss(g, output, t)
        }
    }
}

/// One micro batch: forward, loss scaled by `scale`, backward, and the
/// resulting parameter gradients added into `grads`. Returns the unscaled loss.
pub fn micro_batch_gradients<T: Real>(
    model: &Model<T>,
    input: &BatchInput<T>,
    ids: &[usize],
    gt: &[f64],
    ctx: &LossContext,
    scale: f64,
    grads: &mut Grads<T>,
) -> Result<f64> {
    if ids.len() != input.len() || gt.len() != input.len() {
        return Err(Error::contract("micro batch ids, labels and inputs differ in length"));
    }
    let mut g = Graph::new();
    let mut rngs = dropout_streams(ctx.seed, ctx.epoch, ids);
    let fp = model.forward(&mut g, input, &mut rngs)?;
    let loss = record_loss(model, &mut g, fp.output, gt, ctx.loss, ctx.weights)?;
    let value = g.value(loss)[0].as_f64();
    if !value.is_finite() {
        let at = g.first_non_finite().map(|(op, i)| format!(" (first at {op} node {i})")).unwrap_or_default();
        return Err(Error::Numeric { op: "loss".into(), msg: format!("loss is {value} for windows {ids:?}{at}") });
    }
    let scaled = g.scale(loss, T::lit(scale));
    g.backward(scaled)?;
    for (acc, &v) in grads.iter_mut().zip(&fp.params) {
        if let (Some(acc), Some(d)) = (acc.as_mut(), g.grad(v)) {
            acc.iter_mut().zip(d).for_each(|(a, &b)| *a += b);
        }
    }
    Ok(value)
}

pub fn zero_grads<T: Real>(model: &Model<T>) -> Grads<T> {
    model.params().iter().map(|p| (!p.frozen()).then(|| vec![T::zero(); p.tensor.numel()])).collect()
}

/// A micro batch: `(window id, mirrored)` items, labels and store.
pub struct MicroBatch<'a, T> {
    pub store: &'a WindowStore<T>,
    pub items: Vec<(usize, bool)>,
}

/// Summed gradients over `micro` where each micro-batch loss is scaled by
/// `micro_size / effective_size`; returns `(effective-batch mean loss, grads)`.
pub fn accumulate_gradients<T: Real>(model: &Model<T>, micro: &[MicroBatch<T>], ctx: &LossContext) -> Result<(f64, Grads<T>)> {
    if micro.is_empty() || micro.iter().any(|m| m.items.is_empty()) {
        return Err(Error::contract("gradient accumulation over an empty batch"));
    }
    let total: usize = micro.iter().map(|m| m.items.len()).sum();
    let mut grads = zero_grads(model);
    let mut mean = 0.0;
    for mb in micro {
        let ids: Vec<usize> = mb.items.iter().map(|&(i, _)| i).collect();
        let gt: Vec<f64> = ids.iter().map(|&i| mb.store.gt(i)).collect();
        let scale = mb.items.len() as f64 / total as f64;
        let loss = mb.store.with_batch(&mb.items, |input| micro_batch_gradients(model, input, &ids, &gt, ctx, scale, &mut grads))?;
        mean += scale * loss;
    }
    Ok((mean, grads))
}

/// Accumulates, clips the recurrent gradients and applies one Adam step.
pub fn accumulate_step<T: Real>(
    model: &mut Model<T>,
    micro: &[MicroBatch<T>],
    ctx: &LossContext,
    optim: &OptimConfig,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<f64> {
    let (loss, mut grads) = accumulate_gradients(model, micro, ctx)?;
    clip_lstm_gradients(model, &mut grads, optim.clip_limit, optim.clip_mode);
    adam_step(model, &grads, state, optim, lr)?;
    Ok(loss)
}

/// Predicted distance in meters for every window of `store` (eval mode).
pub fn predict_distances<T: Real>(model: &Model<T>, store: &WindowStore<T>, batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(store.len());
    let ids: Vec<usize> = (0..store.len()).collect();
    for chunk in ids.chunks(batch.max(1)) {
        let items: Vec<(usize, bool)> = chunk.iter().map(|&i| (i, false)).collect();
        let rows = store.with_batch(&items, |input| model.predict_batch(input))?;
        for row in rows {
            out.push(model.decode_output(&row)?.0);
        }
    }
    Ok(out)
}

pub fn evaluate<T: Real>(model: &Model<T>, store: &WindowStore<T>, batch: usize, mode: AccDevMode) -> Result<MetricsReport> {
    if store.is_empty() {
        return Err(Error::domain("cannot evaluate an empty dataset"));
    }
    let preds = predict_distances(model, store, batch)?;
    let records = preds
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let s = store.source(i);
            WindowRecord { sequence: s.sequence.clone(), start: s.start, gt: store.gt(i), prediction: p }
        })
        .collect();
    MetricsReport::from_records(records, mode)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<(f64, f64, f64)>,
    pub wall_seconds: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_rmse,val_acc,val_accdev,wall_seconds";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let val = match self.val {
            Some((r, a, d)) => format!("{r},{a},{d}"),
            None => ",,".into(),
        };
        format!("{},{},{val},{:.3}", self.epoch, self.train_loss, self.wall_seconds)
    }
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: Vec<EpochRecord>,
    pub metrics: Option<MetricsReport>,
    pub checkpoint: PathBuf,
    pub class_weights: ClassWeights,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const CLASS_WEIGHTS_FILE: &str = "class_weights.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "metrics_summary.csv";
pub const WINDOWS_FILE: &str = "metrics_windows.csv";

pub fn class_weights_for(cfg: &RunConfig, train: &Dataset) -> Result<ClassWeights> {
    if cfg.model.head == HeadKind::Ordinal && cfg.loss.class_balancing {
        ClassWeights::from_histogram(&train.meter_histogram(), cfg.loss.weight_range)
    } else {
        Ok(ClassWeights::uniform())
    }
}

pub fn make_checkpoint<T: Real>(
    cfg: &RunConfig,
    model: &Model<T>,
    state: &OptimizerState<T>,
    weights: &ClassWeights,
    epoch: usize,
) -> Checkpoint<T> {
    let mut tensors = model.named_tensors();
    tensors.extend(state.to_tensors(model));
    Checkpoint {
        config_text: cfg.to_toml(),
        digest: cfg.digest(),
        epoch: epoch as u64,
        step: state.step,
        seed: cfg.seed,
        class_weights: weights.clone(),
        tensors,
    }
}

/// Restores model and optimizer from a checkpoint written under `cfg`.
pub fn restore<T: Real>(cfg: &RunConfig, ck: &Checkpoint<T>) -> Result<(Model<T>, OptimizerState<T>)> {
    if ck.digest != cfg.digest() {
        return Err(Error::DigestMismatch(format!(
            "checkpoint was written under configuration {} but the current configuration digests to {}; \
             resume with the configuration stored in the checkpoint",
            ck.digest_hex(),
            crate::model::checkpoint::hex(&cfg.digest())
        )));
    }
    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    model.load_tensors(&ck.tensors)?;
    let state = OptimizerState::from_tensors(&model, &ck.tensors, ck.step)?;
    Ok((model, state))
}

/// Configuration and model stored in a checkpoint.
pub fn load_model<T: Real>(ck: &Checkpoint<T>) -> Result<(RunConfig, Model<T>)> {
    let cfg = RunConfig::from_toml(&ck.config_text)?;
    let mut model = Model::build(cfg.model.clone(), ck.seed)?;
    model.load_tensors(&ck.tensors)?;
    Ok((cfg, model))
}

fn read_previous_log(path: &Path, upto: usize) -> Vec<String> {
    std::fs::read_to_string(path)
        .map(|t| {
            t.lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= upto))
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

/// Seeded visiting order and per-window mirror coins for `epoch`.
pub fn epoch_plan(seed: u64, epoch: usize, n: usize, flip_probability: f64) -> Vec<(usize, bool)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::Shuffle, &[epoch as u64]));
    order
        .into_iter()
        .map(|i| {
            let flip = flip_probability > 0.0 && stream(seed, Purpose::Augment, &[epoch as u64, i as u64]).gen::<f64>() < flip_probability;
            (i, flip)
        })
        .collect()
}

/// Runs the epoch loop, writing the checkpoint, epoch log, class weights and
/// resolved configuration into `cfg.output`.
pub fn train<T: Real>(cfg: &RunConfig, train: Dataset, eval: Option<Dataset>, resume: Option<&Checkpoint<T>>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Ingest("training set is empty".into()));
    }
    let out = &cfg.output;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;

    let (mut model, mut state, weights, start) = match resume {
        Some(ck) => {
            let (m, s) = restore(cfg, ck)?;
            (m, s, ck.class_weights.clone(), ck.epoch as usize)
        }
        None => {
            let m = Model::build(cfg.model.clone(), cfg.seed)?;
            let s = OptimizerState::new(&m);
            (m, s, class_weights_for(cfg, &train)?, 0)
        }
    };
    write_atomic(&out.join(CLASS_WEIGHTS_FILE), weights.to_text().as_bytes())?;
    info!("model: {} parameters, {} trainable", model.param_count(), model.trainable_count());

    let resolution = (cfg.model.width, cfg.model.height);
    let mut train_store = WindowStore::new(train, cfg.data.pixel_means, resolution);
    let mut eval_store = eval.map(|d| WindowStore::new(d, cfg.data.pixel_means, resolution));
    if cfg.data.cache_prefix {
        train_store.precompute(&model, cfg.data.flip_probability > 0.0)?;
        if let Some(s) = eval_store.as_mut() {
            s.precompute(&model, false)?;
        }
    }

    let tc = &cfg.train;
    let n = train_store.len();
    let steps_per_epoch = n.div_ceil(tc.effective_batch) as u64;
    let total_steps = steps_per_epoch * tc.epochs as u64;
    let log_path = out.join(EPOCH_LOG_FILE);
    let mut log_lines = read_previous_log(&log_path, start);
    let mut log = Vec::new();
    let mut best_rmse = f64::INFINITY;
    let mut stale = 0usize;
    let mut metrics = None;
    let ckpt_path = out.join(CHECKPOINT_FILE);

    for epoch in start..tc.epochs {
        let t = Instant::now();
        model.set_training(true);
        let plan = epoch_plan(cfg.seed, epoch, n, cfg.data.flip_probability);
        let ctx = LossContext { loss: &cfg.loss, weights: &weights, seed: cfg.seed, epoch: epoch as u64 };
        let mut loss_sum = 0.0;
        for batch in plan.chunks(tc.effective_batch) {
            let micro: Vec<MicroBatch<T>> =
                batch.chunks(tc.micro_batch).map(|c| MicroBatch { store: &train_store, items: c.to_vec() }).collect();
            let lr = cfg.optim.learning_rate(state.step, total_steps);
            let loss = accumulate_step(&mut model, &micro, &ctx, &cfg.optim, &mut state, lr)?;
            loss_sum += loss * batch.len() as f64;
        }
        model.set_training(false);
        let train_loss = loss_sum / n as f64;
        let report = match &eval_store {
            Some(s) => Some(evaluate(&model, s, tc.eval_batch, tc.acc_dev_mode)?),
            None => None,
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val: report.as_ref().map(|r| (r.rmse, r.acc, r.acc_dev)),
            wall_seconds: t.elapsed().as_secs_f64(),
        };
        match &rec.val {
            Some((r, a, d)) => info!("epoch {} loss {train_loss:.5} val rmse {r:.4} acc {a:.4} accdev {d:.4} ({:.1}s)", rec.epoch, rec.wall_seconds),
            None => info!("epoch {} loss {train_loss:.5} ({:.1}s)", rec.epoch, rec.wall_seconds),
        }
        log_lines.push(rec.csv_line());
        let mut text = String::from(EPOCH_LOG_HEADER);
        text.push('\n');
        for l in &log_lines {
            let _ = writeln!(text, "{l}");
        }
        write_atomic(&log_path, text.as_bytes())?;
        log.push(rec);

        let mut stop = false;
        if let Some(r) = &report {
            if r.rmse < best_rmse {
                best_rmse = r.rmse;
                stale = 0;
            } else {
                stale += 1;
            }
            if tc.early_stop_patience > 0 && stale >= tc.early_stop_patience {
                info!("early stop: no validation RMSE improvement for {stale} epochs");
                stop = true;
            }
            let acc_ok = tc.target_acc.map_or(tc.target_rmse.is_some(), |a| r.acc >= a);
            let rmse_ok = tc.target_rmse.map_or(tc.target_acc.is_some(), |m| r.rmse <= m);
            if acc_ok && rmse_ok {
                info!("validation targets reached after epoch {}", epoch + 1);
                stop = true;
            }
        }
        metrics = report;
        let last = stop || epoch + 1 == tc.epochs;
        if last || (epoch + 1) % tc.checkpoint_every == 0 {
            save_checkpoint(&ckpt_path, &make_checkpoint(cfg, &model, &state, &weights, epoch + 1))?;
        }
        if stop {
            break;
        }
    }
    if start >= tc.epochs {
        warn!("checkpoint already covers {start} epochs; nothing to train");
        save_checkpoint(&ckpt_path, &make_checkpoint(cfg, &model, &state, &weights, start))?;
    }
    if let Some(m) = &metrics {
        write_atomic(&out.join(SUMMARY_FILE), m.summary_csv().as_bytes())?;
        write_atomic(&out.join(WINDOWS_FILE), m.windows_csv().as_bytes())?;
    }
    Ok(TrainOutcome { model, log, metrics, checkpoint: ckpt_path, class_weights: weights })
}
