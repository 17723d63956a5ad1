//! Utterance-level SGD with full-sequence BPTT.
//!
//! Every minibatch runs forward + PIT loss + backward on each utterance
//! independently (optionally on parallel workers), sums the per-utterance
//! gradients in minibatch order, averages, clips and takes one plain SGD step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::{derive_seed, MixtureSample};
use crate::network::{bind_params, forward, forward_graph, FeatureSequence, ModelConfig, ModelParams};
use crate::pitloss::{pit_loss, pit_loss_graph, LabelSequence, LossResult};
use crate::tensorcore::{check_gradients, Evaluation, GradCheck, Graph, Matrix};

pub const TRAIN_LOG: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Clamp every element to `[−threshold, threshold]`.
    #[default]
    Element,
    /// Rescale the whole gradient so its L2 norm is at most `threshold`.
    Norm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_threshold: f64,
    pub clip_mode: ClipMode,
    pub minibatch_utterances: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Held-out J must drop by at least this much per epoch, else the
    /// learning rate is halved.
    pub min_improvement: f64,
    pub workers: usize,
    /// Stop after the first epoch that ends past this many seconds.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            clip_threshold: 0.0003,
            clip_mode: ClipMode::Element,
            minibatch_utterances: 8,
            epochs: 30,
            shuffle_seed: 0,
            checkpoint_dir: None,
            min_improvement: 1e-3,
            workers: 1,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.clip_threshold.is_nan() || self.clip_threshold <= 0.0 {
            return Err(Error::validation(format!(
                "clip_threshold must be positive, got {}",
                self.clip_threshold
            )));
        }
        if self.minibatch_utterances == 0 {
            return Err(Error::validation("minibatch_utterances must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::validation("workers must be at least 1"));
        }
        Ok(())
    }
}

/// One gradient tensor per model parameter tensor, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            tensors: params
                .tensors()
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::validation("gradient sets of different length"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: "gradient add",
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.tensors {
            m.scale_assign(factor);
        }
    }

    pub fn zero(&mut self) {
        for m in &mut self.tensors {
            m.fill(0.0);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(Matrix::max_abs).fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|m| m.as_slice())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Sums per-utterance gradients in arrival order.
#[derive(Clone, Debug)]
pub struct GradientAccumulator {
    sum: Gradients,
    loss_sum: f64,
    count: usize,
}

impl GradientAccumulator {
    pub fn new(params: &ModelParams) -> Self {
        GradientAccumulator {
            sum: Gradients::zeros_like(params),
            loss_sum: 0.0,
            count: 0,
        }
    }

    pub fn add(&mut self, loss: f64, grads: &Gradients) -> Result<()> {
        self.sum.add_assign(grads)?;
        self.loss_sum += loss;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean loss and mean gradient; the accumulator is reset.
    pub fn take_mean(&mut self) -> Result<(f64, Gradients)> {
        if self.count == 0 {
            return Err(Error::Contract("no gradients accumulated".into()));
        }
        let n = self.count as f64;
        let mut mean = self.sum.clone();
        mean.scale(1.0 / n);
        let loss = self.loss_sum / n;
        self.sum.zero();
        self.loss_sum = 0.0;
        self.count = 0;
        Ok((loss, mean))
    }
}

/// PIT loss and parameter gradient for one utterance.
pub fn utterance_gradient(
    params: &ModelParams,
    features: &FeatureSequence,
    targets: &[LabelSequence],
) -> Result<(LossResult, Gradients)> {
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params, true);
    let heads = forward_graph(&mut graph, &bound, params.config(), features)?;
    let (root, result) = pit_loss_graph(&mut graph, &heads, targets)?;
    if !result.value.is_finite() {
        return Err(Error::Numeric(format!(
            "utterance {}: loss is {}",
            features.utterance_id, result.value
        )));
    }
    graph.backward(root)?;
    let tensors = bound
        .ids
        .iter()
        .map(|&id| {
            graph
                .grad(id)
                .cloned()
                .ok_or_else(|| Error::Contract("parameter leaf without gradient".into()))
        })
        .collect::<Result<_>>()?;
    Ok((result, Gradients { tensors }))
}

pub fn clip_gradients(grads: &mut Gradients, threshold: f64, mode: ClipMode) -> Result<()> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::validation(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    match mode {
        ClipMode::Element => {
            for m in &mut grads.tensors {
                for g in m.as_mut_slice() {
                    *g = g.clamp(-threshold, threshold);
                }
            }
        }
        ClipMode::Norm => {
            // Rescaled gradients may round to a norm just above the
            // threshold; the tolerance keeps a second clip a no-op.
            let norm = grads.l2_norm();
            if norm > threshold * (1.0 + 1e-12) {
                grads.scale(threshold / norm);
            }
        }
    }
    Ok(())
}

/// `θ ← θ − lr·g`. Refuses the whole update if any gradient or resulting
/// parameter is non-finite; on error `params` is untouched.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
    let names = params.tensor_names();
    let tensors = params.tensors();
    if tensors.len() != grads.tensors.len() {
        return Err(Error::validation(format!(
            "{} gradient tensors for {} parameters",
            grads.tensors.len(),
            tensors.len()
        )));
    }
    for ((name, p), g) in names.iter().zip(&tensors).zip(&grads.tensors) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        let bad = p
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .any(|(w, d)| !d.is_finite() || !(w - lr * d).is_finite());
        if bad {
            return Err(Error::Numeric(format!(
                "non-finite gradient or update in parameter {name}"
            )));
        }
    }
    for (p, g) in params.tensors_mut().into_iter().zip(&grads.tensors) {
        for (w, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Mean loss and mean gradient of a minibatch. Utterances may run on the
/// current rayon pool; the sum is always taken in minibatch order.
pub fn minibatch_gradient(
    params: &ModelParams,
    batch: &[&MixtureSample],
) -> Result<(f64, Gradients)> {
    let per_utt: Vec<(LossResult, Gradients)> = batch
        .par_iter()
        .map(|s| utterance_gradient(params, &s.features, &s.targets))
        .collect::<Result<_>>()?;
    let mut acc = GradientAccumulator::new(params);
    for (result, grads) in &per_utt {
        acc.add(result.value, grads)?;
    }
    acc.take_mean()
}

/// One averaged, clipped SGD update; returns the minibatch mean loss.
pub fn minibatch_step(
    params: &mut ModelParams,
    batch: &[&MixtureSample],
    config: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let (loss, mut grads) = minibatch_gradient(params, batch)?;
    clip_gradients(&mut grads, config.clip_threshold, config.clip_mode)?;
    sgd_step(params, &grads, lr)?;
    Ok(loss)
}

/// Mean PIT loss over `samples`, without gradients.
pub fn mean_loss(params: &ModelParams, samples: &[MixtureSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::validation("no utterances to score"));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let post = forward(params, &s.features)?;
            Ok(pit_loss(&post, &s.targets)?.value)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// `epoch<TAB>train_J<TAB>heldout_J<TAB>seconds` per epoch.
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let heldout = e.heldout_loss.map_or("nan".to_string(), |h| format!("{h:.6}"));
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{}\t{:.3}",
                e.epoch, e.train_loss, heldout, e.seconds
            );
        }
        out
    }
}

fn check_compatible(config: &ModelConfig, samples: &[MixtureSample]) -> Result<()> {
    for s in samples {
        let id = &s.features.utterance_id;
        if s.features.feat_dim() != config.feat_dim {
            return Err(Error::validation(format!(
                "utterance {id}: feature dim {} but model expects {}",
                s.features.feat_dim(),
                config.feat_dim
            )));
        }
        if s.targets.len() != config.num_streams {
            return Err(Error::validation(format!(
                "utterance {id}: {} target streams but model has {} heads",
                s.targets.len(),
                config.num_streams
            )));
        }
        let max = s.targets.iter().flat_map(|t| &t.senones).max().copied();
        if max.is_some_and(|k| k as usize >= config.num_senones) {
            return Err(Error::validation(format!(
                "utterance {id}: senone {} outside the model's {} outputs",
                max.unwrap(),
                config.num_senones
            )));
        }
    }
    Ok(())
}

fn append_log(dir: &Path, record: &EpochRecord) -> Result<()> {
    use std::io::Write;
    let path = dir.join(TRAIN_LOG);
    let line = TrainReport {
        epochs: vec![record.clone()],
        final_checkpoint: None,
    }
    .log_lines();
    fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Trains `params` in place on `train`, scoring `heldout` after every epoch.
///
/// With a checkpoint directory, writes `epochNNN.ckpt` per epoch, a final
/// `final.ckpt`, and appends to `train.log` (which is truncated at start).
pub fn train(
    params: &mut ModelParams,
    train: &[MixtureSample],
    heldout: &[MixtureSample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    check_compatible(params.config(), train)?;
    check_compatible(params.config(), heldout)?;
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(TRAIN_LOG);
        fs::write(&log, "").map_err(|e| Error::io(log, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;

    let start = Instant::now();
    let mut lr = config.learning_rate;
    let mut best_heldout = f64::INFINITY;
    let mut report = TrainReport {
        epochs: Vec::new(),
        final_checkpoint: None,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.shuffle_seed,
            "epoch",
            epoch as u64,
        ));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.minibatch_utterances) {
            let batch: Vec<&MixtureSample> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = pool.install(|| minibatch_step(params, &batch, config, lr))?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let heldout_loss = if heldout.is_empty() {
            None
        } else {
            Some(pool.install(|| mean_loss(params, heldout))?)
        };

        let record = EpochRecord {
            epoch,
            train_loss,
            heldout_loss,
            learning_rate: lr,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train J {train_loss:.4}, held-out J {}, lr {lr}",
            heldout_loss.map_or("-".into(), |h| format!("{h:.4}"))
        );
        if let Some(dir) = &config.checkpoint_dir {
            params.save(&dir.join(format!("epoch{epoch:03}.ckpt")))?;
            append_log(dir, &record)?;
        }
        report.epochs.push(record);

        if let Some(h) = heldout_loss {
            if h > best_heldout - config.min_improvement {
                lr *= 0.5;
            }
            best_heldout = best_heldout.min(h);
        }
        if config
            .time_budget_secs
            .is_some_and(|budget| start.elapsed().as_secs_f64() > budget)
        {
            log::warn!("time budget exhausted after epoch {epoch}");
            break;
        }
    }

    if let Some(dir) = &config.checkpoint_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        params.save(&path)?;
        report.final_checkpoint = Some(path);
    }
    Ok(report)
}

/// Standard cross-entropy training of a single-head model on clean speech.
pub fn train_baseline(
    params: &mut ModelParams,
    train_set: &[MixtureSample],
    heldout: &[MixtureSample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if params.config().num_streams != 1 {
        return Err(Error::validation(format!(
            "baseline model must have one output stream, has {}",
            params.config().num_streams
        )));
    }
    train(params, train_set, heldout, config)
}

/// Finite-difference check of the end-to-end PIT gradient on a tiny
/// two-head model (4-dim features, 3 cells, one layer, 3 senones, 4 frames).
///
/// Parameters are drawn from ±0.5 so gradients sit well above the
/// finite-difference noise floor, and targets are redrawn until the winning
/// assignment leads by a clear margin.
pub fn pit_gradient_check(seed: u64) -> Result<GradCheck> {
    let config = ModelConfig {
        feat_dim: 4,
        hidden_dim: 3,
        num_layers: 1,
        num_streams: 2,
        num_senones: 3,
        seed,
    };
    let frames = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(&config)?;
    let theta: Vec<f64> = (0..params.num_parameters())
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    params.set_flat(&theta)?;
    let feats: Vec<f64> = (0..frames * config.feat_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let features = FeatureSequence::new(Matrix::from_vec(frames, config.feat_dim, feats)?, "tiny")?;

    let mut targets = Vec::new();
    for _ in 0..1000 {
        let draw: Vec<LabelSequence> = (0..config.num_streams)
            .map(|s| {
                LabelSequence::new(
                    (0..frames)
                        .map(|_| rng.random_range(0..config.num_senones as u32))
                        .collect(),
                    s,
                )
            })
            .collect();
        let r = pit_loss(&forward(&params, &features)?, &draw)?;
        let costs = &r.per_pair;
        let swapped = costs.assignment_cost(&[1, 0]);
        let identity = costs.assignment_cost(&[0, 1]);
        if (swapped - identity).abs() > 0.05 {
            targets = draw;
            break;
        }
    }
    if targets.is_empty() {
        return Err(Error::Numeric(
            "no target draw separated the two assignments".into(),
        ));
    }

    let f = |theta: &[f64]| -> Result<Evaluation> {
        let mut p = params.clone();
        p.set_flat(theta)?;
        let (result, grads) = utterance_gradient(&p, &features, &targets)?;
        Ok(Evaluation {
            value: result.value,
            gradient: grads
                .tensors
                .iter()
                .flat_map(|m| m.as_slice().to_vec())
                .collect(),
        })
    };
    check_gradients(f, &theta, 1e-5)
}

#[cfg(test)]
mod tests;
