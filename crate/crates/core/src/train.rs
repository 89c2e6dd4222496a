//! Supervision labels, the masked BCE objective, Adam and the epoch loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mask2d, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{LgnModel, ModelInput, ParamStore};
use crate::moment::iou_field;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

/// IoU thresholds of the soft labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig { t_min: 0.0, t_max: 0.5 }
    }
}

impl LabelConfig {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        let cfg = LabelConfig { t_min, t_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::Config(format!(
                "label thresholds need 0 <= t_min < t_max <= 1, got ({}, {})",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

/// Min-max rescaling of an IoU into `[0, 1]`, clamped outside
/// `(t_min, t_max)`.
pub fn soft_label(o: f64, cfg: &LabelConfig) -> f64 {
    if o <= cfg.t_min {
        0.0
    } else if o >= cfg.t_max {
        1.0
    } else {
        (o - cfg.t_min) / (cfg.t_max - cfg.t_min)
    }
}

/// [`soft_label`] on every valid cell; invalid cells get 0.
pub fn label_field(iou: &[f64], mask: &Mask2d, cfg: &LabelConfig) -> Result<Vec<f64>> {
    if iou.len() != mask.len() {
        return Err(Error::dim("label_field", &[iou.len()], &[mask.len()]));
    }
    if let Some(bad) = iou.iter().find(|o| !(0.0..=1.0).contains(*o)) {
        return Err(Error::Config(format!("IoU {bad} outside [0, 1]")));
    }
    Ok(iou
        .iter()
        .zip(mask.as_slice())
        .map(|(&o, &ok)| if ok { soft_label(o, cfg) } else { 0.0 })
        .collect())
}

/// Mean BCE over valid proposals, recorded on `tape`.
pub fn masked_bce(tape: &mut Tape, scores: Var, labels: &[f64], mask: &Arc<Mask2d>) -> Result<Var> {
    tape.masked_bce(scores, labels, mask)
}

/// Loss value without a surrounding graph.
pub fn bce_value(scores: &[f64], labels: &[f64], mask: &Arc<Mask2d>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(scores.to_vec()));
    let loss = masked_bce(&mut tape, p, labels, mask)?;
    tape.value(loss).item()
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor().shape().to_vec())).collect::<Vec<_>>();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores saved moments; shapes must match `params`.
    pub fn from_parts(params: &ParamStore, hyper: AdamHyper, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer moments do not cover every parameter".into()));
        }
        for ((p, m), v) in params.iter().zip(&m).zip(&v) {
            if m.shape() != p.tensor().shape() || v.shape() != p.tensor().shape() {
                return Err(Error::Checkpoint(format!("optimizer moment shape mismatch for `{}`", p.name())));
            }
        }
        Ok(AdamState {
            learning_rate: hyper.learning_rate,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.eps,
            step,
            m,
            v,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update. Non-trainable parameters and frozen
/// rows are left untouched.
pub fn adam_step(params: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Config(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.trainable() && g.is_none() {
            return Err(Error::MissingGradient(p.name().to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.eps);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable() {
            continue;
        }
        let g = g.as_ref().expect("checked above");
        let row = p.tensor().shape().get(1..).map_or(1, |s| s.iter().product::<usize>());
        let frozen = p.frozen_rows().to_vec();
        let theta = p.tensor_mut().data_mut();
        for (i, (((th, gv), mv), vv)) in theta
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
            .enumerate()
        {
            if !frozen.is_empty() && frozen.contains(&(i / row)) {
                continue;
            }
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *th -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Optimisation schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub labels: LabelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_every: 0,
            labels: LabelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        self.labels.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

/// A query ready for training: model input plus supervision.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub input: ModelInput,
    pub iou: Vec<f64>,
    pub labels: Vec<f64>,
}

/// Vocabulary over every query token of `samples`.
pub fn vocab_from_samples(samples: &[Sample]) -> Vocabulary {
    Vocabulary::build(samples.iter().flat_map(|s| s.annotation.tokens.iter().map(String::as_str)))
}

/// Precomputes model inputs and soft labels.
pub fn prepare_samples(model: &LgnModel, samples: &[Sample], labels: &LabelConfig) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let wrap = |e: Error| match e {
                Error::Ingestion { .. } => e,
                other => Error::Ingestion {
                    id: s.query_id.clone(),
                    reason: other.to_string(),
                },
            };
            let input = model.prepare(&s.video, &s.annotation.tokens).map_err(wrap)?;
            let n = model.config().n;
            let iou = iou_field(n, &s.annotation.span, s.video.duration_s()).map_err(wrap)?;
            let labels = label_field(&iou, input.map.mask(), labels).map_err(wrap)?;
            Ok(PreparedSample {
                id: s.query_id.clone(),
                input,
                iou,
                labels,
            })
        })
        .collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn derived_rng(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(0x5eed_u64, |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

/// Model plus optimizer state, advanced one epoch at a time.
///
/// All randomness (shuffling, dropout) is derived from the seed and the
/// epoch index, so a run resumed from a checkpoint continues exactly as the
/// uninterrupted run would.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: LgnModel,
    optimizer: AdamState,
    config: TrainConfig,
    epochs_completed: usize,
}

impl Trainer {
    pub fn new(model: LgnModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamState::new(model.params(), config.learning_rate);
        Ok(Trainer {
            model,
            optimizer,
            config,
            epochs_completed: 0,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = checkpoint
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        Ok(Trainer {
            model: checkpoint.model,
            optimizer,
            config,
            epochs_completed: checkpoint.epochs_completed,
        })
    }

    pub fn model(&self) -> &LgnModel {
        &self.model
    }

    pub fn into_model(self) -> LgnModel {
        self.model
    }

    pub fn epochs_completed(&self) -> usize {
        self.epochs_completed
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            epochs_completed: self.epochs_completed,
        }
    }

    /// Runs one epoch over `data` and returns its log row.
    pub fn run_epoch(&mut self, data: &[PreparedSample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let started = Instant::now();
        let epoch = self.epochs_completed as u64;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derived_rng(&[seed, epoch]));

        let mut total = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let mut rng = derived_rng(&[seed, epoch, b as u64 + 1]);
            let mut tape = Tape::new();
            let bound = self.model.params().bind(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &data[i];
                let trace = self.model.trace(&mut tape, &bound, &s.input, Some(&mut rng as &mut dyn RngCore))?;
                let loss = masked_bce(&mut tape, trace.scores, &s.labels, s.input.map.mask())?;
                total += tape.value(loss).item()?;
                losses.push(loss);
            }
            let mut loss = losses[0];
            for &l in &losses[1..] {
                loss = tape.add(loss, l)?;
            }
            let loss = tape.scale(loss, 1.0 / losses.len() as f64)?;
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            adam_step(self.model.params_mut(), &grads, &mut self.optimizer)?;
        }
        self.epochs_completed += 1;
        Ok(EpochLog {
            epoch: self.epochs_completed,
            mean_loss: total / data.len() as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Where [`train`] writes its artefacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    /// Final checkpoint path; intermediate ones get an `.epoch<k>` suffix.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines log, one object per epoch.
    pub log: Option<PathBuf>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Trains `model` on `samples` for `config.epochs` epochs.
pub fn train(samples: &[Sample], model: LgnModel, config: &TrainConfig, output: &TrainOutput) -> Result<(LgnModel, Vec<EpochLog>)> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let data = prepare_samples(&model, samples, &config.labels)?;
    run_to_completion(Trainer::new(model, config.clone())?, &data, config, output)
}

/// Continues training from `checkpoint` until `config.epochs` epochs are
/// complete in total.
pub fn resume(samples: &[Sample], checkpoint: Checkpoint, config: &TrainConfig, output: &TrainOutput) -> Result<(LgnModel, Vec<EpochLog>)> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let data = prepare_samples(&checkpoint.model, samples, &config.labels)?;
    run_to_completion(Trainer::resume(checkpoint, config.clone())?, &data, config, output)
}

fn run_to_completion(
    mut trainer: Trainer,
    data: &[PreparedSample],
    config: &TrainConfig,
    output: &TrainOutput,
) -> Result<(LgnModel, Vec<EpochLog>)> {
    let mut log_file = match &output.log {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut log = Vec::with_capacity(config.epochs);
    while trainer.epochs_completed() < config.epochs {
        let row = trainer.run_epoch(data)?;
        if let (Some(f), Some(p)) = (log_file.as_mut(), &output.log) {
            writeln!(f, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(p, e))?;
        }
        if let Some(path) = &output.checkpoint {
            let every = config.checkpoint_every;
            if every > 0 && row.epoch % every == 0 && row.epoch < config.epochs {
                trainer.checkpoint().save(&with_suffix(path, &format!(".epoch{}", row.epoch)))?;
            }
        }
        log.push(row);
    }
    if let Some(path) = &output.checkpoint {
        trainer.checkpoint().save(path)?;
    }
    Ok((trainer.into_model(), log))
}
