//! Training loop, evaluation and the small-set overfit harness.

pub mod checkpoint;
pub mod optim;

use std::path::PathBuf;
use std::time::Instant;

use esm_tensor::{Element, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::DisparityMap;
use crate::config::{ModelConfig, Variant, VolumeKind};
use crate::data::synth::generate_random_dot_pair;
use crate::data::{evaluation_mask, make_batch, Crop, StereoSample};
use crate::error::{Error, Result};
use crate::loss::{multiscale_loss, LossWeights};
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::model::EsmStereo;
use crate::nn::{Ctx, ParamId, ParamStore};

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimState, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub lr: f64,
    /// Decay epochs. Empty means the reference plan rescaled to `epochs`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Global gradient-norm limit.
    #[serde(default)]
    pub clip_grad: Option<f64>,
    /// Fraction of the run after which batch norm uses its running statistics.
    #[serde(default)]
    pub freeze_bn_after: Option<f64>,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub shuffle: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            epochs: 60,
            batch_size: 2,
            crop_height: 64,
            crop_width: 128,
            lr: 1e-3,
            milestones: Vec::new(),
            adamw: AdamWConfig::default(),
            clip_grad: None,
            freeze_bn_after: None,
            max_steps: None,
            shuffle: true,
            seed: 0,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        if self.milestones.is_empty() {
            Ok(Schedule::scaled(self.lr, self.epochs))
        } else {
            Schedule::new(self.lr, self.milestones.clone())
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if let Some(f) = self.freeze_bn_after {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("freeze_bn_after must lie in [0, 1], got {f}")));
            }
        }
        self.schedule().map(|_| ())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trained weights and the optimizer that produced them.
pub struct TrainOutcome<T: Element> {
    pub net: EsmStereo,
    pub store: ParamStore<T>,
    pub optim: OptimState<T>,
    /// Total loss per optimizer step.
    pub losses: Vec<f64>,
    pub epochs_run: usize,
}

fn cast_map<T: Element>(m: &DisparityMap<f32>) -> DisparityMap<T> {
    DisparityMap { data: m.data.cast(), scale: m.scale, valid: m.valid.clone() }
}

fn total_steps(cfg: &TrainConfig, n: usize) -> usize {
    let per_epoch = n.div_ceil(cfg.batch_size);
    let all = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

/// Loss of one batch, gradients and queued running-statistic updates.
fn step_grads<T: Element>(
    net: &EsmStereo,
    store: &ParamStore<T>,
    left: &Tensor<T>,
    right: &Tensor<T>,
    gt: &DisparityMap<T>,
    bn_batch_stats: bool,
) -> Result<(f64, Vec<(ParamId, Vec<T>)>, Vec<(ParamId, Vec<T>)>)> {
    let cfg = &net.config;
    let ctx = Ctx::new(store, bn_batch_stats, true).with_norm(cfg.bn_momentum, cfg.bn_eps);
    let out = net.forward(&ctx, left, right)?;
    let loss = multiscale_loss(&out.preds, gt, &LossWeights(cfg.loss_weights.clone()))?;
    let value = loss.total.item().as_f64();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value}")));
    }
    loss.total.backward()?;
    let grads = ctx.grads();
    if grads.iter().any(|(_, g)| g.iter().any(|v| !v.as_f64().is_finite())) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok((value, grads, ctx.take_updates()))
}

/// Ground truth restricted to the pixels the network is supervised on.
fn supervised<T: Element>(gt: &DisparityMap<f32>, d_max: usize) -> DisparityMap<T> {
    let mut m = cast_map::<T>(gt);
    m.valid = evaluation_mask(gt, d_max);
    m
}

/// Trains from fresh parameters. With `checkpoint` set, the final state is
/// saved there; on a numerical failure the last good state is saved there
/// before the error is returned. `on_step` sees `(step, loss)`.
pub fn train<T: Element>(
    cfg: &TrainConfig,
    samples: &[StereoSample],
    checkpoint: Option<PathBuf>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let (net, store) = EsmStereo::build::<T>(&cfg.model)?;
    let optim = OptimState::new(&store, cfg.adamw.clone());
    train_from(cfg, samples, checkpoint, net, store, optim, &mut on_step)
}

/// Continues training from existing parameters and optimizer state.
pub fn train_from<T: Element>(
    cfg: &TrainConfig,
    samples: &[StereoSample],
    checkpoint: Option<PathBuf>,
    net: EsmStereo,
    mut store: ParamStore<T>,
    mut optim: OptimState<T>,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    let schedule = cfg.schedule()?;
    let total = total_steps(cfg, samples.len());
    let freeze_at = cfg.freeze_bn_after.map_or(usize::MAX, |f| (f * total as f64).round() as usize);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    let mut epoch = 0;
    while epoch < cfg.epochs && step < total {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let lr = schedule.lr_at(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let batch_samples: Vec<&StereoSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64);
            let batch = make_batch(&batch_samples, cfg.crop_height, cfg.crop_width, Crop::Random, seed)?;
            let gt = supervised::<T>(&batch.gt, cfg.model.d_max);
            let result = step_grads(&net, &store, &batch.left.cast(), &batch.right.cast(), &gt, step < freeze_at);
            let (loss, mut grads, updates) = match result {
                Ok(r) => r,
                Err(e @ Error::Numerical(_)) => {
                    if let Some(dir) = &checkpoint {
                        save_checkpoint(dir, &cfg.model, &store, Some(&optim), epoch)?;
                    }
                    return Err(Error::Numerical(format!("step {step}: {e}")));
                }
                Err(e) => return Err(e),
            };
            if let Some(max) = cfg.clip_grad {
                clip_grad_norm(&mut grads, max);
            }
            adamw_step(&mut store, &grads, &mut optim, lr)?;
            store.apply_updates(updates);
            losses.push(loss);
            on_step(step, loss);
            step += 1;
        }
        epoch += 1;
    }
    if let Some(dir) = &checkpoint {
        save_checkpoint(dir, &cfg.model, &store, Some(&optim), epoch)?;
    }
    Ok(TrainOutcome { net, store, optim, losses, epochs_run: epoch })
}

/// Full-resolution prediction for one sample, in inference mode.
pub fn predict<T: Element>(net: &EsmStereo, store: &ParamStore<T>, sample: &StereoSample) -> Result<DisparityMap<f32>> {
    let (h, w) = (sample.height(), sample.width());
    let left = sample.left.reshape(&[1, 3, h, w])?.cast::<T>();
    let right = sample.right.reshape(&[1, 3, h, w])?.cast::<T>();
    let out = net.forward(&Ctx::eval(store), &left, &right)?;
    let map = out.final_map();
    Ok(DisparityMap::prediction(map.data.reshape(&[1, h, w])?.cast(), 1))
}

/// Pooled metrics over all samples, on pixels with valid ground truth in
/// `(0, d_max)`.
pub fn evaluate<T: Element>(net: &EsmStereo, store: &ParamStore<T>, samples: &[StereoSample]) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::default();
    for s in samples {
        let pred = predict(net, store, s)?;
        let mask = evaluation_mask(&s.gt, net.config.d_max);
        acc.add(&pred.data.to_f64_vec(), &s.gt.data.to_f64_vec(), &mask)?;
    }
    acc.report()
}

/// Settings of the small-set memorization experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitConfig {
    pub kind: VolumeKind,
    pub pairs: usize,
    pub height: usize,
    pub width: usize,
    /// Largest disparity drawn by the random-dot generator (exclusive).
    pub synth_d_max: usize,
    /// Side of the constant-disparity tiles.
    pub block: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub top_k: usize,
    pub clip_grad: Option<f64>,
    pub freeze_bn_after: Option<f64>,
    pub seed: u64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig {
            kind: VolumeKind::Gwc,
            pairs: 8,
            height: 64,
            width: 128,
            synth_d_max: 31,
            block: 16,
            batch_size: 2,
            steps: 500,
            lr: 2e-3,
            top_k: 2,
            clip_grad: Some(5.0),
            freeze_bn_after: Some(0.5),
            seed: 0,
        }
    }
}

impl OverfitConfig {
    /// The synthetic training set: pair `i` is generated from seed `100 + i`.
    pub fn dataset(&self) -> Result<Vec<StereoSample>> {
        (0..self.pairs)
            .map(|i| generate_random_dot_pair(self.height, self.width, self.synth_d_max, self.block, 100 + i as u64))
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut model = ModelConfig::desk(Variant::S, self.kind);
        model.top_k = self.top_k;
        model.seed = self.seed;
        let per_epoch = self.pairs.div_ceil(self.batch_size);
        TrainConfig {
            model,
            epochs: self.steps.div_ceil(per_epoch),
            batch_size: self.batch_size,
            crop_height: self.height,
            crop_width: self.width,
            lr: self.lr,
            milestones: Vec::new(),
            adamw: AdamWConfig::default(),
            clip_grad: self.clip_grad,
            freeze_bn_after: self.freeze_bn_after,
            max_steps: Some(self.steps),
            shuffle: true,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub model: String,
    pub initial: EvalReport,
    pub trained: EvalReport,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Trains on the synthetic set and evaluates on the same pairs before and
/// after training.
pub fn overfit_harness(cfg: &OverfitConfig) -> Result<OverfitReport> {
    let start = Instant::now();
    let data = cfg.dataset()?;
    let tc = cfg.train_config();
    let (net, store) = EsmStereo::build::<f32>(&tc.model)?;
    let initial = evaluate(&net, &store, &data)?;
    let optim = OptimState::new(&store, tc.adamw.clone());
    let out = train_from(&tc, &data, None, net, store, optim, &mut |_, _| {})?;
    let trained = evaluate(&out.net, &out.store, &data)?;
    Ok(OverfitReport {
        model: tc.model.name(),
        initial,
        trained,
        losses: out.losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}
