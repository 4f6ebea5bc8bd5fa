//! Synthetic rotating-point latents and the denoiser training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{loss_and_grad, DenoiserConfig, DenoiserParams, Example};
use crate::error::{invalid, Error, Result};
use crate::latent::LatentVideo;
use crate::lattice::{CountTables, TimestepComposition};
use crate::par::stream_rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub n_sequences: usize,
    pub frames: usize,
    pub dim: usize,
    pub tokens: usize,
    /// Per-sequence angular velocity range, radians per frame.
    pub angular_velocity: (f64, f64),
    pub observation_noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            n_sequences: 512,
            frames: 8,
            dim: 2,
            tokens: 1,
            angular_velocity: (0.1, 0.5),
            observation_noise_std: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(invalid("synthetic sequences need at least 2 frames"));
        }
        if self.dim < 2 || self.tokens == 0 {
            return Err(invalid("synthetic latents need D >= 2 and L >= 1"));
        }
        let (lo, hi) = self.angular_velocity;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid("angular velocity range must be ordered and finite"));
        }
        if !(self.observation_noise_std >= 0.0) {
            return Err(invalid("observation noise std must be non-negative"));
        }
        Ok(())
    }
}

/// A generated sequence together with the angular velocity that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub latent: LatentVideo,
    pub omega: f64,
}

/// Points rotating on the unit circle in the first two dimensions, one
/// random phase per token, with Gaussian observation noise on every
/// coordinate.
pub fn make_synthetic_sequences(spec: &SyntheticDatasetSpec) -> Result<Vec<SyntheticSequence>> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.observation_noise_std)
        .map_err(|e| invalid(format!("bad noise std: {e}")))?;
    let (lo, hi) = spec.angular_velocity;
    let mut out = Vec::with_capacity(spec.n_sequences);
    for seq in 0..spec.n_sequences {
        let mut rng = stream_rng(spec.seed, seq as u64);
        let omega = if lo == hi { lo } else { rng.random_range(lo..hi) };
        let (f, l, d) = (spec.frames, spec.tokens, spec.dim);
        let mut data = vec![0.0; f * l * d];
        for tok in 0..l {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut z = vec![0.0; d];
            z[0] = phase.cos();
            z[1] = phase.sin();
            for frame in 0..f {
                if frame > 0 {
                    let (s, c) = omega.sin_cos();
                    let (x, y) = (z[0], z[1]);
                    z[0] = c * x - s * y;
                    z[1] = s * x + c * y;
                    if spec.observation_noise_std > 0.0 {
                        for v in z.iter_mut() {
                            *v += noise.sample(&mut rng);
                        }
                    }
                }
                let at = (frame * l + tok) * d;
                data[at..at + d].copy_from_slice(&z);
            }
        }
        out.push(SyntheticSequence {
            latent: LatentVideo::new(f, l, d, data)?,
            omega,
        });
    }
    Ok(out)
}

pub fn make_synthetic_dataset(spec: &SyntheticDatasetSpec) -> Result<Vec<LatentVideo>> {
    Ok(make_synthetic_sequences(spec)?
        .into_iter()
        .map(|s| s.latent)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of trailing steps run at `finetune_learning_rate`.
    pub finetune_steps: usize,
    pub finetune_learning_rate: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub grad_clip_norm: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub scale_factor: f64,
    /// Remap a sampled `t = 1` to `t = 0` with probability 1/2.
    pub clean_context: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-4,
            finetune_steps: 0,
            finetune_learning_rate: 1e-5,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            grad_clip_norm: 1.0,
            ema_decay: 0.999,
            seed: 0,
            scale_factor: 0.5,
            clean_context: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(invalid("steps and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.finetune_learning_rate >= 0.0) {
            return Err(invalid("learning rates must be non-negative"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(invalid("grad_clip_norm must be positive"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(invalid("ema_decay must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.scale_factor > 0.0) {
            return Err(invalid("scale_factor must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.steps.saturating_sub(self.finetune_steps) && self.finetune_steps > 0 {
            self.finetune_learning_rate
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball SGD, `v = momentum * v + g; p -= lr * v`.
    Sgd,
    /// Adam with `beta1 = momentum`, `beta2 = 0.999`, `eps = 1e-8`.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// What the loop saw at one step, passed to an observer.
pub struct StepTrace<'a> {
    pub step: usize,
    pub compositions: &'a [TimestepComposition],
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub params: &'a DenoiserParams,
    pub ema: &'a DenoiserParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub initial: DenoiserParams,
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
    pub log: Vec<LossRecord>,
}

impl TrainOutput {
    /// Mean loss over the first `k` logged steps.
    pub fn head_mean(&self, k: usize) -> f64 {
        let k = k.min(self.log.len());
        self.log[..k].iter().map(|r| r.loss).sum::<f64>() / k as f64
    }

    /// Mean loss over the last `k` logged steps.
    pub fn tail_mean(&self, k: usize) -> f64 {
        let k = k.min(self.log.len());
        self.log[self.log.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64
    }
}

/// `step,loss,grad_norm,lr` rows with a header line.
pub fn write_loss_csv<W: Write>(mut out: W, log: &[LossRecord]) -> Result<()> {
    writeln!(out, "step,loss,grad_norm,lr")?;
    for r in log {
        writeln!(out, "{},{},{},{}", r.step, r.loss, r.grad_norm, r.lr)?;
    }
    Ok(())
}

pub fn train(
    config: &TrainConfig,
    dataset: &[LatentVideo],
    denoiser: &DenoiserConfig,
    sched: &NoiseSchedule,
) -> Result<TrainOutput> {
    train_with_observer(config, dataset, denoiser, sched, |_| {})
}

/// Adam (or heavy-ball SGD) on FoPP-sampled compositions, with global-norm
/// clipping and an EMA copy of the parameters.
pub fn train_with_observer<O>(
    config: &TrainConfig,
    dataset: &[LatentVideo],
    denoiser: &DenoiserConfig,
    sched: &NoiseSchedule,
    mut observer: O,
) -> Result<TrainOutput>
where
    O: FnMut(&StepTrace<'_>),
{
    config.validate()?;
    denoiser.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    if let Some(bad) = dataset
        .iter()
        .find(|z| z.shape() != (denoiser.frames, denoiser.tokens, denoiser.dim))
    {
        return Err(invalid(format!(
            "dataset latent shape {:?} does not match the denoiser",
            bad.shape()
        )));
    }
    if sched.num_steps() != denoiser.max_timestep {
        return Err(invalid("schedule length differs from denoiser max_timestep"));
    }

    let tables = CountTables::build(denoiser.frames, sched.num_steps())?;
    let mut init_rng = stream_rng(config.seed, 0);
    let mut data_rng = stream_rng(config.seed, 1);
    let initial = DenoiserParams::init(denoiser, &mut init_rng);
    let mut params = initial.clone();
    let mut ema = initial.clone();
    let mut velocity = DenoiserParams::zeros(denoiser);
    let mut second = DenoiserParams::zeros(denoiser);
    let mut log = Vec::with_capacity(config.steps);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let (f, l, d) = (denoiser.frames, denoiser.tokens, denoiser.dim);

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut data_rng);
                cursor = 0;
            }
            let z0 = dataset[order[cursor]].scaled(config.scale_factor);
            cursor += 1;
            let mut composition = tables.sample(&mut data_rng);
            if config.clean_context {
                let mut steps = composition.into_steps();
                for t in steps.iter_mut() {
                    if *t == 1 && data_rng.random_bool(0.5) {
                        *t = 0;
                    }
                }
                // zeros only replace ones, so order is preserved
                steps.sort_unstable();
                composition = TimestepComposition::new(steps, sched.num_steps())?;
            }
            let eps: Vec<f64> = (0..f * l * d).map(|_| StandardNormal.sample(&mut data_rng)).collect();
            batch.push(Example {
                z0,
                composition,
                eps: LatentVideo::new(f, l, d, eps)?,
            });
        }

        let (loss, mut grads) = match loss_and_grad(&params, denoiser, &batch, sched) {
            Ok(v) => v,
            Err(Error::NonFiniteLoss { index }) => {
                return Err(Error::Internal(format!(
                    "non-finite loss at step {step}, batch index {index}; composition {}, param norm {:.6e}, last loss {:?}",
                    batch[index].composition,
                    params.norm(),
                    log.last().map(|r: &LossRecord| r.loss)
                )))
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grads.norm();
        if grad_norm > config.grad_clip_norm {
            grads.scale(config.grad_clip_norm / grad_norm);
        }
        let clipped_norm = grads.norm();

        let lr = config.lr_at(step);
        match config.optimizer {
            Optimizer::Sgd => {
                velocity.scale(config.momentum);
                velocity.add_scaled(&grads, 1.0);
                params.add_scaled(&velocity, -lr);
            }
            Optimizer::Adam => {
                const BETA2: f64 = 0.999;
                let b1 = config.momentum;
                let k = (step + 1) as i32;
                let (c1, c2) = (1.0 - b1.powi(k), 1.0 - BETA2.powi(k));
                for (((p, m), v), g) in params
                    .iter_scalars_mut()
                    .zip(velocity.iter_scalars_mut())
                    .zip(second.iter_scalars_mut())
                    .zip(grads.iter_scalars())
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                }
            }
        }
        for (e, p) in ema.iter_scalars_mut().zip(params.iter_scalars()) {
            *e = config.ema_decay * *e + (1.0 - config.ema_decay) * p;
        }
        log.push(LossRecord {
            step,
            loss,
            grad_norm,
            lr,
        });
        let compositions: Vec<TimestepComposition> =
            batch.iter().map(|ex| ex.composition.clone()).collect();
        observer(&StepTrace {
            step,
            compositions: &compositions,
            grad_norm,
            clipped_norm,
            params: &params,
            ema: &ema,
        });
    }
    Ok(TrainOutput {
        initial,
        params,
        ema,
        log,
    })
}
