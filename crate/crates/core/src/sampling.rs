//! Inference: walk an AD trajectory, predicting clean latents and moving
//! the frames whose grid level changes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{forward, DenoiserConfig, DenoiserParams};
use crate::error::{invalid, Error, Result};
use crate::latent::LatentVideo;
use crate::lattice::TimestepComposition;
use crate::schedule::NoiseSchedule;
use crate::trajectory::plan_trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Deterministic DDIM jump between the mapped timesteps.
    RecorruptDeterministic,
    /// Re-noise the clean prediction at the new timestep with fresh noise.
    RecorruptStochastic,
    /// Ancestral posterior steps, one per unit timestep; requires `N = T`.
    Posterior,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recorrupt_deterministic" | "ddim" => Ok(Self::RecorruptDeterministic),
            "recorrupt_stochastic" => Ok(Self::RecorruptStochastic),
            "posterior" => Ok(Self::Posterior),
            other => Err(invalid(format!("unknown sample mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub frames: usize,
    /// Sampler grid size `N`.
    pub grid_steps: usize,
    /// Inter-frame difference `s` in grid units.
    pub diff: usize,
    pub mode: SampleMode,
    pub seed: u64,
    pub scale_factor: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            grid_steps: 50,
            diff: 0,
            mode: SampleMode::RecorruptDeterministic,
            seed: 0,
            scale_factor: 0.5,
        }
    }
}

/// Anything that maps noisy latents plus per-frame timesteps to clean latents.
pub trait X0Predictor {
    fn predict(
        &self,
        z: &LatentVideo,
        composition: &TimestepComposition,
        sched: &NoiseSchedule,
    ) -> Result<LatentVideo>;
}

/// A trained denoiser bound to its configuration.
pub struct Denoiser<'a> {
    pub params: &'a DenoiserParams,
    pub config: &'a DenoiserConfig,
}

impl X0Predictor for Denoiser<'_> {
    fn predict(
        &self,
        z: &LatentVideo,
        composition: &TimestepComposition,
        sched: &NoiseSchedule,
    ) -> Result<LatentVideo> {
        forward(self.params, self.config, z, composition, sched)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub step: usize,
    pub frame: usize,
    pub from_level: usize,
    pub to_level: usize,
}

/// Instrumentation collected during a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationTrace {
    pub model_calls: usize,
    /// Diffusion timesteps the model was conditioned on, per call.
    pub conditioning: Vec<Vec<usize>>,
    pub transitions: Vec<Transition>,
    /// Latent after every step (only when `keep_latents` is set).
    pub latents: Vec<LatentVideo>,
    pub keep_latents: bool,
}

/// Generates one latent video with the trained denoiser.
pub fn generate<R: Rng + ?Sized>(
    params: &DenoiserParams,
    denoiser: &DenoiserConfig,
    sched: &NoiseSchedule,
    config: &SampleConfig,
    rng: &mut R,
) -> Result<LatentVideo> {
    if config.frames != denoiser.frames {
        return Err(invalid(format!(
            "sampler wants {} frames but the denoiser was built for {}",
            config.frames, denoiser.frames
        )));
    }
    let model = Denoiser {
        params,
        config: denoiser,
    };
    generate_with(&model, sched, config, (denoiser.tokens, denoiser.dim), rng, None)
}

/// Generic driver; `shape` is `(tokens, dim)` per frame.
pub fn generate_with<P, R>(
    model: &P,
    sched: &NoiseSchedule,
    config: &SampleConfig,
    shape: (usize, usize),
    rng: &mut R,
    mut trace: Option<&mut GenerationTrace>,
) -> Result<LatentVideo>
where
    P: X0Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let t_max = sched.num_steps();
    if config.grid_steps > t_max {
        return Err(invalid(format!(
            "sampler grid {} exceeds {} timesteps",
            config.grid_steps, t_max
        )));
    }
    if config.mode == SampleMode::Posterior && config.grid_steps != t_max {
        return Err(invalid("posterior mode needs the full timestep grid (N = T)"));
    }
    if !(config.scale_factor > 0.0) {
        return Err(invalid("scale_factor must be positive"));
    }
    let plan = plan_trajectory(config.frames, config.grid_steps, config.diff)?.with_timesteps(t_max)?;
    let (tokens, dim) = shape;
    let n = config.frames * tokens * dim;
    let init: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut z = LatentVideo::new(config.frames, tokens, dim, init)?;
    let frame_len = tokens * dim;

    for (k, step) in plan.steps.iter().enumerate() {
        let before = plan.levels_before(k);
        let cond: Vec<usize> = before.iter().map(|&g| plan.timestep(g)).collect();
        let composition = TimestepComposition::new(cond, t_max)?;
        let x0 = model.predict(&z, &composition, sched)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.model_calls += 1;
            tr.conditioning.push(composition.steps().to_vec());
        }
        for f in 0..config.frames {
            if !step.update_mask[f] {
                continue;
            }
            let (from, to) = (before[f], step.composition[f]);
            let (t_from, t_to) = (plan.timestep(from), plan.timestep(to));
            let x0_f = x0.frame(f);
            let moved = match config.mode {
                SampleMode::RecorruptDeterministic => sched.ddim_step(z.frame(f), x0_f, t_from, t_to)?,
                SampleMode::RecorruptStochastic => {
                    let eps: Vec<f64> = (0..frame_len).map(|_| StandardNormal.sample(rng)).collect();
                    sched.corrupt(x0_f, t_to, &eps)?
                }
                SampleMode::Posterior => {
                    let mut cur = z.frame(f).to_vec();
                    for t in (t_to + 1..=t_from).rev() {
                        let noise: Vec<f64> = if t > 1 {
                            (0..frame_len).map(|_| StandardNormal.sample(rng)).collect()
                        } else {
                            vec![0.0; frame_len]
                        };
                        cur = sched.posterior_step(&cur, x0_f, t, &noise)?;
                    }
                    cur
                }
            };
            if moved.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLatent {
                    step: k + 1,
                    frame: f + 1,
                });
            }
            z.frame_mut(f).copy_from_slice(&moved);
            if let Some(tr) = trace.as_deref_mut() {
                tr.transitions.push(Transition {
                    step: k + 1,
                    frame: f + 1,
                    from_level: from,
                    to_level: to,
                });
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            if tr.keep_latents {
                tr.latents.push(z.clone());
            }
        }
    }
    Ok(z.scaled(1.0 / config.scale_factor))
}
