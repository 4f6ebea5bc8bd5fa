//! Inference-time trajectories for the adaptive-difference (AD) scheduler.
//!
//! A plan starts with every frame at the top of the sampler grid (`N`) and
//! ends with every frame at `0`. In each step frame 1 moves down one grid
//! level; any later frame whose predecessor was still noisy when the step
//! began is pinned `s` levels above the predecessor's new level (capped at
//! `N`); once the predecessor was already clean the frame denoises itself
//! one level per step. Timesteps are in sampler-grid units throughout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// Grid levels after this step, one per frame, non-decreasing across frames.
    pub composition: Vec<usize>,
    /// Frames whose level changed in this step.
    pub update_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryPlan {
    pub frames: usize,
    pub grid_steps: usize,
    pub diff: usize,
    /// Grid index `0..=N` to diffusion timestep.
    pub grid_map: Vec<usize>,
    /// Levels before the first step (all `N`).
    pub initial: Vec<usize>,
    pub steps: Vec<TrajectoryStep>,
}

impl TrajectoryPlan {
    /// Number of steps, which is also the number of denoiser calls.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Levels in force before step `k` (the denoiser's conditioning).
    pub fn levels_before(&self, k: usize) -> &[usize] {
        if k == 0 {
            &self.initial
        } else {
            &self.steps[k - 1].composition
        }
    }

    /// Re-targets the grid onto `timesteps` diffusion steps.
    pub fn with_timesteps(mut self, timesteps: usize) -> Result<Self> {
        self.grid_map = (0..=self.grid_steps)
            .map(|g| grid_to_timestep(g, self.grid_steps, timesteps))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    /// Diffusion timestep for grid level `g`.
    pub fn timestep(&self, g: usize) -> usize {
        self.grid_map[g]
    }

    /// One JSON record per line: `{"step":k,"composition":[..],"mask":[..]}`.
    /// Step 0 is the initial state with an all-false mask.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            step: usize,
            composition: &'a [usize],
            timesteps: Vec<usize>,
            mask: &'a [bool],
        }
        let none = vec![false; self.frames];
        let initial = Record {
            step: 0,
            composition: &self.initial,
            timesteps: self.initial.iter().map(|&g| self.grid_map[g]).collect(),
            mask: &none,
        };
        serde_json::to_writer(&mut out, &initial)?;
        out.write_all(b"\n")?;
        for (k, step) in self.steps.iter().enumerate() {
            let rec = Record {
                step: k + 1,
                composition: &step.composition,
                timesteps: step.composition.iter().map(|&g| self.grid_map[g]).collect(),
                mask: &step.update_mask,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Builds the AD trajectory for `frames` frames over an `grid_steps`-level
/// grid with inter-frame difference `diff`. The grid map is the identity.
pub fn plan_trajectory(frames: usize, grid_steps: usize, diff: usize) -> Result<TrajectoryPlan> {
    if frames == 0 || grid_steps == 0 {
        return Err(invalid(format!(
            "plan needs F, N >= 1, got F={frames} N={grid_steps}"
        )));
    }
    let n = grid_steps;
    let initial = vec![n; frames];
    let mut current = initial.clone();
    let mut steps = Vec::with_capacity(n + (frames - 1) * diff.min(n));
    while current.iter().any(|&t| t > 0) {
        let mut next = current.clone();
        next[0] = current[0].saturating_sub(1);
        for i in 1..frames {
            next[i] = if current[i - 1] > 0 {
                (next[i - 1] + diff).min(n)
            } else {
                current[i].saturating_sub(1)
            };
        }
        let update_mask = next.iter().zip(&current).map(|(a, b)| a != b).collect();
        steps.push(TrajectoryStep {
            composition: next.clone(),
            update_mask,
        });
        current = next;
    }
    Ok(TrajectoryPlan {
        frames,
        grid_steps,
        diff,
        grid_map: (0..=n).collect(),
        initial,
        steps,
    })
}

/// Closed-form plan length `N + (F - 1) * min(s, N)`.
pub fn expected_plan_len(frames: usize, grid_steps: usize, diff: usize) -> usize {
    grid_steps + (frames - 1) * diff.min(grid_steps)
}

/// Evenly spaced grid level to diffusion timestep, rounded half up.
pub fn grid_to_timestep(grid_index: usize, grid_steps: usize, timesteps: usize) -> Result<usize> {
    if grid_steps == 0 || grid_steps > timesteps {
        return Err(invalid(format!(
            "sampler grid of {grid_steps} steps does not fit {timesteps} timesteps"
        )));
    }
    if grid_index > grid_steps {
        return Err(invalid(format!(
            "grid index {grid_index} exceeds {grid_steps}"
        )));
    }
    Ok((grid_index * timesteps * 2 + grid_steps) / (grid_steps * 2))
}
