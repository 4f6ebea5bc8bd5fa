use std::path::{Path, PathBuf};

use ardiff::denoiser::DenoiserConfig;
use ardiff::sampling::SampleMode;
use ardiff::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, TOY_TIMESTEPS};
use ardiff::training::{SyntheticDatasetSpec, TrainConfig};
use serde::Deserialize;

use crate::CliError;

/// Everything a run needs, read from one TOML file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    /// Checkpoint path; relative paths resolve against the output directory.
    pub checkpoint: Option<PathBuf>,
    /// Cache for the synthetic dataset in the latent tensor format.
    pub dataset_cache: Option<PathBuf>,
    pub schedule: ScheduleSection,
    pub dataset: SyntheticDatasetSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sample: SampleSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            timesteps: TOY_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub x0_clamp: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::new(1, 1, 1, 1);
        Self {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            mlp_hidden: d.mlp_hidden,
            x0_clamp: d.x0_clamp,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub grid_steps: usize,
    pub diff: usize,
    pub mode: SampleMode,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            grid_steps: 50,
            diff: 0,
            mode: SampleMode::RecorruptDeterministic,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.timesteps, s.beta_start, s.beta_end).map_err(CliError::from)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            frames: self.dataset.frames,
            tokens: self.dataset.tokens,
            dim: self.dataset.dim,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_hidden: m.mlp_hidden,
            x0_clamp: m.x0_clamp,
            max_timestep: self.schedule.timesteps,
        }
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.denoiser().validate()?;
        if self.sample.grid_steps == 0 || self.sample.grid_steps > self.schedule.timesteps {
            return Err(CliError::usage(format!(
                "sample.grid_steps = {} must lie in 1..={} (schedule.timesteps)",
                self.sample.grid_steps, self.schedule.timesteps
            )));
        }
        if self.sample.mode == SampleMode::Posterior && self.sample.grid_steps != self.schedule.timesteps {
            return Err(CliError::usage(
                "sample.mode = \"posterior\" needs sample.grid_steps = schedule.timesteps",
            ));
        }
        Ok(())
    }

}

/// Absolute paths pass through; relative ones and the default land in `out_dir`.
pub fn resolve(out_dir: &Path, path: Option<&Path>, default: &str) -> PathBuf {
    match path {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => out_dir.join(p),
        None => out_dir.join(default),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.schedule.timesteps, 100);
        assert_eq!(cfg.train.learning_rate, 2e-4);
        assert_eq!(cfg.denoiser().frames, 8);
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
output_dir = "runs/a"
[schedule]
timesteps = 50
[dataset]
n_sequences = 32
angular_velocity = [0.2, 0.3]
[train]
steps = 10
optimizer = "sgd"
[sample]
mode = "posterior"
grid_steps = 50
"#,
        )
        .unwrap();
        assert_eq!(cfg.dataset.angular_velocity, (0.2, 0.3));
        assert_eq!(cfg.sample.mode, SampleMode::Posterior);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_field_names_the_line() {
        let err = toml::from_str::<RunConfig>("[train]\nstepz = 3\n").unwrap_err().to_string();
        assert!(err.contains("stepz") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn grid_must_fit_schedule() {
        let cfg: RunConfig = toml::from_str("[sample]\ngrid_steps = 200\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
