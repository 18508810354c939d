//! Run configuration: one TOML file with `[data]`, `[train]`, `[sampler]`
//! and `[metrics]` sections. Unknown keys are rejected; relative paths are
//! resolved against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{SamplerKind, SamplerSpec};
use crate::metrics::VConsisOptions;
use crate::trainer::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn default_range() -> (f64, f64) {
    (0.6, 0.8)
}

fn default_list_size() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Clean scene directories.
    pub scenes: Vec<PathBuf>,
    /// `select-views` output; computed from the scenes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viewsets: Option<PathBuf>,
    #[serde(default = "default_range")]
    pub overlap_range: (f64, f64),
    #[serde(default = "default_list_size")]
    pub list_size: usize,
}

fn default_sampler() -> SamplerSpec {
    SamplerSpec {
        kind: SamplerKind::Deterministic,
        n_steps: 50,
        seed: 0,
        clip_denoised: false,
    }
}

fn default_align() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    #[serde(default)]
    pub vconsis: VConsisOptions,
    /// Per-view scale/bias alignment before depth metrics.
    #[serde(default = "default_align")]
    pub align: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            vconsis: VConsisOptions::default(),
            align: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub metrics: MetricOptions,
}

/// Seeds must fit a TOML integer.
pub const MAX_SEED: u64 = i64::MAX as u64;

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            detail: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                let joined = base.join(&*p);
                *p = std::path::absolute(&joined).unwrap_or(joined);
            }
        };
        cfg.data.scenes.iter_mut().for_each(resolve);
        cfg.data.viewsets.iter_mut().for_each(resolve);
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    fn validate(&self, path: &Path) -> Result<(), ConfigError> {
        let bad = |detail: String| ConfigError::Parse {
            path: path.to_path_buf(),
            detail,
        };
        if self.data.scenes.is_empty() {
            return Err(bad("data.scenes is empty".into()));
        }
        let (lo, hi) = self.data.overlap_range;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(bad(format!("data.overlap_range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1")));
        }
        if self.train.seed > MAX_SEED || self.sampler.seed > MAX_SEED {
            return Err(bad(format!("seeds must be <= {MAX_SEED}")));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[data]
scenes = ["scenes/a", "/abs/b"]

[train]
iterations = 10
batch_sets = 2
views_per_set = 4
learning_rate = 1e-3
seed = 3
checkpoint_every = 5

[train.task.deblur]
size_mean = 9.0
size_std = 1.35
intensity_min = 0.0
intensity_max = 1.0

[train.model]
in_channels = 3
cond_channels = 3
base_width = 8
level_widths = [8, 8]
n_levels = 2
attention_levels = [1]
blend_alpha = 0.5
heads = 2
timestep_embed_dim = 8
groups = 4
"#;

    #[test]
    fn parses_with_defaults_and_resolves_paths() {
        let cfg = RunConfig::from_toml(SAMPLE, Path::new("/runs/x/run.toml")).unwrap();
        assert_eq!(cfg.data.scenes[0], PathBuf::from("/runs/x/scenes/a"));
        let rel = RunConfig::from_toml(SAMPLE, Path::new("x/run.toml")).unwrap();
        assert!(rel.data.scenes[0].is_absolute());
        assert!(rel.data.scenes[0].ends_with("x/scenes/a"));
        assert_eq!(cfg.data.scenes[1], PathBuf::from("/abs/b"));
        assert_eq!(cfg.data.overlap_range, (0.6, 0.8));
        assert_eq!(cfg.train.diffusion_steps, 200);
        assert_eq!(cfg.sampler.n_steps, 50);
        assert!(cfg.metrics.align);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml(SAMPLE, Path::new("/r/run.toml")).unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere/c.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = SAMPLE.replace("batch_sets = 2", "batch_sets = 2\nwarmup = 5");
        let err = RunConfig::from_toml(&text, Path::new("r.toml")).unwrap_err().to_string();
        assert!(err.contains("warmup"), "{err}");
        let text = SAMPLE.replace("groups = 4", "groups = 4\nwidth_mult = 2");
        let err = RunConfig::from_toml(&text, Path::new("r.toml")).unwrap_err().to_string();
        assert!(err.contains("width_mult"), "{err}");
    }

    #[test]
    fn task_variants_parse() {
        let deblur = "[train.task.deblur]\nsize_mean = 9.0\nsize_std = 1.35\nintensity_min = 0.0\nintensity_max = 1.0\n";
        for (inline, want) in [
            ("task = { sr = { factor = 2 } }", crate::trainer::TrainTask::Sr { factor: 2 }),
            ("task = \"depth\"", crate::trainer::TrainTask::Depth),
        ] {
            let text = SAMPLE
                .replace(deblur, "")
                .replace("checkpoint_every = 5", &format!("checkpoint_every = 5\n{inline}"));
            let cfg = RunConfig::from_toml(&text, Path::new("r.toml")).unwrap();
            assert_eq!(cfg.train.task, want);
        }
    }
}
