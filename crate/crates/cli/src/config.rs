//! TOML run configuration: the EA settings plus the job-level settings that
//! go into the descriptor.

use std::path::{Path, PathBuf};

use gprop_core::dataset::{self, DEFAULT_SPLIT_RATIOS, GLASS_NAME};
use gprop_core::eval::{ContextError, EvalContext};
use gprop_core::mlp::QpConfig;
use gprop_core::protocol::QpParams;
use gprop_core::{EaConfig, JobDescriptor, ProblemDims};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Context(#[from] ContextError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub dataset_name: String,
    /// Read the data from this file instead of the vendored copy.
    pub dataset_path: Option<PathBuf>,
    pub split_seed: u64,
    pub split_ratios: [f64; 3],
    pub mu: f64,
    pub weight_decay: f64,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            dataset_name: GLASS_NAME.into(),
            dataset_path: None,
            split_seed: 1,
            split_ratios: DEFAULT_SPLIT_RATIOS,
            mu: QpConfig::DEFAULT_MU,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ea: EaConfig,
    pub job: JobConfig,
}

impl RunConfig {
    /// 100 generations of 100 individuals, 300 training epochs.
    pub fn full() -> Self {
        Self::default()
    }

    /// 10 generations of 30 individuals, 150 training epochs.
    pub fn desk() -> Self {
        Self {
            ea: EaConfig::desk_scale(),
            job: JobConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.ea.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.qp().with_epsilon(1.0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn qp(&self) -> QpParams {
        QpParams {
            mu: self.job.mu,
            weight_decay: self.job.weight_decay,
            max_epochs: self.ea.epochs_fitness,
        }
    }

    /// The descriptor for this run; reads the dataset to fix its checksum.
    pub fn descriptor(&self) -> Result<JobDescriptor, ConfigError> {
        let (checksum, raw) = dataset::load_named(&self.job.dataset_name, self.job.dataset_path.as_deref())
            .map_err(ContextError::from)?;
        let d = JobDescriptor {
            job_id: None,
            dataset_name: self.job.dataset_name.clone(),
            dataset_checksum: checksum,
            split_seed: self.job.split_seed,
            split_ratios: self.job.split_ratios,
            qp: self.qp(),
            bounds: self.ea.hidden_bounds,
            problem_dims: ProblemDims {
                inputs: raw.n_features(),
                outputs: raw.n_classes(),
            },
        };
        d.validate().map_err(ConfigError::Invalid)?;
        Ok(d)
    }

    pub fn context(&self) -> Result<EvalContext, ConfigError> {
        Ok(EvalContext::build(&self.descriptor()?, self.job.dataset_path.as_deref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_means_full_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::full());
        assert_eq!(cfg.ea.generations, 100);
        assert_eq!(cfg.ea.population_size, 100);
        assert_eq!(cfg.ea.offspring_per_generation(), 30);
        assert_eq!((cfg.ea.hidden_bounds.min, cfg.ea.hidden_bounds.max), (2, 90));
        assert_eq!(cfg.ea.epochs_fitness, 300);
    }

    #[test]
    fn partial_sections_override_defaults() {
        let cfg = RunConfig::parse("[ea]\ngenerations = 3\nmaster_seed = 9\n[job]\nsplit_seed = 4\n").unwrap();
        assert_eq!(cfg.ea.generations, 3);
        assert_eq!(cfg.ea.master_seed, 9);
        assert_eq!(cfg.ea.population_size, 100);
        assert_eq!(cfg.job.split_seed, 4);
    }

    #[test]
    fn unknown_job_key_and_bad_values_rejected() {
        assert!(RunConfig::parse("[job]\nsplit_sed = 4\n").is_err());
        assert!(RunConfig::parse("[ea]\nreplacement_fraction = 1.0\n").is_err());
        assert!(RunConfig::parse("[job]\nmu = -1.0\n").is_err());
    }

    #[test]
    fn presets_round_trip_through_toml() {
        for name in ["full", "desk"] {
            let cfg = RunConfig::preset(name).unwrap();
            assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        }
        assert!(RunConfig::preset("huge").is_none());
    }

    #[test]
    fn descriptor_follows_ea_settings() {
        let cfg = RunConfig::desk();
        let d = cfg.descriptor().unwrap();
        assert_eq!(d.qp.max_epochs, 150);
        assert_eq!(d.bounds, cfg.ea.hidden_bounds);
        assert_eq!(d.dataset_checksum, dataset::glass_checksum());
        assert_eq!((d.problem_dims.inputs, d.problem_dims.outputs), (9, 6));
    }

    #[test]
    fn shipped_config_files_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(RunConfig::load(&dir.join("full.toml")).unwrap(), RunConfig::full());
        assert_eq!(RunConfig::load(&dir.join("desk.toml")).unwrap(), RunConfig::desk());
    }
}
