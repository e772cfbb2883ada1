//! Run configuration read from TOML.
//!
//! Every section and key is optional; missing values take the defaults
//! below. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NuggetMode, Priors, SpatialBasis};
use crate::par::Execution;
use crate::predict::{MeanTreatment, PredictionRequest, Target};
use crate::sampler::ChainConfig;
use crate::simulate::{HoldoutRule, SimConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Two-level co-kriging model using both flag classes.
    #[default]
    Lvcs,
    /// Single-level baseline that pools flags 0 and 1.
    Sgp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Log-pressure polynomial degree of the low-level (and baseline) mean.
    pub degree_low: usize,
    /// Degree of the high-level discrepancy mean.
    pub degree_high: usize,
    pub spatial_basis: SpatialBasis,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lvcs,
            degree_low: 3,
            degree_high: 3,
            spatial_basis: SpatialBasis::Constant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionConfig {
    pub n_draws_per_sample: usize,
    pub interval_level: f64,
    pub mean_treatment: MeanTreatment,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            n_draws_per_sample: 1,
            interval_level: 0.95,
            mean_treatment: MeanTreatment::Estimated,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl PredictionConfig {
    pub fn request(&self, targets: Vec<Target>) -> PredictionRequest {
        PredictionRequest {
            targets,
            n_draws_per_sample: self.n_draws_per_sample,
            interval_level: self.interval_level,
            keep_draws: true,
            mean_treatment: self.mean_treatment,
            execution: self.execution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub replicates: usize,
    pub base_seed: u64,
    /// `(n_iter, n_burn)` for full-scale runs.
    pub full_iterations: (usize, usize),
    /// `(n_iter, n_burn)` under `--desk`.
    pub desk_iterations: (usize, usize),
    /// Test block; cells in it are withheld from both models.
    pub holdout: HoldoutRule,
    /// How replicates are scheduled.
    pub execution: Execution,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            replicates: 20,
            base_seed: 0,
            full_iterations: (25_000, 5_000),
            desk_iterations: (5_000, 1_000),
            holdout: HoldoutRule {
                min_level: 6,
                lon_frac: (0.3, 0.7),
                lat_frac: (0.3, 0.7),
            },
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub priors: Priors,
    pub chain: ChainConfig,
    pub prediction: PredictionConfig,
    pub simulation: SimConfig,
    pub compare: CompareConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate().map_err(|v| Error::Config(v.join("; ")))?;
        self.chain.validate()?;
        self.simulation.validate()?;
        for mode in [self.chain.nugget_low, self.chain.nugget_high] {
            if let NuggetMode::Fixed { value } = mode {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(Error::Config(format!("fixed nugget {value} must be >= 0")));
                }
            }
        }
        let p = &self.prediction;
        if p.n_draws_per_sample == 0 {
            return Err(Error::Config("prediction.n_draws_per_sample must be >= 1".into()));
        }
        if !(p.interval_level > 0.0 && p.interval_level < 1.0) {
            return Err(Error::Config("prediction.interval_level must lie in (0, 1)".into()));
        }
        let c = &self.compare;
        if c.replicates == 0 {
            return Err(Error::Config("compare.replicates must be >= 1".into()));
        }
        for (name, (it, burn)) in [("full_iterations", c.full_iterations), ("desk_iterations", c.desk_iterations)] {
            if burn >= it {
                return Err(Error::Config(format!("compare.{name}: burn-in {burn} must be < {it}")));
            }
        }
        Ok(())
    }

    /// Overrides every seed in the file.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.chain.seed = seed;
        self.prediction.seed = seed;
        self.simulation.seed = seed;
        self.compare.base_seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[chain]\nn_iters = 10\n").unwrap_err().to_string();
        assert!(err.contains("n_iters"), "{err}");
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            r#"
[model]
kind = "sgp"
degree_low = 2

[priors]
beta_var = 100.0
sigma2 = { shape = 3.0, scale = 2.0 }

[chain]
n_iter = 200
n_burn = 50
nugget_high = { mode = "random" }
fix_rho = 1.0

[prediction]
mean_treatment = "plugin"
execution = "sequential"
"#,
        )
        .unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Sgp);
        assert_eq!(cfg.model.degree_low, 2);
        assert_eq!(cfg.priors.sigma2.shape, 3.0);
        assert_eq!(cfg.chain.nugget_high, NuggetMode::Random);
        assert_eq!(cfg.chain.fix_rho, Some(1.0));
        assert_eq!(cfg.prediction.mean_treatment, MeanTreatment::PlugIn);
        assert_eq!(cfg.prediction.execution, Execution::Sequential);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml("[chain]\nn_iter = 10\nn_burn = 10\n"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml("[prediction]\ninterval_level = 1.5\n").is_err());
    }
}
