//! TOML configuration for the command-line front end. The schema is strict:
//! unknown keys are rejected so typos fail loudly before any compute.

use serde::Deserialize;
use thiserror::Error;

use crate::elcore::{Mode, PelConfig};
use crate::models::{EstimatingModel, ModelKind};
use crate::penalty::{PenaltyFamily, PenaltySpec, MCP_DEFAULT_SHAPE, SCAD_DEFAULT_SHAPE};
use crate::simlab::{Design, DgpSpec, ExperimentSpec, Method};
use crate::tuning::{default_tau_grid, Criterion, TuningGrid};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config value for `{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySection {
    pub family: PenaltyFamily,
    #[serde(default)]
    pub tau: f64,
    pub shape: Option<f64>,
}

impl PenaltySection {
    pub fn to_spec(&self, field: &str) -> Result<PenaltySpec<f64>, ConfigError> {
        let shape = self.shape.unwrap_or(match self.family {
            PenaltyFamily::L1 => 1.0,
            PenaltyFamily::Scad => SCAD_DEFAULT_SHAPE,
            PenaltyFamily::Mcp => MCP_DEFAULT_SHAPE,
        });
        PenaltySpec::new(self.family, self.tau, shape)
            .map_err(|e| invalid(field, e.to_string()))
    }
}

/// Optional overrides on top of the sample-size defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub epsilon: Option<f64>,
    pub zero_threshold: Option<f64>,
    pub xi: Option<f64>,
    pub max_outer_cycles: Option<usize>,
    pub max_inner_cycles: Option<usize>,
    pub max_halvings: Option<usize>,
    pub inner_tol: Option<f64>,
}

impl SolverSection {
    pub fn to_config(&self, n: usize) -> Result<PelConfig<f64>, ConfigError> {
        let mut cfg = PelConfig::for_sample_size(n);
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.zero_threshold {
            cfg.zero_threshold = v;
        }
        if let Some(v) = self.xi {
            cfg.xi = v;
        }
        if let Some(v) = self.max_outer_cycles {
            cfg.max_outer_cycles = v;
        }
        if let Some(v) = self.max_inner_cycles {
            cfg.max_inner_cycles = v;
        }
        if let Some(v) = self.max_halvings {
            cfg.max_halvings = v;
        }
        if let Some(v) = self.inner_tol {
            cfg.inner_tol = v;
        }
        cfg.validate().map_err(|e| invalid("solver", e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub p: usize,
    #[serde(default = "default_qif_rho")]
    pub qif_rho: f64,
}

fn default_qif_rho() -> f64 {
    0.7
}

impl ModelSection {
    pub fn to_model(&self) -> Result<EstimatingModel<f64>, ConfigError> {
        match self.kind {
            ModelKind::Mean => EstimatingModel::mean(self.p),
            ModelKind::LinearRegression => EstimatingModel::linear_regression(self.p),
            ModelKind::Qif => EstimatingModel::qif(self.p, self.qif_rho),
        }
        .map_err(|e| invalid("model", e.to_string()))
    }
}

fn default_level() -> f64 {
    0.95
}

fn default_true() -> bool {
    true
}

/// Configuration for `pel fit`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub model: ModelSection,
    pub mode: Mode,
    pub penalty1: PenaltySection,
    pub penalty2: PenaltySection,
    #[serde(default)]
    pub solver: SolverSection,
    /// Run the bias-corrected inference step after the fit.
    #[serde(default = "default_true")]
    pub inference: bool,
    #[serde(default = "default_level")]
    pub level: f64,
}

impl FitConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: FitConfig = toml::from_str(text)?;
        if !(cfg.level > 0.0 && cfg.level < 1.0) {
            return Err(invalid("level", format!("must lie in (0, 1), got {}", cfg.level)));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSection {
    pub design: Design,
    pub n: usize,
    pub p: usize,
    /// Defaults to the design's standard sparse truth.
    pub theta0: Option<Vec<f64>>,
    pub cov_param: Option<f64>,
    #[serde(default = "default_qif_rho")]
    pub error_rho: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Explicit parameter-penalty grid; defaults to the rate-based grid.
    pub pi: Option<Vec<f64>>,
    pub nu: Option<Vec<f64>>,
    /// Length of the default grids.
    pub points: Option<usize>,
    pub ebic_gamma: Option<f64>,
}

/// Configuration for `pel experiment`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: DgpSection,
    pub seed: u64,
    pub reps: usize,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub grid: GridSection,
    pub penalty1: PenaltySection,
    pub penalty2: PenaltySection,
    #[serde(default)]
    pub solver: SolverSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_spec(&self, seed_override: Option<u64>) -> Result<ExperimentSpec<f64>, ConfigError> {
        if self.reps == 0 {
            return Err(invalid("reps", "must be >= 1"));
        }
        let seed = seed_override.unwrap_or(self.seed);
        let mut dgp = DgpSpec::standard(self.dgp.design, self.dgp.n, self.dgp.p, seed);
        if let Some(t) = &self.dgp.theta0 {
            dgp.theta0 = t.clone();
        }
        if let Some(c) = self.dgp.cov_param {
            dgp.cov_param = c;
        }
        dgp.error_rho = self.dgp.error_rho;
        dgp.validate().map_err(|e| invalid("dgp", e.to_string()))?;
        let points = self.grid.points.unwrap_or(10);
        if points == 0 {
            return Err(invalid("grid.points", "must be >= 1"));
        }
        let default_grid = || default_tau_grid(self.dgp.n, self.dgp.p, points);
        let mut grid = TuningGrid::new(
            self.grid.pi.clone().unwrap_or_else(default_grid),
            self.grid.nu.clone().unwrap_or_else(default_grid),
            Criterion::Bic,
        );
        if let Some(g) = self.grid.ebic_gamma {
            grid.ebic_gamma = g;
        }
        grid.validate().map_err(|e| invalid("grid", e.to_string()))?;
        let spec = ExperimentSpec {
            dgp,
            methods: self.methods.clone(),
            reps: self.reps,
            grid,
            p1_family: self.penalty1.to_spec("penalty1")?,
            p2_family: self.penalty2.to_spec("penalty2")?,
            cfg: self.solver.to_config(self.dgp.n)?,
            base_seed: seed,
        };
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIT_TOML: &str = r#"
mode = "el"

[model]
kind = "mean"
p = 2

[penalty1]
family = "scad"

[penalty2]
family = "scad"
"#;

    #[test]
    fn fit_config_parses_with_defaults() {
        let cfg = FitConfig::from_toml(FIT_TOML).unwrap();
        assert_eq!(cfg.mode, Mode::El);
        assert_eq!(cfg.model.p, 2);
        assert_eq!(cfg.level, 0.95);
        assert!(cfg.inference);
        let model = cfg.model.to_model().unwrap();
        assert_eq!(model.r, 2);
        let solver = cfg.solver.to_config(50).unwrap();
        assert!((solver.epsilon - 0.02).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{FIT_TOML}\nbogus = 1\n");
        assert!(FitConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn negative_epsilon_names_the_field() {
        let bad = format!("{FIT_TOML}\n[solver]\nepsilon = -0.5\n");
        let cfg = FitConfig::from_toml(&bad).unwrap();
        let err = cfg.solver.to_config(50).unwrap_err();
        assert!(err.to_string().contains("epsilon"), "{err}");
    }

    const EXP_TOML: &str = r#"
seed = 7
reps = 3
methods = ["pel2-bic", "mle-oracle", "lasso"]

[dgp]
design = "mean-cs"
n = 30
p = 6

[grid]
points = 3

[penalty1]
family = "scad"

[penalty2]
family = "scad"
"#;

    #[test]
    fn experiment_config_round_trip() {
        let cfg = ExperimentConfig::from_toml(EXP_TOML).unwrap();
        let spec = cfg.to_spec(None).unwrap();
        assert_eq!(spec.reps, 3);
        assert_eq!(spec.base_seed, 7);
        assert_eq!(spec.dgp.theta0, vec![5.0, 4.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(spec.grid.pi_values.len(), 3);
        assert_eq!(spec.methods.len(), 3);
        let spec = cfg.to_spec(Some(11)).unwrap();
        assert_eq!(spec.base_seed, 11);
    }

    #[test]
    fn zero_reps_rejected() {
        let cfg = ExperimentConfig::from_toml(&EXP_TOML.replace("reps = 3", "reps = 0")).unwrap();
        assert!(cfg.to_spec(None).is_err());
    }
}
