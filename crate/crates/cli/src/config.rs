use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparsegam::block_cd::FitOptions;
use sparsegam::hierarchy::HierarchyOptions;
use sparsegam::path::{Criterion, GridSpec};
use sparsegam::splines::SplineConfig;

use crate::error::{CliError, CliResult};

pub const OUT_ENV: &str = "SPARSEGAM_OUT";
pub const DEFAULT_OUT: &str = "sparsegam_out";

/// Everything `fit` needs; written to the output directory as
/// `run_config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub response: Option<String>,
    pub exclude: Vec<String>,
    pub id_column: Option<String>,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    pub criterion: Criterion,
    /// Largest support the selection may pick.
    pub max_support: Option<usize>,
    pub threads: Option<usize>,
    pub cache_budget_mb: usize,
    /// Not persisted, so runs into different directories write identical
    /// configs.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub spline: SplineConfig,
    pub grid: GridSpec,
    pub fit: FitOptions,
    pub hierarchy: HierarchySettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchySettings {
    pub enabled: bool,
    pub tau_grid: Vec<f64>,
    pub max_lambda2_values: usize,
}

impl Default for HierarchySettings {
    fn default() -> Self {
        let d = HierarchyOptions::default();
        Self {
            enabled: false,
            tau_grid: d.tau_values,
            max_lambda2_values: d.max_lambda2_values,
        }
    }
}

impl HierarchySettings {
    pub fn options(&self) -> HierarchyOptions {
        HierarchyOptions {
            tau_values: self.tau_grid.clone(),
            max_lambda2_values: self.max_lambda2_values,
            ..HierarchyOptions::default()
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            response: None,
            exclude: Vec::new(),
            id_column: None,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            criterion: Criterion::Rmse,
            max_support: None,
            threads: None,
            cache_budget_mb: 1024,
            out: None,
            spline: SplineConfig::default(),
            grid: GridSpec::default(),
            fit: FitOptions::default(),
            hierarchy: HierarchySettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    /// Flag, then config file, then the environment, then `sparsegam_out`.
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn data_path(&self) -> CliResult<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Usage("no data file given (use --data or `data` in the config)".into()))
    }

    pub fn response_name(&self) -> CliResult<&str> {
        self.response
            .as_deref()
            .ok_or_else(|| CliError::Usage("no response column given (use --response or `response` in the config)".into()))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data_path()?;
        self.response_name()?;
        let [a, b, c] = self.split;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(CliError::Usage(format!(
                "split fractions must be positive and sum to 1, got {a},{b},{c}"
            )));
        }
        if self.threads == Some(0) {
            return Err(CliError::Usage("threads must be >= 1".into()));
        }
        if self.cache_budget_mb == 0 {
            return Err(CliError::Usage("cache budget must be positive".into()));
        }
        self.spline.validate()?;
        self.grid.validate()?;
        self.fit.validate()?;
        if self.hierarchy.enabled {
            self.hierarchy.options().validate()?;
        }
        Ok(())
    }

    pub fn cache_budget_bytes(&self) -> usize {
        self.cache_budget_mb.saturating_mul(1 << 20)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_without_out() {
        let cfg = RunConfig {
            data: Some("d.csv".into()),
            response: Some("y".into()),
            out: Some("somewhere".into()),
            max_support: Some(5),
            ..RunConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert!(!text.contains("somewhere"));
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig { out: None, ..cfg });
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg: RunConfig = toml::from_str("response = \"y\"\n[spline]\ndegree = 2\n[grid]\nn_lambda1 = 4\n").unwrap();
        assert_eq!(cfg.spline.degree, 2);
        assert_eq!(cfg.spline.n_knots_main, SplineConfig::default().n_knots_main);
        assert_eq!(cfg.grid.n_lambda1, 4);
        assert_eq!(cfg.grid.budget, 1000);
        assert_eq!(cfg.split, [0.8, 0.1, 0.1]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("responce = \"y\"").is_err());
    }

    #[test]
    fn validation_catches_missing_fields() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.validate(), Err(CliError::Usage(_))));
        cfg.data = Some("d.csv".into());
        cfg.response = Some("y".into());
        assert!(cfg.validate().is_ok());
        cfg.split = [0.5, 0.5, 0.1];
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
    }
}
