//! TOML experiment configuration.
//!
//! Every section is optional; missing keys take the defaults below and unknown
//! keys are rejected. A minimal file:
//!
//! ```toml
//! seed = 7
//! trials = 10
//!
//! [features]
//! delays = 2
//!
//! [sweep]
//! regularization = "fixed"
//! lambda = [1e-2]
//! n_traj = [10, 100, 1000]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::FitPlane;
use crate::dynamics::{ClassifyParams, GridSpec, PendulumParams, Rk4};
use crate::features::{random_rbf_centers, FeatureSpec, Nonlinearity};
use crate::model::RegularizationPolicy;
use crate::par::Execution;
use crate::seed::{self, stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Library {
    #[default]
    Pendulum,
    Rbf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesConfig {
    pub library: Library,
    pub delays: usize,
    pub skip: usize,
    pub include_bias: bool,
    pub rbf_centers: usize,
    pub rbf_width: f64,
    /// Centers are drawn uniformly from `[-h, h]^2`.
    pub rbf_half_width: f64,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            library: Library::Pendulum,
            delays: 2,
            skip: 1,
            include_bias: true,
            rbf_centers: 1000,
            rbf_width: 0.3,
            rbf_half_width: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training steps per trajectory, excluding warmup.
    pub n_train: usize,
    pub dt: f64,
    pub substeps: u32,
    /// Initial positions are uniform on `[-h, h]^2`, at rest.
    pub ic_half_width: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 3000,
            dt: 0.01,
            substeps: Rk4::default().substeps,
            ic_half_width: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// `lambda` values are used as given.
    #[default]
    Fixed,
    /// `lambda` values are bases, scaled by `n_traj`.
    Scaled,
    /// Exact least squares; the `lambda` axis is ignored.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub regularization: Regularization,
    pub lambda: Vec<f64>,
    pub n_traj: Vec<usize>,
    pub sigma: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            regularization: Regularization::Fixed,
            lambda: (-6..=2).map(|e| 10f64.powi(e)).collect(),
            n_traj: vec![10, 30, 100, 300, 1000],
            sigma: vec![0.0],
        }
    }
}

impl SweepConfig {
    pub fn policy(&self, axis_value: f64) -> RegularizationPolicy {
        match self.regularization {
            Regularization::Fixed => RegularizationPolicy::Fixed { lambda: axis_value },
            Regularization::Scaled => RegularizationPolicy::Scaled {
                lambda_base: axis_value,
            },
            Regularization::None => RegularizationPolicy::None,
        }
    }

    /// Values actually swept on the `lambda` axis.
    pub fn lambda_axis(&self) -> Vec<f64> {
        match self.regularization {
            Regularization::None => vec![0.0],
            _ => self.lambda.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Score predicted basins (the most expensive part of a cell).
    pub basins: bool,
    pub fit_error: bool,
    pub fit_grid: usize,
    pub fit_plane: FitPlane,
    pub fit_component: usize,
    pub transverse: bool,
    /// Time units simulated for the transverse distance.
    pub horizon: f64,
    /// Condition number of the pooled design matrix.
    pub kappa_g: bool,
    /// Time skips compared by the diagnostic suite.
    pub skips: Vec<usize>,
    /// Trajectories used for the per-trajectory condition-number histograms.
    pub histogram_traj: usize,
    pub histogram_bins: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            basins: true,
            fit_error: true,
            fit_grid: 50,
            fit_plane: FitPlane::Position,
            fit_component: 2,
            transverse: true,
            horizon: 100.0,
            kappa_g: true,
            skips: vec![1, 5, 10],
            histogram_traj: 100,
            histogram_bins: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub save_models: bool,
    pub save_basins: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            save_models: false,
            save_basins: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub execution: Execution,
    pub pendulum: PendulumParams,
    pub features: FeaturesConfig,
    pub data: DataConfig,
    pub grid: GridSpec,
    pub classify: ClassifyParams,
    pub sweep: SweepConfig,
    pub diagnostics: DiagnosticsConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            trials: 10,
            execution: Execution::default(),
            pendulum: PendulumParams::default(),
            features: FeaturesConfig::default(),
            data: DataConfig::default(),
            grid: GridSpec::default(),
            classify: ClassifyParams::default(),
            sweep: SweepConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn config_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, key: &str, raw: &str, path: &Path) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(path, format!("malformed override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            config_err(path, format!("override `{key}`: `{part}` is not a table"))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl ExperimentConfig {
    /// Parses `text`; `origin` names the source in error messages.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        Self::from_toml_with_overrides(text, origin, &[])
    }

    /// Parses `text` after applying dotted `key = value` overrides, e.g.
    /// `("sweep.lambda", "[0.01]")`.
    pub fn from_toml_with_overrides(
        text: &str,
        origin: &Path,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let parse_err =
            |e: toml::de::Error| config_err(origin, e.to_string().trim_end().to_string());
        // Parsing the text directly keeps line numbers in errors.
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(parse_err)?;
        if !overrides.is_empty() {
            let mut table: toml::Table = toml::from_str(text).map_err(parse_err)?;
            for (k, v) in overrides {
                apply_override(&mut table, k, v, origin)?;
            }
            cfg = table.try_into().map_err(|e: toml::de::Error| {
                config_err(
                    origin,
                    format!("after overrides: {}", e.to_string().trim_end()),
                )
            })?;
        }
        cfg.validate().map_err(|e| match e {
            Error::InvalidParameter(m) => config_err(origin, m),
            other => other,
        })?;
        Ok(cfg)
    }

    /// Loads `path`, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_with_overrides(&text, p, overrides)
            }
            None => Self::from_toml_with_overrides("", Path::new("<defaults>"), overrides),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::InvalidParameter(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        let s = &self.sweep;
        if s.n_traj.is_empty()
            || s.sigma.is_empty()
            || (s.lambda.is_empty() && s.regularization != Regularization::None)
        {
            return bad("sweep lists must be non-empty".into());
        }
        if s.n_traj.contains(&0) {
            return bad("n_traj entries must be >= 1".into());
        }
        if s.lambda
            .iter()
            .chain(&s.sigma)
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("lambda and sigma entries must be finite and >= 0".into());
        }
        let d = &self.data;
        if !(d.dt > 0.0 && d.dt.is_finite()) || d.n_train == 0 || d.substeps == 0 {
            return bad("data needs dt > 0, n_train >= 1, substeps >= 1".into());
        }
        if !(d.ic_half_width > 0.0) {
            return bad("ic_half_width must be positive".into());
        }
        let g = &self.diagnostics;
        if g.fit_grid < 1 || g.fit_component >= 4 || !(g.horizon > 0.0) || g.histogram_bins == 0 {
            return bad("diagnostics needs fit_grid >= 1, fit_component < 4, horizon > 0, histogram_bins >= 1".into());
        }
        if g.skips.contains(&0) {
            return bad("skips must be >= 1".into());
        }
        if self.features.library == Library::Rbf && !(self.features.rbf_half_width > 0.0) {
            return bad("rbf_half_width must be positive".into());
        }
        self.pendulum.validate()?;
        self.grid.validate()?;
        self.classify.validate()?;
        self.feature_spec().validate()
    }

    pub fn rk(&self) -> Rk4 {
        Rk4::new(self.data.substeps)
    }

    /// The feature spec for this experiment; RBF centers are drawn from the
    /// base seed.
    pub fn feature_spec(&self) -> FeatureSpec {
        let f = &self.features;
        let nonlinearity = match f.library {
            Library::Pendulum => Nonlinearity::PendulumForces {
                params: self.pendulum.clone(),
            },
            Library::Rbf => Nonlinearity::RadialBasis {
                centers: random_rbf_centers(
                    f.rbf_centers,
                    f.rbf_half_width,
                    seed::derive(self.seed, &[stream::RBF_CENTERS]),
                ),
                width: f.rbf_width,
            },
        };
        FeatureSpec {
            delays: f.delays,
            skip: f.skip,
            include_bias: f.include_bias,
            nonlinearity,
        }
    }

    /// Sample interval of ground-truth trajectories per training step.
    pub fn steps_per_trajectory(&self) -> usize {
        self.data.n_train + (self.features.delays.max(1) - 1) * self.features.skip
    }
}
