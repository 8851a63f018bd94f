//! TOML configuration: shared simulation parameters and matrix files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{
    Controller, ServiceDistributions, SimConfig, DEFAULT_INSPECTION_FAIL_RATE, DEFAULT_MAX_SIM_TIME_S,
    DEFAULT_SPEED_KMH, DEFAULT_WINDOW_S,
};
use crate::experiment::{MatrixCell, ScenarioMatrix};
use crate::scoring::ScoreWeights;
use crate::yard::{builtin_layout, parse_layout, LayoutError, YardLayout, YardSize};

/// Everything in a [`SimConfig`] except layout, controller, demand and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Arrival window, seconds.
    pub window: f64,
    /// Simulated-time cap, seconds.
    pub max_sim_time: f64,
    pub service: ServiceDistributions,
    pub inspection_fail_rate: f64,
    pub speed_kmh: f64,
    pub weights: ScoreWeights,
    pub dwell_margin: u32,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            window: DEFAULT_WINDOW_S,
            max_sim_time: DEFAULT_MAX_SIM_TIME_S,
            service: ServiceDistributions::default(),
            inspection_fail_rate: DEFAULT_INSPECTION_FAIL_RATE,
            speed_kmh: DEFAULT_SPEED_KMH,
            weights: ScoreWeights::default(),
            dwell_margin: 1,
        }
    }
}

impl SimParams {
    pub fn config(&self, layout: Arc<YardLayout>, controller: Controller, demand: f64, seed: u64) -> SimConfig {
        let mut c = SimConfig::new(layout, controller, demand, seed);
        c.window = self.window;
        c.max_sim_time = self.max_sim_time;
        c.service = self.service;
        c.inspection_fail_rate = self.inspection_fail_rate;
        c.speed_kmh = self.speed_kmh;
        c.weights = self.weights;
        c.dwell_margin = self.dwell_margin;
        c
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigFileError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("layout {name}: {source}")]
    Layout { name: String, source: LayoutError },
    #[error("{0}")]
    Invalid(String),
}

/// Matrix file. Every key is optional; missing ones take the defaults of
/// [`ScenarioMatrix::default`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixFile {
    pub replications: Option<u32>,
    pub base_seed: Option<u64>,
    pub workers: Option<usize>,
    pub controllers: Option<Vec<Controller>>,
    #[serde(default)]
    pub sim: SimParams,
    pub cells: Option<Vec<CellSpec>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    /// `small`, `medium`, `large` or a path to a layout file.
    pub layout: String,
    /// Label used in the output tables; defaults to `layout`.
    pub name: Option<String>,
    /// Required for layout files; built-in sizes default to their levels.
    pub demands: Option<Vec<u32>>,
}

impl MatrixFile {
    pub fn parse(text: &str) -> Result<Self, ConfigFileError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    /// Resolve into a matrix. Relative layout paths are taken from `base_dir`.
    pub fn into_matrix(self, base_dir: &Path) -> Result<ScenarioMatrix, ConfigFileError> {
        let mut m = ScenarioMatrix::default();
        if let Some(r) = self.replications {
            m.replications = r;
        }
        if let Some(s) = self.base_seed {
            m.base_seed = s;
        }
        if let Some(c) = self.controllers {
            if c.is_empty() {
                return Err(ConfigFileError::Invalid("controllers must not be empty".into()));
            }
            m.controllers = c;
        }
        m.params = self.sim;
        if let Some(cells) = self.cells {
            m.cells = cells
                .into_iter()
                .map(|spec| {
                    let (layout, size) = load_layout(&spec.layout, base_dir)?;
                    let demands = match (spec.demands, size) {
                        (Some(d), _) => d,
                        (None, Some(size)) => size.demand_levels().to_vec(),
                        (None, None) => {
                            return Err(ConfigFileError::Invalid(format!("cell {}: demands are required", spec.layout)))
                        }
                    };
                    Ok(MatrixCell { name: spec.name.unwrap_or(spec.layout), layout: Arc::new(layout), demands })
                })
                .collect::<Result<_, _>>()?;
        }
        Ok(m)
    }
}

/// A built-in size by name, or a layout file.
pub fn load_layout(spec: &str, base_dir: &Path) -> Result<(YardLayout, Option<YardSize>), ConfigFileError> {
    if let Ok(size) = spec.parse::<YardSize>() {
        return Ok((builtin_layout(size), Some(size)));
    }
    let path = base_dir.join(spec);
    let text = std::fs::read_to_string(&path).map_err(|source| ConfigFileError::Io { path: path.clone(), source })?;
    let layout = parse_layout(&text).map_err(|source| ConfigFileError::Layout { name: spec.into(), source })?;
    Ok((layout, None))
}
