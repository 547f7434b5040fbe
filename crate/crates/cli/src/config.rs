//! Run configuration: a TOML file of flat `key = value` pairs grouped in
//! sections, plus command-line overrides of the form `section.key=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use susmap_core::evaluate::BenchmarkConfig;
use susmap_core::mcmc::{McmcConfig, ModelKind};
use susmap_core::modelchoice::{CorrelogramConfig, DecisionRule};
use susmap_core::picar::DEFAULT_RANK;
use susmap_core::spatial::DEFAULT_B0;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stochastic subcommand requires one.
    pub seed: Option<u64>,
    pub simulate: SimulateSection,
    pub step1: Step1Section,
    pub mcmc: McmcConfig,
    pub fit: FitSection,
    pub picar: PicarSection,
    pub heuristic: HeuristicSection,
    pub evaluate: EvaluateSection,
    pub pipeline: PipelineSection,
    pub bench: BenchmarkConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Uniform,
    Grid,
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Independent,
    Gp,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub layout: Layout,
    pub n_units: usize,
    pub width_km: f64,
    pub height_km: f64,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub grid_spacing_km: f64,
    pub n_clusters: usize,
    pub cluster_spread_km: f64,
    pub n_times: usize,
    pub phi: f64,
    pub b0: f64,
    pub gamma: f64,
    pub field: FieldKind,
    pub alpha: f64,
    pub omega: f64,
    pub sigma2: f64,
    pub rho: f64,
    pub beta: f64,
    pub p0: f64,
    /// `[start, end)` columns without transmission.
    pub transmission_off: Option<[usize; 2]>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            layout: Layout::Uniform,
            n_units: 250,
            width_km: 1500.0,
            height_km: 700.0,
            grid_nx: 25,
            grid_ny: 10,
            grid_spacing_km: 60.0,
            n_clusters: 8,
            cluster_spread_km: 30.0,
            n_times: 100,
            phi: 40.0,
            b0: DEFAULT_B0,
            gamma: 0.03,
            field: FieldKind::Gp,
            alpha: 0.2,
            omega: -2.1,
            sigma2: 1.0,
            rho: 600.0,
            beta: 0.4,
            p0: 0.05,
            transmission_off: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Step1Section {
    /// Fixed quiet window; both ends or neither.
    pub window_start: Option<usize>,
    pub window_end: Option<usize>,
    /// Width of the automatically located window.
    pub window_width: Option<usize>,
    pub grid_min: Option<f64>,
    pub grid_max: Option<f64>,
    pub grid_size: usize,
    pub b0: f64,
}

impl Default for Step1Section {
    fn default() -> Self {
        Self {
            window_start: None,
            window_end: None,
            window_width: None,
            grid_min: None,
            grid_max: None,
            grid_size: 20,
            b0: DEFAULT_B0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub model: Option<ModelKind>,
    /// Kernel range and background rate used instead of a step-1 report.
    pub phi: Option<f64>,
    pub gamma: Option<f64>,
    pub write_chain: bool,
    pub gzip_chain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicarSection {
    pub rank: usize,
    pub buffer_km: Option<f64>,
}

impl Default for PicarSection {
    fn default() -> Self {
        Self { rank: DEFAULT_RANK, buffer_km: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicSection {
    pub n_bins: usize,
    pub n_perms: usize,
    pub min_pairs: usize,
    pub first_bins: usize,
    pub min_exceed: usize,
}

impl Default for HeuristicSection {
    fn default() -> Self {
        let c = CorrelogramConfig::default();
        let r = DecisionRule::default();
        Self {
            n_bins: c.n_bins,
            n_perms: c.n_perms,
            min_pairs: c.min_pairs,
            first_bins: r.first_bins,
            min_exceed: r.min_exceed,
        }
    }
}

impl HeuristicSection {
    pub fn correlogram(&self, seed: u64) -> CorrelogramConfig {
        CorrelogramConfig {
            n_bins: self.n_bins,
            n_perms: self.n_perms,
            min_pairs: self.min_pairs,
            seed,
        }
    }

    pub fn rule(&self) -> DecisionRule {
        DecisionRule { first_bins: self.first_bins, min_exceed: self.min_exceed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub train_fraction: f64,
    pub models: Vec<ModelKind>,
    /// Value of the `scenario` column in the report.
    pub label: String,
    pub timing: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            models: vec![ModelKind::Ism, ModelKind::Sdsm, ModelKind::SdsmPicar],
            label: "data".into(),
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// A dependent verdict fits the full SDSM up to this many units and
    /// SDSM-PICAR above it.
    pub dense_limit: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self { dense_limit: 500 }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies `key=value` or `section.key=value` to a config table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key '{key}'")));
    }
    let mut t = table;
    for section in &path[..path.len() - 1] {
        let entry = t
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{section}' is not a section")))?;
    }
    t.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> CliResult<Self> {
        table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
    }

    /// Reads `path` (if any) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::format(p, e.message().to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = Self::from_table(table).map_err(|e| match (path, e) {
            (Some(p), CliError::Config(m)) => CliError::format(p, m),
            (_, e) => e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.mcmc.validate()?;
        self.bench.mcmc.validate()?;
        if self.step1.window_start.is_some() != self.step1.window_end.is_some() {
            return Err(CliError::Config("step1.window_start and step1.window_end go together".into()));
        }
        if self.step1.grid_size == 0 {
            return Err(CliError::Config("step1.grid_size must be positive".into()));
        }
        if self.picar.rank == 0 {
            return Err(CliError::Config("picar.rank must be positive".into()));
        }
        if self.fit.phi.is_some() != self.fit.gamma.is_some() {
            return Err(CliError::Config("fit.phi and fit.gamma go together".into()));
        }
        if !(self.evaluate.train_fraction > 0.0 && self.evaluate.train_fraction < 1.0) {
            return Err(CliError::Config("evaluate.train_fraction must lie in (0, 1)".into()));
        }
        if self.evaluate.models.is_empty() {
            return Err(CliError::Config("evaluate.models is empty".into()));
        }
        Ok(())
    }

    pub fn require_seed(&self) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Config("a seed is required: pass --seed or set `seed` in the config".into()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}
