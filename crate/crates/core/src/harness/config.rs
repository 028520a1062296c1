//! Experiment configuration: per-experiment defaults, JSON files and
//! `key=value` overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::trainer::{IndirectMode, Method, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    MseVsK,
    MseVsLambda,
    Optim,
    Ablation,
    TheoryCheck,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::MseVsK,
        ExperimentId::MseVsLambda,
        ExperimentId::Optim,
        ExperimentId::Ablation,
        ExperimentId::TheoryCheck,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::MseVsK => "mse-vs-k",
            ExperimentId::MseVsLambda => "mse-vs-lambda",
            ExperimentId::Optim => "optim",
            ExperimentId::Ablation => "ablation",
            ExperimentId::TheoryCheck => "theory-check",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

/// Which method's per-iteration cost fixes the shared budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub anchor: Method,
    /// Iterations the anchor method runs; every method gets
    /// `anchor_iterations * cost(anchor)` real reward evaluations.
    pub anchor_iterations: u64,
}

/// Settings of the single-batch advantage MSE experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MseConfig {
    pub n: usize,
    pub ridge_lambda: f64,
    /// `exact` scores CAPO with the marginalized indirect effect.
    pub capo_indirect: IndirectMode,
    /// Fictitious draws when `capo_indirect` is `fictitious`.
    pub l: usize,
    pub m_c3: usize,
    pub is_clip: f64,
}

impl Default for MseConfig {
    fn default() -> Self {
        Self {
            n: 16,
            ridge_lambda: 1e-3,
            capo_indirect: IndirectMode::Exact,
            l: 64,
            m_c3: 2,
            is_clip: 5.0,
        }
    }
}

/// Settings of the theorem-verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    /// Repetitions for the gradient MSE bound.
    pub gradient_reps: usize,
    /// Resampled batches for the direct-effect variance bound.
    pub variance_batches: usize,
    /// Instances (out of `seeds`) that also run the variance bound.
    pub variance_instances: usize,
    pub variance_slack: f64,
    pub cancellation_tol: f64,
    pub tower_tol: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            gradient_reps: 2000,
            variance_batches: 500,
            variance_instances: 10,
            variance_slack: 0.5,
            cancellation_tol: 1e-10,
            tower_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub k_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub rho_grid: Vec<f64>,
    pub seeds: usize,
    pub master_seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub actions: usize,
    pub sigma: f64,
    pub methods: Vec<Method>,
    /// Shared training settings; `method` is ignored.
    pub train: TrainConfig,
    /// Per-method patches applied on top of `train`.
    pub method_overrides: BTreeMap<Method, Map<String, Value>>,
    pub budget: BudgetConfig,
    pub mse: MseConfig,
    pub theory: TheoryConfig,
    /// Write seed-averaged regret trajectories next to the results.
    pub traces: bool,
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentId) -> Self {
        let lambdas = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let base = Self {
            experiment,
            k_grid: vec![4],
            lambda_grid: vec![0.0],
            rho_grid: vec![0.0],
            seeds: 30,
            master_seed: 0,
            workers: 1,
            actions: 4,
            sigma: 0.5,
            methods: vec![Method::Capo, Method::Magrpo, Method::Hagrpo, Method::C3],
            train: TrainConfig::default(),
            method_overrides: BTreeMap::new(),
            budget: BudgetConfig {
                anchor: Method::C3,
                anchor_iterations: 25,
            },
            mse: MseConfig::default(),
            theory: TheoryConfig::default(),
            traces: true,
        };
        match experiment {
            ExperimentId::MseVsK => Self {
                k_grid: vec![2, 4, 8, 16],
                ..base
            },
            ExperimentId::MseVsLambda => Self {
                lambda_grid: lambdas,
                ..base
            },
            ExperimentId::Optim => Self {
                k_grid: vec![2, 4, 6, 8, 10],
                lambda_grid: lambdas,
                rho_grid: vec![0.0, 1.0, 2.0],
                seeds: 50,
                ..base
            },
            ExperimentId::Ablation => Self {
                k_grid: vec![2, 4, 8],
                lambda_grid: lambdas,
                rho_grid: vec![0.0, 5.0, 10.0, 20.0],
                seeds: 50,
                methods: vec![Method::Capo, Method::CapoDirect],
                budget: BudgetConfig {
                    anchor: Method::CapoDirect,
                    anchor_iterations: 25,
                },
                ..base
            },
            ExperimentId::TheoryCheck => Self {
                seeds: 100,
                ..base
            },
        }
    }

    /// Defaults for `experiment`, patched by an optional JSON file and then
    /// by `key=value` overrides (dotted keys reach nested fields).
    pub fn load(experiment: ExperimentId, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::defaults(experiment))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let patch: Value = serde_json::from_str(&text)?;
            let Value::Object(patch) = patch else {
                return Err(Error::Config("config file must hold a JSON object".into()));
            };
            if let Some(id) = patch.get("experiment").and_then(Value::as_str) {
                if id != experiment.as_str() {
                    return Err(Error::Config(format!(
                        "config is for '{id}' but the subcommand is '{experiment}'"
                    )));
                }
            }
            merge(&mut value, Value::Object(patch));
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let grid_needed = !matches!(self.experiment, ExperimentId::TheoryCheck);
        if grid_needed && (self.k_grid.is_empty() || self.lambda_grid.is_empty() || self.rho_grid.is_empty()) {
            return Err(Error::Config("grids must be nonempty".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seed count must be at least 1".into()));
        }
        if self.actions < 2 || self.k_grid.contains(&0) {
            return Err(Error::Config("need A >= 2 and K >= 1".into()));
        }
        if !(self.sigma >= 0.0) || self.lambda_grid.iter().chain(&self.rho_grid).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("sigma, lambda_int and rho must be finite and nonnegative".into()));
        }
        if matches!(self.experiment, ExperimentId::Optim | ExperimentId::Ablation) {
            if self.methods.is_empty() || self.budget.anchor_iterations == 0 {
                return Err(Error::Config("need at least one method and a positive anchor".into()));
            }
            for m in &self.methods {
                self.train_config(*m)?;
            }
        }
        let mse = &self.mse;
        if mse.n < 2 || !(mse.ridge_lambda > 0.0) || mse.l == 0 || mse.m_c3 == 0 || !(mse.is_clip > 0.0) {
            return Err(Error::Config("invalid MSE settings".into()));
        }
        let t = &self.theory;
        let tols = [t.cancellation_tol, t.tower_tol, t.variance_slack];
        if t.gradient_reps < 2 || t.variance_batches < 2 || tols.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("invalid theory-check settings".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The shared training settings patched for `method`.
    pub fn train_config(&self, method: Method) -> Result<TrainConfig> {
        let mut value = serde_json::to_value(TrainConfig { method, ..self.train })?;
        if let Some(patch) = self.method_overrides.get(&method) {
            merge(&mut value, Value::Object(patch.clone()));
        }
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.method != method {
            return Err(Error::Config("method overrides cannot change the method".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Human-readable notes about settings that deviate from the
    /// experiment's reference protocol or are ignored.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = Self::defaults(self.experiment);
        match self.experiment {
            ExperimentId::MseVsK | ExperimentId::MseVsLambda => {
                if self.experiment == ExperimentId::MseVsK && self.lambda_grid.iter().any(|&l| l != 0.0) {
                    out.push("mse-vs-k is specified with lambda_int = 0; running the override".into());
                }
                if self.experiment == ExperimentId::MseVsLambda && self.k_grid != [4] {
                    out.push("mse-vs-lambda is specified at K = 4; running the override".into());
                }
                if self.rho_grid.iter().any(|&r| r != 0.0) {
                    out.push("rho is not used by the MSE experiments (untilted initial policies)".into());
                }
                if self.mse != d.mse {
                    out.push("MSE settings differ from the reference protocol".into());
                }
            }
            ExperimentId::Optim | ExperimentId::Ablation => {
                for m in &self.methods {
                    if let Ok(cfg) = self.train_config(*m) {
                        for field in cfg.ignored_fields() {
                            out.push(format!("{}: field '{field}' is ignored by this method", m.label()));
                        }
                    }
                }
                if self.train != d.train || !self.method_overrides.is_empty() {
                    out.push("training settings differ from the reference protocol".into());
                }
            }
            ExperimentId::TheoryCheck => {}
        }
        out
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON and falls back to a
/// plain string.
pub fn apply_override(value: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let mut slot = value;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = slot else {
            return Err(Error::Config(format!("override key '{key}' does not name a field")));
        };
        // unknown leaf keys survive here and are rejected by deserialization
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        slot = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}
