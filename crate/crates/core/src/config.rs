//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{CostModel, DelayModel};
use crate::fairness::ViolationMetric;
use crate::local_master::DEFAULT_HEARTBEAT_PERIOD_S;
use crate::metrics::SchedulerKind;
use crate::model::{check_constraint_count, ResourceVector, DEFAULT_CONSTRAINT_COUNT};
use crate::sim::DEFAULT_EVENT_CAP;
use crate::sparrow::DEFAULT_PROBES;
use crate::workload::{SyntheticParams, TraceScaling};

/// Slack allowed when checking that shares sum to at most one.
const SHARE_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Normalized CSV trace. Relative paths resolve against the config file.
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub scaling: TraceScaling,
    pub synthetic: Option<SyntheticParams>,
    /// Per-constraint task probabilities (TOML with `probabilities`).
    pub task_constraints: Option<PathBuf>,
    /// Machine-constraint profiles (TOML `[[profile]]` tables).
    pub machine_profiles: Option<PathBuf>,
    /// Multiplies the arrival rate: arrival times are divided by it.
    #[serde(default = "unit")]
    pub load_factor: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UserAssignment {
    /// Jobs go to users in turn, in order of first appearance.
    #[default]
    RoundRobin,
    /// Jobs go to users at random, weighted by share.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub share: f64,
    pub gm: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub metric: ViolationMetric,
    #[serde(default)]
    pub assignment: UserAssignment,
}

fn yes() -> bool {
    true
}

impl Default for FairnessConfig {
    fn default() -> Self {
        Self { enabled: true, metric: ViolationMetric::default(), assignment: UserAssignment::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparrowConfig {
    #[serde(default = "one_scheduler")]
    pub schedulers: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
    pub slot_demand: Vec<u64>,
}

fn one_scheduler() -> usize {
    1
}

fn default_probes() -> usize {
    DEFAULT_PROBES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheduler: SchedulerKind,
    #[serde(default)]
    pub seed: u64,
    pub gm_count: usize,
    pub lm_count: usize,
    pub workers_per_lm: usize,
    pub worker_capacity: Vec<u64>,
    #[serde(default = "default_m")]
    pub constraint_count: usize,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_period_s: f64,
    #[serde(default = "default_event_cap")]
    pub event_cap: u64,
    #[serde(default)]
    pub delays: DelayModel,
    #[serde(default)]
    pub costs: CostModel,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub users: Vec<UserConfig>,
    #[serde(default)]
    pub fairness: FairnessConfig,
    pub sparrow: Option<SparrowConfig>,
}

fn default_m() -> usize {
    DEFAULT_CONSTRAINT_COUNT
}

fn default_heartbeat() -> f64 {
    DEFAULT_HEARTBEAT_PERIOD_S
}

fn default_event_cap() -> u64 {
    DEFAULT_EVENT_CAP
}

impl ExperimentConfig {
    /// Reads and validates a config. Relative workload paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_owned(), message },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let w = &mut cfg.workload;
        for p in [&mut w.trace, &mut w.task_constraints, &mut w.machine_profiles].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: PathBuf::from("<config>"), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn worker_capacity(&self) -> ResourceVector {
        ResourceVector::new(&self.worker_capacity).expect("validated")
    }

    pub fn total_workers(&self) -> usize {
        self.lm_count * self.workers_per_lm
    }

    pub fn fairness_active(&self) -> bool {
        !self.users.is_empty() && self.fairness.enabled
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.gm_count == 0 || self.lm_count == 0 || self.workers_per_lm == 0 {
            return bad("gm_count, lm_count and workers_per_lm must be at least 1".into());
        }
        match self.scheduler {
            SchedulerKind::Centralized if (self.gm_count, self.lm_count) != (1, 1) => {
                return bad(format!(
                    "centralized runs use exactly one GM and one LM, got {} and {}",
                    self.gm_count, self.lm_count
                ));
            }
            SchedulerKind::Federated if (self.gm_count, self.lm_count) == (1, 1) => {
                return bad("one GM over one LM is the centralized configuration; set scheduler = \"centralized\"".into());
            }
            _ => {}
        }
        if self.total_workers() > u32::MAX as usize / 2 {
            return bad("too many workers".into());
        }
        let cap = ResourceVector::new(&self.worker_capacity).map_err(|e| ConfigError::Invalid(format!("worker_capacity: {e}")))?;
        if !cap.any_positive() {
            return bad("worker_capacity must be positive in some dimension".into());
        }
        check_constraint_count(self.constraint_count).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.heartbeat_period_s.is_finite() && self.heartbeat_period_s > 0.0) {
            return bad(format!("heartbeat_period_s must be positive, got {}", self.heartbeat_period_s));
        }
        if self.event_cap == 0 {
            return bad("event_cap must be at least 1".into());
        }
        if !self.delays.is_valid() {
            return bad("delays must be finite and non-negative".into());
        }
        if !self.costs.is_valid() {
            return bad("costs must be finite and non-negative".into());
        }
        self.validate_workload()?;
        self.validate_users()?;
        if self.scheduler == SchedulerKind::Sparrow {
            let Some(sp) = &self.sparrow else {
                return bad("scheduler = \"sparrow\" needs a [sparrow] table".into());
            };
            if sp.schedulers == 0 || sp.probes == 0 {
                return bad("sparrow schedulers and probes must be at least 1".into());
            }
            let slot = ResourceVector::new(&sp.slot_demand).map_err(|e| ConfigError::Invalid(format!("slot_demand: {e}")))?;
            if slot.dims() != cap.dims() || !slot.any_positive() {
                return bad("slot_demand must be positive and match worker_capacity's dimensions".into());
            }
            if crate::worker::slot_count(&cap, &slot) == 0 {
                return bad("a worker must offer at least one slot".into());
            }
        }
        Ok(())
    }

    fn validate_workload(&self) -> Result<(), ConfigError> {
        let w = &self.workload;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        match (&w.trace, &w.synthetic) {
            (Some(_), Some(_)) => return bad("workload: give either trace or synthetic, not both".into()),
            (None, None) => return bad("workload: one of trace or synthetic is required".into()),
            (Some(_), None) => {
                w.scaling.validate().map_err(|e| ConfigError::Invalid(format!("workload.scaling: {e}")))?;
                if self.worker_capacity.len() != 2 {
                    return bad("traces carry cpu and memory, so worker_capacity needs two dimensions".into());
                }
            }
            (None, Some(s)) => {
                s.validate().map_err(|e| ConfigError::Invalid(format!("workload.synthetic: {e}")))?;
                if s.demand_min.len() != self.worker_capacity.len() {
                    return bad("synthetic demand dimensions must match worker_capacity".into());
                }
            }
        }
        if !(w.load_factor.is_finite() && w.load_factor > 0.0) {
            return bad(format!("workload.load_factor must be positive, got {}", w.load_factor));
        }
        Ok(())
    }

    fn validate_users(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let mut sum = 0.0;
        for (i, u) in self.users.iter().enumerate() {
            if !(u.share.is_finite() && u.share > 0.0) {
                return bad(format!("user {i}: share must be positive, got {}", u.share));
            }
            if u.gm as usize >= self.gm_count {
                return bad(format!("user {i}: gm {} out of range (gm_count {})", u.gm, self.gm_count));
            }
            sum += u.share;
        }
        if sum > 1.0 + SHARE_SUM_TOLERANCE {
            return bad(format!("user shares sum to {sum}, which exceeds 1"));
        }
        Ok(())
    }
}
