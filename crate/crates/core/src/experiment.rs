//! Turns a config into a workload and cluster, runs it, and writes reports.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, UserAssignment};
use crate::engine::SimError;
use crate::metrics::{records_to_csv, AllocationSummary, Counters, SchedulerKind};
use crate::model::{GmId, ResourceVector, TaskRequest, UserId};
use crate::sim::{run_federated, ClusterSpec, FederatedSetup, SimReport, UserSpec};
use crate::sparrow::{run_sparrow, SparrowSetup};
use crate::workload::{self, WorkloadError};

// Independent RNG streams derived from the experiment seed.
const WORKLOAD_STREAM: u64 = 0x5157_0001;
const TASK_CONSTRAINT_STREAM: u64 = 0x5157_0002;
const MACHINE_PROFILE_STREAM: u64 = 0x5157_0003;
const USER_STREAM: u64 = 0x5157_0004;
const PROBE_STREAM: u64 = 0x5157_0005;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("workload: {0}")]
    Workload(#[from] WorkloadError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 for a livelock.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Workload(_) => 2,
            ExperimentError::Sim(SimError::Livelock { .. }) => 3,
            _ => 1,
        }
    }
}

/// Inputs to a simulation, derived from a config.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub tasks: Vec<TaskRequest>,
    pub cluster: ClusterSpec,
    pub users: Vec<UserSpec>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let w = &cfg.workload;
    let mut tasks = match (&w.trace, &w.synthetic) {
        (Some(path), _) => workload::load_trace(path, w.scaling, cfg.constraint_count)?,
        (None, Some(params)) => workload::generate_synthetic(params, cfg.seed ^ WORKLOAD_STREAM)?,
        (None, None) => return Err(ConfigError::Invalid("no workload".into()).into()),
    };
    if w.load_factor != 1.0 {
        for t in &mut tasks {
            t.arrival_time /= w.load_factor;
        }
    }
    if let Some(path) = &w.task_constraints {
        let dist = workload::load_constraint_distribution(path)?;
        if dist.probabilities.len() > cfg.constraint_count {
            return Err(ConfigError::Invalid(format!(
                "task constraint distribution covers {} constraints but constraint_count is {}",
                dist.probabilities.len(),
                cfg.constraint_count
            ))
            .into());
        }
        workload::augment_constraints(&mut tasks, &dist, cfg.seed ^ TASK_CONSTRAINT_STREAM)?;
    }

    let mut cluster = ClusterSpec::uniform(cfg.lm_count, cfg.workers_per_lm, cfg.worker_capacity());
    if let Some(path) = &w.machine_profiles {
        let profiles = workload::load_profiles(path)?;
        if profiles.iter().any(|p| p.probabilities.len() > cfg.constraint_count) {
            return Err(ConfigError::Invalid("a machine profile covers more constraints than constraint_count".into()).into());
        }
        workload::assign_machine_constraints(&mut cluster, &profiles, cfg.seed ^ MACHINE_PROFILE_STREAM)?;
    }

    let users: Vec<UserSpec> = if cfg.users.is_empty() {
        let n = cfg.gm_count;
        (0..n).map(|g| UserSpec { user: UserId(g as u32), share: 1.0 / n as f64, gm: GmId(g as u32) }).collect()
    } else {
        cfg.users
            .iter()
            .enumerate()
            .map(|(i, u)| UserSpec { user: UserId(i as u32), share: u.share, gm: GmId(u.gm) })
            .collect()
    };
    let weighted = !cfg.users.is_empty() && cfg.fairness.assignment == UserAssignment::Weighted;
    if weighted {
        let weights: Vec<(UserId, f64)> = users.iter().map(|u| (u.user, u.share)).collect();
        workload::assign_users_weighted(&mut tasks, &weights, cfg.seed ^ USER_STREAM)?;
    } else {
        let ids: Vec<UserId> = users.iter().map(|u| u.user).collect();
        workload::assign_users_round_robin(&mut tasks, &ids);
    }
    Ok(Prepared { tasks, cluster, users })
}

/// Simulates prepared inputs under the configured scheduler.
pub fn simulate(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<SimReport, ExperimentError> {
    let report = match cfg.scheduler {
        SchedulerKind::Federated | SchedulerKind::Centralized => {
            let mut setup = FederatedSetup::new(cfg.gm_count, prepared.cluster.clone(), cfg.constraint_count);
            setup.kind = cfg.scheduler;
            setup.delays = cfg.delays;
            setup.costs = cfg.costs;
            setup.heartbeat_period = cfg.heartbeat_period_s;
            setup.users = prepared.users.clone();
            setup.fairness = cfg.fairness_active();
            setup.metric = cfg.fairness.metric;
            setup.event_cap = cfg.event_cap;
            run_federated(&setup, &prepared.tasks)?
        }
        SchedulerKind::Sparrow => {
            let sp = cfg.sparrow.as_ref().ok_or_else(|| ConfigError::Invalid("missing [sparrow] table".into()))?;
            let slot = ResourceVector::new(&sp.slot_demand).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let mut setup = SparrowSetup::new(sp.schedulers, prepared.cluster.clone(), slot, cfg.seed ^ PROBE_STREAM);
            setup.probes = sp.probes;
            setup.delays = cfg.delays;
            setup.costs = cfg.costs;
            setup.event_cap = cfg.event_cap;
            run_sparrow(&setup, &prepared.tasks)?
        }
    };
    Ok(report)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SimReport, ExperimentError> {
    simulate(cfg, &prepare(cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSummary {
    pub launches_checked: u64,
    pub node_checks: u64,
    pub violations: usize,
}

/// Machine-readable run summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scheduler: SchedulerKind,
    pub seed: u64,
    pub tasks: usize,
    pub unschedulable: usize,
    pub allocation: Option<AllocationSummary>,
    pub counters: Counters,
    pub audit: AuditSummary,
    pub makespan_s: f64,
    pub events: u64,
}

impl Summary {
    pub fn new(report: &SimReport, seed: u64) -> Self {
        let a = &report.audit;
        Self {
            scheduler: report.kind,
            seed,
            tasks: report.records.len(),
            unschedulable: report.unschedulable.len(),
            allocation: AllocationSummary::from_records(&report.records),
            counters: report.counters.clone(),
            audit: AuditSummary {
                launches_checked: a.launches_checked,
                node_checks: a.node_checks,
                violations: a.conservation.len() + a.launches.len() + a.structure.len(),
            },
            makespan_s: report.makespan,
            events: report.events,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for RecordFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(RecordFormat::Csv),
            "json" => Ok(RecordFormat::Json),
            other => Err(format!("unknown format {other:?} (expected csv or json)")),
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(|source| ExperimentError::Io { path: path.display().to_string(), source })
}

/// Writes `records.csv` (or `records.json`) and `summary.json` into `dir`.
pub fn write_report(report: &SimReport, seed: u64, dir: &Path, format: RecordFormat) -> Result<Summary, ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.display().to_string(), source })?;
    match format {
        RecordFormat::Csv => write(&dir.join("records.csv"), &records_to_csv(&report.records))?,
        RecordFormat::Json => {
            let json = serde_json::to_string_pretty(&report.records).expect("records serialize");
            write(&dir.join("records.json"), &json)?
        }
    }
    let summary = Summary::new(report, seed);
    write(&dir.join("summary.json"), &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Total worker count; spread evenly over the LMs.
    Workers,
    GmCount,
    LmCount,
    /// Arrival-rate multiplier.
    Load,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Workers => "workers",
            SweepAxis::GmCount => "gm_count",
            SweepAxis::LmCount => "lm_count",
            SweepAxis::Load => "load",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "workers" => Ok(SweepAxis::Workers),
            "gm_count" | "gms" => Ok(SweepAxis::GmCount),
            "lm_count" | "lms" => Ok(SweepAxis::LmCount),
            "load" => Ok(SweepAxis::Load),
            other => Err(format!("unknown sweep axis {other:?} (workers, gm_count, lm_count, load)")),
        }
    }
}

/// Copy of `base` with one axis set to `value`. Sweeping GM or LM counts
/// through one-by-one switches between federated and centralized.
pub fn sweep_point(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = base.clone();
    let count = |v: f64| -> Result<usize, ConfigError> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(ConfigError::Invalid(format!("{} needs positive whole numbers, got {v}", axis.name())))
        }
    };
    match axis {
        SweepAxis::Workers => {
            let total = count(value)?;
            if total % cfg.lm_count != 0 {
                return Err(ConfigError::Invalid(format!("{total} workers do not divide over {} LMs", cfg.lm_count)));
            }
            cfg.workers_per_lm = total / cfg.lm_count;
        }
        SweepAxis::GmCount => cfg.gm_count = count(value)?,
        SweepAxis::LmCount => cfg.lm_count = count(value)?,
        SweepAxis::Load => cfg.workload.load_factor = base.workload.load_factor * value,
    }
    if cfg.scheduler != SchedulerKind::Sparrow {
        cfg.scheduler = if (cfg.gm_count, cfg.lm_count) == (1, 1) {
            SchedulerKind::Centralized
        } else {
            SchedulerKind::Federated
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: f64,
    pub summary: Summary,
}

/// Runs every point, writing each into `dir/<axis>-<value>/` plus a
/// combined `sweep.csv`.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    dir: &Path,
    format: RecordFormat,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = sweep_point(base, axis, value)?;
        let report = run_experiment(&cfg)?;
        let summary = write_report(&report, cfg.seed, &dir.join(format!("{}-{value}", axis.name())), format)?;
        rows.push(SweepRow { axis: axis.name(), value, summary });
    }
    let mut csv = String::from("axis,value,scheduler,tasks,median,mean,p90,p99,p99_9,p99_99,max,repartitions,preemption_attempts,preemptions,inconsistency_failures\n");
    for r in &rows {
        let s = &r.summary;
        let a = s.allocation.clone();
        let f = |g: fn(&AllocationSummary) -> f64| a.as_ref().map_or(String::new(), |a| format!("{:.9}", g(a)));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.value,
            s.scheduler.as_str(),
            s.tasks,
            f(|a| a.median),
            f(|a| a.mean),
            f(|a| a.p90),
            f(|a| a.p99),
            f(|a| a.p99_9),
            f(|a| a.p99_99),
            f(|a| a.max),
            s.counters.repartitions,
            s.counters.preemption_attempts,
            s.counters.preemptions,
            s.counters.inconsistency_failures,
        ));
    }
    write(&dir.join("sweep.csv"), &csv)?;
    Ok(rows)
}
