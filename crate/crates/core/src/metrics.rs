//! Allocation-time decomposition and summary statistics.
//!
//! Every task carries a [`TaskLedger`] whose `mark` is the instant up to which
//! its life has been attributed to one of the delay components. Each
//! attribution advances the mark, so the components telescope to
//! `task_start - arrival` by construction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TaskId, UserId};

/// Closure tolerance for the allocation-time decomposition, in seconds.
pub const CLOSURE_TOLERANCE_S: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Federated,
    Sparrow,
    Centralized,
}

impl SchedulerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Federated => "federated",
            SchedulerKind::Sparrow => "sparrow",
            SchedulerKind::Centralized => "centralized",
        }
    }
}

/// Running attribution for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLedger {
    pub arrival: f64,
    mark: f64,
    pub gm_queuing: f64,
    pub lm_queuing: f64,
    pub processing: f64,
    pub worker_queuing: f64,
    pub communication: f64,
    pub attempts: u32,
    pub repartitioned: bool,
    pub preemptions_caused: u32,
    pub times_preempted: u32,
    start: Option<f64>,
}

impl TaskLedger {
    pub fn new(arrival: f64) -> Self {
        Self {
            arrival,
            mark: arrival,
            gm_queuing: 0.0,
            lm_queuing: 0.0,
            processing: 0.0,
            worker_queuing: 0.0,
            communication: 0.0,
            attempts: 0,
            repartitioned: false,
            preemptions_caused: 0,
            times_preempted: 0,
            start: None,
        }
    }

    pub fn mark(&self) -> f64 {
        self.mark
    }

    pub fn started(&self) -> Option<f64> {
        self.start
    }

    fn open(&self) -> bool {
        self.start.is_none()
    }

    /// Waiting in a GM (or probe scheduler) queue until `t`.
    pub fn queue_at_scheduler_until(&mut self, t: f64) {
        if self.open() {
            debug_assert!(t >= self.mark - 1e-12, "queue_until {t} < mark {}", self.mark);
            self.gm_queuing += t - self.mark;
            self.mark = t;
        }
    }

    /// Waiting in an LM inbox until `t`.
    pub fn queue_at_lm_until(&mut self, t: f64) {
        if self.open() {
            debug_assert!(t >= self.mark - 1e-12);
            self.lm_queuing += t - self.mark;
            self.mark = t;
        }
    }

    pub fn process(&mut self, cost: f64) {
        if self.open() {
            self.processing += cost;
            self.mark += cost;
        }
    }

    pub fn communicate(&mut self, delay: f64) {
        if self.open() {
            self.communication += delay;
            self.mark += delay;
        }
    }

    pub fn wait_in_worker_until(&mut self, t: f64) {
        if self.open() {
            debug_assert!(t >= self.mark - 1e-12);
            self.worker_queuing += t - self.mark;
            self.mark = t;
        }
    }

    /// A launch message in flight was cancelled at `t` (its victim was
    /// killed before starting). The unelapsed part of the hop is returned.
    pub fn cancel_in_flight(&mut self, t: f64) {
        if self.open() && t < self.mark {
            self.communication -= self.mark - t;
            self.mark = t;
        }
    }

    /// Records the first start. Later starts (after a preemption) do not
    /// change the record.
    pub fn start(&mut self, t: f64) {
        if self.open() {
            self.start = Some(t);
        }
    }

    pub fn record(&self, task_id: TaskId, user_id: UserId, kind: SchedulerKind) -> Option<AllocationRecord> {
        let task_start = self.start?;
        Some(AllocationRecord {
            task_id,
            user_id,
            arrival: self.arrival,
            task_start,
            allocation_time: task_start - self.arrival,
            framework_queuing_delay: self.gm_queuing + self.lm_queuing,
            gm_queuing_delay: self.gm_queuing,
            lm_queuing_delay: self.lm_queuing,
            processing_delay: self.processing,
            worker_queuing_delay: self.worker_queuing,
            communication_delay: self.communication,
            attempts: self.attempts,
            repartitioned: self.repartitioned,
            preempted_count_caused: self.preemptions_caused,
            times_preempted: self.times_preempted,
            scheduler: kind,
        })
    }
}

/// Per-task allocation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub task_id: TaskId,
    pub user_id: UserId,
    pub arrival: f64,
    pub task_start: f64,
    pub allocation_time: f64,
    pub framework_queuing_delay: f64,
    pub gm_queuing_delay: f64,
    pub lm_queuing_delay: f64,
    pub processing_delay: f64,
    pub worker_queuing_delay: f64,
    pub communication_delay: f64,
    pub attempts: u32,
    pub repartitioned: bool,
    pub preempted_count_caused: u32,
    pub times_preempted: u32,
    pub scheduler: SchedulerKind,
}

impl AllocationRecord {
    pub fn component_sum(&self) -> f64 {
        self.framework_queuing_delay + self.processing_delay + self.worker_queuing_delay + self.communication_delay
    }

    /// |Σ components − allocation_time|.
    pub fn closure_error(&self) -> f64 {
        (self.component_sum() - self.allocation_time).abs()
    }

    pub const CSV_HEADER: &'static str = "task_id,user_id,arrival,task_start,allocation_time,framework_queuing_delay,gm_queuing_delay,lm_queuing_delay,processing_delay,worker_queuing_delay,communication_delay,attempts,repartitioned,preempted_count_caused,times_preempted,scheduler";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.task_id.0,
            self.user_id.0,
            self.arrival,
            self.task_start,
            self.allocation_time,
            self.framework_queuing_delay,
            self.gm_queuing_delay,
            self.lm_queuing_delay,
            self.processing_delay,
            self.worker_queuing_delay,
            self.communication_delay,
            self.attempts,
            self.repartitioned,
            self.preempted_count_caused,
            self.times_preempted,
            self.scheduler.as_str(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("percentile of an empty sample")]
    Empty,
    #[error("percentile rank {0} outside [0, 100]")]
    BadRank(String),
}

/// Nearest-rank percentile: the smallest sample such that at least `q`% of
/// the samples are less than or equal to it.
pub fn percentile(values: &[f64], q: f64) -> Result<f64, StatsError> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

pub fn percentile_sorted(sorted: &[f64], q: f64) -> Result<f64, StatsError> {
    if sorted.is_empty() {
        return Err(StatsError::Empty);
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(StatsError::BadRank(q.to_string()));
    }
    let n = sorted.len();
    // the epsilon absorbs decimal ranks like 99.9 not being exact in binary
    let rank = ((q / 100.0) * n as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

/// Scheduler-wide event counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub launch_requests: u64,
    pub repartition_requests: u64,
    pub repartitions: u64,
    pub inconsistency_failures: u64,
    pub reschedules: u64,
    pub preemption_checks: u64,
    pub preemption_attempts: u64,
    pub preemptions: u64,
    pub stale_victims: u64,
    pub heartbeats: u64,
    pub probes: u64,
}

/// Distribution summary of allocation times, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSummary {
    pub tasks: usize,
    pub median: f64,
    pub mean: f64,
    pub p90: f64,
    pub p99: f64,
    pub p99_9: f64,
    pub p99_99: f64,
    pub max: f64,
    pub median_framework_queuing: f64,
    pub median_processing: f64,
    pub median_worker_queuing: f64,
    pub median_communication: f64,
}

impl AllocationSummary {
    pub fn from_records(records: &[AllocationRecord]) -> Option<Self> {
        if records.is_empty() {
            return None;
        }
        let col = |f: fn(&AllocationRecord) -> f64| {
            let mut v: Vec<f64> = records.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let alloc = col(|r| r.allocation_time);
        let p = |q| percentile_sorted(&alloc, q).expect("non-empty");
        let med = |v: Vec<f64>| percentile_sorted(&v, 50.0).expect("non-empty");
        Some(Self {
            tasks: records.len(),
            median: p(50.0),
            mean: alloc.iter().sum::<f64>() / alloc.len() as f64,
            p90: p(90.0),
            p99: p(99.0),
            p99_9: p(99.9),
            p99_99: p(99.99),
            max: *alloc.last().expect("non-empty"),
            median_framework_queuing: med(col(|r| r.framework_queuing_delay)),
            median_processing: med(col(|r| r.processing_delay)),
            median_worker_queuing: med(col(|r| r.worker_queuing_delay)),
            median_communication: med(col(|r| r.communication_delay)),
        })
    }
}

pub fn records_to_csv(records: &[AllocationRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 160);
    out.push_str(AllocationRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}
