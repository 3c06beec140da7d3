//! Workload ingestion and generation.
//!
//! Trace files are headered CSV:
//! `arrival_s,job_id,task_id,cpu,mem_mb,duration_s,constraints`, where
//! `constraints` is a semicolon-joined list of ids and may be empty.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConstraintSet, JobId, ResourceVector, TaskId, TaskRequest, UserId, MAX_CONSTRAINTS};
use crate::sim::ClusterSpec;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// One row of a normalized trace, before scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_s: f64,
    pub job_id: u64,
    pub task_id: u64,
    pub cpu: f64,
    pub mem_mb: f64,
    pub duration_s: f64,
    pub constraints: Vec<usize>,
}

/// Divisors applied to trace demands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceScaling {
    pub cpu_divisor: f64,
    pub mem_divisor: f64,
}

impl Default for TraceScaling {
    fn default() -> Self {
        Self { cpu_divisor: 1.0, mem_divisor: 1.0 }
    }
}

impl TraceScaling {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.cpu_divisor >= 1.0 && self.mem_divisor >= 1.0) || !self.cpu_divisor.is_finite() || !self.mem_divisor.is_finite() {
            return Err(WorkloadError::Invalid(format!(
                "divisors must be finite and >= 1, got cpu {} mem {}",
                self.cpu_divisor, self.mem_divisor
            )));
        }
        Ok(())
    }

    /// `value / divisor`, rounded to the nearest unit and never below one.
    pub fn scale(value: f64, divisor: f64) -> u64 {
        ((value / divisor).round() as u64).max(1)
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    arrival_s: f64,
    job_id: u64,
    task_id: u64,
    cpu: f64,
    mem_mb: f64,
    duration_s: f64,
    #[serde(default)]
    constraints: String,
}

fn parse_constraints(field: &str) -> Result<Vec<usize>, String> {
    field
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let id: usize = s.parse().map_err(|_| format!("bad constraint id {s:?}"))?;
            if id >= MAX_CONSTRAINTS {
                return Err(format!("constraint id {id} exceeds the supported maximum {}", MAX_CONSTRAINTS - 1));
            }
            Ok(id)
        })
        .collect()
}

/// Parses trace rows. Any malformed row rejects the whole input.
pub fn parse_trace(input: impl Read) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for result in reader.deserialize::<Row>() {
        let row = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            WorkloadError::Parse { line, message: e.to_string() }
        })?;
        let line = out.len() as u64 + 2;
        let bad = |message: String| WorkloadError::Parse { line, message };
        for (name, v) in [("arrival_s", row.arrival_s), ("cpu", row.cpu), ("mem_mb", row.mem_mb), ("duration_s", row.duration_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if row.duration_s <= 0.0 {
            return Err(bad("duration_s must be positive".into()));
        }
        let constraints = parse_constraints(&row.constraints).map_err(bad)?;
        out.push(TraceRecord {
            arrival_s: row.arrival_s,
            job_id: row.job_id,
            task_id: row.task_id,
            cpu: row.cpu,
            mem_mb: row.mem_mb,
            duration_s: row.duration_s,
            constraints,
        });
    }
    Ok(out)
}

/// Scales demands and orders tasks by `(arrival, task_id)`. Every task is
/// given user 0; see [`assign_users_round_robin`].
pub fn scale_trace(records: &[TraceRecord], scaling: TraceScaling, m: usize) -> Result<Vec<TaskRequest>, WorkloadError> {
    scaling.validate()?;
    let mut tasks = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let demand = ResourceVector::new(&[
                TraceScaling::scale(r.cpu, scaling.cpu_divisor),
                TraceScaling::scale(r.mem_mb, scaling.mem_divisor),
            ])
            .expect("two dimensions");
            let constraints = ConstraintSet::new(&r.constraints, m).map_err(|e| WorkloadError::Parse {
                line: i as u64 + 2,
                message: e.to_string(),
            })?;
            Ok(TaskRequest {
                task_id: TaskId(r.task_id),
                job_id: JobId(r.job_id),
                user_id: UserId(0),
                demand,
                constraints,
                arrival_time: r.arrival_s,
                duration: r.duration_s,
            })
        })
        .collect::<Result<Vec<_>, WorkloadError>>()?;
    sort_tasks(&mut tasks);
    Ok(tasks)
}

pub fn sort_tasks(tasks: &mut [TaskRequest]) {
    tasks.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time).then(a.task_id.cmp(&b.task_id)));
}

pub fn load_trace(path: &Path, scaling: TraceScaling, m: usize) -> Result<Vec<TaskRequest>, WorkloadError> {
    let file = fs::File::open(path).map_err(|source| WorkloadError::Io { path: path.to_owned(), source })?;
    scale_trace(&parse_trace(file)?, scaling, m)
}

fn check_probabilities(ps: &[f64], what: &str) -> Result<(), WorkloadError> {
    if ps.len() > MAX_CONSTRAINTS {
        return Err(WorkloadError::Invalid(format!("{what}: {} constraints, at most {MAX_CONSTRAINTS}", ps.len())));
    }
    if let Some(p) = ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(WorkloadError::Invalid(format!("{what}: probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Per-constraint probability that a task requests it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintDistribution {
    pub probabilities: Vec<f64>,
}

/// Gives every task each constraint independently with its probability,
/// on top of any it already has.
pub fn augment_constraints(
    tasks: &mut [TaskRequest],
    dist: &ConstraintDistribution,
    seed: u64,
) -> Result<(), WorkloadError> {
    check_probabilities(&dist.probabilities, "task constraint distribution")?;
    if dist.probabilities.is_empty() {
        return Err(WorkloadError::Invalid("task constraint distribution is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in tasks {
        for (c, &p) in dist.probabilities.iter().enumerate() {
            if rng.random_bool(p) {
                t.constraints.insert(c);
            }
        }
    }
    Ok(())
}

/// Machine-constraint probabilities for one kind of cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterProfile {
    pub id: String,
    pub probabilities: Vec<f64>,
}

/// Grants each node of LM `l` each constraint with `profiles[l]`'s probability.
pub fn apply_profiles(cluster: &mut ClusterSpec, profiles: &[&ClusterProfile], seed: u64) -> Result<(), WorkloadError> {
    if profiles.len() != cluster.lms.len() {
        return Err(WorkloadError::Invalid(format!("{} profiles for {} LMs", profiles.len(), cluster.lms.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (nodes, profile) in cluster.lms.iter_mut().zip(profiles) {
        check_probabilities(&profile.probabilities, &profile.id)?;
        for n in nodes {
            n.constraints = ConstraintSet::EMPTY;
            for (c, &p) in profile.probabilities.iter().enumerate() {
                if rng.random_bool(p) {
                    n.constraints.insert(c);
                }
            }
        }
    }
    Ok(())
}

/// Picks a profile at random for every LM, then applies them. Returns the
/// chosen profile index per LM.
pub fn assign_machine_constraints(
    cluster: &mut ClusterSpec,
    profiles: &[ClusterProfile],
    seed: u64,
) -> Result<Vec<usize>, WorkloadError> {
    if profiles.is_empty() {
        return Err(WorkloadError::Invalid("no cluster profiles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = cluster.lms.iter().map(|_| rng.random_range(0..profiles.len())).collect();
    let refs: Vec<&ClusterProfile> = chosen.iter().map(|&i| &profiles[i]).collect();
    apply_profiles(cluster, &refs, rng.random())?;
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    Poisson,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DurationDist {
    Constant { value: f64 },
    Exponential { mean: f64 },
    Uniform { min: f64, max: f64 },
}

impl DurationDist {
    fn validate(&self) -> Result<(), WorkloadError> {
        let ok = match *self {
            DurationDist::Constant { value } => value.is_finite() && value > 0.0,
            DurationDist::Exponential { mean } => mean.is_finite() && mean > 0.0,
            DurationDist::Uniform { min, max } => min.is_finite() && max.is_finite() && min > 0.0 && min <= max,
        };
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::Invalid(format!("invalid duration distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            DurationDist::Constant { value } => value,
            DurationDist::Exponential { mean } => {
                // exponential draws can be arbitrarily close to zero
                Exp::new(1.0 / mean).expect("validated").sample(rng).max(1e-6)
            }
            DurationDist::Uniform { min, max } => {
                if min == max {
                    min
                } else {
                    rng.random_range(min..max)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub count: usize,
    /// Tasks per second.
    pub rate: f64,
    #[serde(default = "default_arrival")]
    pub arrival: ArrivalProcess,
    pub duration: DurationDist,
    /// Per-dimension inclusive demand range.
    pub demand_min: Vec<u64>,
    pub demand_max: Vec<u64>,
    #[serde(default = "one")]
    pub tasks_per_job: usize,
}

fn default_arrival() -> ArrivalProcess {
    ArrivalProcess::Poisson
}

fn one() -> usize {
    1
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Invalid(m));
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return bad(format!("rate must be positive, got {}", self.rate));
        }
        if self.tasks_per_job == 0 {
            return bad("tasks_per_job must be at least 1".into());
        }
        if self.demand_min.len() != self.demand_max.len() || self.demand_min.is_empty() {
            return bad("demand_min and demand_max must have the same non-zero length".into());
        }
        if self.demand_min.iter().zip(&self.demand_max).any(|(lo, hi)| lo > hi) {
            return bad("demand_min exceeds demand_max".into());
        }
        if self.demand_max.iter().all(|&d| d == 0) {
            return bad("demand must be positive in some dimension".into());
        }
        ResourceVector::new(&self.demand_min).map_err(|e| WorkloadError::Invalid(e.to_string()))?;
        self.duration.validate()
    }
}

/// Generates a deterministic workload whose last arrival is exactly
/// `count / rate`, so the mean rate over the run is the target.
pub fn generate_synthetic(params: &SyntheticParams, seed: u64) -> Result<Vec<TaskRequest>, WorkloadError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.count;
    let span = n as f64 / params.rate;
    let arrivals: Vec<f64> = match params.arrival {
        ArrivalProcess::Uniform => (1..=n).map(|i| i as f64 / params.rate).collect(),
        ArrivalProcess::Poisson => {
            let exp = Exp::new(params.rate).expect("validated");
            let mut t = 0.0;
            let raw: Vec<f64> = (0..n)
                .map(|_| {
                    t += exp.sample(&mut rng);
                    t
                })
                .collect();
            let last = raw.last().copied().unwrap_or(1.0);
            raw.into_iter().map(|a| a * span / last).collect()
        }
    };
    let tasks = arrivals
        .into_iter()
        .enumerate()
        .map(|(i, arrival_time)| {
            let q: Vec<u64> = params
                .demand_min
                .iter()
                .zip(&params.demand_max)
                .map(|(&lo, &hi)| if lo == hi { lo } else { rng.random_range(lo..=hi) })
                .collect();
            TaskRequest {
                task_id: TaskId(i as u64),
                job_id: JobId((i / params.tasks_per_job) as u64),
                user_id: UserId(0),
                demand: ResourceVector::new(&q).expect("validated dims"),
                constraints: ConstraintSet::EMPTY,
                arrival_time,
                duration: params.duration.sample(&mut rng),
            }
        })
        .collect();
    Ok(tasks)
}

/// Hands jobs to `users` round-robin in order of first appearance; every
/// task of a job goes to the same user.
pub fn assign_users_round_robin(tasks: &mut [TaskRequest], users: &[UserId]) {
    if users.is_empty() {
        return;
    }
    let mut of_job: BTreeMap<JobId, UserId> = BTreeMap::new();
    for t in tasks {
        let next = of_job.len() % users.len();
        t.user_id = *of_job.entry(t.job_id).or_insert(users[next]);
    }
}

/// Hands each job to a user drawn with probability proportional to `weights`.
pub fn assign_users_weighted(
    tasks: &mut [TaskRequest],
    users: &[(UserId, f64)],
    seed: u64,
) -> Result<(), WorkloadError> {
    let weights: Vec<f64> = users.iter().map(|u| u.1).collect();
    let dist = rand::distr::weighted::WeightedIndex::new(&weights)
        .map_err(|e| WorkloadError::Invalid(format!("user weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut of_job: BTreeMap<JobId, UserId> = BTreeMap::new();
    for t in tasks {
        t.user_id = *of_job.entry(t.job_id).or_insert_with(|| users[dist.sample(&mut rng)].0);
    }
    Ok(())
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, WorkloadError> {
    let text = fs::read_to_string(path).map_err(|source| WorkloadError::Io { path: path.to_owned(), source })?;
    toml::from_str(&text).map_err(|e| WorkloadError::Invalid(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    profile: Vec<ClusterProfile>,
}

/// Reads `[[profile]]` tables with `id` and `probabilities`.
pub fn load_profiles(path: &Path) -> Result<Vec<ClusterProfile>, WorkloadError> {
    let file: ProfileFile = read_toml(path)?;
    for p in &file.profile {
        check_probabilities(&p.probabilities, &p.id)?;
    }
    Ok(file.profile)
}

pub fn load_constraint_distribution(path: &Path) -> Result<ConstraintDistribution, WorkloadError> {
    let d: ConstraintDistribution = read_toml(path)?;
    check_probabilities(&d.probabilities, "task constraint distribution")?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NodeId;

    const HEADER: &str = "arrival_s,job_id,task_id,cpu,mem_mb,duration_s,constraints\n";

    fn parse(body: &str) -> Result<Vec<TraceRecord>, WorkloadError> {
        parse_trace(format!("{HEADER}{body}").as_bytes())
    }

    #[test]
    fn scaling_divides_and_clamps() {
        assert_eq!(TraceScaling::scale(800.0, 400.0), 2);
        assert_eq!(TraceScaling::scale(100.0, 50.0), 2);
        assert_eq!(TraceScaling::scale(10.0, 400.0), 1);
        assert!(TraceScaling { cpu_divisor: 0.5, mem_divisor: 1.0 }.validate().is_err());
    }

    #[test]
    fn trace_rows_scale_and_sort() {
        let recs = parse("2.0,1,5,800,100,3.5,\n1.0,1,9,400,50,2,1;7\n1.0,2,3,1,1,1,\n").unwrap();
        let tasks = scale_trace(&recs, TraceScaling { cpu_divisor: 400.0, mem_divisor: 50.0 }, 21).unwrap();
        let ids: Vec<u64> = tasks.iter().map(|t| t.task_id.0).collect();
        assert_eq!(ids, vec![3, 9, 5]);
        assert_eq!(tasks[2].demand.as_slice(), &[2, 2]);
        assert_eq!(tasks[1].constraints.iter().collect::<Vec<_>>(), vec![1, 7]);
        assert_eq!(tasks[2].duration, 3.5);
    }

    #[test]
    fn malformed_row_reports_line() {
        match parse("1.0,1,1,4,4,1,\n1.0,1,2,abc,4,1,\n") {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse("1.0,1,1,4,4,1,\n1.0,1,2,4,4,-1,\n") {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("1,1,1,1,1,1,99\n"), Err(WorkloadError::Parse { line: 2, .. })));
    }

    #[test]
    fn constraint_beyond_m_is_rejected_on_scale() {
        let recs = parse("1,1,1,1,1,1,30\n").unwrap();
        assert!(scale_trace(&recs, TraceScaling::default(), 21).is_err());
    }

    fn blank(n: usize) -> Vec<TaskRequest> {
        (0..n)
            .map(|i| TaskRequest {
                task_id: TaskId(i as u64),
                job_id: JobId(i as u64),
                user_id: UserId(0),
                demand: ResourceVector::new(&[1, 1]).unwrap(),
                constraints: ConstraintSet::EMPTY,
                arrival_time: 0.0,
                duration: 1.0,
            })
            .collect()
    }

    #[test]
    fn augmentation_extremes() {
        let mut tasks = blank(100);
        augment_constraints(&mut tasks, &ConstraintDistribution { probabilities: vec![0.0; 21] }, 1).unwrap();
        assert!(tasks.iter().all(|t| t.constraints.is_empty()));
        let mut p = vec![0.0; 21];
        p[7] = 1.0;
        augment_constraints(&mut tasks, &ConstraintDistribution { probabilities: p }, 1).unwrap();
        assert!(tasks.iter().all(|t| t.constraints.iter().collect::<Vec<_>>() == vec![7]));
        assert!(augment_constraints(&mut tasks, &ConstraintDistribution { probabilities: vec![] }, 1).is_err());
        assert!(augment_constraints(&mut tasks, &ConstraintDistribution { probabilities: vec![1.5] }, 1).is_err());
    }

    #[test]
    fn synthetic_rate_and_constant_duration() {
        let params = SyntheticParams {
            count: 1000,
            rate: 100.0,
            arrival: ArrivalProcess::Poisson,
            duration: DurationDist::Constant { value: 2.0 },
            demand_min: vec![1, 256],
            demand_max: vec![1, 256],
            tasks_per_job: 10,
        };
        let a = generate_synthetic(&params, 3).unwrap();
        let span = a.last().unwrap().arrival_time;
        assert!((span - 10.0).abs() <= 0.1, "{span}");
        assert!(a.iter().all(|t| t.duration == 2.0));
        assert!(a.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
        assert_eq!(a[15].job_id, JobId(1));
        assert_eq!(a, generate_synthetic(&params, 3).unwrap());
        assert_ne!(a, generate_synthetic(&params, 4).unwrap());
    }

    #[test]
    fn round_robin_users_by_job() {
        let mut tasks = blank(6);
        for (i, t) in tasks.iter_mut().enumerate() {
            t.job_id = JobId([5, 5, 2, 9, 2, 7][i]);
        }
        assign_users_round_robin(&mut tasks, &[UserId(0), UserId(1), UserId(2)]);
        let users: Vec<u32> = tasks.iter().map(|t| t.user_id.0).collect();
        assert_eq!(users, vec![0, 0, 1, 2, 1, 0]);
    }

    #[test]
    fn profile_all_ones_and_zeros() {
        let mut cluster = ClusterSpec::uniform(2, 10, ResourceVector::new(&[1, 1]).unwrap());
        let ones = ClusterProfile { id: "ones".into(), probabilities: vec![1.0; 21] };
        let zeros = ClusterProfile { id: "zeros".into(), probabilities: vec![0.0; 21] };
        apply_profiles(&mut cluster, &[&ones, &zeros], 0).unwrap();
        assert!(cluster.lms[0].iter().all(|n| n.constraints == ConstraintSet::full(21).unwrap()));
        assert!(cluster.lms[1].iter().all(|n| n.constraints.is_empty()));
        assert_eq!(cluster.lms[1][0].node_id, NodeId(10));
    }
}
