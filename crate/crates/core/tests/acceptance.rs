//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::time::Instant;

use fedsched::config::ExperimentConfig;
use fedsched::experiment::{self, RecordFormat};
use fedsched::global_master::{match_task, ClusterView, GlobalMaster};
use fedsched::fairness::QueueSet;
use fedsched::local_master::LocalMaster;
use fedsched::messages::{LaunchRequest, RepartitionRequest};
use fedsched::metrics::{AllocationSummary, CLOSURE_TOLERANCE_S};
use fedsched::model::{ConstraintSet, GmId, LmId, NodeId, PartitionId, TaskIdx, TaskId, JobId, UserId, WorkerNode};
use fedsched::partition::Partition;
use fedsched::sim::{NodeSpec, PreemptionEntry};
use fedsched::workload::{self, ArrivalProcess, DurationDist, SyntheticParams};
use fedsched::{run_federated, run_sparrow, ClusterSpec, FederatedSetup, ResourceVector, SimReport, SparrowSetup, TaskRequest, UserSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rv(v: &[u64]) -> ResourceVector {
    ResourceVector::new(v).unwrap()
}

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict { ok, detail: detail.into() }
}

fn synthetic(count: usize, rate: f64, mean_duration: f64, seed: u64) -> Vec<TaskRequest> {
    let params = SyntheticParams {
        count,
        rate,
        arrival: ArrivalProcess::Poisson,
        duration: DurationDist::Exponential { mean: mean_duration },
        demand_min: vec![1, 1024],
        demand_max: vec![1, 1024],
        tasks_per_job: 10,
    };
    workload::generate_synthetic(&params, seed).unwrap()
}

/// Core-seconds offered per core-second of capacity over the arrival window.
fn offered_load(tasks: &[TaskRequest], cores: u64) -> f64 {
    let work: f64 = tasks.iter().map(|t| t.duration * t.demand.get(0) as f64).sum();
    let span = tasks.last().map_or(1.0, |t| t.arrival_time);
    work / (cores as f64 * span)
}

fn federated(gms: usize, lms: usize, workers: usize, tasks: &mut [TaskRequest]) -> SimReport {
    let cluster = ClusterSpec::uniform(lms, workers / lms, rv(&[4, 4096]));
    let setup = FederatedSetup::new(gms, cluster, 21);
    let users: Vec<UserId> = setup.users.iter().map(|u| u.user).collect();
    workload::assign_users_round_robin(tasks, &users);
    let mut setup = setup;
    if (gms, lms) == (1, 1) {
        setup.kind = fedsched::SchedulerKind::Centralized;
    }
    run_federated(&setup, tasks).unwrap()
}

fn summary(r: &SimReport) -> AllocationSummary {
    AllocationSummary::from_records(&r.records).expect("records")
}

// ---------------------------------------------------------------------------
// 1. Bitmap match versus an exhaustive scan.

fn scan_oracle(task: &TaskRequest, p: &Partition) -> Option<usize> {
    'nodes: for (ord, n) in p.nodes.iter().enumerate() {
        for c in 0..64 {
            let wanted = task.constraints.mask() >> c & 1 == 1;
            let offered = n.machine_constraints.mask() >> c & 1 == 1;
            if wanted && !offered {
                continue 'nodes;
            }
        }
        let fits = (0..task.demand.dims()).all(|i| n.available.get(i) >= task.demand.get(i));
        if fits {
            return Some(ord);
        }
    }
    None
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = 21;
    let instances = 12_000;
    let mut found = 0;
    for i in 0..instances {
        let size = rng.random_range(1..=512);
        let density: f64 = rng.random_range(0.3..0.95);
        let pid = PartitionId { lm: LmId(0), slot: 0 };
        let mut p = Partition::new(pid, m).unwrap();
        for j in 0..size {
            let mut c = ConstraintSet::EMPTY;
            for id in 0..m {
                if rng.random_bool(density) {
                    c.insert(id);
                }
            }
            let mut n = WorkerNode::physical(NodeId(j as u32), pid, rv(&[16, 65536]), c);
            n.available = rv(&[rng.random_range(0..=16), rng.random_range(0..=65536)]);
            p.push(n);
        }
        let k = rng.random_range(0..=4);
        let ids: Vec<usize> = (0..k).map(|_| rng.random_range(0..m)).collect();
        let task = TaskRequest {
            task_id: TaskId(i),
            job_id: JobId(0),
            user_id: UserId(0),
            demand: rv(&[rng.random_range(1..=16), rng.random_range(1..=65536)]),
            constraints: ConstraintSet::new(&ids, m).unwrap(),
            arrival_time: 0.0,
            duration: 1.0,
        };
        let got = match_task(&task, &p).unwrap().ordinal;
        let want = scan_oracle(&task, &p);
        if got != want {
            return verdict(false, format!("instance {i}: bitmap {got:?}, scan {want:?}"));
        }
        found += usize::from(want.is_some());
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(secs < 60.0, format!("{instances} instances agree ({found} with a match) in {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// 4. Partition structure.

fn criterion_4(runs: &[(&str, &SimReport)]) -> Verdict {
    for g in 1..=6usize {
        for l in 1..=6usize {
            let lms: Vec<LocalMaster> = (0..l)
                .map(|i| {
                    LocalMaster::new(
                        LmId(i as u32),
                        g,
                        21,
                        (0..13).map(|k| (NodeId((i * 13 + k) as u32), rv(&[4, 4096]), ConstraintSet::EMPTY)),
                    )
                    .unwrap()
                })
                .collect();
            for lm in &lms {
                if lm.partitions().len() != g {
                    return verdict(false, format!("{g} GMs: LM holds {} partitions", lm.partitions().len()));
                }
            }
            let snaps: Vec<_> = lms.iter().map(|lm| lm.full_snapshot(0.0)).collect();
            for gi in 0..g {
                let gm = GlobalMaster::new(GmId(gi as u32), ClusterView::new(&snaps), QueueSet::default(), 2);
                let internal = gm.internal_partitions();
                let per_lm: Vec<u32> = internal.iter().map(|p| p.lm.0).collect();
                if per_lm != (0..l as u32).collect::<Vec<_>>() || internal.iter().any(|p| p.owner() != GmId(gi as u32)) {
                    return verdict(false, format!("GM {gi} of {g}x{l}: internal set {internal:?}"));
                }
            }
        }
    }
    let repartitions: u64 = runs.iter().map(|(_, r)| r.counters.repartitions).sum();
    let broken: Vec<String> = runs.iter().flat_map(|(n, r)| r.audit.structure.iter().map(move |e| format!("{n}: {e}"))).collect();
    verdict(
        broken.is_empty() && repartitions > 0,
        format!("36 GM/LM layouts at init; structure rechecked after {repartitions} repartitions; {} violations", broken.len()),
    )
}

// ---------------------------------------------------------------------------
// 5. Tail latency against the probe-sampling baseline.

struct HighLoad {
    federated: SimReport,
    sparrow: SimReport,
    load: f64,
}

fn high_load() -> HighLoad {
    let workers = 1000;
    let mut tasks = synthetic(20_000, 1700.0, 2.0, 5);
    let load = offered_load(&tasks, workers as u64 * 4);
    let fed = federated(10, 10, workers, &mut tasks);
    let cluster = ClusterSpec::uniform(10, workers / 10, rv(&[4, 4096]));
    let sp = run_sparrow(&SparrowSetup::new(10, cluster, rv(&[1, 1024]), 5), &tasks).unwrap();
    HighLoad { federated: fed, sparrow: sp, load }
}

fn criterion_5(h: &HighLoad) -> Verdict {
    let f = summary(&h.federated);
    let s = summary(&h.sparrow);
    let tail = s.p99 / f.p99;
    let med = (s.median / f.median).max(f.median / s.median);
    verdict(
        h.load >= 0.8 && f.tasks >= 10_000 && tail >= 10.0 && med < 10.0,
        format!(
            "load {:.2}, {} tasks: p99 federated {:.4}s vs baseline {:.4}s ({tail:.1}x); medians {:.4}s vs {:.4}s ({med:.1}x apart)",
            h.load, f.tasks, f.p99, s.p99, f.median, s.median
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. One GM over one LM versus five by five.

fn criterion_6() -> (Verdict, Vec<SimReport>) {
    let workers = 2000;
    let tasks = synthetic(4000, 200.0, 10.0, 6);
    let load = offered_load(&tasks, workers as u64 * 4);
    let central = federated(1, 1, workers, &mut tasks.clone());
    let fed = federated(5, 5, workers, &mut tasks.clone());
    let (c, f) = (summary(&central), summary(&fed));
    let v = verdict(
        f.median < c.median && f.p99 < c.p99,
        format!(
            "load {load:.2}: median {:.4}s (5x5) vs {:.4}s (1x1), p99 {:.4}s vs {:.4}s",
            f.median, c.median, f.p99, c.p99
        ),
    );
    (v, vec![central, fed])
}

// ---------------------------------------------------------------------------
// 7. Cluster size.

fn criterion_7() -> (Verdict, Vec<SimReport>) {
    let tasks = synthetic(5000, 200.0, 2.0, 7);
    let mut medians = Vec::new();
    let mut reports = Vec::new();
    for workers in [1000, 5000, 10_000] {
        let r = federated(10, 10, workers, &mut tasks.clone());
        medians.push((workers, summary(&r).median));
        reports.push(r);
    }
    let ok = medians.windows(2).all(|w| w[0].1 <= w[1].1);
    let detail = medians.iter().map(|(w, m)| format!("{w}: {m:.6}s")).collect::<Vec<_>>().join(", ");
    (verdict(ok, format!("medians {detail}")), reports)
}

// ---------------------------------------------------------------------------
// 8 and 9. Fair sharing under contention.

const SHARES: [f64; 4] = [0.10, 0.25, 0.15, 0.50];

fn fair_run(workers: usize, tasks: &[TaskRequest]) -> SimReport {
    let cluster = ClusterSpec::uniform(4, workers / 4, rv(&[4, 4096]));
    let mut setup = FederatedSetup::new(3, cluster, 21);
    let gm_of = [0, 1, 1, 2];
    setup.users = (0..4).map(|u| UserSpec { user: UserId(u), share: SHARES[u as usize], gm: GmId(gm_of[u as usize]) }).collect();
    setup.fairness = true;
    run_federated(&setup, tasks).unwrap()
}

fn fairness_tasks() -> Vec<TaskRequest> {
    let mut tasks = synthetic(12_000, 250.0, 10.0, 8);
    workload::assign_users_round_robin(&mut tasks, &[UserId(0), UserId(1), UserId(2), UserId(3)]);
    tasks
}

fn criterion_8(runs: &[(usize, SimReport)]) -> Verdict {
    let points: Vec<(usize, u64, f64)> = runs.iter().map(|(w, r)| (*w, r.counters.preemptions, summary(r).median)).collect();
    let mut ok = true;
    for w in points.windows(2) {
        ok &= w[1].1 <= w[0].1 && w[1].2 <= w[0].2;
    }
    let (_, largest_pre, _) = *points.last().unwrap();
    ok &= largest_pre == 0;
    ok &= points[0].1 > 0;
    let detail = points.iter().map(|(w, p, m)| format!("{w} workers: {p} preemptions, median {m:.6}s")).collect::<Vec<_>>().join("; ");
    verdict(ok, detail)
}

fn criterion_9(report: &SimReport) -> Verdict {
    let executed: Vec<&PreemptionEntry> = report.preemptions.iter().filter(|e| !e.killed.is_empty()).collect();
    for e in &executed {
        let d = &e.decision;
        let share = d.requester_share;
        let req_ratio = d.requester_consumed.get(0) as f64 / (share * 4.0 * 200.0);
        if req_ratio > 1.0 + 1e-12 {
            return verdict(false, format!("preempted for {} at ratio {req_ratio:.3}", d.requester));
        }
        let Some(chosen) = d.chosen else {
            return verdict(false, "executed preemption without a chosen user");
        };
        let ratio_of: BTreeMap<UserId, f64> = d.standings.iter().map(|s| (s.user, s.ratio)).collect();
        let chosen_ratio = ratio_of[&chosen];
        if chosen_ratio <= 1.0 {
            return verdict(false, format!("victim user {chosen} was within its share"));
        }
        let better = d
            .standings
            .iter()
            .filter(|s| s.ratio > 1.0 && !d.skipped.contains(&s.user) && s.user != chosen)
            .find(|s| s.ratio > chosen_ratio);
        if let Some(b) = better {
            return verdict(false, format!("chose {chosen} ({chosen_ratio:.3}) over {} ({:.3})", b.user, b.ratio));
        }
    }
    let logged = report.preemptions.len();
    verdict(
        !executed.is_empty(),
        format!("{} executed preemptions replayed out of {logged} fairness decisions; all targeted the worst violator", executed.len()),
    )
}

// ---------------------------------------------------------------------------
// 10. Determinism through the full config pipeline.

const DETERMINISM_CFG: &str = r#"
scheduler = "federated"
seed = 10
gm_count = 3
lm_count = 2
workers_per_lm = 20
worker_capacity = [4, 4096]

[workload.synthetic]
count = 3000
rate = 60.0
duration = { kind = "exponential", mean = 2.0 }
demand_min = [1, 512]
demand_max = [2, 2048]
tasks_per_job = 5

[[users]]
share = 0.2
gm = 0
[[users]]
share = 0.3
gm = 1
[[users]]
share = 0.5
gm = 2

[sparrow]
schedulers = 3
slot_demand = [1, 512]
"#;

fn criterion_10() -> (Verdict, Vec<SimReport>) {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for kind in ["federated", "sparrow"] {
        let cfg = ExperimentConfig::from_toml(&DETERMINISM_CFG.replace("\"federated\"", &format!("\"{kind}\""))).unwrap();
        let mut bytes = Vec::new();
        for rep in 0..2 {
            let out = dir.path().join(format!("{kind}-{rep}"));
            let r = experiment::run_experiment(&cfg).unwrap();
            experiment::write_report(&r, cfg.seed, &out, RecordFormat::Csv).unwrap();
            bytes.push(std::fs::read(out.join("records.csv")).unwrap());
            reports.push(r);
        }
        if bytes[0] != bytes[1] {
            return (verdict(false, format!("{kind} records differ between repeats")), reports);
        }
    }
    (verdict(true, "federated and baseline record files byte-identical across repeats"), reports)
}

// ---------------------------------------------------------------------------
// 11. Two GMs racing for one node's last resources.

fn criterion_11() -> (Verdict, SimReport) {
    let task = |i: u64, user: u32| TaskRequest {
        task_id: TaskId(i),
        job_id: JobId(i),
        user_id: UserId(user),
        demand: rv(&[2, 4096]),
        constraints: ConstraintSet::EMPTY,
        arrival_time: 0.0,
        duration: 1.0,
    };
    // Direct: GM 0 launches on its own node; GM 1 tries to carve the same node.
    let nodes = [(NodeId(0), rv(&[2, 4096]), ConstraintSet::EMPTY), (NodeId(1), rv(&[1, 1024]), ConstraintSet::EMPTY)];
    let mut lm = LocalMaster::new(LmId(0), 2, 21, nodes).unwrap();
    let (a, b) = (task(0, 0), task(1, 1));
    let launch = LaunchRequest { gm_id: GmId(0), seq: 1, task: TaskIdx(0), node_id: NodeId(0), demand: a.demand, constraints: a.constraints };
    let carve = RepartitionRequest { gm_id: GmId(1), seq: 1, task: TaskIdx(1), source_node_id: NodeId(0), demand: b.demand, constraints: b.constraints };
    let first = lm.validate_and_launch(&launch, &a, 1, 0.0).is_ok();
    let second = lm.repartition(&carve, &b, NodeId(2), 1, 0.0).is_ok();
    let snap = lm.full_snapshot(0.0);
    let shows_full = snap.partitions[0].nodes[0].available.is_zero();

    // End to end.
    let big = NodeSpec { node_id: NodeId(0), capacity: rv(&[2, 4096]), constraints: ConstraintSet::EMPTY };
    let small = NodeSpec { node_id: NodeId(1), capacity: rv(&[1, 1024]), constraints: ConstraintSet::EMPTY };
    let setup = FederatedSetup::new(2, ClusterSpec { lms: vec![vec![big, small]] }, 21);
    let r = run_federated(&setup, &[a, b]).unwrap();
    let requests = r.counters.launch_requests + r.counters.repartition_requests;
    let failures = requests - r.records.len() as u64;
    let ok = first && !second && shows_full && r.records.len() == 2 && r.counters.inconsistency_failures == 1 && failures == 1;
    (
        verdict(
            ok,
            format!(
                "direct: first {first}, second {second}, snapshot shows node full {shows_full}; simulated: {} placed, {requests} requests, {} failures counted",
                r.records.len(),
                r.counters.inconsistency_failures
            ),
        ),
        r,
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let started = Instant::now();
    let (c1, high, (c6, six), (c7, seven), fair, (c10, ten), (c11, eleven)) = std::thread::scope(|s| {
        let c1 = s.spawn(criterion_1);
        let high = s.spawn(high_load);
        let c6 = s.spawn(criterion_6);
        let c7 = s.spawn(criterion_7);
        let fair = s.spawn(|| {
            let tasks = fairness_tasks();
            [200, 500, 1500].map(|w| (w, fair_run(w, &tasks))).to_vec()
        });
        let c10 = s.spawn(criterion_10);
        let c11 = s.spawn(criterion_11);
        (
            c1.join().unwrap(),
            high.join().unwrap(),
            c6.join().unwrap(),
            c7.join().unwrap(),
            fair.join().unwrap(),
            c10.join().unwrap(),
            c11.join().unwrap(),
        )
    });

    let mut runs: Vec<(String, &SimReport)> = vec![
        ("high-load federated".into(), &high.federated),
        ("high-load baseline".into(), &high.sparrow),
        ("race".into(), &eleven),
    ];
    runs.extend(six.iter().map(|r| ("centralized comparison".to_string(), r)));
    runs.extend(seven.iter().map(|r| ("cluster size".to_string(), r)));
    runs.extend(fair.iter().map(|(w, r)| (format!("fairness {w}"), r)));
    runs.extend(ten.iter().map(|r| ("determinism".to_string(), r)));
    let named: Vec<(&str, &SimReport)> = runs.iter().map(|(n, r)| (n.as_str(), *r)).collect();

    let c2 = {
        let bad: Vec<String> = named
            .iter()
            .flat_map(|(n, r)| r.audit.conservation.iter().chain(&r.audit.launches).map(move |e| format!("{n}: {e}")))
            .collect();
        let launches: u64 = named.iter().map(|(_, r)| r.audit.launches_checked).sum();
        let nodes: u64 = named.iter().map(|(_, r)| r.audit.node_checks).sum();
        verdict(
            bad.is_empty(),
            match bad.first() {
                Some(e) => format!("{} violations, first: {e}", bad.len()),
                None => format!("{} runs, {launches} launches and {nodes} node states audited, no violations", named.len()),
            },
        )
    };
    let c3 = {
        let total: usize = named.iter().map(|(_, r)| r.records.len()).sum();
        let worst = named
            .iter()
            .flat_map(|(_, r)| r.records.iter().map(|x| x.closure_error()))
            .fold(0.0f64, f64::max);
        verdict(worst <= CLOSURE_TOLERANCE_S, format!("{total} records, worst closure error {worst:.3e}s"))
    };
    let c4 = criterion_4(&named);
    let c5 = criterion_5(&high);
    let c8 = criterion_8(&fair);
    let c9 = criterion_9(&fair[0].1);

    let results = [
        ("1 match oracle equivalence", c1),
        ("2 conservation and launch safety", c2),
        ("3 allocation-time closure", c3),
        ("4 partition structure", c4),
        ("5 tail latency vs probe sampling", c5),
        ("6 centralized vs decentralized", c6),
        ("7 cluster-size trend", c7),
        ("8 fairness contention trend", c8),
        ("9 fairness correctness", c9),
        ("10 determinism", c10),
        ("11 inconsistency handling", c11),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!("criterion {name}: {} ({})", if v.ok { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.ok);
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
