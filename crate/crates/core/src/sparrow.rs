//! Probe-sampling baseline: each task probes `d` random eligible workers and
//! joins the FIFO of the one reporting the shortest expected wait.

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{ActorClock, CostModel, DelayModel, EventQueue, MessageKind, SimError};
use crate::metrics::{Counters, SchedulerKind, TaskLedger};
use crate::model::{constraint_superset, ConstraintSet, NodeId, ResourceVector, TaskIdx, TaskRequest};
use crate::sim::{Audit, ClusterSpec, SimReport, DEFAULT_EVENT_CAP};
use crate::worker::{slot_count, slots_needed, QueuedTask, WorkerRuntime};

pub const DEFAULT_PROBES: usize = 2;

#[derive(Debug, Clone)]
pub struct SparrowSetup {
    pub schedulers: usize,
    /// Probes per task, `d`.
    pub probes: usize,
    /// Resources one slot stands for.
    pub slot_demand: ResourceVector,
    pub cluster: ClusterSpec,
    pub delays: DelayModel,
    pub costs: CostModel,
    pub seed: u64,
    pub event_cap: u64,
}

impl SparrowSetup {
    pub fn new(schedulers: usize, cluster: ClusterSpec, slot_demand: ResourceVector, seed: u64) -> Self {
        Self {
            schedulers,
            probes: DEFAULT_PROBES,
            slot_demand,
            cluster,
            delays: DelayModel::default(),
            costs: CostModel::default(),
            seed,
            event_cap: DEFAULT_EVENT_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Ev {
    Arrival(TaskIdx),
    SchedulerWake(usize),
    ProbesLand { task: TaskIdx, workers: Vec<usize> },
    Replies { task: TaskIdx, waits: Vec<(usize, f64)> },
    Enqueue { task: TaskIdx, worker: usize },
    Finish { task: TaskIdx, worker: usize },
}

enum Work {
    Sample(TaskIdx),
    Choose(TaskIdx, Vec<(usize, f64)>),
}

struct ProbeScheduler {
    clock: ActorClock,
    queue: VecDeque<Work>,
    rng: ChaCha8Rng,
}

struct Sparrow<'a> {
    setup: &'a SparrowSetup,
    tasks: &'a [TaskRequest],
    node_ids: Vec<NodeId>,
    constraints: Vec<ConstraintSet>,
    workers: Vec<WorkerRuntime>,
    schedulers: Vec<ProbeScheduler>,
    eligible: BTreeMap<(u64, u32), Vec<usize>>,
    queue: EventQueue<Ev>,
    ledgers: Vec<TaskLedger>,
    counters: Counters,
    audit: Audit,
    outstanding: usize,
}

/// Runs `tasks` (sorted by arrival) through the probe-sampling baseline.
/// Task `i` is handled by scheduler `i mod schedulers`.
pub fn run_sparrow(setup: &SparrowSetup, tasks: &[TaskRequest]) -> Result<SimReport, SimError> {
    if setup.schedulers == 0 || setup.probes == 0 {
        return Err(SimError::Internal("need at least one scheduler and one probe".into()));
    }
    let nodes: Vec<_> = setup.cluster.nodes().copied().collect();
    let mut sim = Sparrow {
        setup,
        tasks,
        node_ids: nodes.iter().map(|n| n.node_id).collect(),
        constraints: nodes.iter().map(|n| n.constraints).collect(),
        workers: nodes
            .iter()
            .map(|n| WorkerRuntime::new(n.node_id, slot_count(&n.capacity, &setup.slot_demand)))
            .collect(),
        schedulers: (0..setup.schedulers)
            .map(|s| ProbeScheduler {
                clock: ActorClock::default(),
                queue: VecDeque::new(),
                rng: ChaCha8Rng::seed_from_u64(setup.seed.wrapping_add(s as u64)),
            })
            .collect(),
        eligible: BTreeMap::new(),
        queue: EventQueue::new(),
        ledgers: tasks.iter().map(|t| TaskLedger::new(t.arrival_time)).collect(),
        counters: Counters::default(),
        audit: Audit::default(),
        outstanding: 0,
    };

    let mut unschedulable = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        let idx = TaskIdx(i as u32);
        if sim.eligible_for(idx).is_empty() {
            unschedulable.push(t.task_id);
        } else {
            sim.queue.schedule(t.arrival_time, Ev::Arrival(idx))?;
            sim.outstanding += 1;
        }
    }
    sim.run()?;

    let records = tasks
        .iter()
        .zip(&sim.ledgers)
        .filter_map(|(t, l)| l.record(t.task_id, t.user_id, SchedulerKind::Sparrow))
        .collect();
    Ok(SimReport {
        kind: SchedulerKind::Sparrow,
        records,
        counters: sim.counters,
        audit: sim.audit,
        preemptions: Vec::new(),
        unschedulable,
        makespan: sim.queue.now(),
        events: sim.queue.dispatched(),
    })
}

impl Sparrow<'_> {
    fn net(&self) -> f64 {
        self.setup.delays.delay(MessageKind::Control)
    }

    fn slots_for(&self, idx: TaskIdx) -> u32 {
        slots_needed(&self.tasks[idx.index()].demand, &self.setup.slot_demand)
    }

    /// Workers whose constraints cover the task and that have enough slots.
    fn eligible_for(&mut self, idx: TaskIdx) -> &[usize] {
        let need = self.slots_for(idx);
        let cs = self.tasks[idx.index()].constraints;
        let (constraints, workers) = (&self.constraints, &self.workers);
        self.eligible.entry((cs.mask(), need)).or_insert_with(|| {
            (0..workers.len())
                .filter(|&w| constraint_superset(constraints[w], cs) && workers[w].slots() >= need)
                .collect()
        })
    }

    fn run(&mut self) -> Result<(), SimError> {
        let mut idle = 0u64;
        while let Some(ev) = self.queue.pop() {
            let before = self.outstanding;
            let progressed = self.dispatch(ev.fire_time, ev.payload)?;
            if progressed || before != self.outstanding {
                idle = 0;
            } else {
                idle += 1;
                if idle > self.setup.event_cap {
                    return Err(SimError::Livelock { events: idle, clock: ev.fire_time, outstanding: self.outstanding });
                }
            }
        }
        if self.outstanding > 0 {
            return Err(SimError::Livelock { events: idle, clock: self.queue.now(), outstanding: self.outstanding });
        }
        Ok(())
    }

    fn dispatch(&mut self, now: f64, ev: Ev) -> Result<bool, SimError> {
        match ev {
            Ev::Arrival(idx) => {
                let s = idx.index() % self.schedulers.len();
                self.schedulers[s].queue.push_back(Work::Sample(idx));
                self.step(s, now)?;
            }
            Ev::SchedulerWake(s) => {
                self.schedulers[s].clock.woke();
                self.step(s, now)?;
            }
            Ev::ProbesLand { task, workers } => {
                let waits = workers.iter().map(|&w| (w, self.workers[w].estimated_wait(now))).collect();
                self.queue.schedule(now + self.net(), Ev::Replies { task, waits })?;
            }
            Ev::Replies { task, waits } => {
                let s = task.index() % self.schedulers.len();
                self.schedulers[s].queue.push_back(Work::Choose(task, waits));
                self.step(s, now)?;
            }
            Ev::Enqueue { task, worker } => {
                let t = &self.tasks[task.index()];
                self.audit.launches_checked += 1;
                if !constraint_superset(self.constraints[worker], t.constraints) {
                    self.audit.launches.push(format!("{task}: constraints not met on {}", self.node_ids[worker]));
                }
                let slots = self.slots_for(task);
                self.workers[worker].enqueue(QueuedTask { task, slots, duration: t.duration, enqueued_at: now });
                return self.start_ready(worker, now);
            }
            Ev::Finish { task, worker } => {
                if !self.workers[worker].finish(task) {
                    return Err(SimError::Internal(format!("{task} finished but was not running")));
                }
                self.outstanding -= 1;
                self.start_ready(worker, now)?;
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn start_ready(&mut self, worker: usize, now: f64) -> Result<bool, SimError> {
        let started = self.workers[worker].start_ready(now);
        let any = !started.is_empty();
        for (q, end) in started {
            let l = &mut self.ledgers[q.task.index()];
            l.wait_in_worker_until(now);
            l.start(now);
            self.queue.schedule(end, Ev::Finish { task: q.task, worker })?;
        }
        let w = &self.workers[worker];
        self.audit.node_checks += 1;
        if w.free_slots() > w.slots() {
            self.audit.conservation.push(format!("{} has {} free of {} slots", w.node_id, w.free_slots(), w.slots()));
        }
        Ok(any)
    }

    fn step(&mut self, s: usize, now: f64) -> Result<(), SimError> {
        if !self.schedulers[s].clock.is_idle(now) {
            return Ok(());
        }
        let Some(work) = self.schedulers[s].queue.pop_front() else {
            return Ok(());
        };
        let net = self.net();
        let cost = match work {
            Work::Sample(idx) => {
                let cost = self.setup.costs.sparrow_sample_s;
                let d = self.setup.probes;
                let pool = self.eligible_for(idx).to_vec();
                let rng = &mut self.schedulers[s].rng;
                let mut workers: Vec<usize> =
                    rand::seq::index::sample(rng, pool.len(), d.min(pool.len())).into_iter().map(|i| pool[i]).collect();
                workers.sort_unstable();
                self.counters.probes += workers.len() as u64;
                let l = &mut self.ledgers[idx.index()];
                l.attempts += 1;
                l.queue_at_scheduler_until(now);
                l.process(cost);
                l.communicate(net);
                self.queue.schedule(now + cost + net, Ev::ProbesLand { task: idx, workers })?;
                cost
            }
            Work::Choose(idx, waits) => {
                let cost = self.setup.costs.sparrow_reply_s * waits.len() as f64;
                let best = waits
                    .iter()
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(self.node_ids[a.0].cmp(&self.node_ids[b.0])))
                    .map(|&(w, _)| w)
                    .ok_or_else(|| SimError::Internal(format!("{idx} has no probe replies")))?;
                let hop = self.setup.delays.delay(MessageKind::TaskLaunch);
                let l = &mut self.ledgers[idx.index()];
                // the replies' return hop
                l.communicate(net);
                l.queue_at_scheduler_until(now);
                l.process(cost);
                l.communicate(hop);
                self.counters.launch_requests += 1;
                self.queue.schedule(now + cost + hop, Ev::Enqueue { task: idx, worker: best })?;
                cost
            }
        };
        let at = self.schedulers[s].clock.occupy(now, cost);
        self.queue.schedule(at, Ev::SchedulerWake(s))?;
        Ok(())
    }
}
