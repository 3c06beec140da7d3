//! Federated scheduler driver: GMs, LMs and workers as actors on one event
//! loop.
//!
//! Each GM and LM is a serial server. A GM decides against its view when it
//! starts a work item and its messages leave when the item's processing cost
//! has elapsed. An LM executes a request when its processing completes, so
//! the state it reports is captured at the instant it is sent.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use crate::engine::{ActorClock, CostModel, DelayModel, EventQueue, MessageKind, SimError};
use crate::fairness::{PreemptionDecisionLog, QueueSet, ShareAccounting, UserQueue, ViolationMetric};
use crate::global_master::{Action, ClusterView, FairnessPolicy, GlobalMaster, ResponseOutcome};
use crate::local_master::{LaunchAudit, LocalMaster, Placement, DEFAULT_HEARTBEAT_PERIOD_S};
use crate::messages::{LaunchResponse, PreemptResponse, RequestKind, RequestSeq, StateSnapshot, ToGm, ToLm, VictimStatus};
use crate::metrics::{AllocationRecord, Counters, SchedulerKind, TaskLedger};
use crate::model::{
    constraint_superset, resource_geq, ConstraintSet, GmId, LmId, NodeId, ResourceVector, TaskId, TaskIdx,
    TaskRequest, UserId,
};

/// Default number of consecutive events without a task starting or
/// finishing before the run is declared livelocked.
pub const DEFAULT_EVENT_CAP: u64 = 20_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeSpec {
    pub node_id: NodeId,
    pub capacity: ResourceVector,
    pub constraints: ConstraintSet,
}

/// Physical nodes grouped by LM. Node ids are global and distinct.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterSpec {
    pub lms: Vec<Vec<NodeSpec>>,
}

impl ClusterSpec {
    /// `lm_count` LMs of `per_lm` identical nodes, ids assigned in LM order.
    pub fn uniform(lm_count: usize, per_lm: usize, capacity: ResourceVector) -> Self {
        let lms = (0..lm_count)
            .map(|l| {
                (0..per_lm)
                    .map(|i| NodeSpec {
                        node_id: NodeId((l * per_lm + i) as u32),
                        capacity,
                        constraints: ConstraintSet::EMPTY,
                    })
                    .collect()
            })
            .collect();
        Self { lms }
    }

    pub fn node_count(&self) -> usize {
        self.lms.iter().map(Vec::len).sum()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.lms.iter().flatten()
    }

    pub fn total_capacity(&self) -> Option<ResourceVector> {
        let mut it = self.nodes();
        let first = it.next()?.capacity;
        Some(it.fold(first, |acc, n| acc.saturating_add(&n.capacity)))
    }

    /// True if some node could ever host `task`.
    pub fn can_ever_host(&self, task: &TaskRequest) -> bool {
        self.nodes().any(|n| {
            constraint_superset(n.constraints, task.constraints) && resource_geq(&n.capacity, &task.demand).unwrap_or(false)
        })
    }
}

/// A user queue and the GM that serves it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserSpec {
    pub user: UserId,
    pub share: f64,
    pub gm: GmId,
}

#[derive(Debug, Clone)]
pub struct FederatedSetup {
    pub kind: SchedulerKind,
    pub gm_count: usize,
    pub constraint_count: usize,
    pub cluster: ClusterSpec,
    pub delays: DelayModel,
    pub costs: CostModel,
    pub heartbeat_period: f64,
    pub users: Vec<UserSpec>,
    pub fairness: bool,
    pub metric: ViolationMetric,
    pub event_cap: u64,
    pub max_consecutive_failures: u32,
}

impl FederatedSetup {
    /// One queue per GM with equal shares and fairness off.
    pub fn new(gm_count: usize, cluster: ClusterSpec, constraint_count: usize) -> Self {
        let users = (0..gm_count)
            .map(|g| UserSpec { user: UserId(g as u32), share: 1.0 / gm_count as f64, gm: GmId(g as u32) })
            .collect();
        Self {
            kind: SchedulerKind::Federated,
            gm_count,
            constraint_count,
            cluster,
            delays: DelayModel::default(),
            costs: CostModel::default(),
            heartbeat_period: DEFAULT_HEARTBEAT_PERIOD_S,
            users,
            fairness: false,
            metric: ViolationMetric::Primary,
            event_cap: DEFAULT_EVENT_CAP,
            max_consecutive_failures: crate::global_master::DEFAULT_MAX_CONSECUTIVE_FAILURES,
        }
    }
}

/// A preemption decision and whether an LM went on to kill anything for it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreemptionEntry {
    pub decision: PreemptionDecisionLog,
    pub sent: bool,
    pub killed: Vec<TaskIdx>,
}

/// Violations found by the run-time auditor. Empty on a correct run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    pub conservation: Vec<String>,
    pub launches: Vec<String>,
    pub structure: Vec<String>,
    pub launches_checked: u64,
    pub node_checks: u64,
}

impl Audit {
    pub fn is_clean(&self) -> bool {
        self.conservation.is_empty() && self.launches.is_empty() && self.structure.is_empty()
    }

    fn launch(&mut self, task: TaskIdx, a: &LaunchAudit) {
        self.launches_checked += 1;
        if !constraint_superset(a.machine_constraints, a.task_constraints) {
            self.launches.push(format!("{task}: constraints {:?} not within {:?} on {}", a.task_constraints, a.machine_constraints, a.node));
        }
        if !resource_geq(&a.available_before, &a.demand).unwrap_or(false) {
            self.launches.push(format!("{task}: demand {} exceeds available {} on {}", a.demand, a.available_before, a.node));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub kind: SchedulerKind,
    /// One record per scheduled task, in arrival order.
    pub records: Vec<AllocationRecord>,
    pub counters: Counters,
    pub audit: Audit,
    pub preemptions: Vec<PreemptionEntry>,
    /// Tasks no node could ever host; never submitted.
    pub unschedulable: Vec<TaskId>,
    pub makespan: f64,
    pub events: u64,
}

#[derive(Debug, Clone, PartialEq)]
enum Ev {
    Arrival(TaskIdx),
    GmWake(GmId),
    ToGm(GmId, ToGm),
    ToLm(LmId, ToLm),
    LmDone(LmId),
    Heartbeat(LmId),
    TaskStart { task: TaskIdx, run: u32 },
    TaskEnd { task: TaskIdx, run: u32 },
    Completion { lm: LmId, task: TaskIdx, run: u32 },
}

enum LmWork {
    Request(ToLm),
    Heartbeat,
}

struct GmActor {
    gm: GlobalMaster,
    clock: ActorClock,
    inbox: VecDeque<ToGm>,
}

struct LmActor {
    lm: LocalMaster,
    clock: ActorClock,
    inbox: VecDeque<LmWork>,
    current: Option<LmWork>,
}

#[derive(Debug, Clone, Copy, Default)]
struct TaskState {
    run: u32,
    finished_on_worker: bool,
    done: bool,
}

struct Federated<'a> {
    setup: &'a FederatedSetup,
    tasks: &'a [TaskRequest],
    queue: EventQueue<Ev>,
    gms: Vec<GmActor>,
    lms: Vec<LmActor>,
    ledgers: Vec<TaskLedger>,
    state: Vec<TaskState>,
    owner: BTreeMap<UserId, GmId>,
    shares: BTreeMap<UserId, f64>,
    accounting: ShareAccounting,
    counters: Counters,
    audit: Audit,
    preemptions: Vec<PreemptionEntry>,
    pending_preempt: BTreeMap<(GmId, LmId, RequestSeq), usize>,
    next_logical: u32,
    outstanding: usize,
    idle_events: u64,
}

/// Runs `tasks` (sorted by arrival) through the federated scheduler.
pub fn run_federated(setup: &FederatedSetup, tasks: &[TaskRequest]) -> Result<SimReport, SimError> {
    if setup.gm_count == 0 || setup.cluster.lms.is_empty() {
        return Err(SimError::Internal("need at least one GM and one LM".into()));
    }
    let dims = setup
        .cluster
        .nodes()
        .next()
        .map(|n| n.capacity.dims())
        .ok_or_else(|| SimError::Internal("cluster has no nodes".into()))?;

    let mut lms = Vec::with_capacity(setup.cluster.lms.len());
    for (l, nodes) in setup.cluster.lms.iter().enumerate() {
        let mut lm = LocalMaster::new(
            LmId(l as u32),
            setup.gm_count,
            setup.constraint_count,
            nodes.iter().map(|n| (n.node_id, n.capacity, n.constraints)),
        )
        .map_err(|e| SimError::Internal(e.to_string()))?;
        lm.heartbeat_period = setup.heartbeat_period;
        lms.push(LmActor { lm, clock: ActorClock::default(), inbox: VecDeque::new(), current: None });
    }
    let initial: Vec<StateSnapshot> = lms.iter().map(|a| a.lm.full_snapshot(0.0)).collect();
    let view = ClusterView::new(&initial);

    let owner: BTreeMap<UserId, GmId> = setup.users.iter().map(|u| (u.user, u.gm)).collect();
    let shares: BTreeMap<UserId, f64> = setup.users.iter().map(|u| (u.user, u.share)).collect();
    let gms = (0..setup.gm_count)
        .map(|g| {
            let gm_id = GmId(g as u32);
            let queues = setup
                .users
                .iter()
                .filter(|u| u.gm == gm_id)
                .map(|u| UserQueue::new(u.user, u.share, gm_id, dims))
                .collect();
            let mut gm = GlobalMaster::new(gm_id, view.clone(), QueueSet::new(queues), dims);
            gm.max_consecutive_failures = setup.max_consecutive_failures;
            GmActor { gm, clock: ActorClock::default(), inbox: VecDeque::new() }
        })
        .collect();

    let mut sim = Federated {
        setup,
        tasks,
        queue: EventQueue::new(),
        gms,
        lms,
        ledgers: tasks.iter().map(|t| TaskLedger::new(t.arrival_time)).collect(),
        state: vec![TaskState::default(); tasks.len()],
        owner,
        shares,
        accounting: ShareAccounting {
            total: setup.cluster.total_capacity().expect("non-empty"),
            metric: setup.metric,
        },
        counters: Counters::default(),
        audit: Audit::default(),
        preemptions: Vec::new(),
        pending_preempt: BTreeMap::new(),
        next_logical: setup.cluster.nodes().map(|n| n.node_id.0 + 1).max().unwrap_or(0),
        outstanding: 0,
        idle_events: 0,
    };
    sim.check_structure();

    let mut unschedulable = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        if !sim.owner.contains_key(&t.user_id) {
            return Err(SimError::Internal(format!("task {} belongs to unknown user {}", t.task_id, t.user_id)));
        }
        if setup.cluster.can_ever_host(t) {
            sim.queue.schedule(t.arrival_time, Ev::Arrival(TaskIdx(i as u32)))?;
            sim.outstanding += 1;
        } else {
            sim.state[i].done = true;
            unschedulable.push(t.task_id);
        }
    }
    if sim.outstanding > 0 && setup.heartbeat_period > 0.0 {
        for l in 0..sim.lms.len() {
            sim.queue.schedule(setup.heartbeat_period, Ev::Heartbeat(LmId(l as u32)))?;
        }
    }

    sim.run()?;

    for a in &sim.lms {
        sim.audit.conservation.extend(a.lm.check_all());
    }
    let records = tasks
        .iter()
        .zip(&sim.ledgers)
        .filter_map(|(t, l)| l.record(t.task_id, t.user_id, setup.kind))
        .collect();
    Ok(SimReport {
        kind: setup.kind,
        records,
        counters: sim.counters,
        audit: sim.audit,
        preemptions: sim.preemptions,
        unschedulable,
        makespan: sim.queue.now(),
        events: sim.queue.dispatched(),
    })
}

impl Federated<'_> {
    fn run(&mut self) -> Result<(), SimError> {
        while let Some(ev) = self.queue.pop() {
            let now = ev.fire_time;
            let before = self.outstanding;
            let progressed = self.dispatch(now, ev.payload)?;
            if progressed || self.outstanding != before {
                self.idle_events = 0;
            } else {
                self.idle_events += 1;
                if self.idle_events > self.setup.event_cap {
                    return Err(SimError::Livelock {
                        events: self.idle_events,
                        clock: now,
                        outstanding: self.outstanding,
                    });
                }
            }
        }
        if self.outstanding > 0 {
            return Err(SimError::Livelock { events: self.idle_events, clock: self.queue.now(), outstanding: self.outstanding });
        }
        Ok(())
    }

    fn net(&self) -> f64 {
        self.setup.delays.delay(MessageKind::Control)
    }

    fn launch_delay(&self) -> f64 {
        self.setup.delays.delay(MessageKind::TaskLaunch)
    }

    fn owner_of(&self, task: TaskIdx) -> GmId {
        self.owner[&self.tasks[task.index()].user_id]
    }

    fn dispatch(&mut self, now: f64, ev: Ev) -> Result<bool, SimError> {
        match ev {
            Ev::Arrival(idx) => {
                let user = self.tasks[idx.index()].user_id;
                let g = self.owner[&user];
                self.gms[g.index()].gm.enqueue(idx, user);
                self.kick_gm(g, now)?;
            }
            Ev::GmWake(g) => {
                self.gms[g.index()].clock.woke();
                self.gm_step(g, now)?;
            }
            Ev::ToGm(g, msg) => self.deliver_to_gm(g, msg, now)?,
            Ev::ToLm(l, req) => {
                self.lms[l.index()].inbox.push_back(LmWork::Request(req));
                self.lm_step(l, now)?;
            }
            Ev::LmDone(l) => {
                self.lms[l.index()].clock.woke();
                self.lm_execute(l, now)?;
                self.lm_step(l, now)?;
            }
            Ev::Heartbeat(l) => {
                if self.outstanding > 0 {
                    self.lms[l.index()].inbox.push_back(LmWork::Heartbeat);
                    self.lm_step(l, now)?;
                    self.queue.schedule(now + self.setup.heartbeat_period, Ev::Heartbeat(l))?;
                }
            }
            Ev::TaskStart { task, run } => {
                if self.state[task.index()].run == run && !self.state[task.index()].done {
                    self.ledgers[task.index()].start(now);
                    let d = self.tasks[task.index()].duration;
                    self.queue.schedule(crate::worker::start_task(now, d), Ev::TaskEnd { task, run })?;
                    return Ok(true);
                }
            }
            Ev::TaskEnd { task, run } => {
                if self.state[task.index()].run == run {
                    self.state[task.index()].finished_on_worker = true;
                    let lm = self.running_lm(task);
                    if let Some(lm) = lm {
                        self.queue.schedule(now + self.net(), Ev::Completion { lm, task, run })?;
                    }
                }
            }
            Ev::Completion { lm, task, run } => {
                let freed = self.lms[lm.index()].lm.complete(task, run);
                if let Some(rt) = freed {
                    self.check_nodes(lm, &[rt.node, rt.host]);
                    self.finish_task(task, lm, rt.host, rt.demand, now)?;
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    fn running_lm(&self, task: TaskIdx) -> Option<LmId> {
        self.lms.iter().find(|a| a.lm.running_task(task).is_some()).map(|a| a.lm.lm_id())
    }

    fn finish_task(&mut self, task: TaskIdx, lm: LmId, host: NodeId, demand: ResourceVector, now: f64) -> Result<(), SimError> {
        let st = &mut self.state[task.index()];
        if !st.done {
            st.done = true;
            self.outstanding -= 1;
        }
        let g = self.owner_of(task);
        self.queue.schedule(now + self.net(), Ev::ToGm(g, ToGm::TaskFinished { task, lm_id: lm, host, demand }))?;
        Ok(())
    }

    fn deliver_to_gm(&mut self, g: GmId, msg: ToGm, now: f64) -> Result<(), SimError> {
        match msg {
            ToGm::TaskFinished { task, lm_id, host, demand } => {
                let user = self.tasks[task.index()].user_id;
                self.gms[g.index()].gm.on_task_released(user, lm_id, host, &demand);
            }
            ToGm::TaskEvicted { task, lm_id, host, demand } => {
                let user = self.tasks[task.index()].user_id;
                let gm = &mut self.gms[g.index()].gm;
                gm.on_task_released(user, lm_id, host, &demand);
                gm.enqueue(task, user);
            }
            other => self.gms[g.index()].inbox.push_back(other),
        }
        self.kick_gm(g, now)
    }

    fn kick_gm(&mut self, g: GmId, now: f64) -> Result<(), SimError> {
        let a = &mut self.gms[g.index()];
        if a.clock.is_idle(now) {
            let at = a.clock.occupy(now, 0.0);
            self.queue.schedule(at, Ev::GmWake(g))?;
        }
        Ok(())
    }

    fn decision_cost(&self, e: &crate::global_master::Effort) -> f64 {
        let c = &self.setup.costs;
        c.gm_decision_s + e.word_ops as f64 * c.gm_word_op_s + e.node_checks as f64 * c.gm_node_check_s
    }

    /// One GM work item: an inbox message if any, else the next request.
    fn gm_step(&mut self, g: GmId, now: f64) -> Result<(), SimError> {
        if !self.gms[g.index()].clock.is_idle(now) {
            return Ok(());
        }
        if let Some(msg) = self.gms[g.index()].inbox.pop_front() {
            let cost = self.gm_handle_message(g, msg, now)?;
            let a = &mut self.gms[g.index()];
            let at = a.clock.occupy(now, cost);
            self.queue.schedule(at, Ev::GmWake(g))?;
            return Ok(());
        }
        let Some((_, idx)) = self.gms[g.index()].gm.next_request() else {
            return Ok(());
        };
        self.ledgers[idx.index()].queue_at_scheduler_until(now);
        let cost = self.gm_decide(g, idx, now)?;
        let a = &mut self.gms[g.index()];
        let at = a.clock.occupy(now, cost);
        self.queue.schedule(at, Ev::GmWake(g))?;
        Ok(())
    }

    fn gm_handle_message(&mut self, g: GmId, msg: ToGm, now: f64) -> Result<f64, SimError> {
        let resp = match msg {
            ToGm::Heartbeat(snap) => {
                let merged = self.gms[g.index()].gm.on_heartbeat(&snap);
                return Ok(self.setup.costs.gm_merge(merged.merged_nodes));
            }
            ToGm::Response(r) => r,
            ToGm::Preempted(p) => p.launch,
            ToGm::TaskFinished { .. } | ToGm::TaskEvicted { .. } => return Ok(0.0),
        };
        let idx = resp.task;
        let (outcome, merged) = self.gms[g.index()].gm.on_response(&resp);
        let merge_cost = self.setup.costs.gm_merge(merged.merged_nodes);
        let user = self.tasks[idx.index()].user_id;
        match outcome {
            ResponseOutcome::Placed | ResponseOutcome::Orphan => Ok(merge_cost),
            ResponseOutcome::Reschedule => {
                let l = &mut self.ledgers[idx.index()];
                l.queue_at_scheduler_until(now);
                l.process(merge_cost);
                self.counters.reschedules += 1;
                self.gms[g.index()].gm.reschedule(idx, user);
                Ok(merge_cost)
            }
            ResponseOutcome::Retry => {
                let l = &mut self.ledgers[idx.index()];
                l.queue_at_scheduler_until(now);
                l.process(merge_cost);
                self.gm_decide(g, idx, now + merge_cost).map(|c| c + merge_cost)
            }
        }
    }

    /// Runs the decision flow for `idx` at `at` and emits the resulting
    /// message. Returns the decision's processing cost.
    fn gm_decide(&mut self, g: GmId, idx: TaskIdx, at: f64) -> Result<f64, SimError> {
        let tasks = self.tasks;
        let task = &tasks[idx.index()];
        let policy = FairnessPolicy { enabled: self.setup.fairness, accounting: self.accounting, shares: &self.shares };
        let gm = &mut self.gms[g.index()].gm;
        let d = gm.process_request(idx, task, &policy, at).map_err(|e| SimError::Internal(e.to_string()))?;
        let cost = self.decision_cost(&d.effort);
        if d.effort.fairness_invoked {
            self.counters.preemption_checks += 1;
        }
        let ledger = &mut self.ledgers[idx.index()];
        ledger.process(cost);
        let send_at = at + cost;
        let (lm, msg) = match d.action {
            Action::Launch { lm, req } => {
                self.counters.launch_requests += 1;
                (lm, ToLm::Launch(req))
            }
            Action::Repartition { lm, req } => {
                self.counters.repartition_requests += 1;
                (lm, ToLm::Repartition(req))
            }
            Action::Preempt { lm, req } => {
                self.counters.preemption_attempts += 1;
                if let Some(log) = d.log {
                    self.pending_preempt.insert((g, lm, req.seq), self.preemptions.len());
                    self.preemptions.push(PreemptionEntry { decision: log, sent: true, killed: Vec::new() });
                }
                (lm, ToLm::Preempt(req))
            }
            Action::Reschedule => {
                if let Some(log) = d.log {
                    self.preemptions.push(PreemptionEntry { decision: log, sent: false, killed: Vec::new() });
                }
                self.counters.reschedules += 1;
                let user = self.tasks[idx.index()].user_id;
                self.gms[g.index()].gm.reschedule(idx, user);
                return Ok(cost);
            }
        };
        let net = self.net();
        let ledger = &mut self.ledgers[idx.index()];
        ledger.attempts += 1;
        ledger.communicate(net);
        self.queue.schedule(send_at + self.net(), Ev::ToLm(lm, msg))?;
        Ok(cost)
    }

    /// Nodes a response snapshot will cover if the request succeeds, or the
    /// whole LM if it will fail.
    fn expected_snapshot_nodes(&self, l: LmId, req: &ToLm) -> usize {
        let lm = &self.lms[l.index()].lm;
        let task = &self.tasks[req.task().index()];
        let (target, preempt) = match req {
            ToLm::Launch(r) => (r.node_id, false),
            ToLm::Repartition(r) => (r.source_node_id, false),
            ToLm::Preempt(_) => return lm.node_count(),
        };
        let Some(node) = lm.node(target) else { return lm.node_count() };
        let fits = constraint_superset(node.machine_constraints, task.constraints)
            && resource_geq(&node.available, &task.demand).unwrap_or(false)
            && !(matches!(req, ToLm::Repartition(_)) && node.is_logical);
        if !fits || preempt {
            return lm.node_count();
        }
        let own = req.gm_id().0;
        let mut n = lm.partitions()[node.partition_id.slot as usize].len();
        if node.partition_id.slot != own {
            n += lm.partitions()[own as usize].len();
        }
        n
    }

    fn lm_step(&mut self, l: LmId, now: f64) -> Result<(), SimError> {
        if !self.lms[l.index()].clock.is_idle(now) {
            return Ok(());
        }
        let Some(work) = self.lms[l.index()].inbox.pop_front() else {
            return Ok(());
        };
        let cost = match &work {
            LmWork::Heartbeat => self.setup.costs.lm_snapshot(self.lms[l.index()].lm.node_count()),
            LmWork::Request(req) => {
                let nodes = self.expected_snapshot_nodes(l, req);
                let cost = self.setup.costs.lm_request_s + self.setup.costs.lm_snapshot(nodes);
                let ledger = &mut self.ledgers[req.task().index()];
                ledger.queue_at_lm_until(now);
                ledger.process(cost);
                cost
            }
        };
        let a = &mut self.lms[l.index()];
        a.current = Some(work);
        let at = a.clock.occupy(now, cost);
        self.queue.schedule(at, Ev::LmDone(l))?;
        Ok(())
    }

    fn lm_execute(&mut self, l: LmId, now: f64) -> Result<(), SimError> {
        let Some(work) = self.lms[l.index()].current.take() else {
            return Ok(());
        };
        let req = match work {
            LmWork::Heartbeat => {
                self.counters.heartbeats += 1;
                let snap = Arc::new(self.lms[l.index()].lm.full_snapshot(now));
                for g in 0..self.gms.len() {
                    self.queue.schedule(now + self.net(), Ev::ToGm(GmId(g as u32), ToGm::Heartbeat(Arc::clone(&snap))))?;
                }
                return Ok(());
            }
            LmWork::Request(req) => req,
        };
        let idx = req.task();
        let gm = req.gm_id();
        let seq = req.seq();
        let tasks = self.tasks;
        let task = &tasks[idx.index()];
        let run = self.state[idx.index()].run + 1;
        let logical = NodeId(self.next_logical);

        let (placement, kind, statuses) = match &req {
            ToLm::Launch(r) => {
                (self.lms[l.index()].lm.validate_and_launch(r, task, run, now), RequestKind::Launch, None)
            }
            ToLm::Repartition(r) => {
                (self.lms[l.index()].lm.repartition(r, task, logical, run, now), RequestKind::Repartition, None)
            }
            ToLm::Preempt(r) => {
                let out = self.lms[l.index()].lm.verify_and_preempt(r, task, logical, run, now);
                let mut touched: Vec<NodeId> = vec![r.host];
                for (victim, rt) in &out.killed {
                    touched.push(rt.node);
                    self.evict(*victim, l, rt.host, rt.demand, now)?;
                }
                let killed: Vec<TaskIdx> = out.killed.iter().map(|(v, _)| *v).collect();
                let stale = out.statuses.iter().filter(|(_, s)| *s == VictimStatus::Stale).count();
                self.counters.preemptions += killed.len() as u64;
                self.counters.stale_victims += stale as u64;
                self.ledgers[idx.index()].preemptions_caused += killed.len() as u32;
                if let Some(i) = self.pending_preempt.remove(&(gm, l, seq)) {
                    self.preemptions[i].killed = killed;
                }
                self.check_nodes(l, &touched);
                (out.placement, RequestKind::Preempt, Some(out.statuses))
            }
        };
        let lm = &mut self.lms[l.index()].lm;
        lm.ack(gm, seq);

        let ok = placement.is_ok();
        let snapshot = match &placement {
            Ok(p) if kind != RequestKind::Preempt => lm.piggyback(&p.touched_slots, now),
            _ => lm.full_snapshot(now),
        };
        if let Ok(p) = &placement {
            self.placed(l, idx, run, p, now)?;
        } else {
            self.counters.inconsistency_failures += 1;
            let net = self.net();
            self.ledgers[idx.index()].communicate(net);
        }
        let launch = LaunchResponse { ok, kind, gm_id: gm, lm_id: l, seq, task: idx, piggyback: Arc::new(snapshot) };
        let msg = match statuses {
            Some(statuses) => ToGm::Preempted(PreemptResponse { statuses, launch }),
            None => ToGm::Response(launch),
        };
        self.queue.schedule(now + self.net(), Ev::ToGm(gm, msg))?;
        Ok(())
    }

    fn placed(&mut self, l: LmId, idx: TaskIdx, run: u32, p: &Placement, now: f64) -> Result<(), SimError> {
        self.audit.launch(idx, &p.audit);
        self.check_nodes(l, &[p.node, p.host]);
        if p.repartitioned {
            self.next_logical += 1;
            self.counters.repartitions += 1;
            self.ledgers[idx.index()].repartitioned = true;
            self.check_structure();
        }
        self.state[idx.index()].run = run;
        self.state[idx.index()].finished_on_worker = false;
        let hop = self.launch_delay();
        self.ledgers[idx.index()].communicate(hop);
        self.queue.schedule(now + self.launch_delay(), Ev::TaskStart { task: idx, run })?;
        Ok(())
    }

    /// A victim was killed at `l`. If its work had already finished on the
    /// worker it counts as complete; otherwise it goes back to its queue.
    fn evict(&mut self, victim: TaskIdx, l: LmId, host: NodeId, demand: ResourceVector, now: f64) -> Result<(), SimError> {
        let st = self.state[victim.index()];
        self.state[victim.index()].run += 1;
        if st.finished_on_worker {
            return self.finish_task(victim, l, host, demand, now);
        }
        let net = self.net();
        let ledger = &mut self.ledgers[victim.index()];
        ledger.times_preempted += 1;
        ledger.cancel_in_flight(now);
        ledger.communicate(net);
        let g = self.owner_of(victim);
        self.queue.schedule(now + self.net(), Ev::ToGm(g, ToGm::TaskEvicted { task: victim, lm_id: l, host, demand }))?;
        Ok(())
    }

    fn check_nodes(&mut self, l: LmId, nodes: &[NodeId]) {
        let lm = &self.lms[l.index()].lm;
        for &n in nodes {
            if lm.node(n).is_none() {
                continue;
            }
            self.audit.node_checks += 1;
            if let Err(e) = lm.check_conservation(n) {
                self.audit.conservation.push(e);
            }
        }
    }

    /// Every LM holds one partition per GM; every GM owns one partition per LM.
    fn check_structure(&mut self) {
        let gms = self.setup.gm_count;
        for a in &self.lms {
            let parts = a.lm.partitions();
            if parts.len() != gms {
                self.audit.structure.push(format!("{} holds {} partitions, expected {gms}", a.lm.lm_id(), parts.len()));
            }
            for (s, p) in parts.iter().enumerate() {
                if p.partition_id.slot as usize != s || p.partition_id.lm != a.lm.lm_id() {
                    self.audit.structure.push(format!("{} re-homed to slot {s}", p.partition_id));
                }
            }
        }
        for a in &self.gms {
            let internal = a.gm.internal_partitions();
            let per_lm: Vec<u32> = internal.iter().map(|p| p.lm.0).collect();
            let expected: Vec<u32> = (0..self.lms.len() as u32).collect();
            if per_lm != expected || internal.iter().any(|p| p.owner() != a.gm.gm_id()) {
                self.audit.structure.push(format!("{} internal set {internal:?}", a.gm.gm_id()));
            }
        }
    }
}
