//! The Global Master: schedules from a possibly stale copy of every LM's
//! state and never mutates authoritative state itself.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::fairness::{
    get_preempt_tasks, select_victims, HostCandidate, PreemptDecision, PreemptionDecisionLog, QueueSet,
    ShareAccounting, UserStanding,
};
use crate::messages::{
    LaunchRequest, LaunchResponse, PreemptRequest, RepartitionRequest, RequestSeq, RunningInfo, StateSnapshot,
};
use crate::model::{
    resource_geq, GmId, LmId, ModelError, NodeId, PartitionId, ResourceVector, TaskIdx, TaskRequest, UserId,
};
use crate::partition::Partition;

/// Default number of back-to-back LM rejections before a request is
/// rescheduled instead of retried.
pub const DEFAULT_MAX_CONSECUTIVE_FAILURES: u32 = 5;

/// Result of scanning one partition with the bitmap matcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchOutcome {
    pub ordinal: Option<usize>,
    pub word_ops: usize,
    pub node_checks: usize,
}

/// AND the task's constraint vectors together, then return the lowest
/// candidate ordinal whose viewed availability covers the demand.
pub fn match_task(task: &TaskRequest, partition: &Partition) -> Result<MatchOutcome, ModelError> {
    let (candidates, word_ops) = partition.constraint_bitmaps.candidates(task.constraints)?;
    let mut out = MatchOutcome { ordinal: None, word_ops, node_checks: 0 };
    for ord in candidates.iter_ones() {
        out.node_checks += 1;
        if resource_geq(&partition.nodes[ord].available, &task.demand)? {
            out.ordinal = Some(ord);
            break;
        }
    }
    Ok(out)
}

/// One LM as a GM last heard of it.
#[derive(Debug, Clone)]
pub struct LmView {
    pub partitions: Vec<Arc<Partition>>,
    pub partition_time: Vec<f64>,
    pub last_update_time: f64,
    full_time: f64,
    pub user_consumed: BTreeMap<UserId, ResourceVector>,
    pub running: Arc<Vec<RunningInfo>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergeOutcome {
    pub replaced_slots: Vec<u32>,
    pub merged_nodes: usize,
}

impl MergeOutcome {
    pub fn discarded(&self) -> bool {
        self.replaced_slots.is_empty()
    }
}

/// A GM's global, eventually consistent picture of the data center.
#[derive(Debug, Clone)]
pub struct ClusterView {
    lms: Vec<LmView>,
    /// Physical node -> (slot, ordinal); physical ordinals never move.
    hosts: BTreeMap<(LmId, NodeId), (u32, usize)>,
}

impl ClusterView {
    /// Seeds the view from one full snapshot per LM, indexed by LM id.
    pub fn new(initial: &[StateSnapshot]) -> Self {
        let mut hosts = BTreeMap::new();
        let lms = initial
            .iter()
            .enumerate()
            .map(|(i, s)| {
                assert_eq!(s.lm_id.index(), i, "snapshots must be ordered by LM id");
                for p in &s.partitions {
                    for (ord, n) in p.nodes.iter().enumerate() {
                        if !n.is_logical {
                            hosts.insert((s.lm_id, n.node_id), (p.partition_id.slot, ord));
                        }
                    }
                }
                LmView {
                    partitions: s.partitions.clone(),
                    partition_time: vec![s.timestamp; s.partitions.len()],
                    last_update_time: s.timestamp,
                    full_time: s.timestamp,
                    user_consumed: s.user_consumed.iter().copied().collect(),
                    running: Arc::clone(&s.running),
                }
            })
            .collect();
        Self { lms, hosts }
    }

    pub fn lm_count(&self) -> usize {
        self.lms.len()
    }

    pub fn lm(&self, lm: LmId) -> &LmView {
        &self.lms[lm.index()]
    }

    pub fn partition(&self, pid: PartitionId) -> &Partition {
        &self.lms[pid.lm.index()].partitions[pid.slot as usize]
    }

    fn partition_mut(&mut self, pid: PartitionId) -> &mut Partition {
        Arc::make_mut(&mut self.lms[pid.lm.index()].partitions[pid.slot as usize])
    }

    pub fn last_update_time(&self, lm: LmId) -> f64 {
        self.lms[lm.index()].last_update_time
    }

    /// Merges a snapshot partition by partition; anything older than what
    /// the view already holds is dropped.
    pub fn apply_snapshot(&mut self, snap: &StateSnapshot) -> MergeOutcome {
        let view = &mut self.lms[snap.lm_id.index()];
        let mut out = MergeOutcome::default();
        for p in &snap.partitions {
            let slot = p.partition_id.slot as usize;
            if snap.timestamp >= view.partition_time[slot] {
                view.partitions[slot] = Arc::clone(p);
                view.partition_time[slot] = snap.timestamp;
                out.replaced_slots.push(slot as u32);
                out.merged_nodes += p.len();
            }
        }
        if snap.full && snap.timestamp >= view.full_time {
            view.full_time = snap.timestamp;
            view.user_consumed = snap.user_consumed.iter().copied().collect();
            view.running = Arc::clone(&snap.running);
        }
        if !out.discarded() {
            view.last_update_time = view.last_update_time.max(snap.timestamp);
        }
        out
    }

    fn host_mut(&mut self, lm: LmId, host: NodeId) -> Option<&mut crate::model::WorkerNode> {
        let &(slot, ord) = self.hosts.get(&(lm, host))?;
        self.partition_mut(PartitionId { lm, slot }).nodes.get_mut(ord)
    }

    /// Resources returned on `host`, capped at its capacity.
    pub fn credit_host(&mut self, lm: LmId, host: NodeId, amount: &ResourceVector) {
        if let Some(n) = self.host_mut(lm, host) {
            n.available = n.available.saturating_add(amount).min(&n.capacity);
        }
    }

    pub fn debit(&mut self, pid: PartitionId, ordinal: usize, amount: &ResourceVector) {
        if let Some(n) = self.partition_mut(pid).nodes.get_mut(ordinal) {
            n.available = n.available.saturating_sub(amount);
        }
    }

    /// Sum of a user's usage over every LM's last full snapshot.
    pub fn viewed_consumed(&self, user: UserId, dims: usize) -> ResourceVector {
        self.lms
            .iter()
            .filter_map(|l| l.user_consumed.get(&user))
            .fold(ResourceVector::zeros(dims).expect("dims"), |acc, r| acc.saturating_add(r))
    }
}

/// A request sent to an LM and not yet answered.
#[derive(Debug, Clone, Copy, PartialEq)]
struct InFlight {
    task: TaskIdx,
    user: UserId,
    demand: ResourceVector,
    /// Where the view was optimistically debited, if anywhere.
    debit: Option<(u32, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Launch { lm: LmId, req: LaunchRequest },
    Repartition { lm: LmId, req: RepartitionRequest },
    Preempt { lm: LmId, req: PreemptRequest },
    /// Back to the tail of the user's queue.
    Reschedule,
}

/// Work done while deciding, for the processing-cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Effort {
    pub word_ops: usize,
    pub node_checks: usize,
    pub partitions_scanned: usize,
    pub fairness_invoked: bool,
}

impl Effort {
    fn absorb(&mut self, m: &MatchOutcome) {
        self.word_ops += m.word_ops;
        self.node_checks += m.node_checks;
        self.partitions_scanned += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub effort: Effort,
    pub log: Option<PreemptionDecisionLog>,
}

/// Fair-sharing inputs for a decision.
#[derive(Debug, Clone, Copy)]
pub struct FairnessPolicy<'a> {
    pub enabled: bool,
    pub accounting: ShareAccounting,
    /// Every user's share fraction.
    pub shares: &'a BTreeMap<UserId, f64>,
}

/// What a GM should do after an LM answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseOutcome {
    Placed,
    /// Rejected; run the decision flow again right away.
    Retry,
    /// Rejected too many times in a row; requeue at the tail.
    Reschedule,
    /// No matching request in flight.
    Orphan,
}

#[derive(Debug)]
pub struct GlobalMaster {
    gm_id: GmId,
    pub view: ClusterView,
    internal_partitions: Vec<PartitionId>,
    rr_internal_cursor: usize,
    rr_external_lm_cursor: usize,
    pub queues: QueueSet,
    in_flight: BTreeMap<(LmId, RequestSeq), InFlight>,
    next_seq: Vec<RequestSeq>,
    view_version: u64,
    consecutive_failures: BTreeMap<TaskIdx, u32>,
    claimed_victims: BTreeMap<TaskIdx, LmId>,
    pub max_consecutive_failures: u32,
    dims: usize,
}

impl GlobalMaster {
    pub fn new(gm_id: GmId, view: ClusterView, queues: QueueSet, dims: usize) -> Self {
        let lm_count = view.lm_count();
        let internal_partitions = (0..lm_count).map(|lm| PartitionId { lm: LmId(lm as u32), slot: gm_id.0 }).collect();
        Self {
            gm_id,
            view,
            internal_partitions,
            rr_internal_cursor: 0,
            rr_external_lm_cursor: 0,
            queues,
            in_flight: BTreeMap::new(),
            next_seq: vec![0; lm_count],
            view_version: 0,
            consecutive_failures: BTreeMap::new(),
            claimed_victims: BTreeMap::new(),
            max_consecutive_failures: DEFAULT_MAX_CONSECUTIVE_FAILURES,
            dims,
        }
    }

    pub fn gm_id(&self) -> GmId {
        self.gm_id
    }

    /// `GM_cluster_j`: this GM's partition at every LM.
    pub fn internal_partitions(&self) -> &[PartitionId] {
        &self.internal_partitions
    }

    pub fn rr_internal_cursor(&self) -> usize {
        self.rr_internal_cursor
    }

    pub fn view_version(&self) -> u64 {
        self.view_version
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    fn bump(&mut self) {
        self.view_version += 1;
    }

    fn issue(&mut self, lm: LmId, flight: InFlight) -> RequestSeq {
        let seq = &mut self.next_seq[lm.index()];
        *seq += 1;
        let seq = *seq;
        if let Some((slot, ord)) = flight.debit {
            self.view.debit(PartitionId { lm, slot }, ord, &flight.demand);
        }
        if let Some(q) = self.queues.get_mut(flight.user) {
            q.add_consumed(&flight.demand);
        }
        self.in_flight.insert((lm, seq), flight);
        seq
    }

    /// Runs the full decision flow for one request: internal partitions
    /// round-robin, then external partitions with LMs round-robin, then the
    /// fairness check, else reschedule.
    pub fn process_request(
        &mut self,
        idx: TaskIdx,
        task: &TaskRequest,
        policy: &FairnessPolicy<'_>,
        now: f64,
    ) -> Result<Decision, ModelError> {
        let mut effort = Effort::default();

        let n = self.internal_partitions.len();
        if n > 0 {
            let start = self.rr_internal_cursor;
            self.rr_internal_cursor = (start + 1) % n;
            for k in 0..n {
                let pid = self.internal_partitions[(start + k) % n];
                let part = self.view.partition(pid);
                let m = match_task(task, part)?;
                effort.absorb(&m);
                if let Some(ord) = m.ordinal {
                    let node_id = part.nodes[ord].node_id;
                    let seq = self.issue(
                        pid.lm,
                        InFlight { task: idx, user: task.user_id, demand: task.demand, debit: Some((pid.slot, ord)) },
                    );
                    let req = LaunchRequest {
                        gm_id: self.gm_id,
                        seq,
                        task: idx,
                        node_id,
                        demand: task.demand,
                        constraints: task.constraints,
                    };
                    return Ok(Decision { action: Action::Launch { lm: pid.lm, req }, effort, log: None });
                }
            }
        }

        let lms = self.view.lm_count();
        if lms > 0 {
            let start = self.rr_external_lm_cursor;
            self.rr_external_lm_cursor = (start + 1) % lms;
            for k in 0..lms {
                let lm = LmId(((start + k) % lms) as u32);
                let slots = self.view.lm(lm).partitions.len() as u32;
                for slot in (0..slots).filter(|&s| s != self.gm_id.0) {
                    let pid = PartitionId { lm, slot };
                    let part = self.view.partition(pid);
                    let m = match_task(task, part)?;
                    effort.absorb(&m);
                    let Some(ord) = m.ordinal else { continue };
                    if part.nodes[ord].is_logical {
                        continue;
                    }
                    let source = part.nodes[ord].node_id;
                    let seq = self.issue(
                        lm,
                        InFlight { task: idx, user: task.user_id, demand: task.demand, debit: Some((slot, ord)) },
                    );
                    let req = RepartitionRequest {
                        gm_id: self.gm_id,
                        seq,
                        task: idx,
                        source_node_id: source,
                        demand: task.demand,
                        constraints: task.constraints,
                    };
                    return Ok(Decision { action: Action::Repartition { lm, req }, effort, log: None });
                }
            }
        }

        if policy.enabled {
            effort.fairness_invoked = true;
            return self.fairness(idx, task, policy, now, effort);
        }
        Ok(Decision { action: Action::Reschedule, effort, log: None })
    }

    fn standing(&self, user: UserId, policy: &FairnessPolicy<'_>) -> UserStanding {
        let consumed = match self.queues.get(user) {
            Some(q) => q.consumed,
            None => self.view.viewed_consumed(user, self.dims),
        };
        let share_fraction = policy.shares.get(&user).copied().unwrap_or(0.0);
        UserStanding { user, consumed, share_fraction, ratio: policy.accounting.ratio(&consumed, share_fraction) }
    }

    fn host_candidates(&self, task: &TaskRequest, effort: &mut Effort) -> Result<Vec<HostCandidate>, ModelError> {
        let mut hosts = Vec::new();
        for lm in 0..self.view.lm_count() {
            let lm = LmId(lm as u32);
            for part in &self.view.lm(lm).partitions {
                let (cand, ops) = part.constraint_bitmaps.candidates(task.constraints)?;
                effort.word_ops += ops;
                for ord in cand.iter_ones() {
                    let n = &part.nodes[ord];
                    effort.node_checks += 1;
                    if !n.is_logical {
                        hosts.push(HostCandidate { lm, host: n.node_id, available: n.available });
                    }
                }
            }
        }
        Ok(hosts)
    }

    fn fairness(
        &mut self,
        idx: TaskIdx,
        task: &TaskRequest,
        policy: &FairnessPolicy<'_>,
        now: f64,
        mut effort: Effort,
    ) -> Result<Decision, ModelError> {
        let requester = self.standing(task.user_id, policy);
        let others: Vec<UserStanding> = policy
            .shares
            .keys()
            .filter(|&&u| u != task.user_id)
            .map(|&u| self.standing(u, policy))
            .collect();

        let mut hosts: Option<Vec<HostCandidate>> = None;
        let mut scan_err = None;
        let (decision, skipped) = {
            let view = &self.view;
            let claimed = &self.claimed_victims;
            let hosts = &mut hosts;
            let effort = &mut effort;
            let scan_err = &mut scan_err;
            let this = &*self;
            get_preempt_tasks(&policy.accounting, &requester, &others, |user| {
                if hosts.is_none() {
                    match this.host_candidates(task, effort) {
                        Ok(h) => *hosts = Some(h),
                        Err(e) => {
                            *scan_err = Some(e);
                            return None;
                        }
                    }
                }
                let running = (0..view.lm_count()).flat_map(|lm| {
                    let lm = LmId(lm as u32);
                    view.lm(lm).running.iter().map(move |r| (lm, r))
                });
                let running = running.filter(|(_, r)| !claimed.contains_key(&r.task));
                select_victims(user, &task.demand, hosts.as_deref().unwrap_or(&[]), running)
            })
        };
        if let Some(e) = scan_err {
            return Err(e);
        }

        let mut log = PreemptionDecisionLog {
            time: now,
            gm: self.gm_id,
            task: idx,
            requester: task.user_id,
            requester_consumed: requester.consumed,
            requester_share: requester.share_fraction,
            standings: others,
            skipped,
            chosen: None,
            victims: Vec::new(),
            failure: false,
        };
        let action = match decision {
            PreemptDecision::Failure => {
                log.failure = true;
                Action::Reschedule
            }
            PreemptDecision::Empty => Action::Reschedule,
            PreemptDecision::Victims(set) => {
                log.chosen = Some(set.user);
                log.victims = set.victims.clone();
                for &v in &set.victims {
                    self.claimed_victims.insert(v, set.lm);
                }
                if let Some(&(slot, ord)) = self.view.hosts.get(&(set.lm, set.host)) {
                    let pid = PartitionId { lm: set.lm, slot };
                    if let Some(n) = self.view.partition_mut(pid).nodes.get_mut(ord) {
                        n.available = n.available.saturating_add(&set.freed).min(&n.capacity);
                    }
                }
                let debit = self.view.hosts.get(&(set.lm, set.host)).copied();
                let seq = self.issue(set.lm, InFlight { task: idx, user: task.user_id, demand: task.demand, debit });
                let req = PreemptRequest {
                    gm_id: self.gm_id,
                    seq,
                    task: idx,
                    host: set.host,
                    victims: set.victims,
                    demand: task.demand,
                    constraints: task.constraints,
                };
                Action::Preempt { lm: set.lm, req }
            }
        };
        Ok(Decision { action, effort, log: Some(log) })
    }

    /// Parks a request until the view changes.
    pub fn reschedule(&mut self, idx: TaskIdx, user: UserId) {
        self.consecutive_failures.remove(&idx);
        let version = self.view_version;
        if let Some(q) = self.queues.get_mut(user) {
            q.park(idx, version);
        }
    }

    /// Enqueues a new (or evicted) request at its queue's tail.
    pub fn enqueue(&mut self, idx: TaskIdx, user: UserId) -> bool {
        match self.queues.get_mut(user) {
            Some(q) => {
                q.push(idx);
                true
            }
            None => false,
        }
    }

    pub fn next_request(&mut self) -> Option<(UserId, TaskIdx)> {
        self.queues.next_request(self.view_version)
    }

    /// Merges a snapshot, then re-debits requests to that LM the snapshot
    /// does not yet reflect. Returns the number of nodes merged.
    pub fn merge(&mut self, snap: &StateSnapshot) -> MergeOutcome {
        let out = self.view.apply_snapshot(snap);
        if snap.full && !out.discarded() {
            self.claimed_victims.retain(|_, lm| *lm != snap.lm_id);
        }
        let processed = snap.processed_seq.get(self.gm_id.index()).copied().unwrap_or(0);
        let lm = snap.lm_id;
        let redo: Vec<(u32, usize, ResourceVector)> = self
            .in_flight
            .range((lm, processed + 1)..=(lm, RequestSeq::MAX))
            .filter_map(|(_, f)| f.debit.map(|(slot, ord)| (slot, ord, f.demand)))
            .filter(|(slot, _, _)| out.replaced_slots.contains(slot))
            .collect();
        for (slot, ord, demand) in redo {
            self.view.debit(PartitionId { lm, slot }, ord, &demand);
        }
        self.bump();
        out
    }

    /// Handles the LM's answer to a launch, repartition or preemption.
    pub fn on_response(&mut self, resp: &LaunchResponse) -> (ResponseOutcome, MergeOutcome) {
        let merged = self.merge(&resp.piggyback);
        let Some(flight) = self.in_flight.remove(&(resp.lm_id, resp.seq)) else {
            return (ResponseOutcome::Orphan, merged);
        };
        if resp.ok {
            self.consecutive_failures.remove(&flight.task);
            return (ResponseOutcome::Placed, merged);
        }
        if let Some(q) = self.queues.get_mut(flight.user) {
            q.sub_consumed(&flight.demand);
        }
        let fails = self.consecutive_failures.entry(flight.task).or_insert(0);
        *fails += 1;
        if *fails >= self.max_consecutive_failures {
            self.consecutive_failures.remove(&flight.task);
            (ResponseOutcome::Reschedule, merged)
        } else {
            (ResponseOutcome::Retry, merged)
        }
    }

    pub fn on_heartbeat(&mut self, snap: &StateSnapshot) -> MergeOutcome {
        self.merge(snap)
    }

    /// One of this GM's tasks released `demand` on `host`.
    pub fn on_task_released(&mut self, user: UserId, lm: LmId, host: NodeId, demand: &ResourceVector) {
        if let Some(q) = self.queues.get_mut(user) {
            q.sub_consumed(demand);
        }
        self.view.credit_host(lm, host, demand);
        self.bump();
    }

    pub fn pending_requests(&self) -> usize {
        self.queues.total_len()
    }
}
