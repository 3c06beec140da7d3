//! The Local Master: sole authority over one cluster's true state.
//!
//! GMs only ever see copies of this state. Every placement a GM asks for is
//! re-checked here against the current availability before anything is
//! deducted.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::messages::{
    LaunchRequest, PreemptRequest, RepartitionRequest, RequestSeq, RunningInfo, StateSnapshot, VictimStatus,
};
use crate::model::{
    constraint_superset, resource_geq, ConstraintSet, GmId, LmId, ModelError, NodeId, PartitionId, ResourceVector,
    TaskIdx, TaskRequest, UserId, WorkerNode,
};
use crate::partition::Partition;

/// Default heartbeat period in seconds.
pub const DEFAULT_HEARTBEAT_PERIOD_S: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningTask {
    pub node: NodeId,
    pub host: NodeId,
    pub demand: ResourceVector,
    pub user: UserId,
    pub launched_at: f64,
    /// Launch generation, so stale start/finish events can be told apart
    /// from the current run after a preemption.
    pub run: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    UnknownNode,
    ConstraintMismatch,
    InsufficientResources,
    /// Repartitioning out of a logical node is not allowed.
    LogicalSource,
}

/// Pre-state of a launch, kept so an auditor can re-check Eqs. (5)/(6).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaunchAudit {
    pub node: NodeId,
    pub machine_constraints: ConstraintSet,
    pub task_constraints: ConstraintSet,
    pub available_before: ResourceVector,
    pub demand: ResourceVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub node: NodeId,
    pub host: NodeId,
    /// Slots whose partitions changed.
    pub touched_slots: Vec<u32>,
    pub repartitioned: bool,
    pub audit: LaunchAudit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreemptOutcome {
    pub statuses: Vec<(TaskIdx, VictimStatus)>,
    pub killed: Vec<(TaskIdx, RunningTask)>,
    pub placement: Result<Placement, Rejection>,
}

#[derive(Debug)]
pub struct LocalMaster {
    lm_id: LmId,
    constraint_count: usize,
    partitions: Vec<Arc<Partition>>,
    location: BTreeMap<NodeId, (u32, usize)>,
    running: BTreeMap<TaskIdx, RunningTask>,
    node_tasks: BTreeMap<NodeId, Vec<TaskIdx>>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    user_consumed: BTreeMap<UserId, ResourceVector>,
    processed_seq: Vec<RequestSeq>,
    pub heartbeat_period: f64,
}

impl LocalMaster {
    /// Builds an LM over `nodes`, dealing them round-robin into one partition
    /// per GM so partition sizes differ by at most one.
    pub fn new(
        lm_id: LmId,
        gm_count: usize,
        constraint_count: usize,
        nodes: impl IntoIterator<Item = (NodeId, ResourceVector, ConstraintSet)>,
    ) -> Result<Self, ModelError> {
        let mut partitions: Vec<Partition> = (0..gm_count)
            .map(|slot| Partition::new(PartitionId { lm: lm_id, slot: slot as u32 }, constraint_count))
            .collect::<Result<_, _>>()?;
        let mut location = BTreeMap::new();
        for (k, (node_id, capacity, machine)) in nodes.into_iter().enumerate() {
            if gm_count == 0 {
                break;
            }
            let slot = k % gm_count;
            let pid = partitions[slot].partition_id;
            let ord = partitions[slot].push(WorkerNode::physical(node_id, pid, capacity, machine));
            location.insert(node_id, (slot as u32, ord));
        }
        Ok(Self {
            lm_id,
            constraint_count,
            partitions: partitions.into_iter().map(Arc::new).collect(),
            location,
            running: BTreeMap::new(),
            node_tasks: BTreeMap::new(),
            children: BTreeMap::new(),
            user_consumed: BTreeMap::new(),
            processed_seq: vec![0; gm_count],
            heartbeat_period: DEFAULT_HEARTBEAT_PERIOD_S,
        })
    }

    pub fn lm_id(&self) -> LmId {
        self.lm_id
    }

    pub fn gm_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.constraint_count
    }

    pub fn partitions(&self) -> &[Arc<Partition>] {
        &self.partitions
    }

    pub fn node_count(&self) -> usize {
        self.partitions.iter().map(|p| p.len()).sum()
    }

    pub fn node(&self, id: NodeId) -> Option<&WorkerNode> {
        let &(slot, ord) = self.location.get(&id)?;
        self.partitions[slot as usize].nodes.get(ord)
    }

    pub fn running(&self) -> &BTreeMap<TaskIdx, RunningTask> {
        &self.running
    }

    pub fn running_task(&self, task: TaskIdx) -> Option<&RunningTask> {
        self.running.get(&task)
    }

    pub fn user_consumed(&self, user: UserId) -> Option<ResourceVector> {
        self.user_consumed.get(&user).copied()
    }

    pub fn logical_children(&self, parent: NodeId) -> &[NodeId] {
        self.children.get(&parent).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn ack(&mut self, gm: GmId, seq: RequestSeq) {
        let slot = &mut self.processed_seq[gm.index()];
        *slot = (*slot).max(seq);
    }

    fn node_mut(&mut self, id: NodeId) -> Option<&mut WorkerNode> {
        let &(slot, ord) = self.location.get(&id)?;
        Arc::make_mut(&mut self.partitions[slot as usize]).nodes.get_mut(ord)
    }

    fn check_fit(node: &WorkerNode, demand: &ResourceVector, constraints: ConstraintSet) -> Result<(), Rejection> {
        if !constraint_superset(node.machine_constraints, constraints) {
            return Err(Rejection::ConstraintMismatch);
        }
        match resource_geq(&node.available, demand) {
            Ok(true) => Ok(()),
            _ => Err(Rejection::InsufficientResources),
        }
    }

    fn record_running(&mut self, task: TaskIdx, rt: RunningTask) {
        self.node_tasks.entry(rt.node).or_default().push(task);
        let used = self.user_consumed.entry(rt.user).or_insert_with(|| ResourceVector::zeros(rt.demand.dims()).expect("dims"));
        *used = used.saturating_add(&rt.demand);
        self.running.insert(task, rt);
    }

    /// Places `task` on `node_id` if the true state allows it.
    pub fn validate_and_launch(
        &mut self,
        req: &LaunchRequest,
        task: &TaskRequest,
        run: u32,
        now: f64,
    ) -> Result<Placement, Rejection> {
        let node = *self.node(req.node_id).ok_or(Rejection::UnknownNode)?;
        Self::check_fit(&node, &task.demand, task.constraints)?;
        let audit = LaunchAudit {
            node: node.node_id,
            machine_constraints: node.machine_constraints,
            task_constraints: task.constraints,
            available_before: node.available,
            demand: task.demand,
        };
        let n = self.node_mut(req.node_id).expect("located");
        n.available = n.available.checked_sub(&task.demand).expect("fit checked");
        let host = node.parent_node.unwrap_or(node.node_id);
        self.record_running(
            req.task,
            RunningTask { node: node.node_id, host, demand: task.demand, user: task.user_id, launched_at: now, run },
        );
        Ok(Placement {
            node: node.node_id,
            host,
            touched_slots: vec![node.partition_id.slot],
            repartitioned: false,
            audit,
        })
    }

    /// Carves a logical node `N' = (R, M)` out of `source` into the
    /// requester's partition at this LM and launches `task` on it.
    pub fn repartition(
        &mut self,
        req: &RepartitionRequest,
        task: &TaskRequest,
        logical_id: NodeId,
        run: u32,
        now: f64,
    ) -> Result<Placement, Rejection> {
        let source = *self.node(req.source_node_id).ok_or(Rejection::UnknownNode)?;
        if source.is_logical {
            return Err(Rejection::LogicalSource);
        }
        Self::check_fit(&source, &task.demand, task.constraints)?;
        let src = self.node_mut(source.node_id).expect("located");
        src.available = src.available.checked_sub(&task.demand).expect("fit checked");

        let slot = req.gm_id.0;
        let pid = PartitionId { lm: self.lm_id, slot };
        let logical = WorkerNode {
            node_id: logical_id,
            lm_id: self.lm_id,
            partition_id: pid,
            capacity: task.demand,
            available: task.demand,
            machine_constraints: source.machine_constraints,
            is_logical: true,
            parent_node: Some(source.node_id),
        };
        let ord = Arc::make_mut(&mut self.partitions[slot as usize]).push(logical);
        self.location.insert(logical_id, (slot, ord));
        self.children.entry(source.node_id).or_default().push(logical_id);

        let audit = LaunchAudit {
            node: source.node_id,
            machine_constraints: source.machine_constraints,
            task_constraints: task.constraints,
            available_before: source.available,
            demand: task.demand,
        };
        let n = self.node_mut(logical_id).expect("just inserted");
        n.available = n.available.checked_sub(&task.demand).expect("exact fit");
        self.record_running(
            req.task,
            RunningTask {
                node: logical_id,
                host: source.node_id,
                demand: task.demand,
                user: task.user_id,
                launched_at: now,
                run,
            },
        );
        let mut touched = vec![source.partition_id.slot, slot];
        touched.dedup();
        Ok(Placement { node: logical_id, host: source.node_id, touched_slots: touched, repartitioned: true, audit })
    }

    /// Launches directly if `node` is in `gm`'s partition, otherwise repartitions.
    #[allow(clippy::too_many_arguments)]
    pub fn place(
        &mut self,
        gm: GmId,
        seq: RequestSeq,
        task_idx: TaskIdx,
        task: &TaskRequest,
        node: NodeId,
        logical_id: NodeId,
        run: u32,
        now: f64,
    ) -> Result<Placement, Rejection> {
        let slot = self.node(node).ok_or(Rejection::UnknownNode)?.partition_id.slot;
        if slot == gm.0 {
            let req = LaunchRequest {
                gm_id: gm,
                seq,
                task: task_idx,
                node_id: node,
                demand: task.demand,
                constraints: task.constraints,
            };
            self.validate_and_launch(&req, task, run, now)
        } else {
            let req = RepartitionRequest {
                gm_id: gm,
                seq,
                task: task_idx,
                source_node_id: node,
                demand: task.demand,
                constraints: task.constraints,
            };
            self.repartition(&req, task, logical_id, run, now)
        }
    }

    /// Releases a task's resources. Destroys its logical node if it had one.
    fn release(&mut self, task: TaskIdx) -> Option<RunningTask> {
        let rt = self.running.remove(&task)?;
        if let Some(list) = self.node_tasks.get_mut(&rt.node) {
            list.retain(|&t| t != task);
            if list.is_empty() {
                self.node_tasks.remove(&rt.node);
            }
        }
        if let Some(used) = self.user_consumed.get_mut(&rt.user) {
            *used = used.saturating_sub(&rt.demand);
        }
        let node = *self.node(rt.node).expect("running task on known node");
        if node.is_logical {
            self.destroy_logical(node);
        } else {
            let n = self.node_mut(rt.node).expect("located");
            n.available = n.available.checked_add(&rt.demand).expect("no overflow");
        }
        Some(rt)
    }

    fn destroy_logical(&mut self, node: WorkerNode) {
        let (slot, ord) = self.location.remove(&node.node_id).expect("logical located");
        let part = Arc::make_mut(&mut self.partitions[slot as usize]);
        part.remove(ord);
        for (i, n) in part.nodes.iter().enumerate().skip(ord) {
            self.location.insert(n.node_id, (slot, i));
        }
        let parent = node.parent_node.expect("logical has parent");
        if let Some(kids) = self.children.get_mut(&parent) {
            kids.retain(|&k| k != node.node_id);
            if kids.is_empty() {
                self.children.remove(&parent);
            }
        }
        let p = self.node_mut(parent).expect("parent located");
        p.available = p.available.checked_add(&node.capacity).expect("no overflow");
    }

    /// Task finished on its worker. Ignores finishes from superseded runs.
    pub fn complete(&mut self, task: TaskIdx, run: u32) -> Option<RunningTask> {
        match self.running.get(&task) {
            Some(rt) if rt.run == run => self.release(task),
            _ => None,
        }
    }

    /// Kills every victim still running, then tries to place the requester
    /// on `req.host`.
    pub fn verify_and_preempt(
        &mut self,
        req: &PreemptRequest,
        task: &TaskRequest,
        logical_id: NodeId,
        run: u32,
        now: f64,
    ) -> PreemptOutcome {
        let mut statuses = Vec::with_capacity(req.victims.len());
        let mut killed = Vec::new();
        for &v in &req.victims {
            match self.release(v) {
                Some(rt) => {
                    statuses.push((v, VictimStatus::Verified));
                    killed.push((v, rt));
                }
                None => statuses.push((v, VictimStatus::Stale)),
            }
        }
        let placement = self.place(req.gm_id, req.seq, req.task, task, req.host, logical_id, run, now);
        PreemptOutcome { statuses, killed, placement }
    }

    fn snapshot_of(&self, parts: Vec<Arc<Partition>>, full: bool, now: f64) -> StateSnapshot {
        let (user_consumed, running) = if full {
            (
                self.user_consumed.iter().map(|(&u, &r)| (u, r)).collect(),
                Arc::new(
                    self.running
                        .iter()
                        .map(|(&task, rt)| RunningInfo {
                            task,
                            user: rt.user,
                            node: rt.node,
                            host: rt.host,
                            demand: rt.demand,
                            launched_at: rt.launched_at,
                        })
                        .collect(),
                ),
            )
        } else {
            (Vec::new(), Arc::new(Vec::new()))
        };
        StateSnapshot {
            lm_id: self.lm_id,
            timestamp: now,
            partitions: parts,
            full,
            user_consumed,
            running,
            processed_seq: self.processed_seq.clone(),
        }
    }

    /// Partial state: only the listed partitions.
    pub fn piggyback(&self, slots: &[u32], now: f64) -> StateSnapshot {
        let parts = slots.iter().map(|&s| Arc::clone(&self.partitions[s as usize])).collect();
        self.snapshot_of(parts, false, now)
    }

    /// Every partition, queue usage and the running-task table.
    pub fn full_snapshot(&self, now: f64) -> StateSnapshot {
        self.snapshot_of(self.partitions.clone(), true, now)
    }

    /// Checks `capacity = available + Σ tasks + Σ logical children` for one node.
    pub fn check_conservation(&self, id: NodeId) -> Result<(), String> {
        let node = self.node(id).ok_or_else(|| format!("{id} unknown at {}", self.lm_id))?;
        let dims = node.capacity.dims();
        let mut total = node.available;
        for t in self.node_tasks.get(&id).into_iter().flatten() {
            let rt = &self.running[t];
            total = total.checked_add(&rt.demand).map_err(|e| e.to_string())?;
        }
        for kid in self.logical_children(id) {
            let k = self.node(*kid).ok_or_else(|| format!("dangling logical child {kid}"))?;
            total = total.checked_add(&k.capacity).map_err(|e| e.to_string())?;
        }
        if total != node.capacity || total.dims() != dims {
            return Err(format!(
                "{id}@{}: capacity {} != available {} + placed = {}",
                self.lm_id, node.capacity, node.available, total
            ));
        }
        if node.is_logical {
            let tasks = self.node_tasks.get(&id).map_or(0, Vec::len);
            if tasks > 1 {
                return Err(format!("logical {id} hosts {tasks} tasks"));
            }
        }
        Ok(())
    }

    pub fn check_all(&self) -> Vec<String> {
        let mut errs: Vec<String> = self
            .location
            .keys()
            .filter_map(|&id| self.check_conservation(id).err())
            .collect();
        for p in &self.partitions {
            if !p.is_consistent() {
                errs.push(format!("{} bitmaps out of sync", p.partition_id));
            }
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JobId, TaskId};

    fn rv(v: &[u64]) -> ResourceVector {
        ResourceVector::new(v).unwrap()
    }

    fn task(demand: &[u64], constraints: &[usize]) -> TaskRequest {
        TaskRequest {
            task_id: TaskId(0),
            job_id: JobId(0),
            user_id: UserId(0),
            demand: rv(demand),
            constraints: ConstraintSet::new(constraints, 21).unwrap(),
            arrival_time: 0.0,
            duration: 1.0,
        }
    }

    fn lm(gms: usize, caps: &[(&[u64], &[usize])]) -> LocalMaster {
        LocalMaster::new(
            LmId(0),
            gms,
            21,
            caps.iter()
                .enumerate()
                .map(|(i, (c, m))| (NodeId(i as u32), rv(c), ConstraintSet::new(m, 21).unwrap())),
        )
        .unwrap()
    }

    fn launch(gm: u32, seq: u64, t: u32, node: u32, tr: &TaskRequest) -> LaunchRequest {
        LaunchRequest {
            gm_id: GmId(gm),
            seq,
            task: TaskIdx(t),
            node_id: NodeId(node),
            demand: tr.demand,
            constraints: tr.constraints,
        }
    }

    #[test]
    fn deals_nodes_round_robin() {
        let caps: Vec<(&[u64], &[usize])> = (0..7).map(|_| (&[1u64, 1][..], &[][..])).collect();
        let l = lm(3, &caps);
        let sizes: Vec<usize> = l.partitions().iter().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert_eq!(l.node(NodeId(4)).unwrap().partition_id.slot, 1);
    }

    #[test]
    fn launch_deducts() {
        let mut l = lm(1, &[(&[4, 8192], &[])]);
        let t = task(&[2, 4096], &[]);
        let p = l.validate_and_launch(&launch(0, 1, 0, 0, &t), &t, 0, 0.0).unwrap();
        assert_eq!(p.audit.available_before, rv(&[4, 8192]));
        assert_eq!(l.node(NodeId(0)).unwrap().available, rv(&[2, 4096]));
        assert!(l.check_all().is_empty());
    }

    #[test]
    fn exact_fit_and_race() {
        let mut l = lm(2, &[(&[2, 4096], &[])]);
        let a = task(&[2, 4096], &[]);
        assert!(l.validate_and_launch(&launch(0, 1, 0, 0, &a), &a, 0, 0.0).is_ok());
        assert_eq!(l.node(NodeId(0)).unwrap().available, rv(&[0, 0]));
        let err = l.validate_and_launch(&launch(1, 1, 1, 0, &a), &a, 0, 0.0).unwrap_err();
        assert_eq!(err, Rejection::InsufficientResources);
        let snap = l.full_snapshot(0.0);
        assert!(snap.full);
        assert_eq!(snap.partitions.len(), 2);
    }

    #[test]
    fn launch_rejects_constraint_mismatch_and_unknown() {
        let mut l = lm(1, &[(&[4, 4096], &[1])]);
        let t = task(&[1, 1], &[2]);
        assert_eq!(l.validate_and_launch(&launch(0, 1, 0, 0, &t), &t, 0, 0.0), Err(Rejection::ConstraintMismatch));
        assert_eq!(l.validate_and_launch(&launch(0, 1, 0, 9, &t), &t, 0, 0.0), Err(Rejection::UnknownNode));
    }

    #[test]
    fn repartition_creates_logical_node_and_restores_on_completion() {
        let mut l = lm(2, &[(&[8, 16384], &[3])]);
        let t = task(&[2, 4096], &[]);
        let req = RepartitionRequest {
            gm_id: GmId(1),
            seq: 1,
            task: TaskIdx(0),
            source_node_id: NodeId(0),
            demand: t.demand,
            constraints: t.constraints,
        };
        let p = l.repartition(&req, &t, NodeId(100), 0, 0.0).unwrap();
        assert!(p.repartitioned);
        assert_eq!(p.touched_slots, vec![0, 1]);
        let logical = *l.node(NodeId(100)).unwrap();
        assert!(logical.is_logical);
        assert_eq!(logical.capacity, rv(&[2, 4096]));
        assert_eq!(logical.machine_constraints, ConstraintSet::new(&[3], 21).unwrap());
        assert_eq!(logical.partition_id.slot, 1);
        assert_eq!(l.node(NodeId(0)).unwrap().available, rv(&[6, 12288]));
        assert!(l.check_all().is_empty());

        // second repartition from the logical node is refused
        let req2 = RepartitionRequest { source_node_id: NodeId(100), task: TaskIdx(1), ..req.clone() };
        assert_eq!(l.repartition(&req2, &t, NodeId(101), 0, 0.0), Err(Rejection::LogicalSource));

        assert!(l.complete(TaskIdx(0), 0).is_some());
        assert!(l.node(NodeId(100)).is_none());
        assert_eq!(l.node(NodeId(0)).unwrap().available, rv(&[8, 16384]));
        assert_eq!(l.partitions()[1].len(), 0);
        assert!(l.check_all().is_empty());
    }

    #[test]
    fn repartition_insufficient() {
        let mut l = lm(2, &[(&[1, 1024], &[])]);
        let t = task(&[2, 4096], &[]);
        let req = RepartitionRequest {
            gm_id: GmId(1),
            seq: 1,
            task: TaskIdx(0),
            source_node_id: NodeId(0),
            demand: t.demand,
            constraints: t.constraints,
        };
        assert_eq!(l.repartition(&req, &t, NodeId(100), 0, 0.0), Err(Rejection::InsufficientResources));
        assert_eq!(l.node_count(), 1);
    }

    #[test]
    fn logical_removal_fixes_up_ordinals() {
        let mut l = lm(2, &[(&[8, 8192], &[]), (&[8, 8192], &[])]);
        let t = task(&[1, 1024], &[]);
        for (i, id) in [(0u32, 100u32), (1, 101), (2, 102)] {
            let req = RepartitionRequest {
                gm_id: GmId(1),
                seq: 1,
                task: TaskIdx(i),
                source_node_id: NodeId(0),
                demand: t.demand,
                constraints: t.constraints,
            };
            l.repartition(&req, &t, NodeId(id), 0, 0.0).unwrap();
        }
        l.complete(TaskIdx(1), 0).unwrap();
        assert_eq!(l.node(NodeId(102)).unwrap().node_id, NodeId(102));
        assert_eq!(l.logical_children(NodeId(0)), &[NodeId(100), NodeId(102)]);
        assert!(l.check_all().is_empty());
    }

    #[test]
    fn preemption_statuses() {
        let mut l = lm(2, &[(&[4, 8192], &[])]);
        let t = task(&[2, 4096], &[]);
        l.validate_and_launch(&launch(0, 1, 0, 0, &t), &t, 0, 0.0).unwrap();
        l.validate_and_launch(&launch(0, 2, 1, 0, &t), &t, 0, 0.0).unwrap();
        l.complete(TaskIdx(1), 0).unwrap();
        // t1 already done (stale), t0 running (verified)
        let req = PreemptRequest {
            gm_id: GmId(0),
            seq: 3,
            task: TaskIdx(5),
            host: NodeId(0),
            victims: vec![TaskIdx(0), TaskIdx(1)],
            demand: rv(&[4, 8192]),
            constraints: ConstraintSet::EMPTY,
        };
        let big = task(&[4, 8192], &[]);
        let out = l.verify_and_preempt(&req, &big, NodeId(100), 0, 1.0);
        assert_eq!(out.statuses, vec![(TaskIdx(0), VictimStatus::Verified), (TaskIdx(1), VictimStatus::Stale)]);
        assert_eq!(out.killed.len(), 1);
        assert!(out.placement.is_ok());
        assert_eq!(l.node(NodeId(0)).unwrap().available, rv(&[0, 0]));
        assert!(l.check_all().is_empty());
    }

    #[test]
    fn stale_finish_is_ignored() {
        let mut l = lm(1, &[(&[4, 8192], &[])]);
        let t = task(&[2, 4096], &[]);
        l.validate_and_launch(&launch(0, 1, 0, 0, &t), &t, 3, 0.0).unwrap();
        assert!(l.complete(TaskIdx(0), 2).is_none());
        assert!(l.complete(TaskIdx(0), 3).is_some());
        assert_eq!(l.user_consumed(UserId(0)), Some(rv(&[0, 0])));
    }
}
