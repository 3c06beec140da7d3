//! Simulated wire messages exchanged between GMs and LMs.

use std::sync::Arc;

use crate::model::{ConstraintSet, GmId, LmId, NodeId, ResourceVector, TaskIdx, UserId};
use crate::partition::Partition;

/// Per-(GM, LM) request sequence number. Zero means "none yet".
pub type RequestSeq = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct LaunchRequest {
    pub gm_id: GmId,
    pub seq: RequestSeq,
    pub task: TaskIdx,
    pub node_id: NodeId,
    pub demand: ResourceVector,
    pub constraints: ConstraintSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepartitionRequest {
    pub gm_id: GmId,
    pub seq: RequestSeq,
    pub task: TaskIdx,
    pub source_node_id: NodeId,
    pub demand: ResourceVector,
    pub constraints: ConstraintSet,
}

/// Kill `victims`, then place `task` on `host` (directly if `host` sits in
/// the requester's partition, otherwise through a repartition).
#[derive(Debug, Clone, PartialEq)]
pub struct PreemptRequest {
    pub gm_id: GmId,
    pub seq: RequestSeq,
    pub task: TaskIdx,
    pub host: NodeId,
    pub victims: Vec<TaskIdx>,
    pub demand: ResourceVector,
    pub constraints: ConstraintSet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToLm {
    Launch(LaunchRequest),
    Repartition(RepartitionRequest),
    Preempt(PreemptRequest),
}

impl ToLm {
    pub fn gm_id(&self) -> GmId {
        match self {
            ToLm::Launch(r) => r.gm_id,
            ToLm::Repartition(r) => r.gm_id,
            ToLm::Preempt(r) => r.gm_id,
        }
    }

    pub fn seq(&self) -> RequestSeq {
        match self {
            ToLm::Launch(r) => r.seq,
            ToLm::Repartition(r) => r.seq,
            ToLm::Preempt(r) => r.seq,
        }
    }

    pub fn task(&self) -> TaskIdx {
        match self {
            ToLm::Launch(r) => r.task,
            ToLm::Repartition(r) => r.task,
            ToLm::Preempt(r) => r.task,
        }
    }
}

/// A running task as reported in full snapshots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningInfo {
    pub task: TaskIdx,
    pub user: UserId,
    /// Node the task runs on (possibly logical).
    pub node: NodeId,
    /// Physical node whose resources the task holds.
    pub host: NodeId,
    pub demand: ResourceVector,
    pub launched_at: f64,
}

/// LM state as shipped to GMs. Partial snapshots carry only the partitions a
/// request touched; full snapshots carry every partition plus queue usage.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub lm_id: LmId,
    pub timestamp: f64,
    pub partitions: Vec<Arc<Partition>>,
    pub full: bool,
    pub user_consumed: Vec<(UserId, ResourceVector)>,
    pub running: Arc<Vec<RunningInfo>>,
    /// Last request seq this LM has processed, per GM.
    pub processed_seq: Vec<RequestSeq>,
}

impl StateSnapshot {
    pub fn node_count(&self) -> usize {
        self.partitions.iter().map(|p| p.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestKind {
    Launch,
    Repartition,
    Preempt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaunchResponse {
    pub ok: bool,
    pub kind: RequestKind,
    pub gm_id: GmId,
    pub lm_id: LmId,
    pub seq: RequestSeq,
    pub task: TaskIdx,
    pub piggyback: Arc<StateSnapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VictimStatus {
    /// Victim was running and has been killed.
    Verified,
    /// Victim was no longer running at this LM.
    Stale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreemptResponse {
    pub statuses: Vec<(TaskIdx, VictimStatus)>,
    pub launch: LaunchResponse,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToGm {
    Response(LaunchResponse),
    Preempted(PreemptResponse),
    Heartbeat(Arc<StateSnapshot>),
    /// A task owned by one of this GM's queues finished.
    TaskFinished { task: TaskIdx, lm_id: LmId, host: NodeId, demand: ResourceVector },
    /// A task owned by one of this GM's queues was killed and must re-queue.
    TaskEvicted { task: TaskIdx, lm_id: LmId, host: NodeId, demand: ResourceVector },
}
