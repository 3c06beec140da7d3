//! User queues and preemption-based fair sharing.
//!
//! Fairness only engages under contention: a GM consults it after both an
//! internal launch and a repartition have failed for a request.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::messages::RunningInfo;
use crate::model::{GmId, LmId, NodeId, ResourceVector, TaskIdx, UserId};

/// How a user's consumption is compared with its share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationMetric {
    /// Only the first resource dimension (CPU cores).
    #[default]
    Primary,
    /// The worst dimension.
    MaxOverDimensions,
}

/// Converts share fractions into amounts of the data center's resources.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShareAccounting {
    pub total: ResourceVector,
    pub metric: ViolationMetric,
}

impl ShareAccounting {
    fn dims(&self) -> std::ops::Range<usize> {
        match self.metric {
            ViolationMetric::Primary => 0..1,
            ViolationMetric::MaxOverDimensions => 0..self.total.dims(),
        }
    }

    /// consumed / share, under the configured metric.
    pub fn ratio(&self, consumed: &ResourceVector, share_fraction: f64) -> f64 {
        self.dims()
            .map(|i| {
                let share = share_fraction * self.total.get(i) as f64;
                let used = consumed.get(i) as f64;
                if share > 0.0 {
                    used / share
                } else if used > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    /// `share(user) < consumed(user)`, strictly.
    pub fn exceeds_share(&self, consumed: &ResourceVector, share_fraction: f64) -> bool {
        self.dims().any(|i| consumed.get(i) as f64 > share_fraction * self.total.get(i) as f64)
    }
}

/// One user's queue. Requests that could not be placed are parked with the
/// view version they failed against; they become eligible again once the
/// owning GM's view changes.
#[derive(Debug, Clone)]
pub struct UserQueue {
    pub user_id: UserId,
    pub share_fraction: f64,
    pub owner_gm_id: GmId,
    pending: VecDeque<TaskIdx>,
    parked: VecDeque<(TaskIdx, u64)>,
    /// Resources held by this user's tasks, as known to the owning GM.
    pub consumed: ResourceVector,
}

impl UserQueue {
    pub fn new(user_id: UserId, share_fraction: f64, owner_gm_id: GmId, dims: usize) -> Self {
        Self {
            user_id,
            share_fraction,
            owner_gm_id,
            pending: VecDeque::new(),
            parked: VecDeque::new(),
            consumed: ResourceVector::zeros(dims).expect("valid dims"),
        }
    }

    pub fn push(&mut self, task: TaskIdx) {
        self.pending.push_back(task);
    }

    /// Re-inserts a request at the tail, dormant until the view moves past `version`.
    pub fn park(&mut self, task: TaskIdx, version: u64) {
        self.parked.push_back((task, version));
    }

    fn unpark(&mut self, version: u64) {
        while let Some(&(task, v)) = self.parked.front() {
            if v >= version {
                break;
            }
            self.parked.pop_front();
            self.pending.push_back(task);
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len() + self.parked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn add_consumed(&mut self, r: &ResourceVector) {
        self.consumed = self.consumed.saturating_add(r);
    }

    pub fn sub_consumed(&mut self, r: &ResourceVector) {
        self.consumed = self.consumed.saturating_sub(r);
    }
}

/// The queues one GM serves, visited round-robin.
#[derive(Debug, Clone, Default)]
pub struct QueueSet {
    queues: Vec<UserQueue>,
    cursor: usize,
}

impl QueueSet {
    pub fn new(queues: Vec<UserQueue>) -> Self {
        Self { queues, cursor: 0 }
    }

    pub fn queues(&self) -> &[UserQueue] {
        &self.queues
    }

    pub fn get(&self, user: UserId) -> Option<&UserQueue> {
        self.queues.iter().find(|q| q.user_id == user)
    }

    pub fn get_mut(&mut self, user: UserId) -> Option<&mut UserQueue> {
        self.queues.iter_mut().find(|q| q.user_id == user)
    }

    pub fn owns(&self, user: UserId) -> bool {
        self.get(user).is_some()
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(UserQueue::len).sum()
    }

    /// Head of the next non-empty queue in round-robin order, considering
    /// only requests not parked at `view_version` or later.
    pub fn next_request(&mut self, view_version: u64) -> Option<(UserId, TaskIdx)> {
        let n = self.queues.len();
        for k in 0..n {
            let i = (self.cursor + k) % n;
            let q = &mut self.queues[i];
            q.unpark(view_version);
            if let Some(task) = q.pending.pop_front() {
                self.cursor = (i + 1) % n;
                return Some((q.user_id, task));
            }
        }
        None
    }
}

/// A user's consumption as seen by the deciding GM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserStanding {
    pub user: UserId,
    pub consumed: ResourceVector,
    pub share_fraction: f64,
    pub ratio: f64,
}

/// Users in violation of their share, largest violation first (ties by id).
pub fn violation_order(
    accounting: &ShareAccounting,
    standings: &[UserStanding],
    requester: UserId,
) -> Vec<UserStanding> {
    let mut out: Vec<UserStanding> = standings
        .iter()
        .filter(|s| s.user != requester && accounting.exceeds_share(&s.consumed, s.share_fraction))
        .copied()
        .collect();
    out.sort_by(|a, b| b.ratio.total_cmp(&a.ratio).then(a.user.cmp(&b.user)));
    out
}

/// A physical node where freed resources could host the request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HostCandidate {
    pub lm: LmId,
    pub host: NodeId,
    pub available: ResourceVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimSet {
    pub user: UserId,
    pub lm: LmId,
    pub host: NodeId,
    pub victims: Vec<TaskIdx>,
    pub freed: ResourceVector,
}

/// Picks `user`'s most recently launched tasks until, on a single host,
/// what they free plus what is already free covers `demand`.
pub fn select_victims<'a>(
    user: UserId,
    demand: &ResourceVector,
    hosts: &[HostCandidate],
    running: impl IntoIterator<Item = (LmId, &'a RunningInfo)>,
) -> Option<VictimSet> {
    let by_host: BTreeMap<(LmId, NodeId), &HostCandidate> = hosts.iter().map(|h| ((h.lm, h.host), h)).collect();
    let mut mine: Vec<(LmId, &RunningInfo)> = running
        .into_iter()
        .filter(|(lm, r)| r.user == user && by_host.contains_key(&(*lm, r.host)))
        .collect();
    mine.sort_by(|a, b| b.1.launched_at.total_cmp(&a.1.launched_at).then(b.1.task.cmp(&a.1.task)));

    let mut acc: BTreeMap<(LmId, NodeId), (ResourceVector, Vec<TaskIdx>)> = BTreeMap::new();
    for (lm, r) in mine {
        let key = (lm, r.host);
        let host = by_host[&key];
        let entry = acc.entry(key).or_insert_with(|| (ResourceVector::zeros(demand.dims()).expect("dims"), Vec::new()));
        entry.0 = entry.0.saturating_add(&r.demand);
        entry.1.push(r.task);
        if host.available.saturating_add(&entry.0).dominates(demand).unwrap_or(false) {
            return Some(VictimSet { user, lm, host: r.host, victims: entry.1.clone(), freed: entry.0 });
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub enum PreemptDecision {
    /// The requester already holds more than its share.
    Failure,
    Victims(VictimSet),
    /// No violating user has tasks that would make room.
    Empty,
}

/// Audit record of one fairness decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreemptionDecisionLog {
    pub time: f64,
    pub gm: GmId,
    pub task: TaskIdx,
    pub requester: UserId,
    pub requester_consumed: ResourceVector,
    pub requester_share: f64,
    /// Every other user's standing as viewed at decision time.
    pub standings: Vec<UserStanding>,
    /// Violating users tried before the chosen one, which yielded no victims.
    pub skipped: Vec<UserId>,
    pub chosen: Option<UserId>,
    pub victims: Vec<TaskIdx>,
    pub failure: bool,
}

/// Decides whether and whom to preempt for `requester`.
pub fn get_preempt_tasks(
    accounting: &ShareAccounting,
    requester: &UserStanding,
    others: &[UserStanding],
    mut victims_of: impl FnMut(UserId) -> Option<VictimSet>,
) -> (PreemptDecision, Vec<UserId>) {
    if accounting.exceeds_share(&requester.consumed, requester.share_fraction) {
        return (PreemptDecision::Failure, Vec::new());
    }
    let mut skipped = Vec::new();
    for cand in violation_order(accounting, others, requester.user) {
        match victims_of(cand.user) {
            Some(v) if !v.victims.is_empty() => return (PreemptDecision::Victims(v), skipped),
            _ => skipped.push(cand.user),
        }
    }
    (PreemptDecision::Empty, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rv(v: &[u64]) -> ResourceVector {
        ResourceVector::new(v).unwrap()
    }

    fn acct() -> ShareAccounting {
        ShareAccounting { total: rv(&[100, 100_000]), metric: ViolationMetric::Primary }
    }

    fn standing(a: &ShareAccounting, user: u32, cpu: u64, share: f64) -> UserStanding {
        let consumed = rv(&[cpu, 0]);
        UserStanding { user: UserId(user), consumed, share_fraction: share, ratio: a.ratio(&consumed, share) }
    }

    fn running(task: u32, user: u32, host: u32, cpu: u64, at: f64) -> RunningInfo {
        RunningInfo {
            task: TaskIdx(task),
            user: UserId(user),
            node: NodeId(host),
            host: NodeId(host),
            demand: rv(&[cpu, 0]),
            launched_at: at,
        }
    }

    #[test]
    fn round_robin_over_queues() {
        let mut qs = QueueSet::new((0..3).map(|u| UserQueue::new(UserId(u), 0.3, GmId(0), 2)).collect());
        for u in 0..3 {
            for t in 0..2 {
                qs.get_mut(UserId(u)).unwrap().push(TaskIdx(u * 10 + t));
            }
        }
        let order: Vec<u32> = std::iter::from_fn(|| qs.next_request(0)).map(|(u, _)| u.0).collect();
        assert_eq!(order, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(qs.next_request(0), None);
    }

    #[test]
    fn single_nonempty_queue_always_served() {
        let mut qs = QueueSet::new((0..3).map(|u| UserQueue::new(UserId(u), 0.3, GmId(0), 2)).collect());
        for t in 0..3 {
            qs.get_mut(UserId(1)).unwrap().push(TaskIdx(t));
        }
        for _ in 0..3 {
            assert_eq!(qs.next_request(0).unwrap().0, UserId(1));
        }
    }

    #[test]
    fn parked_requests_wait_for_a_newer_view() {
        let mut qs = QueueSet::new(vec![UserQueue::new(UserId(0), 1.0, GmId(0), 2)]);
        qs.get_mut(UserId(0)).unwrap().park(TaskIdx(4), 7);
        assert_eq!(qs.next_request(7), None);
        assert_eq!(qs.total_len(), 1);
        assert_eq!(qs.next_request(8), Some((UserId(0), TaskIdx(4))));
    }

    #[test]
    fn over_share_requester_fails() {
        let a = acct();
        let req = standing(&a, 0, 20, 0.1);
        let (d, _) = get_preempt_tasks(&a, &req, &[], |_| unreachable!());
        assert_eq!(d, PreemptDecision::Failure);
    }

    #[test]
    fn exact_share_may_still_preempt() {
        let a = acct();
        let req = standing(&a, 0, 10, 0.1);
        let other = standing(&a, 3, 60, 0.5);
        let (d, _) = get_preempt_tasks(&a, &req, &[other], |u| {
            Some(VictimSet { user: u, lm: LmId(0), host: NodeId(0), victims: vec![TaskIdx(1)], freed: rv(&[1, 0]) })
        });
        assert!(matches!(d, PreemptDecision::Victims(v) if v.user == UserId(3)));
    }

    #[test]
    fn candidates_in_decreasing_violation_and_skips_empty() {
        let a = acct();
        let req = standing(&a, 0, 5, 0.1);
        let others = [standing(&a, 1, 30, 0.25), standing(&a, 2, 30, 0.15), standing(&a, 3, 40, 0.5)];
        let order: Vec<u32> = violation_order(&a, &others, UserId(0)).iter().map(|s| s.user.0).collect();
        // user 2 at 2.0, user 1 at 1.2; user 3 under share
        assert_eq!(order, vec![2, 1]);
        let (d, skipped) = get_preempt_tasks(&a, &req, &others, |u| {
            (u == UserId(1)).then(|| VictimSet {
                user: u,
                lm: LmId(0),
                host: NodeId(0),
                victims: vec![TaskIdx(9)],
                freed: rv(&[1, 0]),
            })
        });
        assert_eq!(skipped, vec![UserId(2)]);
        assert!(matches!(d, PreemptDecision::Victims(v) if v.user == UserId(1)));
        let (d, skipped) = get_preempt_tasks(&a, &req, &others, |_| None);
        assert_eq!(d, PreemptDecision::Empty);
        assert_eq!(skipped.len(), 2);
    }

    #[test]
    fn victims_are_lifo_on_one_host() {
        let hosts = [
            HostCandidate { lm: LmId(0), host: NodeId(0), available: rv(&[0, 0]) },
            HostCandidate { lm: LmId(0), host: NodeId(1), available: rv(&[1, 0]) },
        ];
        let run = [
            running(1, 3, 0, 2, 1.0),
            running(2, 3, 1, 1, 2.0),
            running(3, 3, 0, 1, 3.0),
            running(4, 5, 1, 4, 4.0),
            running(5, 3, 7, 8, 5.0), // not an eligible host
        ];
        let got = select_victims(UserId(3), &rv(&[2, 0]), &hosts, run.iter().map(|r| (LmId(0), r))).unwrap();
        // newest first: t3 on n0 (1 cpu, not enough), then t2 on n1 (1 + 1 free = 2)
        assert_eq!(got.host, NodeId(1));
        assert_eq!(got.victims, vec![TaskIdx(2)]);
        assert!(select_victims(UserId(3), &rv(&[9, 0]), &hosts, run.iter().map(|r| (LmId(0), r))).is_none());
    }

    #[test]
    fn max_metric_uses_worst_dimension() {
        let a = ShareAccounting { total: rv(&[100, 1000]), metric: ViolationMetric::MaxOverDimensions };
        assert_eq!(a.ratio(&rv(&[10, 500]), 0.5), 1.0);
        assert!(!a.exceeds_share(&rv(&[10, 500]), 0.5));
        assert!(a.exceeds_share(&rv(&[10, 501]), 0.5));
        let p = acct();
        assert!(!p.exceeds_share(&rv(&[10, 99_999]), 0.1));
    }
}
