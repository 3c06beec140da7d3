//! Deterministic discrete-event core: event queue, clock, delays and
//! processing-cost model.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("event scheduled in the past: at {at} while clock is {now}")]
    PastEvent { at: f64, now: f64 },
    #[error("event time {0} is not finite")]
    NonFiniteTime(f64),
    #[error("livelock guard tripped: {events} events without task progress (clock {clock:.6}s, {outstanding} tasks outstanding)")]
    Livelock { events: u64, clock: f64, outstanding: usize },
    #[error("internal invariant broken: {0}")]
    Internal(String),
}

struct Entry<E> {
    fire_time: f64,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_time
            .total_cmp(&self.fire_time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// A dispatched event.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<E> {
    pub fire_time: f64,
    pub seq: u64,
    pub payload: E,
}

/// Priority queue ordered by `(fire_time, seq)` with a monotone clock.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    now: f64,
    next_seq: u64,
    dispatched: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self { heap: BinaryHeap::new(), now: 0.0, next_seq: 0, dispatched: 0 }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Total events popped so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Enqueues `payload` to fire at `at`; returns its sequence number.
    pub fn schedule(&mut self, at: f64, payload: E) -> Result<u64, SimError> {
        if !at.is_finite() {
            return Err(SimError::NonFiniteTime(at));
        }
        if at < self.now {
            return Err(SimError::PastEvent { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { fire_time: at, seq, payload });
        Ok(seq)
    }

    pub fn schedule_in(&mut self, delay: f64, payload: E) -> Result<u64, SimError> {
        self.schedule(self.now + delay, payload)
    }

    pub fn pop(&mut self) -> Option<SimEvent<E>> {
        let e = self.heap.pop()?;
        debug_assert!(e.fire_time >= self.now);
        self.now = e.fire_time;
        self.dispatched += 1;
        Some(SimEvent { fire_time: e.fire_time, seq: e.seq, payload: e.payload })
    }
}

/// What a message carries, which selects its delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    /// Requests, responses, heartbeats, probes and notices.
    Control,
    /// A message carrying a task's launch payload to the worker.
    TaskLaunch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayModel {
    pub network_delay_s: f64,
    pub launch_delay_s: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self { network_delay_s: 0.0005, launch_delay_s: 0.0005 }
    }
}

impl DelayModel {
    pub fn delay(&self, kind: MessageKind) -> f64 {
        match kind {
            MessageKind::Control => self.network_delay_s,
            MessageKind::TaskLaunch => self.launch_delay_s,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.network_delay_s, self.launch_delay_s].iter().all(|d| d.is_finite() && *d >= 0.0)
    }
}

/// Simulated processing cost charged to the actor doing the work.
///
/// Defaults are fixed constants, not host measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Fixed cost of one GM placement decision.
    pub gm_decision_s: f64,
    /// One 64-bit AND during bitmap reduction.
    pub gm_word_op_s: f64,
    /// One candidate node resource check.
    pub gm_node_check_s: f64,
    /// Merging one node's state from an LM snapshot into a GM view.
    pub gm_merge_per_node_s: f64,
    /// Fixed cost of one LM request (launch, repartition, preemption).
    pub lm_request_s: f64,
    /// Serializing one node into a snapshot at the LM.
    pub lm_snapshot_per_node_s: f64,
    /// Sampling workers for one task at a probe scheduler.
    pub sparrow_sample_s: f64,
    /// Handling one probe reply at a probe scheduler.
    pub sparrow_reply_s: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            gm_decision_s: 300e-6,
            gm_word_op_s: 5e-9,
            gm_node_check_s: 20e-9,
            gm_merge_per_node_s: 1e-6,
            lm_request_s: 300e-6,
            lm_snapshot_per_node_s: 1e-6,
            sparrow_sample_s: 10e-6,
            sparrow_reply_s: 5e-6,
        }
    }
}

impl CostModel {
    /// Every cost zero; handy for isolating communication effects.
    pub fn zero() -> Self {
        Self {
            gm_decision_s: 0.0,
            gm_word_op_s: 0.0,
            gm_node_check_s: 0.0,
            gm_merge_per_node_s: 0.0,
            lm_request_s: 0.0,
            lm_snapshot_per_node_s: 0.0,
            sparrow_sample_s: 0.0,
            sparrow_reply_s: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [
            self.gm_decision_s,
            self.gm_word_op_s,
            self.gm_node_check_s,
            self.gm_merge_per_node_s,
            self.lm_request_s,
            self.lm_snapshot_per_node_s,
            self.sparrow_sample_s,
            self.sparrow_reply_s,
        ]
        .iter()
        .all(|c| c.is_finite() && *c >= 0.0)
    }

    pub fn gm_merge(&self, nodes: usize) -> f64 {
        self.gm_merge_per_node_s * nodes as f64
    }

    pub fn lm_snapshot(&self, nodes: usize) -> f64 {
        self.lm_snapshot_per_node_s * nodes as f64
    }
}

/// Serial server bookkeeping shared by GM, LM and probe-scheduler actors.
#[derive(Debug, Clone, Default)]
pub struct ActorClock {
    busy_until: f64,
    wake_pending: bool,
}

impl ActorClock {
    pub fn is_idle(&self, now: f64) -> bool {
        !self.wake_pending && self.busy_until <= now
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    /// Occupies the actor for `cost` from `now`; returns the finish time,
    /// at which the caller must schedule a wake-up.
    pub fn occupy(&mut self, now: f64, cost: f64) -> f64 {
        self.busy_until = now + cost;
        self.wake_pending = true;
        self.busy_until
    }

    pub fn woke(&mut self) {
        self.wake_pending = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatches_in_time_then_seq_order() {
        let mut q = EventQueue::new();
        q.schedule(5.0, "late-a").unwrap();
        q.schedule(1.0, "early").unwrap();
        q.schedule(5.0, "late-b").unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| (e.fire_time, e.payload)).collect();
        assert_eq!(order, vec![(1.0, "early"), (5.0, "late-a"), (5.0, "late-b")]);
        assert_eq!(q.dispatched(), 3);
    }

    #[test]
    fn schedule_examples() {
        let mut q = EventQueue::new();
        q.schedule(1.0, 0).unwrap();
        q.pop();
        assert_eq!(q.now(), 1.0);
        let s10 = q.schedule(5.0, 10).unwrap();
        let s11 = q.schedule(5.0, 11).unwrap();
        assert!(s10 < s11);
        assert_eq!(q.schedule(0.5, 99), Err(SimError::PastEvent { at: 0.5, now: 1.0 }));
        let e = q.pop().unwrap();
        assert_eq!((e.fire_time, e.payload), (5.0, 10));
        assert_eq!(q.pop().unwrap().payload, 11);
        assert!(q.schedule(f64::NAN, 0).is_err());
    }

    #[test]
    fn send_delays() {
        let d = DelayModel::default();
        let mut q = EventQueue::new();
        q.schedule(10.0, "tick").unwrap();
        q.pop();
        q.schedule_in(d.delay(MessageKind::Control), "heartbeat").unwrap();
        let e = q.pop().unwrap();
        assert!((e.fire_time - 10.0005).abs() < 1e-12);

        let zero = DelayModel { network_delay_s: 0.0, launch_delay_s: 0.0 };
        q.schedule_in(zero.delay(MessageKind::Control), "a").unwrap();
        q.schedule_in(zero.delay(MessageKind::TaskLaunch), "b").unwrap();
        assert_eq!(q.pop().unwrap().payload, "a");
        assert_eq!(q.pop().unwrap().fire_time, e.fire_time);
    }

    #[test]
    fn actor_clock_serializes_work() {
        let mut c = ActorClock::default();
        assert!(c.is_idle(0.0));
        assert_eq!(c.occupy(1.0, 0.5), 1.5);
        assert!(!c.is_idle(2.0));
        c.woke();
        assert!(c.is_idle(1.5));
        assert!(!c.is_idle(1.4));
    }
}
