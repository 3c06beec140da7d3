//! Worker execution model.
//!
//! Completion is exactly `start + duration`; there is no interference model.
//! In federated mode the LM only admits tasks that fit, so workers never
//! queue. The slot-based FIFO below exists for the probe-sampling baseline.

use std::collections::VecDeque;

use crate::model::{NodeId, ResourceVector, TaskIdx};

/// Completion instant of a task started at `now`.
pub fn start_task(now: f64, duration: f64) -> f64 {
    now + duration
}

/// Slots a task needs on a worker whose slot is `slot_demand`.
pub fn slots_needed(demand: &ResourceVector, slot_demand: &ResourceVector) -> u32 {
    demand
        .as_slice()
        .iter()
        .zip(slot_demand.as_slice())
        .map(|(&d, &s)| if s == 0 { 0 } else { d.div_ceil(s) })
        .max()
        .unwrap_or(1)
        .max(1) as u32
}

/// Slots a worker of `capacity` offers.
pub fn slot_count(capacity: &ResourceVector, slot_demand: &ResourceVector) -> u32 {
    capacity
        .as_slice()
        .iter()
        .zip(slot_demand.as_slice())
        .filter(|(_, &s)| s > 0)
        .map(|(&c, &s)| c / s)
        .min()
        .unwrap_or(0) as u32
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueuedTask {
    pub task: TaskIdx,
    pub slots: u32,
    pub duration: f64,
    pub enqueued_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningSlotTask {
    pub task: TaskIdx,
    pub slots: u32,
    pub end_time: f64,
}

/// A worker with a fixed number of slots and a FIFO queue in front of them.
#[derive(Debug, Clone)]
pub struct WorkerRuntime {
    pub node_id: NodeId,
    slots: u32,
    free_slots: u32,
    running: Vec<RunningSlotTask>,
    fifo_queue: VecDeque<QueuedTask>,
}

impl WorkerRuntime {
    pub fn new(node_id: NodeId, slots: u32) -> Self {
        Self { node_id, slots, free_slots: slots, running: Vec::new(), fifo_queue: VecDeque::new() }
    }

    pub fn slots(&self) -> u32 {
        self.slots
    }

    pub fn free_slots(&self) -> u32 {
        self.free_slots
    }

    pub fn queue_len(&self) -> usize {
        self.fifo_queue.len()
    }

    pub fn running(&self) -> &[RunningSlotTask] {
        &self.running
    }

    /// Expected wait before a newly queued task could start: outstanding work
    /// of running and queued tasks, spread over the worker's slots.
    pub fn estimated_wait(&self, now: f64) -> f64 {
        if self.slots == 0 {
            return f64::INFINITY;
        }
        let running: f64 = self.running.iter().map(|r| (r.end_time - now).max(0.0) * r.slots as f64).sum();
        let queued: f64 = self.fifo_queue.iter().map(|q| q.duration * q.slots as f64).sum();
        (running + queued) / self.slots as f64
    }

    pub fn enqueue(&mut self, task: QueuedTask) {
        self.fifo_queue.push_back(task);
    }

    /// Starts queued tasks in FIFO order while the head fits.
    pub fn start_ready(&mut self, now: f64) -> Vec<(QueuedTask, f64)> {
        let mut started = Vec::new();
        while let Some(head) = self.fifo_queue.front() {
            let need = head.slots.min(self.slots);
            if need > self.free_slots {
                break;
            }
            let head = self.fifo_queue.pop_front().expect("peeked");
            self.free_slots -= need;
            let end_time = start_task(now, head.duration);
            self.running.push(RunningSlotTask { task: head.task, slots: need, end_time });
            started.push((head, end_time));
        }
        started
    }

    /// Frees the slots held by `task`; returns false if it was not running.
    pub fn finish(&mut self, task: TaskIdx) -> bool {
        match self.running.iter().position(|r| r.task == task) {
            Some(i) => {
                let r = self.running.swap_remove(i);
                self.free_slots += r.slots;
                true
            }
            None => false,
        }
    }
}
