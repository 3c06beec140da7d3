use fedsched::model::{ConstraintSet, JobId, NodeId, TaskId, UserId};
use fedsched::sim::NodeSpec;
use fedsched::{run_federated, ClusterSpec, FederatedSetup, ResourceVector, SimReport, TaskRequest};

fn rv(v: &[u64]) -> ResourceVector {
    ResourceVector::new(v).unwrap()
}

fn task(id: u64, user: u32, arrival: f64, duration: f64) -> TaskRequest {
    TaskRequest {
        task_id: TaskId(id),
        job_id: JobId(id),
        user_id: UserId(user),
        demand: rv(&[2, 4096]),
        constraints: ConstraintSet::EMPTY,
        arrival_time: arrival,
        duration,
    }
}

// GM 0 owns the big node and fills it; GM 1 later wants a node that size.
fn run(heartbeat_period: f64) -> SimReport {
    let big = NodeSpec { node_id: NodeId(0), capacity: rv(&[2, 4096]), constraints: ConstraintSet::EMPTY };
    let small = NodeSpec { node_id: NodeId(1), capacity: rv(&[1, 1024]), constraints: ConstraintSet::EMPTY };
    let mut setup = FederatedSetup::new(2, ClusterSpec { lms: vec![vec![big, small]] }, 21);
    setup.heartbeat_period = heartbeat_period;
    run_federated(&setup, &[task(0, 0, 0.0, 5.0), task(1, 1, 0.5, 1.0)]).unwrap()
}

#[test]
fn stale_view_costs_one_failed_request() {
    let r = run(10.0);
    assert_eq!(r.counters.inconsistency_failures, 1);
    assert_eq!(r.records.len(), 2);
    assert!(r.records[1].task_start >= 5.0);
    assert!(r.audit.is_clean(), "{:?}", r.audit);
}

#[test]
fn heartbeat_before_arrival_avoids_the_failure() {
    let r = run(0.1);
    assert!(r.counters.heartbeats > 0);
    assert_eq!(r.counters.inconsistency_failures, 0);
    assert_eq!(r.records.len(), 2);
    assert!(r.records[1].task_start >= 5.0);
    assert!(r.audit.is_clean(), "{:?}", r.audit);
}
