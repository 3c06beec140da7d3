//! Domain types shared by every scheduler component.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Upper bound on the number of resource types a vector can carry.
pub const MAX_RESOURCE_TYPES: usize = 4;

/// Largest constraint universe supported by the fixed-width [`ConstraintSet`].
pub const MAX_CONSTRAINTS: usize = 64;

/// Default number of placement constraints known to the system.
pub const DEFAULT_CONSTRAINT_COUNT: usize = 21;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("resource dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("resource vectors need between 1 and {MAX_RESOURCE_TYPES} dimensions, got {0}")]
    InvalidDimension(usize),
    #[error("resource subtraction would go negative: {have} - {take}")]
    Underflow { have: ResourceVector, take: ResourceVector },
    #[error("resource addition overflowed")]
    Overflow,
    #[error("constraint id {id} out of range for m = {m}")]
    ConstraintOutOfRange { id: usize, m: usize },
    #[error("constraint count {0} unsupported (1..={MAX_CONSTRAINTS})")]
    InvalidConstraintCount(usize),
}

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(/// External task identifier.
    TaskId, u64, "t");
id_type!(JobId, u64, "j");
id_type!(/// Identifier of a user queue.
    UserId, u32, "u");
id_type!(/// Global Master identifier.
    GmId, u32, "gm");
id_type!(/// Local Master identifier.
    LmId, u32, "lm");
id_type!(/// Worker node identifier, physical or logical.
    NodeId, u32, "n");
id_type!(/// Dense index of a task inside a loaded workload.
    TaskIdx, u32, "#");

/// A partition is addressed by its LM and its slot inside that LM. Slot `i`
/// is owned by GM `i`, so an LM always holds exactly `gm_count` partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionId {
    pub lm: LmId,
    pub slot: u32,
}

impl PartitionId {
    pub fn owner(self) -> GmId {
        GmId(self.slot)
    }
}

impl fmt::Display for PartitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}.{}", self.lm.0, self.slot)
    }
}

/// Multi-dimensional integral resource quantity (cores, MB, ...).
///
/// Stored inline so nodes and views stay `Copy`. Arithmetic is element-wise
/// and refuses to mix dimensions.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResourceVector {
    dims: u8,
    q: [u64; MAX_RESOURCE_TYPES],
}

impl ResourceVector {
    pub fn new(quantities: &[u64]) -> Result<Self, ModelError> {
        if quantities.is_empty() || quantities.len() > MAX_RESOURCE_TYPES {
            return Err(ModelError::InvalidDimension(quantities.len()));
        }
        let mut q = [0; MAX_RESOURCE_TYPES];
        q[..quantities.len()].copy_from_slice(quantities);
        Ok(Self { dims: quantities.len() as u8, q })
    }

    pub fn zeros(dims: usize) -> Result<Self, ModelError> {
        Self::new(&vec![0; dims])
    }

    pub fn dims(&self) -> usize {
        self.dims as usize
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.q[..self.dims()]
    }

    pub fn get(&self, i: usize) -> u64 {
        self.as_slice()[i]
    }

    pub fn is_zero(&self) -> bool {
        self.as_slice().iter().all(|&v| v == 0)
    }

    pub fn any_positive(&self) -> bool {
        !self.is_zero()
    }

    fn check_dims(&self, other: &Self) -> Result<(), ModelError> {
        if self.dims != other.dims {
            return Err(ModelError::DimensionMismatch { left: self.dims(), right: other.dims() });
        }
        Ok(())
    }

    /// True iff every component of `self` is at least the matching component of `other`.
    pub fn dominates(&self, other: &Self) -> Result<bool, ModelError> {
        self.check_dims(other)?;
        Ok(self.as_slice().iter().zip(other.as_slice()).all(|(a, b)| a >= b))
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self, ModelError> {
        self.check_dims(other)?;
        let mut out = *self;
        for i in 0..self.dims() {
            out.q[i] = self.q[i].checked_add(other.q[i]).ok_or(ModelError::Overflow)?;
        }
        Ok(out)
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self, ModelError> {
        self.check_dims(other)?;
        let mut out = *self;
        for i in 0..self.dims() {
            out.q[i] = self.q[i]
                .checked_sub(other.q[i])
                .ok_or(ModelError::Underflow { have: *self, take: *other })?;
        }
        Ok(out)
    }

    /// Element-wise subtraction clamped at zero. Used only on cached views,
    /// never on authoritative state.
    pub fn saturating_sub(&self, other: &Self) -> Self {
        let mut out = *self;
        for i in 0..self.dims().min(other.dims()) {
            out.q[i] = self.q[i].saturating_sub(other.q[i]);
        }
        out
    }

    pub fn saturating_add(&self, other: &Self) -> Self {
        let mut out = *self;
        for i in 0..self.dims().min(other.dims()) {
            out.q[i] = self.q[i].saturating_add(other.q[i]);
        }
        out
    }

    /// Component-wise minimum.
    pub fn min(&self, other: &Self) -> Self {
        let mut out = *self;
        for i in 0..self.dims().min(other.dims()) {
            out.q[i] = self.q[i].min(other.q[i]);
        }
        out
    }
}

impl fmt::Debug for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.as_slice().iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

impl Serialize for ResourceVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ResourceVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<u64>::deserialize(d)?;
        ResourceVector::new(&v).map_err(serde::de::Error::custom)
    }
}

/// `K >= R` for every resource type.
pub fn resource_geq(available: &ResourceVector, demand: &ResourceVector) -> Result<bool, ModelError> {
    available.dominates(demand)
}

/// A set of constraint ids in `[0, m)`, stored as a bit mask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct ConstraintSet(u64);

impl ConstraintSet {
    pub const EMPTY: ConstraintSet = ConstraintSet(0);

    pub fn new(ids: &[usize], m: usize) -> Result<Self, ModelError> {
        check_constraint_count(m)?;
        let mut mask = 0u64;
        for &id in ids {
            if id >= m {
                return Err(ModelError::ConstraintOutOfRange { id, m });
            }
            mask |= 1 << id;
        }
        Ok(Self(mask))
    }

    /// Every id in `[0, m)`.
    pub fn full(m: usize) -> Result<Self, ModelError> {
        check_constraint_count(m)?;
        Ok(Self(if m == 64 { u64::MAX } else { (1u64 << m) - 1 }))
    }

    pub fn from_mask(mask: u64) -> Self {
        Self(mask)
    }

    pub fn mask(self) -> u64 {
        self.0
    }

    pub fn contains(self, id: usize) -> bool {
        id < MAX_CONSTRAINTS && self.0 & (1 << id) != 0
    }

    pub fn insert(&mut self, id: usize) {
        self.0 |= 1 << id;
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Largest id + 1, or 0 for the empty set.
    pub fn span(self) -> usize {
        MAX_CONSTRAINTS - self.0.leading_zeros() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut rest = self.0;
        std::iter::from_fn(move || {
            if rest == 0 {
                return None;
            }
            let id = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            Some(id)
        })
    }

    pub fn is_superset_of(self, other: ConstraintSet) -> bool {
        other.0 & !self.0 == 0
    }
}

impl fmt::Debug for ConstraintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for ConstraintSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.iter().collect::<Vec<_>>().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConstraintSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let ids = Vec::<usize>::deserialize(d)?;
        ConstraintSet::new(&ids, MAX_CONSTRAINTS).map_err(serde::de::Error::custom)
    }
}

pub fn check_constraint_count(m: usize) -> Result<(), ModelError> {
    if m == 0 || m > MAX_CONSTRAINTS {
        return Err(ModelError::InvalidConstraintCount(m));
    }
    Ok(())
}

/// `M ⊇ PC`: the machine offers every constraint the task asks for.
pub fn constraint_superset(machine: ConstraintSet, task: ConstraintSet) -> bool {
    machine.is_superset_of(task)
}

/// A task request `T = (R, PC)` plus its scheduling metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub task_id: TaskId,
    pub job_id: JobId,
    pub user_id: UserId,
    pub demand: ResourceVector,
    pub constraints: ConstraintSet,
    /// Simulated seconds.
    pub arrival_time: f64,
    /// Simulated seconds.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("task {0} demands nothing")]
    ZeroDemand(TaskId),
    #[error("task {0} has non-positive duration {1}")]
    BadDuration(TaskId, f64),
    #[error("task {0} has invalid arrival time {1}")]
    BadArrival(TaskId, f64),
}

impl TaskRequest {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !self.demand.any_positive() {
            return Err(TaskError::ZeroDemand(self.task_id));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(TaskError::BadDuration(self.task_id, self.duration));
        }
        if !(self.arrival_time >= 0.0 && self.arrival_time.is_finite()) {
            return Err(TaskError::BadArrival(self.task_id, self.arrival_time));
        }
        Ok(())
    }
}

/// A worker node `N = (K, M)` as tracked by its LM (and mirrored in GM views).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerNode {
    pub node_id: NodeId,
    pub lm_id: LmId,
    pub partition_id: PartitionId,
    pub capacity: ResourceVector,
    /// `K`: what is still free on this node.
    pub available: ResourceVector,
    /// `M`: the machine constraints this node satisfies.
    pub machine_constraints: ConstraintSet,
    pub is_logical: bool,
    pub parent_node: Option<NodeId>,
}

impl WorkerNode {
    pub fn physical(
        node_id: NodeId,
        partition_id: PartitionId,
        capacity: ResourceVector,
        machine_constraints: ConstraintSet,
    ) -> Self {
        Self {
            node_id,
            lm_id: partition_id.lm,
            partition_id,
            capacity,
            available: capacity,
            machine_constraints,
            is_logical: false,
            parent_node: None,
        }
    }

    /// Eqs. (5) and (6) against this node's current availability.
    pub fn can_host(&self, task: &TaskRequest) -> Result<bool, ModelError> {
        Ok(constraint_superset(self.machine_constraints, task.constraints)
            && resource_geq(&self.available, &task.demand)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rv(v: &[u64]) -> ResourceVector {
        ResourceVector::new(v).unwrap()
    }

    #[test]
    fn resource_geq_examples() {
        assert!(resource_geq(&rv(&[8, 16384]), &rv(&[2, 4096])).unwrap());
        assert!(resource_geq(&rv(&[8, 16384]), &rv(&[8, 16384])).unwrap());
        assert!(!resource_geq(&rv(&[8, 2048]), &rv(&[2, 4096])).unwrap());
    }

    #[test]
    fn resource_geq_dimension_mismatch() {
        let err = resource_geq(&rv(&[8]), &rv(&[2, 4096])).unwrap_err();
        assert_eq!(err, ModelError::DimensionMismatch { left: 1, right: 2 });
    }

    #[test]
    fn arithmetic_is_checked() {
        let a = rv(&[4, 8192]);
        let b = rv(&[2, 4096]);
        assert_eq!(a.checked_sub(&b).unwrap(), b);
        assert_eq!(b.checked_add(&b).unwrap(), a);
        assert!(matches!(b.checked_sub(&a), Err(ModelError::Underflow { .. })));
        assert!(rv(&[1]).checked_add(&a).is_err());
        assert_eq!(b.saturating_sub(&a), rv(&[0, 0]));
    }

    #[test]
    fn vector_dimension_bounds() {
        assert!(ResourceVector::new(&[]).is_err());
        assert!(ResourceVector::new(&[1; MAX_RESOURCE_TYPES + 1]).is_err());
        assert_eq!(ResourceVector::new(&[1, 2, 3]).unwrap().dims(), 3);
    }

    #[test]
    fn constraint_superset_examples() {
        let m = DEFAULT_CONSTRAINT_COUNT;
        let machine = ConstraintSet::new(&[1, 4, 7], m).unwrap();
        assert!(constraint_superset(machine, ConstraintSet::new(&[4], m).unwrap()));
        assert!(constraint_superset(machine, ConstraintSet::EMPTY));
        let machine = ConstraintSet::new(&[1, 4], m).unwrap();
        assert!(!constraint_superset(machine, ConstraintSet::new(&[4, 9], m).unwrap()));
    }

    #[test]
    fn constraint_ids_range_checked() {
        assert_eq!(
            ConstraintSet::new(&[21], 21).unwrap_err(),
            ModelError::ConstraintOutOfRange { id: 21, m: 21 }
        );
        let s = ConstraintSet::new(&[3, 3, 0], 21).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(s.span(), 4);
        assert_eq!(ConstraintSet::full(21).unwrap().len(), 21);
        assert_eq!(ConstraintSet::full(64).unwrap().len(), 64);
    }

    #[test]
    fn task_validation() {
        let mut t = TaskRequest {
            task_id: TaskId(1),
            job_id: JobId(1),
            user_id: UserId(0),
            demand: rv(&[0, 0]),
            constraints: ConstraintSet::EMPTY,
            arrival_time: 0.0,
            duration: 1.0,
        };
        assert_eq!(t.validate(), Err(TaskError::ZeroDemand(TaskId(1))));
        t.demand = rv(&[0, 1]);
        assert!(t.validate().is_ok());
        t.duration = 0.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn serde_shapes() {
        let v: ResourceVector = serde_json::from_str("[2,4096]").unwrap();
        assert_eq!(v, rv(&[2, 4096]));
        assert_eq!(serde_json::to_string(&v).unwrap(), "[2,4096]");
        let c: ConstraintSet = serde_json::from_str("[7,1]").unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), "[1,7]");
    }
}
