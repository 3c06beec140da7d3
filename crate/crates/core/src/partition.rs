//! Logical sub-clusters of an LM's nodes.

use crate::bitmap::ConstraintBitmap;
use crate::model::{GmId, ModelError, NodeId, PartitionId, WorkerNode};

/// Node membership of one partition together with its constraint bitmaps.
///
/// Physical nodes are dealt in at start-up and never leave, so their
/// ordinals are stable. Logical nodes are appended by repartitioning and
/// removed when their task ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub partition_id: PartitionId,
    pub nodes: Vec<WorkerNode>,
    pub constraint_bitmaps: ConstraintBitmap,
}

impl Partition {
    pub fn new(partition_id: PartitionId, constraint_count: usize) -> Result<Self, ModelError> {
        Ok(Self {
            partition_id,
            nodes: Vec::new(),
            constraint_bitmaps: ConstraintBitmap::new(constraint_count)?,
        })
    }

    pub fn owner_gm_id(&self) -> GmId {
        self.partition_id.owner()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.node_id)
    }

    /// Appends a node and returns its ordinal.
    pub fn push(&mut self, mut node: WorkerNode) -> usize {
        node.partition_id = self.partition_id;
        node.lm_id = self.partition_id.lm;
        self.constraint_bitmaps.push_node(node.machine_constraints);
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn remove(&mut self, ordinal: usize) -> WorkerNode {
        self.constraint_bitmaps.remove_node(ordinal);
        self.nodes.remove(ordinal)
    }

    pub fn ordinal_of(&self, node_id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.node_id == node_id)
    }

    /// Bitmaps and node list agree in length and in every bit.
    pub fn is_consistent(&self) -> bool {
        if self.constraint_bitmaps.len() != self.nodes.len() {
            return false;
        }
        (0..self.constraint_bitmaps.constraint_count()).all(|c| {
            let v = self.constraint_bitmaps.vector(c);
            self.nodes.iter().enumerate().all(|(j, n)| v.get(j) == n.machine_constraints.contains(c))
        })
    }
}
