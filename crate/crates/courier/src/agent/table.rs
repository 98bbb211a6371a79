//! Precomputed next-hop routing table.

use crate::topology::{NodeId, Rank, Topology, TopologyError};

/// Where a destination rank's messages go from this agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextHop {
    /// Rank lives on this node; deliver through a local send buffer.
    Local(Rank),
    /// Rank lives elsewhere; forward to that node's agent.
    Remote(NodeId),
}

/// Total function from global rank to next hop, fixed at initialization.
#[derive(Debug, Clone)]
pub struct RoutingTable {
    next_hop: Vec<NextHop>,
    node_of: Vec<NodeId>,
    self_node: NodeId,
}

impl RoutingTable {
    pub fn world_size(&self) -> u32 {
        self.next_hop.len() as u32
    }

    pub fn self_node(&self) -> NodeId {
        self.self_node
    }

    #[inline]
    pub fn next_hop(&self, rank: Rank) -> NextHop {
        self.next_hop[rank as usize]
    }

    pub fn node_of(&self, rank: Rank) -> NodeId {
        self.node_of[rank as usize]
    }
}

/// Build the table for `self_node` from a node->ranks mapping.
///
/// The mapping must cover ranks `0..world_size` exactly once; duplicates or
/// gaps are configuration faults.
pub fn build_routing_table(
    nodes: Vec<Vec<Rank>>,
    self_node: NodeId,
) -> Result<RoutingTable, TopologyError> {
    let topo = Topology::new(nodes)?;
    if self_node >= topo.num_nodes() {
        return Err(TopologyError::UnknownNode(self_node));
    }
    Ok(routing_table_for(&topo, self_node))
}

/// Same as [`build_routing_table`] for an already validated topology.
pub fn routing_table_for(topo: &Topology, self_node: NodeId) -> RoutingTable {
    let world = topo.world_size();
    let mut next_hop = Vec::with_capacity(world as usize);
    let mut node_of = Vec::with_capacity(world as usize);
    for rank in 0..world {
        let node = topo.node_of(rank);
        node_of.push(node);
        next_hop.push(if node == self_node {
            NextHop::Local(rank)
        } else {
            NextHop::Remote(node)
        });
    }
    RoutingTable { next_hop, node_of, self_node }
}
