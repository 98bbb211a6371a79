//! Rank/node layout and the flat endpoint id space used by the transports.
//!
//! Endpoint ids: rank `r` owns id `r`; the agent of node `k` owns id
//! `world_size + k`. Every participant, rank or agent, is addressed by its
//! [`PeerId`] on the transport layer.

use serde::{Deserialize, Serialize};

pub type Rank = u32;
pub type NodeId = u32;

/// Transport-level address of a rank or an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PeerId(pub u32);

impl std::fmt::Display for PeerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ep{}", self.0)
    }
}

/// Which ranks live on which node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    nodes: Vec<Vec<Rank>>,
    world_size: u32,
}

/// Faults raised while validating a node->ranks mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyError {
    DuplicateRank(Rank),
    MissingRank(Rank),
    RankOutOfRange { rank: Rank, world_size: u32 },
    EmptyTopology,
    UnknownNode(NodeId),
}

impl std::fmt::Display for TopologyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopologyError::DuplicateRank(r) => write!(f, "rank {r} assigned to multiple nodes"),
            TopologyError::MissingRank(r) => write!(f, "rank {r} not assigned to any node"),
            TopologyError::RankOutOfRange { rank, world_size } => {
                write!(f, "rank {rank} out of range for world size {world_size}")
            }
            TopologyError::EmptyTopology => write!(f, "topology has no ranks"),
            TopologyError::UnknownNode(n) => write!(f, "node {n} not in topology"),
        }
    }
}

impl std::error::Error for TopologyError {}

impl Topology {
    /// Build and validate a topology from an explicit node->ranks mapping.
    /// Ranks must cover `0..world_size` exactly once.
    pub fn new(nodes: Vec<Vec<Rank>>) -> Result<Self, TopologyError> {
        let world_size: usize = nodes.iter().map(|v| v.len()).sum();
        if world_size == 0 {
            return Err(TopologyError::EmptyTopology);
        }
        let mut seen = vec![false; world_size];
        for ranks in &nodes {
            for &r in ranks {
                if r as usize >= world_size {
                    return Err(TopologyError::RankOutOfRange {
                        rank: r,
                        world_size: world_size as u32,
                    });
                }
                if seen[r as usize] {
                    return Err(TopologyError::DuplicateRank(r));
                }
                seen[r as usize] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(TopologyError::MissingRank(missing as Rank));
        }
        Ok(Topology { nodes, world_size: world_size as u32 })
    }

    /// Standard block layout: `nodes` nodes with `ranks_per_node` consecutive
    /// ranks each.
    pub fn block(nodes: u32, ranks_per_node: u32) -> Self {
        let layout = (0..nodes)
            .map(|n| (n * ranks_per_node..(n + 1) * ranks_per_node).collect())
            .collect();
        Topology::new(layout).expect("block layout is always valid")
    }

    pub fn world_size(&self) -> u32 {
        self.world_size
    }

    pub fn num_nodes(&self) -> u32 {
        self.nodes.len() as u32
    }

    pub fn ranks_of(&self, node: NodeId) -> &[Rank] {
        &self.nodes[node as usize]
    }

    pub fn node_of(&self, rank: Rank) -> NodeId {
        for (n, ranks) in self.nodes.iter().enumerate() {
            if ranks.contains(&rank) {
                return n as NodeId;
            }
        }
        unreachable!("validated topology covers every rank")
    }

    /// Endpoint id of a rank.
    pub fn rank_ep(&self, rank: Rank) -> PeerId {
        PeerId(rank)
    }

    /// Endpoint id of a node's routing agent.
    pub fn agent_ep(&self, node: NodeId) -> PeerId {
        PeerId(self.world_size + node)
    }

    /// Reverse mapping for an endpoint id.
    pub fn ep_role(&self, ep: PeerId) -> EpRole {
        if ep.0 < self.world_size {
            EpRole::Rank(ep.0)
        } else {
            EpRole::Agent(ep.0 - self.world_size)
        }
    }

    /// All endpoint ids, ranks then agents.
    pub fn all_eps(&self) -> Vec<PeerId> {
        (0..self.world_size + self.num_nodes()).map(PeerId).collect()
    }

    /// Peers an endpoint connects to: a rank talks to its node agent; an agent
    /// talks to its local ranks and every other agent.
    pub fn peers_of(&self, ep: PeerId) -> Vec<PeerId> {
        match self.ep_role(ep) {
            EpRole::Rank(r) => vec![self.agent_ep(self.node_of(r))],
            EpRole::Agent(n) => {
                let mut peers: Vec<PeerId> =
                    self.ranks_of(n).iter().map(|&r| self.rank_ep(r)).collect();
                for other in 0..self.num_nodes() {
                    if other != n {
                        peers.push(self.agent_ep(other));
                    }
                }
                peers
            }
        }
    }
}

/// What an endpoint id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpRole {
    Rank(Rank),
    Agent(NodeId),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_layout() {
        let t = Topology::block(2, 2);
        assert_eq!(t.world_size(), 4);
        assert_eq!(t.ranks_of(0), &[0, 1]);
        assert_eq!(t.ranks_of(1), &[2, 3]);
        assert_eq!(t.node_of(3), 1);
        assert_eq!(t.agent_ep(1), PeerId(5));
    }

    #[test]
    fn duplicate_rank_rejected() {
        let err = Topology::new(vec![vec![0, 1], vec![1]]).unwrap_err();
        assert_eq!(err, TopologyError::DuplicateRank(1));
    }

    #[test]
    fn missing_rank_rejected() {
        // 4 ranks declared by count, rank 2 absent (3 appears twice -> dup first).
        let err = Topology::new(vec![vec![0, 1], vec![3, 4]]).unwrap_err();
        assert!(matches!(err, TopologyError::RankOutOfRange { rank: 4, .. }));
    }

    #[test]
    fn agent_peers_are_local_ranks_plus_other_agents() {
        let t = Topology::block(2, 2);
        let peers = t.peers_of(t.agent_ep(0));
        assert_eq!(peers, vec![PeerId(0), PeerId(1), PeerId(5)]);
        assert_eq!(t.peers_of(PeerId(2)), vec![PeerId(5)]);
    }
}
