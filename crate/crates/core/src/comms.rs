//! All-to-all planning over the node topology.
//!
//! [`plan_direct`] sends every rank-to-rank payload as its own message.
//! [`plan_two_tier`] first gathers cross-node payloads on a per-node leader,
//! exchanges one aggregated message per ordered node pair, then scatters on
//! the destination node. Every message records the end-to-end flows it
//! carries so delivery can be checked exactly with [`trace_delivery`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{message_time, ClusterSpec, LinkPath};

#[derive(Debug, Error, PartialEq)]
pub enum CommsError {
    #[error("transfer matrix has {matrix} ranks but the cluster has {nodes} nodes x {gpus} GPUs")]
    RankTopologyMismatch { matrix: usize, nodes: usize, gpus: usize },
    #[error("transfer matrix row {0} has the wrong length")]
    RaggedMatrix(usize),
    #[error("phase {phase}: rank {rank} does not hold {bytes} bytes of flow {src}->{dst}")]
    MissingPayload { phase: usize, rank: usize, src: usize, dst: usize, bytes: u64 },
    #[error("message {src}->{dst} declares {declared} bytes but carries {carried}")]
    PayloadMismatch { src: usize, dst: usize, declared: u64, carried: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub num_ranks: usize,
    pub bytes: Vec<Vec<u64>>,
}

impl TransferMatrix {
    pub fn new(bytes: Vec<Vec<u64>>) -> Result<Self, CommsError> {
        let n = bytes.len();
        if let Some(row) = bytes.iter().position(|r| r.len() != n) {
            return Err(CommsError::RaggedMatrix(row));
        }
        Ok(Self { num_ranks: n, bytes })
    }

    pub fn zeros(num_ranks: usize) -> Self {
        Self { num_ranks, bytes: vec![vec![0; num_ranks]; num_ranks] }
    }

    pub fn uniform(num_ranks: usize, bytes: u64) -> Self {
        let mut m = Self::zeros(num_ranks);
        for (i, row) in m.bytes.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i != j {
                    *v = bytes;
                }
            }
        }
        m
    }

    fn check(&self, spec: &ClusterSpec) -> Result<(), CommsError> {
        if self.num_ranks != spec.num_ranks() || self.bytes.len() != self.num_ranks {
            return Err(CommsError::RankTopologyMismatch {
                matrix: self.num_ranks,
                nodes: spec.num_nodes,
                gpus: spec.gpus_per_node,
            });
        }
        if let Some(row) = self.bytes.iter().position(|r| r.len() != self.num_ranks) {
            return Err(CommsError::RaggedMatrix(row));
        }
        Ok(())
    }

    /// Off-diagonal bytes whose endpoints sit on different nodes.
    pub fn inter_node_bytes(&self, spec: &ClusterSpec) -> u64 {
        let mut total = 0;
        for (s, row) in self.bytes.iter().enumerate() {
            for (d, &b) in row.iter().enumerate() {
                if spec.node_of(s) != spec.node_of(d) {
                    total += b;
                }
            }
        }
        total
    }
}

/// Part of a message payload that travels from `src` to its final `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Flow {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub path: LinkPath,
    pub flows: Vec<Flow>,
}

impl Message {
    fn new(src: usize, dst: usize, path: LinkPath, flows: Vec<Flow>) -> Self {
        let bytes = flows.iter().map(|f| f.bytes).sum();
        Self { src, dst, bytes, path, flows }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub messages: Vec<Message>,
}

impl Phase {
    pub fn count(&self, path: LinkPath) -> usize {
        self.messages.iter().filter(|m| m.path == path).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommPlan {
    pub phases: Vec<Phase>,
    /// Aggregation rank of every node (lowest rank on the node).
    pub leaders: Vec<usize>,
}

impl CommPlan {
    pub fn inter_messages(&self) -> usize {
        self.phases.iter().map(|p| p.count(LinkPath::Inter)).sum()
    }

    pub fn inter_bytes(&self) -> u64 {
        self.phases.iter().flat_map(|p| &p.messages).filter(|m| m.path == LinkPath::Inter).map(|m| m.bytes).sum()
    }
}

fn leaders(spec: &ClusterSpec) -> Vec<usize> {
    (0..spec.num_nodes).map(|n| n * spec.gpus_per_node).collect()
}

fn path_between(a: usize, b: usize, spec: &ClusterSpec) -> LinkPath {
    if spec.node_of(a) == spec.node_of(b) {
        LinkPath::Intra
    } else {
        LinkPath::Inter
    }
}

/// One message per non-zero off-diagonal entry, all in a single phase.
pub fn plan_direct(m: &TransferMatrix, spec: &ClusterSpec) -> Result<CommPlan, CommsError> {
    m.check(spec)?;
    let mut phase = Phase::default();
    for (src, row) in m.bytes.iter().enumerate() {
        for (dst, &bytes) in row.iter().enumerate() {
            if src != dst && bytes > 0 {
                phase.messages.push(Message::new(src, dst, path_between(src, dst, spec), vec![Flow { src, dst, bytes }]));
            }
        }
    }
    Ok(CommPlan { phases: vec![phase], leaders: leaders(spec) })
}

/// Gather on node leaders, exchange leader to leader, scatter.
///
/// Phase 1 carries same-node traffic directly plus one message per
/// (non-leader rank, remote node) to the local leader. Phase 2 holds one
/// message per ordered node pair with traffic. Phase 3 delivers from the
/// destination leader to each final rank other than itself.
pub fn plan_two_tier(m: &TransferMatrix, spec: &ClusterSpec) -> Result<CommPlan, CommsError> {
    m.check(spec)?;
    let leaders = leaders(spec);
    let node_count = spec.num_nodes;
    let mut gather = Phase::default();
    // (src node, dst node) -> flows
    let mut exchange: BTreeMap<(usize, usize), Vec<Flow>> = BTreeMap::new();
    // final rank -> flows arriving from remote nodes
    let mut scatter: BTreeMap<usize, Vec<Flow>> = BTreeMap::new();

    for src in 0..m.num_ranks {
        let src_node = spec.node_of(src);
        let mut to_node: Vec<Vec<Flow>> = vec![Vec::new(); node_count];
        for dst in 0..m.num_ranks {
            let bytes = m.bytes[src][dst];
            if src == dst || bytes == 0 {
                continue;
            }
            let flow = Flow { src, dst, bytes };
            let dst_node = spec.node_of(dst);
            if dst_node == src_node {
                gather.messages.push(Message::new(src, dst, LinkPath::Intra, vec![flow]));
            } else {
                to_node[dst_node].push(flow);
                exchange.entry((src_node, dst_node)).or_default().push(flow);
                if dst != leaders[dst_node] {
                    scatter.entry(dst).or_default().push(flow);
                }
            }
        }
        if src != leaders[src_node] {
            for flows in to_node.into_iter().filter(|f| !f.is_empty()) {
                gather.messages.push(Message::new(src, leaders[src_node], LinkPath::Intra, flows));
            }
        }
    }

    let inter = Phase {
        messages: exchange
            .into_iter()
            .map(|((a, b), flows)| Message::new(leaders[a], leaders[b], LinkPath::Inter, flows))
            .collect(),
    };
    let deliver = Phase {
        messages: scatter
            .into_iter()
            .map(|(dst, flows)| Message::new(leaders[spec.node_of(dst)], dst, LinkPath::Intra, flows))
            .collect(),
    };
    Ok(CommPlan { phases: vec![gather, inter, deliver], leaders })
}

/// Replays a plan by moving flows between ranks and returns the bytes that
/// ended at each flow's final destination, indexed `[src][dst]`.
pub fn trace_delivery(plan: &CommPlan, m: &TransferMatrix) -> Result<Vec<Vec<u64>>, CommsError> {
    // (holder, src, dst) -> bytes
    let mut held: BTreeMap<(usize, usize, usize), u64> = BTreeMap::new();
    for (s, row) in m.bytes.iter().enumerate() {
        for (d, &b) in row.iter().enumerate() {
            if s != d && b > 0 {
                held.insert((s, s, d), b);
            }
        }
    }
    for (phase_idx, phase) in plan.phases.iter().enumerate() {
        let mut arriving = Vec::new();
        for msg in &phase.messages {
            let carried: u64 = msg.flows.iter().map(|f| f.bytes).sum();
            if carried != msg.bytes {
                return Err(CommsError::PayloadMismatch { src: msg.src, dst: msg.dst, declared: msg.bytes, carried });
            }
            for f in &msg.flows {
                let key = (msg.src, f.src, f.dst);
                match held.get_mut(&key) {
                    Some(b) if *b >= f.bytes => {
                        *b -= f.bytes;
                        if *b == 0 {
                            held.remove(&key);
                        }
                    }
                    _ => {
                        return Err(CommsError::MissingPayload {
                            phase: phase_idx,
                            rank: msg.src,
                            src: f.src,
                            dst: f.dst,
                            bytes: f.bytes,
                        })
                    }
                }
                arriving.push(((msg.dst, f.src, f.dst), f.bytes));
            }
        }
        for (key, bytes) in arriving {
            *held.entry(key).or_default() += bytes;
        }
    }
    let mut delivered = vec![vec![0; m.num_ranks]; m.num_ranks];
    for ((holder, s, d), b) in held {
        if holder == d {
            delivered[s][d] += b;
        }
    }
    Ok(delivered)
}

/// Time and link loads of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCost {
    pub total_seconds: f64,
    pub phase_seconds: Vec<f64>,
    /// Bytes leaving each node over its spine uplink.
    pub uplink_bytes: Vec<u64>,
    pub uplink_messages: Vec<usize>,
    /// Bytes crossing each node's intra-node fabric.
    pub intra_bytes: Vec<u64>,
    pub intra_messages: Vec<usize>,
}

/// Serializes each link's messages within a phase; a phase lasts as long as
/// its busiest link and phases run back to back.
///
/// Links are the uplink of the sending node (inter messages) and the fabric
/// of the node (intra messages).
pub fn plan_cost(plan: &CommPlan, spec: &ClusterSpec) -> PlanCost {
    let nodes = spec.num_nodes;
    let mut cost = PlanCost {
        total_seconds: 0.0,
        phase_seconds: Vec::with_capacity(plan.phases.len()),
        uplink_bytes: vec![0; nodes],
        uplink_messages: vec![0; nodes],
        intra_bytes: vec![0; nodes],
        intra_messages: vec![0; nodes],
    };
    for phase in &plan.phases {
        let mut uplink = vec![0.0; nodes];
        let mut fabric = vec![0.0; nodes];
        for msg in &phase.messages {
            let node = spec.node_of(msg.src);
            let t = message_time(msg.bytes, msg.path, spec);
            match msg.path {
                LinkPath::Inter => {
                    uplink[node] += t;
                    cost.uplink_bytes[node] += msg.bytes;
                    cost.uplink_messages[node] += 1;
                }
                _ => {
                    fabric[node] += t;
                    cost.intra_bytes[node] += msg.bytes;
                    cost.intra_messages[node] += 1;
                }
            }
        }
        let t = uplink.iter().chain(fabric.iter()).copied().fold(0.0, f64::max);
        cost.phase_seconds.push(t);
        cost.total_seconds += t;
    }
    cost
}

/// Longest per-uplink serialization time over all phases of a plan.
pub fn inter_link_seconds(plan: &CommPlan, spec: &ClusterSpec) -> f64 {
    plan.phases
        .iter()
        .map(|phase| {
            let mut uplink = vec![0.0; spec.num_nodes];
            for msg in phase.messages.iter().filter(|m| m.path == LinkPath::Inter) {
                uplink[spec.node_of(msg.src)] += message_time(msg.bytes, msg.path, spec);
            }
            uplink.into_iter().fold(0.0, f64::max)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(nodes: usize, gpus: usize) -> ClusterSpec {
        ClusterSpec { num_nodes: nodes, gpus_per_node: gpus, quant_comm_factor: 1.0, ..ClusterSpec::default() }
    }

    #[test]
    fn zero_matrix_gives_one_empty_phase() {
        let plan = plan_direct(&TransferMatrix::zeros(4), &spec(2, 2)).unwrap();
        assert_eq!(plan.phases.len(), 1);
        assert!(plan.phases[0].messages.is_empty());
        assert_eq!(plan_cost(&plan, &spec(2, 2)).total_seconds, 0.0);
    }

    #[test]
    fn direct_two_by_two() {
        let plan = plan_direct(&TransferMatrix::uniform(4, 1), &spec(2, 2)).unwrap();
        assert_eq!(plan.phases[0].count(LinkPath::Inter), 8);
        assert_eq!(plan.phases[0].count(LinkPath::Intra), 4);
    }

    #[test]
    fn single_node_is_all_intra() {
        let s = spec(1, 4);
        let m = TransferMatrix::uniform(4, 3);
        let direct = plan_direct(&m, &s).unwrap();
        assert_eq!(direct.inter_messages(), 0);
        let two = plan_two_tier(&m, &s).unwrap();
        assert!(two.phases[1].messages.is_empty() && two.phases[2].messages.is_empty());
    }

    #[test]
    fn two_tier_two_by_two() {
        let s = spec(2, 2);
        let m = TransferMatrix::uniform(4, 1);
        let plan = plan_two_tier(&m, &s).unwrap();
        let inter = &plan.phases[1].messages;
        assert_eq!(inter.len(), 2);
        assert!(inter.iter().all(|msg| msg.bytes == 4));
        assert_eq!((inter[0].src, inter[0].dst), (0, 2));
        assert_eq!((inter[1].src, inter[1].dst), (2, 0));
        let delivered = trace_delivery(&plan, &m).unwrap();
        assert_eq!(delivered, vec![vec![0, 1, 1, 1], vec![1, 0, 1, 1], vec![1, 1, 0, 1], vec![1, 1, 1, 0]]);
    }

    #[test]
    fn node_local_traffic_matches_direct() {
        let s = spec(2, 2);
        let mut m = TransferMatrix::zeros(4);
        m.bytes[0][1] = 5;
        m.bytes[1][0] = 7;
        let direct = plan_direct(&m, &s).unwrap();
        let two = plan_two_tier(&m, &s).unwrap();
        assert_eq!(two.phases[0], direct.phases[0]);
        assert!(two.phases[1].messages.is_empty() && two.phases[2].messages.is_empty());
    }

    #[test]
    fn cost_counts_uplink_messages_and_latency() {
        let mut s = spec(2, 2);
        s.link_latency_inter = 1e-3;
        let m = TransferMatrix::uniform(4, 1);
        let direct = plan_cost(&plan_direct(&m, &s).unwrap(), &s);
        let two = plan_cost(&plan_two_tier(&m, &s).unwrap(), &s);
        assert_eq!(direct.uplink_messages, vec![4, 4]);
        assert_eq!(two.uplink_messages, vec![1, 1]);
        assert_eq!(direct.uplink_bytes, vec![4, 4]);
        assert_eq!(two.uplink_bytes, vec![4, 4]);
        let bw_term = 4.0 / s.inter_node_bw;
        let two_inter = inter_link_seconds(&plan_two_tier(&m, &s).unwrap(), &s);
        let direct_inter = inter_link_seconds(&plan_direct(&m, &s).unwrap(), &s);
        assert!((two_inter - (1e-3 + bw_term)).abs() < 1e-15);
        assert!((direct_inter - (4e-3 + bw_term)).abs() < 1e-15);
    }

    #[test]
    fn topology_mismatch() {
        let err = plan_direct(&TransferMatrix::zeros(3), &spec(2, 2)).unwrap_err();
        assert_eq!(err, CommsError::RankTopologyMismatch { matrix: 3, nodes: 2, gpus: 2 });
        assert!(plan_two_tier(&TransferMatrix::zeros(5), &spec(2, 2)).is_err());
        assert_eq!(TransferMatrix::new(vec![vec![0, 1], vec![0]]), Err(CommsError::RaggedMatrix(1)));
    }

    #[test]
    fn tampered_plan_fails_delivery() {
        let s = spec(2, 2);
        let m = TransferMatrix::uniform(4, 2);
        let mut plan = plan_two_tier(&m, &s).unwrap();
        plan.phases[0].messages.clear();
        assert!(matches!(trace_delivery(&plan, &m), Err(CommsError::MissingPayload { phase: 1, .. })));
    }
}
