//! The interface every simulated algorithm implements.
//!
//! A [`Protocol`] creates one [`Node`] per topology node and may observe the
//! whole population between rounds. Each node only sees its own
//! [`NodeContext`]: identity, neighbors, inbound stream, staged sends, the
//! current round, a private random stream and a log buffer.

use std::collections::VecDeque;

use serde_json::Value;
use thiserror::Error;

use crate::log::LogBuffer;
use crate::network::{NodeId, Packet};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NodeError {
    #[error("node {from} sent to {to}, which is not a neighbor")]
    NotNeighbor { from: NodeId, to: NodeId },
    #[error("node {0} popped an empty inbound stream")]
    EmptyInStream(NodeId),
    #[error("node {node} added link to unknown node {peer}")]
    UnknownPeer { node: NodeId, peer: NodeId },
    #[error("node {0} tried to add a link after initialization")]
    LinkAfterInit(NodeId),
    #[error("protocol error at node {node}: {message}")]
    Protocol { node: NodeId, message: String },
}

/// Per-node view of the simulation.
#[derive(Debug)]
pub struct NodeContext<M> {
    id: NodeId,
    neighbors: Vec<NodeId>,
    in_stream: VecDeque<Packet<M>>,
    out_buffer: Vec<(NodeId, M)>,
    round: u64,
    computation: u64,
    rng: SimRng,
    log: LogBuffer,
    initializing: bool,
    added_links: Vec<NodeId>,
}

impl<M> NodeContext<M> {
    /// A context in its initialization state (links may still be added).
    /// The engine builds these; algorithm unit tests may build them directly.
    pub fn new(id: NodeId, neighbors: Vec<NodeId>, rng: SimRng, log: LogBuffer) -> Self {
        NodeContext {
            id,
            neighbors,
            in_stream: VecDeque::new(),
            out_buffer: Vec::new(),
            round: 0,
            computation: 0,
            rng,
            log,
            initializing: true,
            added_links: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn neighbors(&self) -> &[NodeId] {
        &self.neighbors
    }

    pub fn is_neighbor(&self, peer: NodeId) -> bool {
        self.neighbors.contains(&peer)
    }

    /// Current round of the computation.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn computation(&self) -> u64 {
        self.computation
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    /// Stages one send to `dest`, which must be a neighbor.
    pub fn unicast(&mut self, dest: NodeId, payload: M) -> Result<(), NodeError> {
        if !self.is_neighbor(dest) {
            return Err(NodeError::NotNeighbor { from: self.id, to: dest });
        }
        self.out_buffer.push((dest, payload));
        Ok(())
    }

    pub fn in_stream_empty(&self) -> bool {
        self.in_stream.is_empty()
    }

    pub fn in_stream_len(&self) -> usize {
        self.in_stream.len()
    }

    /// Removes the head of the inbound stream.
    pub fn pop_in_stream(&mut self) -> Result<Packet<M>, NodeError> {
        self.in_stream.pop_front().ok_or(NodeError::EmptyInStream(self.id))
    }

    pub fn try_pop_in_stream(&mut self) -> Option<Packet<M>> {
        self.in_stream.pop_front()
    }

    pub fn log(&mut self, tag: &str, payload: Value) {
        self.log.append(tag, payload);
    }

    pub fn log_with(&mut self, tag: &str, payload: impl FnOnce() -> Value) {
        self.log.append_with(tag, payload);
    }

    pub fn log_enabled(&self, tag: &str) -> bool {
        self.log.is_enabled(tag)
    }

    /// Declares an extra outgoing channel `id -> peer`. Only valid while the node is being created.
    pub fn add_link(&mut self, peer: NodeId) -> Result<(), NodeError> {
        if !self.initializing {
            return Err(NodeError::LinkAfterInit(self.id));
        }
        if !self.neighbors.contains(&peer) {
            self.neighbors.push(peer);
            self.added_links.push(peer);
        }
        Ok(())
    }

    // Engine side.

    pub fn added_links(&self) -> &[NodeId] {
        &self.added_links
    }

    pub fn finish_initialization(&mut self) {
        self.initializing = false;
    }

    pub fn set_clock(&mut self, computation: u64, round: u64) {
        self.computation = computation;
        self.round = round;
    }

    pub fn deliver(&mut self, packet: Packet<M>) {
        debug_assert_eq!(packet.destination, self.id);
        self.in_stream.push_back(packet);
    }

    pub fn staged(&self) -> &[(NodeId, M)] {
        &self.out_buffer
    }

    pub fn take_outbox(&mut self) -> Vec<(NodeId, M)> {
        std::mem::take(&mut self.out_buffer)
    }

    pub fn log_buffer_mut(&mut self) -> &mut LogBuffer {
        &mut self.log
    }
}

impl<M: Clone> NodeContext<M> {
    /// Stages one copy of `payload` per outgoing channel, in neighbor order.
    pub fn broadcast(&mut self, payload: M) {
        let Some((last, rest)) = self.neighbors.split_last() else {
            return;
        };
        self.out_buffer.reserve(self.neighbors.len());
        for &dest in rest {
            self.out_buffer.push((dest, payload.clone()));
        }
        self.out_buffer.push((*last, payload));
    }
}

/// Harness-level view handed to the between-round hooks of a [`Protocol`].
pub struct RoundContext<'a> {
    pub(crate) computation: u64,
    pub(crate) round: u64,
    pub(crate) length: u64,
    pub(crate) ids: &'a [NodeId],
    pub(crate) rng: &'a mut SimRng,
    pub(crate) log: &'a mut LogBuffer,
}

impl<'a> RoundContext<'a> {
    pub fn new(
        computation: u64,
        round: u64,
        length: u64,
        ids: &'a [NodeId],
        rng: &'a mut SimRng,
        log: &'a mut LogBuffer,
    ) -> Self {
        RoundContext { computation, round, length, ids, rng, log }
    }

    pub fn computation(&self) -> u64 {
        self.computation
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn rounds_per_computation(&self) -> u64 {
        self.length
    }

    /// Node ids in the same order as the node slice passed to the hook.
    pub fn node_ids(&self) -> &[NodeId] {
        self.ids
    }

    /// Harness random stream, independent of every node and channel stream.
    pub fn rng(&mut self) -> &mut SimRng {
        self.rng
    }

    pub fn log(&mut self, tag: &str, payload: Value) {
        self.log.append(tag, payload);
    }

    pub fn log_with(&mut self, tag: &str, payload: impl FnOnce() -> Value) {
        self.log.append_with(tag, payload);
    }
}

/// Local behavior of one simulated process.
pub trait Node: Send {
    type Message;

    /// Compute phase: runs exactly once per node per round.
    fn perform_computation(&mut self, ctx: &mut NodeContext<Self::Message>) -> Result<(), NodeError>;
}

/// An algorithm: node factory plus optional whole-population hooks.
pub trait Protocol: Sync {
    type Message: Clone + Send;
    type Node: Node<Message = Self::Message>;

    /// Initializes the node owning `ctx`. May add outgoing links.
    fn create_node(&self, ctx: &mut NodeContext<Self::Message>) -> Result<Self::Node, NodeError>;

    /// Runs after the receive phase and before compute; used for workload injection.
    fn before_round(&self, _nodes: &mut [Self::Node], _ctx: &mut RoundContext<'_>) {}

    /// Runs after the send phase; used for whole-network summaries.
    fn after_round(&self, _nodes: &[Self::Node], _ctx: &mut RoundContext<'_>) {}

    /// Runs once after the last round of a computation that did not abort.
    fn end_computation(&self, _nodes: &[Self::Node], _ctx: &mut RoundContext<'_>) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::TagFilter;
    use crate::rng::{stream_rng, Stream};
    use std::sync::Arc;

    fn ctx(id: u32, neighbors: &[u32]) -> NodeContext<&'static str> {
        NodeContext::new(
            NodeId(id),
            neighbors.iter().copied().map(NodeId).collect(),
            stream_rng(0, 0, Stream::Node(NodeId(id))),
            LogBuffer::new(Arc::new(TagFilter::all_but_trace())),
        )
    }

    fn packet(src: u32, dst: u32, payload: &'static str) -> Packet<&'static str> {
        Packet { source: NodeId(src), destination: NodeId(dst), send_round: 0, delay: 1, delivery_round: 1, payload }
    }

    #[test]
    fn broadcast_stages_one_per_neighbor() {
        let neighbors: Vec<u32> = (1..20).collect();
        let mut c = ctx(0, &neighbors);
        c.broadcast("tx");
        assert_eq!(c.staged().len(), 19);
        let lonely = &mut ctx(0, &[]);
        lonely.broadcast("tx");
        assert!(lonely.staged().is_empty());
    }

    #[test]
    fn two_broadcasts_keep_call_order() {
        let mut c = ctx(0, &[1, 2]);
        c.broadcast("a");
        c.broadcast("b");
        let staged: Vec<(u32, &str)> = c.staged().iter().map(|(d, m)| (d.0, *m)).collect();
        assert_eq!(staged, vec![(1, "a"), (2, "a"), (1, "b"), (2, "b")]);
        assert_eq!(c.take_outbox().len(), 4);
        assert!(c.staged().is_empty());
    }

    #[test]
    fn unicast_requires_neighbor() {
        let mut c = ctx(1, &[0, 2]);
        c.unicast(NodeId(2), "succ").unwrap();
        assert_eq!(c.staged(), &[(NodeId(2), "succ")]);
        assert_eq!(c.unicast(NodeId(3), "x"), Err(NodeError::NotNeighbor { from: NodeId(1), to: NodeId(3) }));
        assert_eq!(c.staged().len(), 1);
    }

    #[test]
    fn in_stream_drains_fifo() {
        let mut c = ctx(1, &[0]);
        c.deliver(packet(0, 1, "a"));
        c.deliver(packet(0, 1, "b"));
        assert!(!c.in_stream_empty());
        assert_eq!(c.pop_in_stream().unwrap().payload, "a");
        assert_eq!(c.pop_in_stream().unwrap().payload, "b");
        assert!(c.in_stream_empty());
        assert_eq!(c.pop_in_stream(), Err(NodeError::EmptyInStream(NodeId(1))));
    }

    #[test]
    fn links_only_during_init() {
        let mut c = ctx(0, &[1]);
        c.add_link(NodeId(5)).unwrap();
        c.add_link(NodeId(1)).unwrap();
        assert_eq!(c.added_links(), &[NodeId(5)]);
        assert_eq!(c.neighbors(), &[NodeId(1), NodeId(5)]);
        c.finish_initialization();
        assert_eq!(c.add_link(NodeId(6)), Err(NodeError::LinkAfterInit(NodeId(0))));
    }
}
