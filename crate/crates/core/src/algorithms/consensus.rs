//! Fixed-leader PBFT and Raft committing a sequence of synthetic values.
//!
//! The leader runs one instance at a time. PBFT uses three one-hop phases
//! (pre-prepare, prepare, commit); the leader's pre-prepare counts as its own
//! prepare. Raft uses two (request, ack). The leader records a latency sample
//! when it observes the quorum and starts the next instance in the following
//! round. There is no leader change and no retransmission.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::algorithms::{AlgorithmKind, Params};
use crate::config::{ConfigError, RunConfig};
use crate::log::LogDocument;
use crate::metrics::{field_u64, MetricError};
use crate::network::NodeId;
use crate::node::{Node, NodeContext, NodeError, Protocol};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusVariant {
    Pbft,
    Raft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusRole {
    Leader,
    Replica { leader: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusMessage {
    PrePrepare { seq: u64, value: u64 },
    Prepare { seq: u64, value: u64 },
    Commit { seq: u64, value: u64 },
    Request { seq: u64, value: u64 },
    Ack { seq: u64 },
}

/// `f = ⌊(n − 1) / 3⌋`.
pub fn fault_bound(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

/// Matching prepares required from other nodes: `2f`.
pub fn prepare_threshold(n: usize) -> usize {
    2 * fault_bound(n)
}

/// Matching commits required, own included: `2f + 1`.
pub fn commit_threshold(n: usize) -> usize {
    2 * fault_bound(n) + 1
}

/// Raft majority, leader included: `⌊n / 2⌋ + 1`.
pub fn raft_quorum(n: usize) -> usize {
    n / 2 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PbftPhase {
    /// Votes seen but no pre-prepare yet.
    Pending,
    PrePrepared,
    Prepared,
    Committed,
}

#[derive(Debug, Clone)]
pub struct PbftInstance {
    pub seq: u64,
    pub value: Option<u64>,
    pub phase: PbftPhase,
    pub prepares: BTreeMap<NodeId, u64>,
    pub commits: BTreeMap<NodeId, u64>,
}

impl PbftInstance {
    fn new(seq: u64) -> Self {
        PbftInstance {
            seq,
            value: None,
            phase: PbftPhase::Pending,
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
        }
    }

    fn matching(votes: &BTreeMap<NodeId, u64>, value: u64, except: Option<NodeId>) -> usize {
        votes.iter().filter(|(&n, &v)| v == value && Some(n) != except).count()
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    seq: u64,
    value: u64,
    start_round: u64,
    acks: BTreeSet<NodeId>,
}

/// One completed instance as seen by the leader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencySample {
    pub seq: u64,
    pub start_round: u64,
    pub end_round: u64,
}

impl LatencySample {
    pub fn latency(&self) -> u64 {
        self.end_round - self.start_round
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsensusParams {
    pub variant: ConsensusVariant,
    pub leader: NodeId,
    /// Number of values the leader commits; unbounded when `None`.
    pub values: Option<u64>,
}

#[derive(Debug)]
pub struct ConsensusNode {
    id: NodeId,
    n: usize,
    role: ConsensusRole,
    params: ConsensusParams,
    instances: BTreeMap<u64, PbftInstance>,
    in_flight: Option<InFlight>,
    next_seq: u64,
    committed: BTreeMap<u64, u64>,
    samples: Vec<LatencySample>,
}

impl ConsensusNode {
    pub fn new(id: NodeId, n: usize, params: ConsensusParams) -> Self {
        let role =
            if id == params.leader { ConsensusRole::Leader } else { ConsensusRole::Replica { leader: params.leader } };
        ConsensusNode {
            id,
            n,
            role,
            params,
            instances: BTreeMap::new(),
            in_flight: None,
            next_seq: 0,
            committed: BTreeMap::new(),
            samples: Vec::new(),
        }
    }

    pub fn role(&self) -> ConsensusRole {
        self.role
    }

    /// Values this node has committed, by sequence number.
    pub fn committed(&self) -> &BTreeMap<u64, u64> {
        &self.committed
    }

    pub fn samples(&self) -> &[LatencySample] {
        &self.samples
    }

    pub fn instance(&self, seq: u64) -> Option<&PbftInstance> {
        self.instances.get(&seq)
    }

    fn is_leader(&self) -> bool {
        self.role == ConsensusRole::Leader
    }

    fn record_commit(&mut self, ctx: &mut NodeContext<ConsensusMessage>, seq: u64, value: u64) {
        self.committed.insert(seq, value);
        ctx.log_with("commit", || json!({"sequence": seq, "value": value}));
    }

    fn conflict(ctx: &mut NodeContext<ConsensusMessage>, seq: u64, known: u64, got: u64, from: NodeId) {
        ctx.log_with("protocolError", || json!({"sequence": seq, "known": known, "received": got, "from": from}));
    }

    fn note_vote(
        ctx: &mut NodeContext<ConsensusMessage>,
        seq: u64,
        votes: &mut BTreeMap<NodeId, u64>,
        from: NodeId,
        value: u64,
    ) {
        match votes.get(&from) {
            Some(&known) if known != value => Self::conflict(ctx, seq, known, value, from),
            Some(_) => {}
            None => {
                votes.insert(from, value);
            }
        }
    }

    fn complete(&mut self, ctx: &mut NodeContext<ConsensusMessage>) {
        let Some(flight) = self.in_flight.take() else { return };
        let sample = LatencySample { seq: flight.seq, start_round: flight.start_round, end_round: ctx.round() };
        self.samples.push(sample);
        if self.params.variant == ConsensusVariant::Raft {
            self.record_commit(ctx, flight.seq, flight.value);
        }
        ctx.log_with("latency", || {
            json!({
                "sequence": sample.seq,
                "startRound": sample.start_round,
                "endRound": sample.end_round,
                "latency": sample.latency(),
            })
        });
    }

    fn start_instance(&mut self, ctx: &mut NodeContext<ConsensusMessage>) {
        if self.params.values.is_some_and(|limit| self.next_seq >= limit) {
            return;
        }
        let seq = self.next_seq;
        let value = seq;
        self.next_seq += 1;
        self.in_flight = Some(InFlight { seq, value, start_round: ctx.round(), acks: BTreeSet::from([self.id]) });
        match self.params.variant {
            ConsensusVariant::Pbft => {
                let mut inst = PbftInstance::new(seq);
                inst.value = Some(value);
                inst.phase = PbftPhase::PrePrepared;
                inst.prepares.insert(self.id, value);
                self.instances.insert(seq, inst);
                ctx.broadcast(ConsensusMessage::PrePrepare { seq, value });
            }
            ConsensusVariant::Raft => ctx.broadcast(ConsensusMessage::Request { seq, value }),
        }
    }

    pub fn pbft_round(&mut self, ctx: &mut NodeContext<ConsensusMessage>) -> Result<(), NodeError> {
        let mut touched = BTreeSet::new();
        while let Some(packet) = ctx.try_pop_in_stream() {
            let from = packet.source;
            match packet.payload {
                ConsensusMessage::PrePrepare { seq, value } => {
                    if from != self.params.leader {
                        continue;
                    }
                    let inst = self.instances.entry(seq).or_insert_with(|| PbftInstance::new(seq));
                    match inst.value {
                        Some(known) if known != value => Self::conflict(ctx, seq, known, value, from),
                        Some(_) => {}
                        None => {
                            inst.value = Some(value);
                            inst.phase = PbftPhase::PrePrepared;
                            // The pre-prepare stands in for the leader's prepare.
                            Self::note_vote(ctx, seq, &mut inst.prepares, from, value);
                            ctx.broadcast(ConsensusMessage::Prepare { seq, value });
                        }
                    }
                    touched.insert(seq);
                }
                ConsensusMessage::Prepare { seq, value } => {
                    let inst = self.instances.entry(seq).or_insert_with(|| PbftInstance::new(seq));
                    Self::note_vote(ctx, seq, &mut inst.prepares, from, value);
                    touched.insert(seq);
                }
                ConsensusMessage::Commit { seq, value } => {
                    let inst = self.instances.entry(seq).or_insert_with(|| PbftInstance::new(seq));
                    Self::note_vote(ctx, seq, &mut inst.commits, from, value);
                    touched.insert(seq);
                }
                ConsensusMessage::Request { .. } | ConsensusMessage::Ack { .. } => {
                    return Err(NodeError::Protocol { node: self.id, message: "raft message in a pbft run".into() })
                }
            }
        }

        let mut completed = false;
        if let Some(flight) = &self.in_flight {
            touched.insert(flight.seq);
        }
        for seq in touched {
            let Some(inst) = self.instances.get_mut(&seq) else { continue };
            let Some(value) = inst.value else { continue };
            if inst.phase == PbftPhase::PrePrepared
                && PbftInstance::matching(&inst.prepares, value, Some(self.id)) >= prepare_threshold(self.n)
            {
                inst.phase = PbftPhase::Prepared;
                inst.commits.insert(self.id, value);
                ctx.broadcast(ConsensusMessage::Commit { seq, value });
                self.record_commit(ctx, seq, value);
            }
            let inst = self.instances.get_mut(&seq).expect("present");
            let is_current = self.in_flight.as_ref().is_some_and(|f| f.seq == seq);
            if is_current
                && inst.phase == PbftPhase::Prepared
                && PbftInstance::matching(&inst.commits, value, None) >= commit_threshold(self.n)
            {
                inst.phase = PbftPhase::Committed;
                self.complete(ctx);
                completed = true;
            }
        }

        if self.is_leader() && self.in_flight.is_none() && !completed {
            self.start_instance(ctx);
        }
        Ok(())
    }

    pub fn raft_round(&mut self, ctx: &mut NodeContext<ConsensusMessage>) -> Result<(), NodeError> {
        while let Some(packet) = ctx.try_pop_in_stream() {
            let from = packet.source;
            match packet.payload {
                ConsensusMessage::Request { seq, .. } => {
                    if from == self.params.leader && !self.is_leader() {
                        ctx.unicast(from, ConsensusMessage::Ack { seq })?;
                    }
                }
                ConsensusMessage::Ack { seq } => {
                    if let Some(flight) = self.in_flight.as_mut().filter(|f| f.seq == seq) {
                        flight.acks.insert(from);
                    }
                }
                _ => return Err(NodeError::Protocol { node: self.id, message: "pbft message in a raft run".into() }),
            }
        }
        let mut completed = false;
        if self.in_flight.as_ref().is_some_and(|f| f.acks.len() >= raft_quorum(self.n)) {
            self.complete(ctx);
            completed = true;
        }
        if self.is_leader() && self.in_flight.is_none() && !completed {
            self.start_instance(ctx);
        }
        Ok(())
    }
}

impl Node for ConsensusNode {
    type Message = ConsensusMessage;

    fn perform_computation(&mut self, ctx: &mut NodeContext<ConsensusMessage>) -> Result<(), NodeError> {
        match self.params.variant {
            ConsensusVariant::Pbft => self.pbft_round(ctx),
            ConsensusVariant::Raft => self.raft_round(ctx),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Consensus {
    pub params: ConsensusParams,
    pub nodes: usize,
}

impl Consensus {
    pub fn from_config(config: &RunConfig) -> Result<Self, ConfigError> {
        let variant = match config.algorithm {
            AlgorithmKind::Pbft => ConsensusVariant::Pbft,
            AlgorithmKind::Raft => ConsensusVariant::Raft,
            other => {
                return Err(ConfigError::schema("algorithm", format!("{} is not a consensus protocol", other.name())))
            }
        };
        let params = Params::new(&config.algorithm_params, &["leaderId", "values"])?;
        let first = config.topology.nodes().next().expect("topologies are non-empty");
        let leader = match params.uint("leaderId", 0, u64::from(u32::MAX))? {
            Some(id) => {
                let id = NodeId(id as u32);
                if !config.topology.contains(id) {
                    return Err(ConfigError::schema(
                        "algorithmParams.leaderId",
                        format!("node {id} is not in the topology"),
                    ));
                }
                id
            }
            None => first,
        };
        let values = params.uint("values", 0, u64::MAX)?;
        let ids: Vec<NodeId> = config.topology.nodes().collect();
        for &u in &ids {
            let neighbors = config.topology.neighbors(u);
            if let Some(&v) = ids.iter().find(|&&v| v != u && !neighbors.contains(&v)) {
                return Err(ConfigError::schema(
                    "topology",
                    format!("consensus needs a complete graph; {u} has no channel to {v}"),
                ));
            }
        }
        Ok(Consensus { params: ConsensusParams { variant, leader, values }, nodes: ids.len() })
    }
}

impl Protocol for Consensus {
    type Message = ConsensusMessage;
    type Node = ConsensusNode;

    fn create_node(&self, ctx: &mut NodeContext<ConsensusMessage>) -> Result<ConsensusNode, NodeError> {
        Ok(ConsensusNode::new(ctx.id(), self.nodes, self.params))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySummary {
    pub mean: f64,
    pub samples: u64,
}

/// Pooled mean of `endRound − startRound` over every latency sample of the run.
pub fn mean_latency(doc: &LogDocument) -> Result<LatencySummary, MetricError> {
    let records = doc.records("latency");
    if records.is_empty() {
        return Err(MetricError::NoSamples("latency"));
    }
    let mut total = 0u64;
    for r in records {
        total += field_u64(r, "latency", "endRound")? - field_u64(r, "latency", "startRound")?;
    }
    Ok(LatencySummary { mean: total as f64 / records.len() as f64, samples: records.len() as u64 })
}

pub fn mean_of(samples: &[LatencySample]) -> Result<f64, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::NoSamples("latency"));
    }
    Ok(samples.iter().map(|s| s.latency() as f64).sum::<f64>() / samples.len() as f64)
}
