//! Topology, channels and packet delivery.
//!
//! A [`Network`] owns one [`Channel`] per directed edge of the topology. All
//! mutation happens in the serialized receive and send phases of a round, so
//! channels carry no synchronization of their own.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_rng, SimRng, Stream};

/// Largest node id accepted by a topology (ids must fit in 31 bits).
pub const MAX_NODE_ID: u32 = (1 << 31) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("node {0} exceeds the maximum node id {MAX_NODE_ID}")]
    IdOutOfRange(u64),
    #[error("edge {from}->{to} names undeclared node {to}")]
    UndeclaredNode { from: NodeId, to: NodeId },
    #[error("edge {from}->{to} is listed more than once")]
    DuplicateEdge { from: NodeId, to: NodeId },
    #[error("topology has no nodes")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("no channel {from}->{to}")]
    UnknownChannel { from: NodeId, to: NodeId },
}

/// Directed adjacency list. Each `(u, v)` pair induces exactly one channel `u -> v`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Topology {
    adjacency: BTreeMap<NodeId, Vec<NodeId>>,
}

impl Topology {
    pub fn from_adjacency(adjacency: BTreeMap<NodeId, Vec<NodeId>>) -> Result<Self, TopologyError> {
        if adjacency.is_empty() {
            return Err(TopologyError::Empty);
        }
        for (&from, neighbors) in &adjacency {
            if from.0 > MAX_NODE_ID {
                return Err(TopologyError::IdOutOfRange(from.0.into()));
            }
            for (i, &to) in neighbors.iter().enumerate() {
                if !adjacency.contains_key(&to) {
                    return Err(TopologyError::UndeclaredNode { from, to });
                }
                if neighbors[..i].contains(&to) {
                    return Err(TopologyError::DuplicateEdge { from, to });
                }
            }
        }
        Ok(Topology { adjacency })
    }

    /// Every node adjacent to every other node; no self-loops.
    pub fn complete(nodes: u32) -> Self {
        let adjacency = (0..nodes).map(|u| (NodeId(u), (0..nodes).filter(|&v| v != u).map(NodeId).collect())).collect();
        Topology { adjacency }
    }

    /// Each node adjacent to its predecessor and successor on the ring.
    pub fn ring(nodes: u32) -> Self {
        let adjacency = (0..nodes)
            .map(|u| {
                let mut neighbors = Vec::with_capacity(2);
                if nodes > 1 {
                    let pred = (u + nodes - 1) % nodes;
                    let succ = (u + 1) % nodes;
                    neighbors.push(NodeId(pred.min(succ)));
                    if succ != pred {
                        neighbors.push(NodeId(pred.max(succ)));
                    }
                }
                (NodeId(u), neighbors)
            })
            .collect();
        Topology { adjacency }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.adjacency.contains_key(&id)
    }

    /// Node ids in ascending order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn neighbors(&self, id: NodeId) -> &[NodeId] {
        self.adjacency.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn adjacency(&self) -> &BTreeMap<NodeId, Vec<NodeId>> {
        &self.adjacency
    }

    /// Directed edges in (sender, neighbor order).
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.adjacency.iter().flat_map(|(&u, vs)| vs.iter().map(move |&v| (u, v)))
    }

    pub fn channel_count(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum()
    }
}

/// Law governing per-message delay. Every sample is an integer number of rounds ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DelayDistribution {
    Deterministic {
        value: u64,
    },
    Uniform {
        min: u64,
        max: u64,
    },
    /// Shifted Poisson: `1 + Poisson(mean - 1)`.
    Poisson {
        mean: f64,
    },
}

impl DelayDistribution {
    /// Shifted Poisson with the given mean; a mean of at most one collapses to a constant one-round delay.
    pub fn poisson(mean: f64) -> Self {
        if mean <= 1.0 {
            DelayDistribution::Deterministic { value: 1 }
        } else {
            DelayDistribution::Poisson { mean }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            DelayDistribution::Deterministic { value } if value < 1 => {
                Err(format!("deterministic delay must be at least 1, got {value}"))
            }
            DelayDistribution::Uniform { min, .. } if min < 1 => {
                Err(format!("uniform delay min must be at least 1, got {min}"))
            }
            DelayDistribution::Uniform { min, max } if max < min => {
                Err(format!("uniform delay max {max} is below min {min}"))
            }
            DelayDistribution::Poisson { mean } if !(mean.is_finite() && mean > 1.0) => {
                Err(format!("poisson delay mean must be finite and greater than 1, got {mean}"))
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DelayDistribution::Deterministic { value } => value as f64,
            DelayDistribution::Uniform { min, max } => (min + max) as f64 / 2.0,
            DelayDistribution::Poisson { mean } => mean,
        }
    }

    /// Upper bound on a sample, if the law has one.
    pub fn max_delay(&self) -> Option<u64> {
        match *self {
            DelayDistribution::Deterministic { value } => Some(value),
            DelayDistribution::Uniform { max, .. } => Some(max),
            DelayDistribution::Poisson { .. } => None,
        }
    }

    pub fn sampler(&self) -> DelaySampler {
        match *self {
            DelayDistribution::Deterministic { value } => DelaySampler::Constant(value.max(1)),
            DelayDistribution::Uniform { min, max } => DelaySampler::Uniform(min.max(1), max.max(min.max(1))),
            DelayDistribution::Poisson { mean } => match Poisson::new(mean - 1.0) {
                Ok(p) => DelaySampler::ShiftedPoisson(p),
                Err(_) => DelaySampler::Constant(1),
            },
        }
    }

    /// One delay sample; builds a throwaway sampler.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.sampler().sample(rng)
    }
}

/// A [`DelayDistribution`] with its parameters prepared for repeated sampling.
#[derive(Debug, Clone, Copy)]
pub enum DelaySampler {
    Constant(u64),
    Uniform(u64, u64),
    ShiftedPoisson(Poisson<f64>),
}

impl DelaySampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            DelaySampler::Constant(v) => *v,
            DelaySampler::Uniform(lo, hi) => rng.random_range(*lo..=*hi),
            DelaySampler::ShiftedPoisson(p) => 1 + p.sample(rng) as u64,
        }
    }
}

/// Routed envelope around an algorithm message.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet<M> {
    pub source: NodeId,
    pub destination: NodeId,
    pub send_round: u64,
    pub delay: u64,
    pub delivery_round: u64,
    pub payload: M,
}

impl<M> Packet<M> {
    pub fn payload(&self) -> &M {
        &self.payload
    }

    pub fn into_payload(self) -> M {
        self.payload
    }
}

/// Delay, loss and ordering discipline shared by the channels of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSettings {
    pub delay: DelayDistribution,
    pub loss_probability: f64,
    pub fifo: bool,
}

impl Default for ChannelSettings {
    fn default() -> Self {
        ChannelSettings { delay: DelayDistribution::Deterministic { value: 1 }, loss_probability: 0.0, fifo: true }
    }
}

/// Unicast link from one sender to one receiver.
#[derive(Debug)]
pub struct Channel<M> {
    sender: NodeId,
    receiver: NodeId,
    in_flight: VecDeque<Packet<M>>,
    sampler: DelaySampler,
    loss_probability: f64,
    fifo: bool,
    last_delivery_round: u64,
    rng: SimRng,
}

impl<M> Channel<M> {
    pub fn new(sender: NodeId, receiver: NodeId, settings: &ChannelSettings, rng: SimRng) -> Self {
        Channel {
            sender,
            receiver,
            in_flight: VecDeque::new(),
            sampler: settings.delay.sampler(),
            loss_probability: settings.loss_probability,
            fifo: settings.fifo,
            last_delivery_round: 0,
            rng,
        }
    }

    pub fn sender(&self) -> NodeId {
        self.sender
    }

    pub fn receiver(&self) -> NodeId {
        self.receiver
    }

    pub fn is_fifo(&self) -> bool {
        self.fifo
    }

    pub fn len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_flight.is_empty()
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &Packet<M>> {
        self.in_flight.iter()
    }

    /// Loss trial, then delay sample. Returns the queued packet, or `None` if the message was lost.
    ///
    /// In FIFO mode the delivery round is clamped to be no earlier than the
    /// previous packet's, so random delays never reorder a channel.
    pub fn enqueue(&mut self, payload: M, send_round: u64) -> Option<&Packet<M>> {
        if self.loss_probability > 0.0 && self.rng.random_bool(self.loss_probability) {
            return None;
        }
        let delay = self.sampler.sample(&mut self.rng);
        let mut delivery_round = send_round + delay;
        if self.fifo {
            delivery_round = delivery_round.max(self.last_delivery_round);
        }
        self.last_delivery_round = self.last_delivery_round.max(delivery_round);
        self.in_flight.push_back(Packet {
            source: self.sender,
            destination: self.receiver,
            send_round,
            delay,
            delivery_round,
            payload,
        });
        self.in_flight.back()
    }

    /// Moves every packet deliverable by `round` into `out`.
    ///
    /// FIFO channels release the maximal ready prefix; non-FIFO channels release
    /// every ready packet, keeping queue order among them.
    pub fn take_deliverable(&mut self, round: u64, out: &mut Vec<Packet<M>>) {
        if self.fifo {
            while self.in_flight.front().is_some_and(|p| p.delivery_round <= round) {
                out.extend(self.in_flight.pop_front());
            }
        } else if self.in_flight.iter().any(|p| p.delivery_round <= round) {
            let mut pending = VecDeque::with_capacity(self.in_flight.len());
            for p in self.in_flight.drain(..) {
                if p.delivery_round <= round {
                    out.push(p);
                } else {
                    pending.push_back(p);
                }
            }
            self.in_flight = pending;
        }
    }
}

/// All channels of one computation, keyed by `(sender, receiver)`.
#[derive(Debug)]
pub struct Network<M> {
    channels: BTreeMap<(NodeId, NodeId), Channel<M>>,
    settings: ChannelSettings,
    seed: u64,
    computation: u64,
}

impl<M> Network<M> {
    pub fn new(topology: &Topology, settings: ChannelSettings, seed: u64, computation: u64) -> Self {
        let mut network = Network { channels: BTreeMap::new(), settings, seed, computation };
        for (from, to) in topology.edges() {
            network.add_channel(from, to);
        }
        network
    }

    /// Adds `from -> to` if absent. The channel's random stream depends only on its endpoints.
    pub fn add_channel(&mut self, from: NodeId, to: NodeId) {
        let (settings, seed, computation) = (self.settings, self.seed, self.computation);
        self.channels.entry((from, to)).or_insert_with(|| {
            Channel::new(from, to, &settings, stream_rng(seed, computation, Stream::Channel(from, to)))
        });
    }

    pub fn channel(&self, from: NodeId, to: NodeId) -> Option<&Channel<M>> {
        self.channels.get(&(from, to))
    }

    pub fn channels(&self) -> impl Iterator<Item = &Channel<M>> {
        self.channels.values()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn in_flight_count(&self) -> usize {
        self.channels.values().map(Channel::len).sum()
    }

    pub fn enqueue(
        &mut self,
        from: NodeId,
        to: NodeId,
        payload: M,
        send_round: u64,
    ) -> Result<Option<&Packet<M>>, NetworkError> {
        let channel = self.channels.get_mut(&(from, to)).ok_or(NetworkError::UnknownChannel { from, to })?;
        Ok(channel.enqueue(payload, send_round))
    }

    /// Receive-phase sweep: deliverable packets grouped by destination, ordered
    /// by sender id and then by queue order.
    pub fn collect_deliverable(&mut self, round: u64) -> BTreeMap<NodeId, Vec<Packet<M>>> {
        let mut delivered: BTreeMap<NodeId, Vec<Packet<M>>> = BTreeMap::new();
        let mut scratch = Vec::new();
        // Channels iterate in (sender, receiver) order, so each destination's
        // list is already sorted by sender.
        for channel in self.channels.values_mut() {
            channel.take_deliverable(round, &mut scratch);
            if !scratch.is_empty() {
                delivered.entry(channel.receiver).or_default().append(&mut scratch);
            }
        }
        delivered
    }
}
