//! Ring-routed lookups (Chord without fingers) and Kademlia-style prefix shortcuts.
//!
//! Peers carry ids `0..n` on a ring; identifiers are `b = ceil(log2 n)` bits
//! wide and a target is owned by the peer with the same id. The harness
//! injects queries for uniformly random targets at uniformly random origins;
//! queries then hop over the simulated channels until they reach the owner.

use std::collections::VecDeque;

use rand::Rng;
use serde_json::json;

use crate::algorithms::{AlgorithmKind, Params};
use crate::config::{ConfigError, RunConfig};
use crate::log::LogDocument;
use crate::metrics::{field_u64, MetricError};
use crate::network::{NodeId, Topology};
use crate::node::{Node, NodeContext, NodeError, Protocol, RoundContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhtVariant {
    Chord,
    Kademlia,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub id: u64,
    pub target: u32,
    pub origin: NodeId,
    pub hops: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteStep {
    Done,
    Forward(NodeId),
}

/// Identifier width for `n` peers.
pub fn id_bits(n: u32) -> u32 {
    if n <= 1 {
        0
    } else {
        32 - (n - 1).leading_zeros()
    }
}

/// Leading bits shared by `a` and `b` within a `bits`-wide identifier.
pub fn common_prefix(a: u32, b: u32, bits: u32) -> u32 {
    if bits == 0 {
        return 0;
    }
    let diff = (a ^ b) << (32 - bits);
    diff.leading_zeros().min(bits)
}

/// Members of `owner`'s prefix group `l`: same first `l` bits, different bit `l + 1`.
pub fn prefix_group(owner: u32, l: u32, bits: u32, n: u32) -> impl Iterator<Item = u32> {
    let flip = 1u32 << (bits - 1 - l);
    let low = flip - 1;
    let base = (owner ^ flip) & !low;
    (base..=base | low).filter(move |&id| id < n)
}

/// Steps along the ring in the shorter direction. Ties go clockwise.
pub fn chord_route_step(node: u32, target: u32, n: u32) -> RouteStep {
    if node == target {
        return RouteStep::Done;
    }
    let clockwise = (target + n - node) % n;
    if clockwise <= n - clockwise {
        RouteStep::Forward(NodeId((node + 1) % n))
    } else {
        RouteStep::Forward(NodeId((node + n - 1) % n))
    }
}

/// Routing table of one Kademlia peer: one shortcut per nonempty prefix group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KademliaTable {
    pub owner: u32,
    pub bits: u32,
    pub n: u32,
    /// Chosen shortcut per prefix length `0..bits`.
    pub shortcuts: Vec<Option<u32>>,
}

impl KademliaTable {
    pub fn build<R: Rng + ?Sized>(owner: u32, n: u32, rng: &mut R) -> Self {
        let bits = id_bits(n);
        let shortcuts = (0..bits)
            .map(|l| {
                let members: Vec<u32> = prefix_group(owner, l, bits, n).collect();
                if members.is_empty() {
                    None
                } else {
                    Some(members[rng.random_range(0..members.len())])
                }
            })
            .collect();
        KademliaTable { owner, bits, n, shortcuts }
    }

    /// Known peers: shortcuts plus both ring neighbors, ascending and deduplicated.
    pub fn peers(&self) -> Vec<u32> {
        let mut peers: Vec<u32> = self.shortcuts.iter().flatten().copied().collect();
        if self.n > 1 {
            peers.push((self.owner + 1) % self.n);
            peers.push((self.owner + self.n - 1) % self.n);
        }
        peers.retain(|&p| p != self.owner);
        peers.sort_unstable();
        peers.dedup();
        peers
    }

    /// Longest shared prefix with the target, lowest id on ties. Falls back to
    /// the closest XOR distance and then to a ring step if nothing improves.
    pub fn route_step(&self, target: u32) -> (RouteStep, bool) {
        if self.owner == target {
            return (RouteStep::Done, false);
        }
        let peers = self.peers();
        let own_prefix = common_prefix(self.owner, target, self.bits);
        let best = peers.iter().copied().max_by_key(|&p| (common_prefix(p, target, self.bits), std::cmp::Reverse(p)));
        if let Some(p) = best {
            if common_prefix(p, target, self.bits) > own_prefix {
                return (RouteStep::Forward(NodeId(p)), false);
            }
        }
        let own_distance = self.owner ^ target;
        if let Some(p) = peers.iter().copied().min_by_key(|&p| (p ^ target, p)) {
            if p ^ target < own_distance {
                return (RouteStep::Forward(NodeId(p)), true);
            }
        }
        (chord_route_step(self.owner, target, self.n), true)
    }
}

#[derive(Debug, Clone)]
pub struct DhtNode {
    pub n: u32,
    pub table: Option<KademliaTable>,
    /// Queries injected here by the harness, handled at the next compute phase.
    pub injected: VecDeque<Query>,
    pub resolved: Vec<Query>,
}

impl DhtNode {
    fn route(&mut self, id: NodeId, query: Query, ctx: &mut NodeContext<Query>) -> Result<(), NodeError> {
        let (step, fallback) = match &self.table {
            Some(table) => table.route_step(query.target),
            None => (chord_route_step(id.0, query.target, self.n), false),
        };
        match step {
            RouteStep::Done => {
                ctx.log_with(
                    "queryResolved",
                    || json!({"queryId": query.id, "hops": query.hops, "origin": query.origin, "target": query.target}),
                );
                self.resolved.push(query);
            }
            RouteStep::Forward(next) => {
                let forwarded = Query { hops: query.hops + 1, ..query };
                ctx.log_with(
                    "queryForwarded",
                    || json!({"queryId": query.id, "to": next, "hops": forwarded.hops, "fallback": fallback}),
                );
                ctx.unicast(next, forwarded)?;
            }
        }
        Ok(())
    }
}

impl Node for DhtNode {
    type Message = Query;

    fn perform_computation(&mut self, ctx: &mut NodeContext<Query>) -> Result<(), NodeError> {
        let id = ctx.id();
        while let Some(query) = self.injected.pop_front() {
            self.route(id, query, ctx)?;
        }
        while let Some(packet) = ctx.try_pop_in_stream() {
            self.route(id, packet.payload, ctx)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dht {
    pub variant: DhtVariant,
    pub n: u32,
    pub queries_per_round: u64,
    /// Queries are injected only in rounds below this bound.
    pub query_rounds: u64,
}

impl Dht {
    pub fn from_config(config: &RunConfig) -> Result<Self, ConfigError> {
        let variant = match config.algorithm {
            AlgorithmKind::Chord => DhtVariant::Chord,
            AlgorithmKind::Kademlia => DhtVariant::Kademlia,
            other => return Err(ConfigError::schema("algorithm", format!("{} is not a DHT protocol", other.name()))),
        };
        let params = Params::new(&config.algorithm_params, &["queriesPerRound", "queryRounds"])?;
        let queries_per_round = params.uint("queriesPerRound", 0, 1 << 20)?.unwrap_or(1);
        let n = config.topology.len() as u32;
        if *config.topology.adjacency() != *Topology::ring(n).adjacency() {
            return Err(ConfigError::schema("topology", "DHT peers must be ids 0..n linked in a ring"));
        }
        let query_rounds = match params.uint("queryRounds", 0, u64::MAX)? {
            Some(r) => r,
            None => default_query_rounds(config, n),
        };
        Ok(Dht { variant, n, queries_per_round, query_rounds })
    }
}

/// Leaves enough trailing rounds for the longest ring route to finish.
fn default_query_rounds(config: &RunConfig, n: u32) -> u64 {
    let per_hop = config.delay.max_delay().unwrap_or_else(|| (3.0 * config.delay.mean()).ceil() as u64);
    let drain = (u64::from(n / 2) + 1) * per_hop.max(1);
    let rounds = config.rounds_per_computation;
    if rounds > drain {
        rounds - drain
    } else {
        rounds
    }
}

impl Protocol for Dht {
    type Message = Query;
    type Node = DhtNode;

    fn create_node(&self, ctx: &mut NodeContext<Query>) -> Result<DhtNode, NodeError> {
        let table = match self.variant {
            DhtVariant::Chord => None,
            DhtVariant::Kademlia => {
                let table = KademliaTable::build(ctx.id().0, self.n, ctx.rng());
                for peer in table.shortcuts.iter().flatten() {
                    ctx.add_link(NodeId(*peer))?;
                }
                Some(table)
            }
        };
        Ok(DhtNode { n: self.n, table, injected: VecDeque::new(), resolved: Vec::new() })
    }

    fn before_round(&self, nodes: &mut [DhtNode], ctx: &mut RoundContext<'_>) {
        let round = ctx.round();
        if round >= self.query_rounds || self.n == 0 {
            return;
        }
        for i in 0..self.queries_per_round {
            let origin = ctx.rng().random_range(0..self.n);
            let target = ctx.rng().random_range(0..self.n);
            let query = Query { id: round * self.queries_per_round + i, target, origin: NodeId(origin), hops: 0 };
            nodes[origin as usize].injected.push_back(query);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HopSummary {
    pub mean: f64,
    pub max: u64,
    pub queries: u64,
}

/// Hop counts over every resolved query, pooled across computations.
pub fn mean_hops(doc: &LogDocument) -> Result<HopSummary, MetricError> {
    let hops: Vec<u64> =
        doc.records("queryResolved").iter().map(|r| field_u64(r, "queryResolved", "hops")).collect::<Result<_, _>>()?;
    summarize(&hops)
}

pub fn summarize(hops: &[u64]) -> Result<HopSummary, MetricError> {
    if hops.is_empty() {
        return Err(MetricError::NoSamples("queryResolved"));
    }
    Ok(HopSummary {
        mean: hops.iter().sum::<u64>() as f64 / hops.len() as f64,
        max: hops.iter().copied().max().unwrap_or(0),
        queries: hops.len() as u64,
    })
}
