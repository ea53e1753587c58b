//! Reliable one-way data link between a sender (lowest node id) and a receiver.
//!
//! ABP: one data message per attempt, labelled with an alternating bit;
//! the sender retransmits after `timeoutLimit` rounds without the matching
//! acknowledgement. Requires FIFO channels.
//!
//! SDL: labels cycle through three values and every attempt sends
//! `2 * capacity + 3` copies of the current payload. The receiver accepts a
//! payload once `capacity + 1` copies carrying the next expected label have
//! arrived, and the sender advances after `capacity + 1` matching
//! acknowledgements. Stale copies can only alias a future label if they
//! outlive two full exchanges, so the discipline tolerates reordering as long
//! as the channel delay stays below roughly four rounds. Both protocols start
//! from clean states.

use serde_json::json;

use crate::algorithms::{AlgorithmKind, Params};
use crate::config::{ConfigError, RunConfig};
use crate::log::LogDocument;
use crate::metrics::{field_u64, MetricError};
use crate::network::{DelayDistribution, NodeId};
use crate::node::{Node, NodeContext, NodeError, Protocol, RoundContext};

const SDL_LABELS: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkVariant {
    Abp,
    Sdl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkMessage {
    Data { label: u8, payload: u64 },
    Ack { label: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataLinkParams {
    pub variant: LinkVariant,
    pub timeout_limit: u64,
    pub channel_capacity: u64,
}

impl DataLinkParams {
    /// Transmissions per attempt: one for ABP, `2c + 3` for SDL (five at capacity one).
    pub fn copies_per_message(&self) -> u64 {
        match self.variant {
            LinkVariant::Abp => 1,
            LinkVariant::Sdl => 2 * self.channel_capacity + 3,
        }
    }

    /// Matching copies (receiver) or acknowledgements (sender) needed to move on.
    pub fn acceptance_threshold(&self) -> u64 {
        match self.variant {
            LinkVariant::Abp => 1,
            LinkVariant::Sdl => self.channel_capacity + 1,
        }
    }
}

/// Twice the worst-case round trip: `4d` for a delay bound `d`.
pub fn default_timeout(delay: &DelayDistribution) -> u64 {
    let bound = delay.max_delay().unwrap_or_else(|| delay.mean().ceil() as u64);
    4 * bound.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UtilityCounters {
    pub sent: u64,
    pub delivered: u64,
}

impl UtilityCounters {
    pub fn utility(&self) -> Result<f64, MetricError> {
        if self.sent == 0 {
            return Err(MetricError::NothingSent);
        }
        Ok(self.delivered as f64 / self.sent as f64)
    }
}

#[derive(Debug, Clone)]
pub struct SenderState {
    pub label: u8,
    pub current: u64,
    pub timeout_counter: u64,
    pub acks: u64,
    pub sent: u64,
    started: bool,
}

#[derive(Debug, Clone)]
pub struct ReceiverState {
    pub expected: u8,
    pub matching: u64,
    pub delivered: Vec<u64>,
}

#[derive(Debug, Clone)]
pub enum DataLinkNode {
    Sender { peer: NodeId, params: DataLinkParams, state: SenderState },
    Receiver { peer: NodeId, params: DataLinkParams, state: ReceiverState },
}

impl DataLinkNode {
    pub fn sender(peer: NodeId, params: DataLinkParams) -> Self {
        DataLinkNode::Sender {
            peer,
            params,
            state: SenderState { label: 0, current: 0, timeout_counter: 0, acks: 0, sent: 0, started: false },
        }
    }

    pub fn receiver(peer: NodeId, params: DataLinkParams) -> Self {
        DataLinkNode::Receiver {
            peer,
            params,
            state: ReceiverState { expected: 0, matching: 0, delivered: Vec::new() },
        }
    }

    pub fn sent(&self) -> u64 {
        match self {
            DataLinkNode::Sender { state, .. } => state.sent,
            DataLinkNode::Receiver { .. } => 0,
        }
    }

    pub fn delivered(&self) -> &[u64] {
        match self {
            DataLinkNode::Sender { .. } => &[],
            DataLinkNode::Receiver { state, .. } => &state.delivered,
        }
    }

    fn step(&mut self, ctx: &mut NodeContext<LinkMessage>) -> Result<(), NodeError> {
        match self {
            DataLinkNode::Sender { peer, params, state } => sender_round(*peer, params, state, ctx),
            DataLinkNode::Receiver { peer, params, state } => receiver_round(*peer, params, state, ctx),
        }
    }
}

fn next_label(variant: LinkVariant, label: u8) -> u8 {
    match variant {
        LinkVariant::Abp => label ^ 1,
        LinkVariant::Sdl => (label + 1) % SDL_LABELS,
    }
}

fn transmit(
    peer: NodeId,
    params: &DataLinkParams,
    state: &mut SenderState,
    ctx: &mut NodeContext<LinkMessage>,
) -> Result<(), NodeError> {
    let (label, payload) = (state.label, state.current);
    for _ in 0..params.copies_per_message() {
        ctx.unicast(peer, LinkMessage::Data { label, payload })?;
        state.sent += 1;
    }
    ctx.log_with("sent", || json!({"payload": payload, "label": label, "copies": params.copies_per_message()}));
    state.timeout_counter = 0;
    Ok(())
}

fn sender_round(
    peer: NodeId,
    params: &DataLinkParams,
    state: &mut SenderState,
    ctx: &mut NodeContext<LinkMessage>,
) -> Result<(), NodeError> {
    while let Some(packet) = ctx.try_pop_in_stream() {
        if let LinkMessage::Ack { label } = packet.payload {
            if label == state.label {
                state.acks += 1;
            }
        }
    }
    if !state.started {
        state.started = true;
        return transmit(peer, params, state, ctx);
    }
    if state.acks >= params.acceptance_threshold() {
        state.label = next_label(params.variant, state.label);
        state.current += 1;
        state.acks = 0;
        return transmit(peer, params, state, ctx);
    }
    state.timeout_counter += 1;
    if state.timeout_counter >= params.timeout_limit {
        transmit(peer, params, state, ctx)?;
    }
    Ok(())
}

/// ABP: deliver on the expected bit, then flip it. SDL: deliver once enough
/// copies with the expected label have arrived. Every data message is acknowledged with its own label.
fn receiver_round(
    peer: NodeId,
    params: &DataLinkParams,
    state: &mut ReceiverState,
    ctx: &mut NodeContext<LinkMessage>,
) -> Result<(), NodeError> {
    while let Some(packet) = ctx.try_pop_in_stream() {
        let LinkMessage::Data { label, payload } = packet.payload else { continue };
        if label == state.expected {
            state.matching += 1;
            if state.matching >= params.acceptance_threshold() {
                state.delivered.push(payload);
                state.expected = next_label(params.variant, state.expected);
                state.matching = 0;
                ctx.log_with("delivered", || json!({"payload": payload}));
            }
        }
        ctx.unicast(peer, LinkMessage::Ack { label })?;
    }
    Ok(())
}

impl Node for DataLinkNode {
    type Message = LinkMessage;

    fn perform_computation(&mut self, ctx: &mut NodeContext<LinkMessage>) -> Result<(), NodeError> {
        self.step(ctx)
    }
}

#[derive(Debug, Clone)]
pub struct DataLink {
    pub params: DataLinkParams,
    pub sender: NodeId,
    pub receiver: NodeId,
}

impl DataLink {
    pub fn from_config(config: &RunConfig) -> Result<Self, ConfigError> {
        let variant = match config.algorithm {
            AlgorithmKind::Abp => LinkVariant::Abp,
            AlgorithmKind::Sdl => LinkVariant::Sdl,
            other => {
                return Err(ConfigError::schema("algorithm", format!("{} is not a data link protocol", other.name())))
            }
        };
        let params = Params::new(&config.algorithm_params, &["timeoutLimit", "channelCapacity"])?;
        let timeout_limit =
            params.uint("timeoutLimit", 1, u64::from(u32::MAX))?.unwrap_or_else(|| default_timeout(&config.delay));
        let channel_capacity = params.uint("channelCapacity", 1, 1)?.unwrap_or(1);
        let ids: Vec<NodeId> = config.topology.nodes().collect();
        let [sender, receiver] = ids[..] else {
            return Err(ConfigError::schema("topology", format!("data link needs exactly 2 nodes, got {}", ids.len())));
        };
        if !config.topology.neighbors(sender).contains(&receiver)
            || !config.topology.neighbors(receiver).contains(&sender)
        {
            return Err(ConfigError::schema("topology", "data link needs channels in both directions"));
        }
        Ok(DataLink { params: DataLinkParams { variant, timeout_limit, channel_capacity }, sender, receiver })
    }
}

impl Protocol for DataLink {
    type Message = LinkMessage;
    type Node = DataLinkNode;

    fn create_node(&self, ctx: &mut NodeContext<LinkMessage>) -> Result<DataLinkNode, NodeError> {
        Ok(if ctx.id() == self.sender {
            DataLinkNode::sender(self.receiver, self.params)
        } else {
            DataLinkNode::receiver(self.sender, self.params)
        })
    }

    fn end_computation(&self, nodes: &[DataLinkNode], ctx: &mut RoundContext<'_>) {
        let sent: u64 = nodes.iter().map(DataLinkNode::sent).sum();
        let delivered: u64 = nodes.iter().map(|n| n.delivered().len() as u64).sum();
        ctx.log("utility", json!({"sent": sent, "delivered": delivered}));
    }
}

/// Delivered over transmitted data messages, pooled over the run's computations.
pub fn utility(doc: &LogDocument) -> Result<(f64, UtilityCounters), MetricError> {
    let records = doc.records("utility");
    if records.is_empty() {
        return Err(MetricError::NoSamples("utility"));
    }
    let mut counters = UtilityCounters::default();
    for r in records {
        counters.sent += field_u64(r, "utility", "sent")?;
        counters.delivered += field_u64(r, "utility", "delivered")?;
    }
    Ok((counters.utility()?, counters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::{LogBuffer, TagFilter};
    use crate::network::Packet;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use std::sync::Arc;

    fn ctx(id: u32, peer: u32) -> NodeContext<LinkMessage> {
        let mut c = NodeContext::new(
            NodeId(id),
            vec![NodeId(peer)],
            stream_rng(0, 0, Stream::Node(NodeId(id))),
            LogBuffer::new(Arc::new(TagFilter::all_but_trace())),
        );
        c.finish_initialization();
        c
    }

    /// Two nodes with an explicit in-flight list; `fate` decides each message's
    /// extra delay (`None` drops it) so tests control loss and reordering.
    struct Link {
        nodes: [DataLinkNode; 2],
        ctxs: [NodeContext<LinkMessage>; 2],
        flight: Vec<(u64, usize, LinkMessage)>,
        round: u64,
    }

    impl Link {
        fn new(params: DataLinkParams) -> Self {
            Link {
                nodes: [DataLinkNode::sender(NodeId(1), params), DataLinkNode::receiver(NodeId(0), params)],
                ctxs: [ctx(0, 1), ctx(1, 0)],
                flight: Vec::new(),
                round: 0,
            }
        }

        fn step(&mut self, mut fate: impl FnMut(usize, &LinkMessage) -> Option<u64>) {
            let round = self.round;
            let mut ready: Vec<_> = Vec::new();
            self.flight.retain(|(at, to, m)| {
                if *at <= round {
                    ready.push((*to, *m));
                    false
                } else {
                    true
                }
            });
            for (to, m) in ready {
                self.ctxs[to].deliver(Packet {
                    source: NodeId(1 - to as u32),
                    destination: NodeId(to as u32),
                    send_round: 0,
                    delay: 1,
                    delivery_round: round,
                    payload: m,
                });
            }
            for i in 0..2 {
                self.ctxs[i].set_clock(0, round);
                self.nodes[i].perform_computation(&mut self.ctxs[i]).unwrap();
            }
            for i in 0..2 {
                for (_, m) in self.ctxs[i].take_outbox() {
                    if let Some(delay) = fate(i, &m) {
                        self.flight.push((round + delay.max(1), 1 - i, m));
                    }
                }
            }
            self.round += 1;
        }

        fn counters(&self) -> UtilityCounters {
            UtilityCounters { sent: self.nodes[0].sent(), delivered: self.nodes[1].delivered().len() as u64 }
        }
    }

    fn abp(timeout: u64) -> DataLinkParams {
        DataLinkParams { variant: LinkVariant::Abp, timeout_limit: timeout, channel_capacity: 1 }
    }

    fn sdl(timeout: u64) -> DataLinkParams {
        DataLinkParams { variant: LinkVariant::Sdl, timeout_limit: timeout, channel_capacity: 1 }
    }

    #[test]
    fn sdl_sends_five_copies() {
        assert_eq!(sdl(4).copies_per_message(), 5);
        assert_eq!(sdl(4).acceptance_threshold(), 2);
        assert_eq!(abp(4).copies_per_message(), 1);
    }

    #[test]
    fn default_timeout_is_twice_round_trip() {
        assert_eq!(default_timeout(&DelayDistribution::Deterministic { value: 3 }), 12);
        assert_eq!(default_timeout(&DelayDistribution::Uniform { min: 1, max: 2 }), 8);
    }

    #[test]
    fn abp_lossless_utility_is_one() {
        let mut link = Link::new(abp(4));
        for _ in 0..100 {
            link.step(|_, _| Some(1));
        }
        let c = link.counters();
        assert_eq!(c.sent, 50);
        assert_eq!(c.delivered, 50);
        assert_eq!(c.utility().unwrap(), 1.0);
        assert_eq!(link.nodes[1].delivered(), (0..50).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn abp_single_data_loss_costs_one_retransmission() {
        let mut link = Link::new(abp(4));
        let mut dropped = false;
        for _ in 0..30 {
            link.step(|from, m| {
                if from == 0 && !dropped && matches!(m, LinkMessage::Data { payload: 0, .. }) {
                    dropped = true;
                    None
                } else {
                    Some(1)
                }
            });
            if !link.nodes[1].delivered().is_empty() {
                break;
            }
        }
        // The first payload took two transmissions.
        assert_eq!(link.nodes[1].delivered(), &[0]);
        assert_eq!(link.nodes[0].sent(), 2);
        let c = link.counters();
        assert_eq!(c.delivered as f64 / c.sent as f64, 0.5);
    }

    #[test]
    fn total_loss_delivers_nothing() {
        for params in [abp(4), sdl(4)] {
            let mut link = Link::new(params);
            for _ in 0..100 {
                link.step(|_, _| None);
            }
            let c = link.counters();
            assert!(c.sent > 0);
            assert_eq!(c.delivered, 0);
            assert_eq!(c.utility().unwrap(), 0.0);
        }
    }

    #[test]
    fn sdl_lossless_utility_is_one_fifth() {
        let mut link = Link::new(sdl(4));
        for _ in 0..100 {
            link.step(|_, _| Some(1));
        }
        let c = link.counters();
        assert_eq!(c, UtilityCounters { sent: 250, delivered: 50 });
        assert!(c.utility().unwrap() <= 0.2);
    }

    #[test]
    fn utility_needs_transmissions() {
        assert_eq!(UtilityCounters { sent: 100, delivered: 50 }.utility().unwrap(), 0.5);
        assert_eq!(UtilityCounters::default().utility(), Err(MetricError::NothingSent));
    }

    #[test]
    fn sdl_receiver_delivers_once_under_permuted_copies() {
        let params = sdl(8);
        let mut rng = stream_rng(5, 0, Stream::Harness);
        for _ in 0..200 {
            let mut node = DataLinkNode::receiver(NodeId(0), params);
            let mut c = ctx(1, 0);
            let mut batch: Vec<LinkMessage> = Vec::new();
            for payload in 0..3u64 {
                let label = (payload % 3) as u8;
                batch.clear();
                batch.extend((0..5).map(|_| LinkMessage::Data { label, payload }));
                // stale duplicates of the previous payload mixed in
                if payload > 0 {
                    let stale = LinkMessage::Data { label: ((payload - 1) % 3) as u8, payload: payload - 1 };
                    batch.extend((0..rng.random_range(0..3)).map(|_| stale));
                }
                batch.shuffle(&mut rng);
                for m in &batch {
                    c.deliver(Packet {
                        source: NodeId(0),
                        destination: NodeId(1),
                        send_round: 0,
                        delay: 1,
                        delivery_round: 1,
                        payload: *m,
                    });
                }
                node.perform_computation(&mut c).unwrap();
            }
            assert_eq!(node.delivered(), &[0, 1, 2]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn in_order_without_duplicates(seed in any::<u64>(), loss in 0.0f64..=0.5, sdl_variant in any::<bool>()) {
            let params = if sdl_variant { sdl(12) } else { abp(12) };
            let mut rng = stream_rng(seed, 0, Stream::Harness);
            let mut link = Link::new(params);
            for _ in 0..300 {
                link.step(|_, _| {
                    if rng.random_bool(loss) {
                        None
                    } else if sdl_variant {
                        Some(rng.random_range(1..=3))
                    } else {
                        Some(1)
                    }
                });
            }
            let delivered = link.nodes[1].delivered();
            let expect: Vec<u64> = (0..delivered.len() as u64).collect();
            prop_assert_eq!(delivered, expect.as_slice());
        }
    }
}
