//! Round loop and run orchestration.
//!
//! A run is `computationsPerRun` independent computations. Each computation
//! rebuilds nodes and channels from scratch and then executes
//! `roundsPerComputation` rounds of receive, compute, send. Only the compute
//! phase is spread over the worker pool; the receive and send phases walk
//! nodes and channels in id order on the calling thread.

use std::sync::Arc;

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::log::{LogBuffer, LogDocument, LogRecord, TagFilter, ERROR_TAG};
use crate::network::{Network, NodeId};
use crate::node::{Node, NodeContext, NodeError, Protocol, RoundContext};
use crate::rng::{stream_rng, SimRng, Stream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("failed to start worker pool: {0}")]
    WorkerPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundPhase {
    Receive,
    Compute,
    Send,
}

impl RoundPhase {
    pub fn name(self) -> &'static str {
        match self {
            RoundPhase::Receive => "receive",
            RoundPhase::Compute => "compute",
            RoundPhase::Send => "send",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComputationState {
    pub computation: u64,
    pub round: u64,
    pub length: u64,
}

impl ComputationState {
    pub fn is_finished(&self) -> bool {
        self.round >= self.length
    }
}

/// A compute hook (or node creation) failed; the computation is abandoned.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("computation {computation} round {round}: {error}")]
pub struct ComputationAborted {
    pub computation: u64,
    pub round: u64,
    pub node: NodeId,
    pub phase: &'static str,
    pub error: NodeError,
}

impl ComputationAborted {
    fn record(&self) -> LogRecord {
        LogRecord {
            tag: ERROR_TAG.to_owned(),
            computation: self.computation,
            round: self.round,
            node: Some(self.node),
            payload: json!({"phase": self.phase, "message": self.error.to_string()}),
        }
    }
}

/// Runs `config` with the protocol the configuration names.
pub fn run(config: &RunConfig) -> Result<LogDocument, SimError> {
    crate::algorithms::run(config)
}

/// Runs `config` with an explicit protocol implementation.
pub fn run_protocol<P: Protocol>(config: &RunConfig, protocol: &P) -> Result<LogDocument, SimError> {
    Simulation::new(config, protocol)?.run()
}

pub struct Simulation<'a, P: Protocol> {
    config: &'a RunConfig,
    protocol: &'a P,
    pool: Option<rayon::ThreadPool>,
    filter: Arc<TagFilter>,
}

impl<'a, P: Protocol> Simulation<'a, P> {
    pub fn new(config: &'a RunConfig, protocol: &'a P) -> Result<Self, SimError> {
        let pool = if config.worker_count > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.worker_count)
                    .build()
                    .map_err(|e| SimError::WorkerPool(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Simulation { config, protocol, pool, filter: Arc::new(TagFilter::from_list(config.log_tags.as_ref())) })
    }

    pub fn run(&self) -> Result<LogDocument, SimError> {
        // The worker count never changes results, so the header leaves it out.
        let mut header = self.config.to_json();
        if let Some(obj) = header.as_object_mut() {
            obj.remove("workerCount");
        }
        let mut doc = LogDocument::new(header);
        for index in 0..self.config.computations_per_run {
            let mut computation = match self.start_computation(index) {
                Ok(c) => c,
                Err(aborted) => {
                    doc.push(aborted.record());
                    continue;
                }
            };
            let mut completed = true;
            while !computation.state().is_finished() {
                if let Err(aborted) = computation.execute_round(&mut doc) {
                    doc.push(aborted.record());
                    completed = false;
                    break;
                }
            }
            if completed {
                computation.finish(&mut doc);
            }
        }
        doc.canonicalize();
        Ok(doc)
    }

    /// Fresh nodes and empty channels for computation `index`.
    pub fn start_computation(&self, index: u64) -> Result<Computation<'_, 'a, P>, ComputationAborted> {
        let config = self.config;
        let mut network = Network::new(&config.topology, config.channel_settings(), config.seed, index);
        let ids: Vec<NodeId> = config.topology.nodes().collect();
        let mut nodes = Vec::with_capacity(ids.len());
        let mut contexts = Vec::with_capacity(ids.len());
        for &id in &ids {
            let mut ctx = NodeContext::new(
                id,
                config.topology.neighbors(id).to_vec(),
                stream_rng(config.seed, index, Stream::Node(id)),
                LogBuffer::new(self.filter.clone()),
            );
            ctx.set_clock(index, 0);
            let aborted =
                |error| ComputationAborted { computation: index, round: 0, node: id, phase: "initialize", error };
            let node = self.protocol.create_node(&mut ctx).map_err(aborted)?;
            for &peer in ctx.added_links() {
                if !config.topology.contains(peer) {
                    return Err(aborted(NodeError::UnknownPeer { node: id, peer }));
                }
                network.add_channel(id, peer);
            }
            ctx.finish_initialization();
            nodes.push(node);
            contexts.push(ctx);
        }
        Ok(Computation {
            sim: self,
            state: ComputationState { computation: index, round: 0, length: config.rounds_per_computation },
            network,
            ids,
            nodes,
            contexts,
            harness_rng: stream_rng(config.seed, index, Stream::Harness),
            harness_log: LogBuffer::new(self.filter.clone()),
            initial_logs_flushed: false,
        })
    }
}

/// One computation in progress.
pub struct Computation<'s, 'a, P: Protocol> {
    sim: &'s Simulation<'a, P>,
    state: ComputationState,
    network: Network<P::Message>,
    ids: Vec<NodeId>,
    nodes: Vec<P::Node>,
    contexts: Vec<NodeContext<P::Message>>,
    harness_rng: SimRng,
    harness_log: LogBuffer,
    initial_logs_flushed: bool,
}

impl<P: Protocol> Computation<'_, '_, P> {
    pub fn state(&self) -> ComputationState {
        self.state
    }

    pub fn network(&self) -> &Network<P::Message> {
        &self.network
    }

    pub fn nodes(&self) -> &[P::Node] {
        &self.nodes
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn context(&self, id: NodeId) -> Option<&NodeContext<P::Message>> {
        self.ids.binary_search(&id).ok().map(|i| &self.contexts[i])
    }

    /// One receive-compute-send round. Advances the round counter on success.
    pub fn execute_round(&mut self, doc: &mut LogDocument) -> Result<ComputationState, ComputationAborted> {
        let ComputationState { computation, round, length } = self.state;
        assert!(round < length, "round {round} is past the computation length {length}");
        let filter = self.sim.filter.clone();

        if !self.initial_logs_flushed {
            for (ctx, &id) in self.contexts.iter_mut().zip(&self.ids) {
                doc.absorb(ctx.log_buffer_mut(), computation, 0, Some(id));
            }
            self.initial_logs_flushed = true;
        }

        // Receive.
        let tracing_deliver = filter.is_enabled("deliver");
        for (dest, packets) in self.network.collect_deliverable(round) {
            let slot = self.ids.binary_search(&dest).expect("channel endpoints are topology nodes");
            let ctx = &mut self.contexts[slot];
            for packet in packets {
                if tracing_deliver {
                    doc.push(LogRecord {
                        tag: "deliver".into(),
                        computation,
                        round,
                        node: Some(dest),
                        payload: json!({"from": packet.source, "sendRound": packet.send_round}),
                    });
                }
                ctx.deliver(packet);
            }
        }
        for ctx in &mut self.contexts {
            ctx.set_clock(computation, round);
        }

        self.run_hook(doc, |protocol, nodes, rctx| protocol.before_round(nodes, rctx));

        // Compute.
        let results = self.compute_phase();
        for (ctx, &id) in self.contexts.iter_mut().zip(&self.ids) {
            doc.absorb(ctx.log_buffer_mut(), computation, round, Some(id));
        }
        if let Some((slot, error)) = results.into_iter().enumerate().find_map(|(i, r)| r.err().map(|e| (i, e))) {
            return Err(ComputationAborted {
                computation,
                round,
                node: self.ids[slot],
                phase: RoundPhase::Compute.name(),
                error,
            });
        }

        // Send, in ascending (sender, emission order).
        let (tracing_send, tracing_drop) = (filter.is_enabled("send"), filter.is_enabled("drop"));
        for (ctx, &id) in self.contexts.iter_mut().zip(&self.ids) {
            for (dest, payload) in ctx.take_outbox() {
                let queued = self
                    .network
                    .enqueue(id, dest, payload, round)
                    .map_err(|_| ComputationAborted {
                        computation,
                        round,
                        node: id,
                        phase: RoundPhase::Send.name(),
                        error: NodeError::NotNeighbor { from: id, to: dest },
                    })?
                    .map(|p| (p.delivery_round, p.delay));
                match queued {
                    Some((delivery_round, delay)) if tracing_send => doc.push(LogRecord {
                        tag: "send".into(),
                        computation,
                        round,
                        node: Some(id),
                        payload: json!({"to": dest, "delay": delay, "deliveryRound": delivery_round}),
                    }),
                    None if tracing_drop => doc.push(LogRecord {
                        tag: "drop".into(),
                        computation,
                        round,
                        node: Some(id),
                        payload: json!({"to": dest}),
                    }),
                    _ => {}
                }
            }
        }

        self.run_hook(doc, |protocol, nodes, rctx| protocol.after_round(nodes, rctx));

        self.state.round += 1;
        Ok(self.state)
    }

    fn compute_phase(&mut self) -> Vec<Result<(), NodeError>> {
        let nodes = &mut self.nodes;
        let contexts = &mut self.contexts;
        match &self.sim.pool {
            Some(pool) => pool.install(|| {
                nodes
                    .par_iter_mut()
                    .zip(contexts.par_iter_mut())
                    .map(|(node, ctx)| node.perform_computation(ctx))
                    .collect()
            }),
            None => {
                nodes.iter_mut().zip(contexts.iter_mut()).map(|(node, ctx)| node.perform_computation(ctx)).collect()
            }
        }
    }

    fn run_hook(&mut self, doc: &mut LogDocument, hook: impl FnOnce(&P, &mut [P::Node], &mut RoundContext<'_>)) {
        let ComputationState { computation, round, length } = self.state;
        let mut rctx =
            RoundContext::new(computation, round, length, &self.ids, &mut self.harness_rng, &mut self.harness_log);
        hook(self.sim.protocol, &mut self.nodes, &mut rctx);
        doc.absorb(&mut self.harness_log, computation, round, None);
    }

    /// End-of-computation hook; records are stamped with the last executed round.
    pub fn finish(mut self, doc: &mut LogDocument) {
        let last = self.state.round.saturating_sub(1);
        let ComputationState { computation, length, .. } = self.state;
        let mut rctx =
            RoundContext::new(computation, last, length, &self.ids, &mut self.harness_rng, &mut self.harness_log);
        self.sim.protocol.end_computation(&self.nodes, &mut rctx);
        doc.absorb(&mut self.harness_log, computation, last, None);
    }
}
