//! Simplified Bitcoin and Ethereum peers.
//!
//! Every round each peer may submit a fresh transaction (broadcast to all
//! neighbors) and may mine one pending transaction. Mining is a Bernoulli
//! trial; there is no proof of work. A Bitcoin block extends the tip of the
//! longest known chain. An Ethereum block links every known childless block,
//! so concurrently mined blocks are merged instead of orphaned.
//!
//! The harness samples the confirmed-block count after every round: the
//! minimum over peers of each peer's chain length, genesis excluded.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::sync::Arc;

use rand::Rng;
use serde_json::json;

use crate::algorithms::{AlgorithmKind, Params};
use crate::config::{ConfigError, RunConfig};
use crate::log::LogDocument;
use crate::metrics::{field_u64, MetricError};
use crate::network::NodeId;
use crate::node::{Node, NodeContext, NodeError, Protocol, RoundContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub u64);

impl BlockId {
    pub const GENESIS: BlockId = BlockId(0);

    fn mined(miner: NodeId, seq: u32) -> Self {
        BlockId(((u64::from(miner.0) + 1) << 32) | u64::from(seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxId(pub u64);

impl TxId {
    fn new(origin: NodeId, seq: u32) -> Self {
        TxId(((u64::from(origin.0) + 1) << 32) | u64::from(seq))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub id: BlockId,
    pub miner: Option<NodeId>,
    pub round: u64,
    pub parents: Vec<BlockId>,
    pub transaction: Option<TxId>,
}

impl Block {
    pub fn genesis() -> Self {
        Block { id: BlockId::GENESIS, miner: None, round: 0, parents: Vec::new(), transaction: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainVariant {
    Bitcoin,
    Ethereum,
}

#[derive(Debug, Clone)]
pub enum BlockchainMessage {
    Transaction(TxId),
    Block(Arc<Block>),
}

#[derive(Debug)]
struct Entry {
    block: Arc<Block>,
    height: u64,
    children: u32,
}

/// A peer's local copy of the block DAG, closed under parent references.
///
/// Blocks whose parents are not yet known wait in an orphan pool.
#[derive(Debug)]
pub struct BlockDag {
    blocks: BTreeMap<BlockId, Entry>,
    tips: BTreeSet<BlockId>,
    orphans: Vec<Arc<Block>>,
    best: (u64, BlockId),
}

impl Default for BlockDag {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockDag {
    pub fn new() -> Self {
        let mut blocks = BTreeMap::new();
        blocks.insert(BlockId::GENESIS, Entry { block: Arc::new(Block::genesis()), height: 0, children: 0 });
        BlockDag { blocks, tips: BTreeSet::from([BlockId::GENESIS]), orphans: Vec::new(), best: (0, BlockId::GENESIS) }
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.blocks.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn orphan_count(&self) -> usize {
        self.orphans.len()
    }

    pub fn block(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(&id).map(|e| e.block.as_ref())
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.values().map(|e| e.block.as_ref())
    }

    /// Height of a known block: length of the longest path back to genesis.
    pub fn height(&self, id: BlockId) -> Option<u64> {
        self.blocks.get(&id).map(|e| e.height)
    }

    /// Adds a block, attaching it (and any orphans it unblocks) once all parents are known.
    /// Returns false for a block that was already known or queued.
    pub fn insert(&mut self, block: Arc<Block>) -> bool {
        if self.contains(block.id) || self.orphans.iter().any(|o| o.id == block.id) {
            return false;
        }
        self.orphans.push(block);
        while let Some(i) = self.orphans.iter().position(|b| b.parents.iter().all(|p| self.blocks.contains_key(p))) {
            let ready = self.orphans.swap_remove(i);
            self.attach(ready);
        }
        true
    }

    fn attach(&mut self, block: Arc<Block>) {
        let mut height = 0;
        for parent in &block.parents {
            let entry = self.blocks.get_mut(parent).expect("parents are attached first");
            entry.children += 1;
            height = height.max(entry.height + 1);
            self.tips.remove(parent);
        }
        let id = block.id;
        self.blocks.insert(id, Entry { block, height, children: 0 });
        self.tips.insert(id);
        if height > self.best.0 || (height == self.best.0 && id < self.best.1) {
            self.best = (height, id);
        }
    }

    /// Fork choice: the highest block, lowest id among equals.
    pub fn tip(&self) -> BlockId {
        self.best.1
    }

    /// Known blocks without children, ascending by id.
    pub fn tips(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.tips.iter().copied()
    }

    /// Blocks on the longest path from genesis, genesis excluded.
    pub fn longest_path(&self) -> u64 {
        self.best.0
    }

    /// Number of non-genesis blocks a block references directly or transitively, itself included.
    pub fn past_cone_size(&self, id: BlockId) -> u64 {
        let mut seen = HashSet::new();
        let mut stack = vec![id];
        while let Some(b) = stack.pop() {
            if b == BlockId::GENESIS || !seen.insert(b) {
                continue;
            }
            if let Some(entry) = self.blocks.get(&b) {
                stack.extend(entry.block.parents.iter().copied());
            }
        }
        seen.len() as u64
    }

    /// Largest past cone of any known block. The maximum is always reached at a tip.
    pub fn largest_past_cone(&self) -> u64 {
        self.tips().map(|t| self.past_cone_size(t)).max().unwrap_or(0)
    }

    /// Chain length used for the confirmed count.
    ///
    /// Bitcoin: the longest single-parent chain. Ethereum: every block the
    /// heaviest tip references, so merged siblings count as confirmed.
    pub fn chain_length(&self, variant: ChainVariant) -> u64 {
        match variant {
            ChainVariant::Bitcoin => self.longest_path(),
            ChainVariant::Ethereum => self.largest_past_cone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockchainParams {
    pub variant: ChainVariant,
    pub transaction_probability: f64,
    pub mine_probability: f64,
}

impl Default for BlockchainParams {
    fn default() -> Self {
        BlockchainParams { variant: ChainVariant::Bitcoin, transaction_probability: 0.05, mine_probability: 0.025 }
    }
}

#[derive(Debug)]
pub struct BlockchainPeer {
    id: NodeId,
    params: BlockchainParams,
    dag: BlockDag,
    pending: VecDeque<TxId>,
    pending_set: HashSet<TxId>,
    mined: HashSet<TxId>,
    next_tx: u32,
    next_block: u32,
}

impl BlockchainPeer {
    pub fn new(id: NodeId, params: BlockchainParams) -> Self {
        BlockchainPeer {
            id,
            params,
            dag: BlockDag::new(),
            pending: VecDeque::new(),
            pending_set: HashSet::new(),
            mined: HashSet::new(),
            next_tx: 0,
            next_block: 0,
        }
    }

    pub fn dag(&self) -> &BlockDag {
        &self.dag
    }

    pub fn pending_transactions(&self) -> impl Iterator<Item = TxId> + '_ {
        self.pending.iter().copied().filter(|t| self.pending_set.contains(t))
    }

    pub fn chain_length(&self) -> u64 {
        self.dag.chain_length(self.params.variant)
    }

    fn add_transaction(&mut self, tx: TxId) {
        if !self.mined.contains(&tx) && self.pending_set.insert(tx) {
            self.pending.push_back(tx);
        }
    }

    fn add_block(&mut self, block: Arc<Block>) {
        if let Some(tx) = block.transaction {
            self.mined.insert(tx);
            self.pending_set.remove(&tx);
        }
        self.dag.insert(block);
    }

    fn next_pending(&mut self) -> Option<TxId> {
        while let Some(tx) = self.pending.pop_front() {
            if self.pending_set.remove(&tx) {
                return Some(tx);
            }
        }
        None
    }

    /// Parents a newly mined block would reference right now.
    pub fn mining_parents(&self) -> Vec<BlockId> {
        match self.params.variant {
            ChainVariant::Bitcoin => vec![self.dag.tip()],
            ChainVariant::Ethereum => self.dag.tips().collect(),
        }
    }

    /// Receive, maybe submit a transaction, maybe mine.
    pub fn blockchain_round(&mut self, ctx: &mut NodeContext<BlockchainMessage>) {
        while let Some(packet) = ctx.try_pop_in_stream() {
            match packet.payload {
                BlockchainMessage::Transaction(tx) => self.add_transaction(tx),
                BlockchainMessage::Block(block) => self.add_block(block),
            }
        }

        // Both trials are drawn every round so the stream stays aligned across variants.
        let submit = ctx.rng().random_bool(self.params.transaction_probability);
        let mine = ctx.rng().random_bool(self.params.mine_probability);

        if submit {
            let tx = TxId::new(self.id, self.next_tx);
            self.next_tx += 1;
            self.add_transaction(tx);
            ctx.broadcast(BlockchainMessage::Transaction(tx));
            ctx.log_with("transaction", || json!({"tx": tx.0}));
        }

        if mine {
            if let Some(tx) = self.next_pending() {
                let block = Arc::new(Block {
                    id: BlockId::mined(self.id, self.next_block),
                    miner: Some(self.id),
                    round: ctx.round(),
                    parents: self.mining_parents(),
                    transaction: Some(tx),
                });
                self.next_block += 1;
                ctx.log_with("block", || {
                    json!({
                        "block": block.id.0,
                        "tx": tx.0,
                        "parents": block.parents.iter().map(|p| p.0).collect::<Vec<_>>(),
                    })
                });
                self.add_block(block.clone());
                ctx.broadcast(BlockchainMessage::Block(block));
            }
        }
    }
}

impl Node for BlockchainPeer {
    type Message = BlockchainMessage;

    fn perform_computation(&mut self, ctx: &mut NodeContext<BlockchainMessage>) -> Result<(), NodeError> {
        self.blockchain_round(ctx);
        Ok(())
    }
}

/// Minimum over peers of each peer's chain length.
pub fn confirmed_blocks(peers: &[BlockchainPeer]) -> u64 {
    peers.iter().map(BlockchainPeer::chain_length).min().unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct Blockchain {
    pub params: BlockchainParams,
}

impl Blockchain {
    pub fn from_config(config: &RunConfig) -> Result<Self, ConfigError> {
        let variant = match config.algorithm {
            AlgorithmKind::Bitcoin => ChainVariant::Bitcoin,
            AlgorithmKind::Ethereum => ChainVariant::Ethereum,
            other => return Err(ConfigError::schema("algorithm", format!("{} is not a blockchain", other.name()))),
        };
        let params = Params::new(&config.algorithm_params, &["transactionProbability", "mineProbability"])?;
        let defaults = BlockchainParams::default();
        Ok(Blockchain {
            params: BlockchainParams {
                variant,
                transaction_probability: params
                    .probability("transactionProbability", defaults.transaction_probability)?,
                mine_probability: params.probability("mineProbability", defaults.mine_probability)?,
            },
        })
    }
}

impl Protocol for Blockchain {
    type Message = BlockchainMessage;
    type Node = BlockchainPeer;

    fn create_node(&self, ctx: &mut NodeContext<BlockchainMessage>) -> Result<BlockchainPeer, NodeError> {
        Ok(BlockchainPeer::new(ctx.id(), self.params))
    }

    fn after_round(&self, nodes: &[BlockchainPeer], ctx: &mut RoundContext<'_>) {
        ctx.log_with("confirmed", || {
            json!({
                "confirmed": confirmed_blocks(nodes),
                "longestPath": nodes.iter().map(|p| p.dag.longest_path()).min().unwrap_or(0),
            })
        });
    }
}

/// Per-round throughput of a run, averaged over its computations.
#[derive(Debug, Clone, PartialEq)]
pub struct Throughput {
    /// `(completed rounds, trailing moving average of confirmed blocks per round)`.
    pub series: Vec<(u64, f64)>,
    /// Mean over computations of final confirmed count / rounds executed.
    pub mean_blocks_per_round: f64,
    pub computations: u64,
}

/// Trailing moving average over `window` values; one point per full window.
pub fn moving_average(values: &[f64], window: usize) -> Result<Vec<f64>, MetricError> {
    if window == 0 {
        return Err(MetricError::InvalidWindow);
    }
    Ok(values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect())
}

/// Reduces the `confirmed` records of a run.
///
/// Per computation, the per-round increments of the confirmed count are
/// smoothed with a trailing window; the smoothed series of all computations
/// are then averaged point by point. Points are labelled by the number of
/// completed rounds, so a 100-round computation with window 5 yields points
/// 5 through 100.
pub fn throughput_series(doc: &LogDocument, window: usize) -> Result<Throughput, MetricError> {
    if window == 0 {
        return Err(MetricError::InvalidWindow);
    }
    let mut per_computation: BTreeMap<u64, Vec<(u64, u64)>> = BTreeMap::new();
    for record in doc.records("confirmed") {
        let confirmed = field_u64(record, "confirmed", "confirmed")?;
        per_computation.entry(record.computation).or_default().push((record.round, confirmed));
    }
    if per_computation.is_empty() {
        return Err(MetricError::NoSamples("confirmed"));
    }
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut rates = Vec::new();
    for samples in per_computation.values() {
        let mut previous = 0;
        let increments: Vec<f64> = samples
            .iter()
            .map(|&(_, c)| {
                let inc = c.saturating_sub(previous) as f64;
                previous = c;
                inc
            })
            .collect();
        rates.push(previous as f64 / samples.len() as f64);
        for (i, v) in moving_average(&increments, window)?.into_iter().enumerate() {
            if sums.len() <= i {
                sums.push(0.0);
                counts.push(0);
            }
            sums[i] += v;
            counts[i] += 1;
        }
    }
    let series = sums.iter().zip(&counts).enumerate().map(|(i, (s, &c))| ((i + window) as u64, s / c as f64)).collect();
    Ok(Throughput {
        series,
        mean_blocks_per_round: rates.iter().sum::<f64>() / rates.len() as f64,
        computations: per_computation.len() as u64,
    })
}
