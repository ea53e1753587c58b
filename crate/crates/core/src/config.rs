//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "algorithm": "bitcoin",
//!   "topology": {"kind": "complete", "nodes": 20},
//!   "delay": {"kind": "deterministic", "value": 1},
//!   "lossProbability": 0,
//!   "roundsPerComputation": 100,
//!   "computationsPerRun": 10,
//!   "seed": 1,
//!   "workerCount": 4,
//!   "algorithmParams": {"mineProbability": 0.025},
//!   "logTags": ["confirmed"]
//! }
//! ```
//!
//! `topology` is either a generator (`complete` or `ring` with `nodes`) or an
//! explicit `{"adjacency": {"0": [1, 2], ...}}`. Every error carries the path
//! of the offending key.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::algorithms::{self, AlgorithmKind};
use crate::network::{ChannelSettings, DelayDistribution, NodeId, Topology, MAX_NODE_ID};

/// Seed used when a configuration does not name one.
pub const DEFAULT_SEED: u64 = 0x5EED;

const MAX_GENERATED_NODES: u64 = 1 << 20;
const MAX_ROUNDS: u64 = 1 << 32;
const MAX_COMPUTATIONS: u64 = 1 << 20;
const MAX_WORKERS: u64 = 1024;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed JSON: {0}")]
    Syntax(String),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: unknown algorithm {name:?}")]
    UnknownAlgorithm { path: String, name: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Schema { path: path.into(), message: message.into() }
    }

    /// Path of the offending key, when the error has one.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Schema { path, .. } | ConfigError::UnknownAlgorithm { path, .. } => Some(path),
            _ => None,
        }
    }
}

/// One fully validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: AlgorithmKind,
    pub topology: Topology,
    pub delay: DelayDistribution,
    pub loss_probability: f64,
    /// Clamp per-channel delivery order; `false` lets random delays reorder.
    pub fifo: bool,
    pub rounds_per_computation: u64,
    pub computations_per_run: u64,
    pub seed: u64,
    pub worker_count: usize,
    /// Algorithm parameters, with any `variant` key folded into `algorithm`.
    pub algorithm_params: BTreeMap<String, Value>,
    pub log_tags: Option<BTreeSet<String>>,
}

impl RunConfig {
    pub fn channel_settings(&self) -> ChannelSettings {
        ChannelSettings { delay: self.delay, loss_probability: self.loss_probability, fifo: self.fifo }
    }

    /// Canonical document; [`load`] of this value yields an equal config.
    pub fn to_json(&self) -> Value {
        let adjacency: Map<String, Value> =
            self.topology.adjacency().iter().map(|(id, ns)| (id.0.to_string(), json!(ns))).collect();
        let mut doc = json!({
            "algorithm": self.algorithm.name(),
            "topology": {"adjacency": adjacency},
            "delay": self.delay,
            "lossProbability": self.loss_probability,
            "fifo": self.fifo,
            "roundsPerComputation": self.rounds_per_computation,
            "computationsPerRun": self.computations_per_run,
            "seed": self.seed,
            "workerCount": self.worker_count,
            "algorithmParams": self.algorithm_params,
        });
        if let Some(tags) = &self.log_tags {
            doc["logTags"] = json!(tags);
        }
        doc
    }

    pub fn with_workers(&self, workers: usize) -> Self {
        RunConfig { worker_count: workers, ..self.clone() }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct ConfigDocument {
    algorithm: String,
    topology: TopologyDocument,
    #[serde(default)]
    delay: Option<DelayDistribution>,
    #[serde(default)]
    loss_probability: Option<f64>,
    #[serde(default)]
    fifo: Option<bool>,
    rounds_per_computation: u64,
    #[serde(default)]
    computations_per_run: Option<u64>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    worker_count: Option<u64>,
    #[serde(default)]
    algorithm_params: Option<Map<String, Value>>,
    #[serde(default)]
    log_tags: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDocument {
    #[serde(default)]
    kind: Option<String>,
    #[serde(default)]
    nodes: Option<u64>,
    #[serde(default)]
    adjacency: Option<BTreeMap<String, Vec<u64>>>,
}

/// Parses and validates a configuration document.
pub fn load(text: &str) -> Result<RunConfig, ConfigError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    from_value(value)
}

pub fn load_file(path: &Path) -> Result<RunConfig, ConfigError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    load(&text)
}

pub fn from_value(value: Value) -> Result<RunConfig, ConfigError> {
    let doc: ConfigDocument = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::schema(path, e.into_inner().to_string())
    })?;

    let mut params = doc.algorithm_params.unwrap_or_default();
    let algorithm = AlgorithmKind::resolve(&doc.algorithm, params.remove("variant"))?;

    let topology = build_topology(doc.topology)?;

    let delay = match doc.delay.unwrap_or(DelayDistribution::Deterministic { value: 1 }) {
        DelayDistribution::Poisson { mean } if mean.is_finite() && mean > 0.0 => DelayDistribution::poisson(mean),
        other => other,
    };
    delay.validate().map_err(|m| ConfigError::schema("delay", m))?;

    let loss_probability = doc.loss_probability.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&loss_probability) {
        return Err(ConfigError::schema("lossProbability", format!("must be within [0, 1], got {loss_probability}")));
    }

    let rounds_per_computation = bounded("roundsPerComputation", doc.rounds_per_computation, 1, MAX_ROUNDS)?;
    let computations_per_run =
        bounded("computationsPerRun", doc.computations_per_run.unwrap_or(1), 1, MAX_COMPUTATIONS)?;
    let worker_count = bounded("workerCount", doc.worker_count.unwrap_or(1), 1, MAX_WORKERS)? as usize;

    let config = RunConfig {
        algorithm,
        topology,
        delay,
        loss_probability,
        fifo: doc.fifo.unwrap_or(true),
        rounds_per_computation,
        computations_per_run,
        seed: doc.seed.unwrap_or(DEFAULT_SEED),
        worker_count,
        algorithm_params: params.into_iter().collect(),
        log_tags: doc.log_tags.map(|t| t.into_iter().collect()),
    };
    algorithms::validate(&config)?;
    Ok(config)
}

fn bounded(path: &str, value: u64, min: u64, max: u64) -> Result<u64, ConfigError> {
    if value < min || value > max {
        return Err(ConfigError::schema(path, format!("must be within [{min}, {max}], got {value}")));
    }
    Ok(value)
}

fn build_topology(doc: TopologyDocument) -> Result<Topology, ConfigError> {
    let kind = doc.kind.as_deref().unwrap_or(if doc.adjacency.is_some() { "adjacency" } else { "" });
    match kind {
        "complete" | "ring" => {
            if doc.adjacency.is_some() {
                return Err(ConfigError::schema("topology.adjacency", format!("not allowed with kind {kind:?}")));
            }
            let nodes = doc.nodes.ok_or_else(|| ConfigError::schema("topology.nodes", "missing node count"))?;
            let nodes = bounded("topology.nodes", nodes, 1, MAX_GENERATED_NODES)? as u32;
            Ok(if kind == "complete" { Topology::complete(nodes) } else { Topology::ring(nodes) })
        }
        "adjacency" => {
            if doc.nodes.is_some() {
                return Err(ConfigError::schema("topology.nodes", "not allowed with an explicit adjacency"));
            }
            let raw =
                doc.adjacency.ok_or_else(|| ConfigError::schema("topology.adjacency", "missing adjacency list"))?;
            let mut adjacency = BTreeMap::new();
            for (key, neighbors) in raw {
                let path = format!("topology.adjacency.{key}");
                let id: u64 =
                    key.parse().map_err(|_| ConfigError::schema(&path, "node ids must be non-negative integers"))?;
                let id = node_id(&path, id)?;
                let neighbors = neighbors.into_iter().map(|n| node_id(&path, n)).collect::<Result<Vec<_>, _>>()?;
                if adjacency.insert(id, neighbors).is_some() {
                    return Err(ConfigError::schema(path, "node declared twice"));
                }
            }
            Topology::from_adjacency(adjacency).map_err(|e| ConfigError::schema("topology.adjacency", e.to_string()))
        }
        "" => Err(ConfigError::schema("topology", "expected a kind (complete, ring) or an adjacency list")),
        other => Err(ConfigError::schema("topology.kind", format!("unknown topology kind {other:?}"))),
    }
}

fn node_id(path: &str, id: u64) -> Result<NodeId, ConfigError> {
    if id > u64::from(MAX_NODE_ID) {
        return Err(ConfigError::schema(path, format!("node id {id} exceeds {MAX_NODE_ID}")));
    }
    Ok(NodeId(id as u32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bitcoin_doc() -> Value {
        json!({
            "algorithm": "bitcoin",
            "topology": {"kind": "complete", "nodes": 20},
            "delay": {"kind": "uniform", "min": 1, "max": 1},
            "lossProbability": 0,
            "roundsPerComputation": 100,
            "computationsPerRun": 10,
            "seed": 1
        })
    }

    fn err_path(doc: Value) -> String {
        from_value(doc).unwrap_err().path().unwrap_or("<none>").to_owned()
    }

    #[test]
    fn bitcoin_example_loads() {
        let cfg = from_value(bitcoin_doc()).unwrap();
        assert_eq!(cfg.algorithm, AlgorithmKind::Bitcoin);
        assert_eq!(cfg.topology.len(), 20);
        assert_eq!(cfg.topology.channel_count(), 380);
        assert_eq!(cfg.rounds_per_computation, 100);
        assert_eq!(cfg.computations_per_run, 10);
        assert_eq!(cfg.worker_count, 1);
    }

    #[test]
    fn loss_out_of_range_names_key() {
        let mut doc = bitcoin_doc();
        doc["lossProbability"] = json!(1.5);
        assert_eq!(err_path(doc), "lossProbability");
    }

    #[test]
    fn ring_generator_expands() {
        let mut doc = bitcoin_doc();
        doc["topology"] = json!({"kind": "ring", "nodes": 4});
        let cfg = from_value(doc).unwrap();
        let adj: Vec<(u32, Vec<u32>)> =
            cfg.topology.adjacency().iter().map(|(k, v)| (k.0, v.iter().map(|n| n.0).collect())).collect();
        assert_eq!(adj, vec![(0, vec![1, 3]), (1, vec![0, 2]), (2, vec![1, 3]), (3, vec![0, 2])]);
    }

    #[test]
    fn schema_errors_carry_paths() {
        let mut doc = bitcoin_doc();
        doc["roundsPerComputation"] = json!(0);
        assert_eq!(err_path(doc), "roundsPerComputation");

        let mut doc = bitcoin_doc();
        doc["delay"] = json!({"kind": "uniform", "min": 5, "max": 2});
        assert_eq!(err_path(doc), "delay");

        let mut doc = bitcoin_doc();
        doc["topology"] = json!({"adjacency": {"0": [1]}});
        assert_eq!(err_path(doc), "topology.adjacency");

        let mut doc = bitcoin_doc();
        doc["roundsPerComputaton"] = json!(3);
        assert!(matches!(from_value(doc), Err(ConfigError::Schema { .. })));

        let mut doc = bitcoin_doc();
        doc["topology"]["nodes"] = json!("twenty");
        assert_eq!(err_path(doc), "topology.nodes");

        let mut doc = bitcoin_doc();
        doc.as_object_mut().unwrap().remove("roundsPerComputation");
        assert!(from_value(doc).unwrap_err().to_string().contains("roundsPerComputation"));

        let mut doc = bitcoin_doc();
        doc["algorithmParams"] = json!({"mineProbability": 2.0});
        assert_eq!(err_path(doc), "algorithmParams.mineProbability");
    }

    #[test]
    fn unknown_algorithm() {
        let mut doc = bitcoin_doc();
        doc["algorithm"] = json!("paxos");
        assert!(matches!(from_value(doc), Err(ConfigError::UnknownAlgorithm { .. })));
    }

    #[test]
    fn malformed_json() {
        assert!(matches!(load("{\"algorithm\": "), Err(ConfigError::Syntax(_))));
    }

    #[test]
    fn defaults_apply() {
        let cfg =
            load(r#"{"algorithm":"hello","topology":{"kind":"complete","nodes":3},"roundsPerComputation":2}"#).unwrap();
        assert_eq!(cfg.seed, DEFAULT_SEED);
        assert_eq!(cfg.computations_per_run, 1);
        assert_eq!(cfg.delay, DelayDistribution::Deterministic { value: 1 });
        assert!(cfg.fifo);
        assert_eq!(cfg.log_tags, None);
    }

    #[test]
    fn family_name_with_variant() {
        let mut doc = bitcoin_doc();
        doc["algorithm"] = json!("blockchain");
        doc["algorithmParams"] = json!({"variant": "ethereum"});
        let cfg = from_value(doc).unwrap();
        assert_eq!(cfg.algorithm, AlgorithmKind::Ethereum);
        assert!(cfg.algorithm_params.is_empty());

        let mut doc = bitcoin_doc();
        doc["algorithmParams"] = json!({"variant": "ethereum"});
        assert_eq!(err_path(doc), "algorithmParams.variant");
    }

    #[test]
    fn poisson_mean_one_becomes_constant() {
        let mut doc = bitcoin_doc();
        doc["delay"] = json!({"kind": "poisson", "mean": 1.0});
        assert_eq!(from_value(doc).unwrap().delay, DelayDistribution::Deterministic { value: 1 });
        let mut doc = bitcoin_doc();
        doc["delay"] = json!({"kind": "poisson", "mean": 0.0});
        assert_eq!(err_path(doc), "delay");
    }

    #[test]
    fn explicit_adjacency_with_self_loop() {
        let cfg = load(r#"{"algorithm":"hello","topology":{"adjacency":{"3":[3,9],"9":[]}},"roundsPerComputation":1}"#)
            .unwrap();
        assert_eq!(cfg.topology.neighbors(NodeId(3)), &[NodeId(3), NodeId(9)]);
    }

    proptest! {
        #[test]
        fn canonical_round_trip(
            nodes in 2u64..12,
            ring in any::<bool>(),
            loss in 0.0f64..=1.0,
            rounds in 1u64..500,
            comps in 1u64..20,
            seed in any::<u64>(),
            workers in 1u64..9,
            fifo in any::<bool>(),
            delay_kind in 0u8..3,
            lo in 1u64..5,
            span in 0u64..5,
        ) {
            let delay = match delay_kind {
                0 => json!({"kind": "deterministic", "value": lo}),
                1 => json!({"kind": "uniform", "min": lo, "max": lo + span}),
                _ => json!({"kind": "poisson", "mean": lo as f64 + 0.5}),
            };
            let doc = json!({
                "algorithm": "hello",
                "topology": {"kind": if ring { "ring" } else { "complete" }, "nodes": nodes},
                "delay": delay,
                "lossProbability": loss,
                "fifo": fifo,
                "roundsPerComputation": rounds,
                "computationsPerRun": comps,
                "seed": seed,
                "workerCount": workers,
                "logTags": ["Greetings"],
            });
            let text = doc.to_string();
            let a = load(&text).unwrap();
            prop_assert_eq!(&a, &load(&text).unwrap());
            let b = from_value(a.to_json()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
