//! Reference protocols and the name-based dispatch used by configurations.

pub mod blockchain;
pub mod consensus;
pub mod datalink;
pub mod dht;
pub mod hello;

use std::collections::BTreeMap;

use serde_json::Value;

use crate::config::{ConfigError, RunConfig};
use crate::engine::{run_protocol, SimError};
use crate::log::LogDocument;

/// A concrete protocol selectable from a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AlgorithmKind {
    Hello,
    Bitcoin,
    Ethereum,
    Pbft,
    Raft,
    Abp,
    Sdl,
    Chord,
    Kademlia,
}

/// Protocols that share a node implementation and a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Hello,
    Blockchain,
    Consensus,
    DataLink,
    Dht,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Hello => "hello",
            Family::Blockchain => "blockchain",
            Family::Consensus => "consensus",
            Family::DataLink => "datalink",
            Family::Dht => "dht",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "blockchain" => Family::Blockchain,
            "consensus" => Family::Consensus,
            "datalink" => Family::DataLink,
            "dht" => Family::Dht,
            _ => return None,
        })
    }
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 9] = [
        AlgorithmKind::Hello,
        AlgorithmKind::Bitcoin,
        AlgorithmKind::Ethereum,
        AlgorithmKind::Pbft,
        AlgorithmKind::Raft,
        AlgorithmKind::Abp,
        AlgorithmKind::Sdl,
        AlgorithmKind::Chord,
        AlgorithmKind::Kademlia,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::Hello => "hello",
            AlgorithmKind::Bitcoin => "bitcoin",
            AlgorithmKind::Ethereum => "ethereum",
            AlgorithmKind::Pbft => "pbft",
            AlgorithmKind::Raft => "raft",
            AlgorithmKind::Abp => "abp",
            AlgorithmKind::Sdl => "sdl",
            AlgorithmKind::Chord => "chord",
            AlgorithmKind::Kademlia => "kademlia",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn family(self) -> Family {
        match self {
            AlgorithmKind::Hello => Family::Hello,
            AlgorithmKind::Bitcoin | AlgorithmKind::Ethereum => Family::Blockchain,
            AlgorithmKind::Pbft | AlgorithmKind::Raft => Family::Consensus,
            AlgorithmKind::Abp | AlgorithmKind::Sdl => Family::DataLink,
            AlgorithmKind::Chord | AlgorithmKind::Kademlia => Family::Dht,
        }
    }

    /// Resolves `algorithm` plus an optional `algorithmParams.variant`.
    ///
    /// `algorithm` may name a protocol directly (`"raft"`) or a family
    /// (`"consensus"`) whose variant is then required.
    pub fn resolve(algorithm: &str, variant: Option<Value>) -> Result<Self, ConfigError> {
        let variant = match variant {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(ConfigError::schema("algorithmParams.variant", "must be a string")),
        };
        let unknown_variant = |name: &str| ConfigError::UnknownAlgorithm {
            path: "algorithmParams.variant".into(),
            name: name.to_owned(),
        };
        if let Some(kind) = Self::from_name(algorithm) {
            return match variant.as_deref() {
                None => Ok(kind),
                Some(v) if v == kind.name() => Ok(kind),
                Some(v) => match Self::from_name(v) {
                    Some(_) => Err(ConfigError::schema(
                        "algorithmParams.variant",
                        format!("variant {v:?} conflicts with algorithm {algorithm:?}"),
                    )),
                    None => Err(unknown_variant(v)),
                },
            };
        }
        let family = Family::from_name(algorithm)
            .ok_or_else(|| ConfigError::UnknownAlgorithm { path: "algorithm".into(), name: algorithm.to_owned() })?;
        let v = variant.ok_or_else(|| {
            ConfigError::schema("algorithmParams.variant", format!("required when algorithm is {algorithm:?}"))
        })?;
        match Self::from_name(&v) {
            Some(kind) if kind.family() == family => Ok(kind),
            Some(_) => {
                Err(ConfigError::schema("algorithmParams.variant", format!("{v:?} is not a {algorithm} variant")))
            }
            None => Err(unknown_variant(&v)),
        }
    }
}

/// Checks the algorithm-specific parts of a configuration.
pub fn validate(config: &RunConfig) -> Result<(), ConfigError> {
    match config.algorithm.family() {
        Family::Hello => hello::Hello::from_config(config).map(drop),
        Family::Blockchain => blockchain::Blockchain::from_config(config).map(drop),
        Family::Consensus => consensus::Consensus::from_config(config).map(drop),
        Family::DataLink => datalink::DataLink::from_config(config).map(drop),
        Family::Dht => dht::Dht::from_config(config).map(drop),
    }
}

pub(crate) fn run(config: &RunConfig) -> Result<LogDocument, SimError> {
    match config.algorithm.family() {
        Family::Hello => run_protocol(config, &hello::Hello::from_config(config)?),
        Family::Blockchain => run_protocol(config, &blockchain::Blockchain::from_config(config)?),
        Family::Consensus => run_protocol(config, &consensus::Consensus::from_config(config)?),
        Family::DataLink => run_protocol(config, &datalink::DataLink::from_config(config)?),
        Family::Dht => run_protocol(config, &dht::Dht::from_config(config)?),
    }
}

/// Typed access to `algorithmParams`, rejecting keys the protocol does not know.
pub(crate) struct Params<'a> {
    map: &'a BTreeMap<String, Value>,
}

impl<'a> Params<'a> {
    pub(crate) fn new(map: &'a BTreeMap<String, Value>, allowed: &[&str]) -> Result<Self, ConfigError> {
        if let Some(key) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(ConfigError::schema(format!("algorithmParams.{key}"), "unknown parameter"));
        }
        Ok(Params { map })
    }

    fn path(key: &str) -> String {
        format!("algorithmParams.{key}")
    }

    pub(crate) fn probability(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => match v.as_f64() {
                Some(p) if (0.0..=1.0).contains(&p) => Ok(p),
                _ => Err(ConfigError::schema(Self::path(key), format!("must be a probability in [0, 1], got {v}"))),
            },
        }
    }

    pub(crate) fn uint(&self, key: &str, min: u64, max: u64) -> Result<Option<u64>, ConfigError> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => match v.as_u64() {
                Some(x) if (min..=max).contains(&x) => Ok(Some(x)),
                _ => {
                    Err(ConfigError::schema(Self::path(key), format!("must be an integer in [{min}, {max}], got {v}")))
                }
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn names_round_trip() {
        for kind in AlgorithmKind::ALL {
            assert_eq!(AlgorithmKind::from_name(kind.name()), Some(kind));
        }
    }

    #[test]
    fn resolve_family_and_variant() {
        assert_eq!(AlgorithmKind::resolve("dht", Some(json!("chord"))).unwrap(), AlgorithmKind::Chord);
        assert_eq!(AlgorithmKind::resolve("raft", Some(json!("raft"))).unwrap(), AlgorithmKind::Raft);
        assert!(AlgorithmKind::resolve("dht", Some(json!("raft"))).is_err());
        assert!(AlgorithmKind::resolve("dht", None).is_err());
        assert!(matches!(
            AlgorithmKind::resolve("dht", Some(json!("pastry"))),
            Err(ConfigError::UnknownAlgorithm { .. })
        ));
        assert!(matches!(AlgorithmKind::resolve("gossip", None), Err(ConfigError::UnknownAlgorithm { .. })));
    }

    #[test]
    fn params_reject_unknown_keys() {
        let mut map = BTreeMap::new();
        map.insert("mineProbabilty".to_owned(), json!(0.1));
        let err = Params::new(&map, &["mineProbability"]).err().unwrap();
        assert_eq!(err.path(), Some("algorithmParams.mineProbabilty"));
    }
}
