//! Round-based simulation of distributed algorithms.
//!
//! Nodes run in synchronized rounds: every round each node receives the
//! messages whose delivery round has come, computes, and sends. Channels are
//! unicast with configurable delay and loss. Runs are reproducible from the
//! configuration seed regardless of the worker count.
//!
//! ```no_run
//! let config = roundsim::config::load_file("configs/raft.json".as_ref()).unwrap();
//! let log = roundsim::run(&config).unwrap();
//! println!("{}", log.serialize());
//! ```

pub mod algorithms;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod log;
pub mod metrics;
pub mod network;
pub mod node;
pub mod rng;

pub use config::{ConfigError, RunConfig};
pub use engine::{run, run_protocol, SimError, Simulation};
pub use log::LogDocument;
pub use network::{DelayDistribution, NodeId, Topology};
pub use node::{Node, NodeContext, NodeError, Protocol, RoundContext};
