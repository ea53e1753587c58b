//! Minimal greeting protocol: every node broadcasts a hello each round and
//! logs every greeting it receives under the `Greetings` tag.

use serde_json::json;

use crate::algorithms::Params;
use crate::config::{ConfigError, RunConfig};
use crate::node::{Node, NodeContext, NodeError, Protocol};

#[derive(Debug, Clone)]
pub struct HelloMessage {
    pub text: String,
}

#[derive(Debug, Default)]
pub struct Hello;

impl Hello {
    pub fn from_config(config: &RunConfig) -> Result<Self, ConfigError> {
        Params::new(&config.algorithm_params, &[])?;
        Ok(Hello)
    }
}

#[derive(Debug, Default)]
pub struct HelloNode {
    pub received: u64,
}

impl Node for HelloNode {
    type Message = HelloMessage;

    fn perform_computation(&mut self, ctx: &mut NodeContext<HelloMessage>) -> Result<(), NodeError> {
        ctx.broadcast(HelloMessage { text: format!("Hello From {}", ctx.id()) });
        while !ctx.in_stream_empty() {
            let packet = ctx.pop_in_stream()?;
            self.received += 1;
            let round = ctx.round();
            ctx.log_with("Greetings", || json!({"text": packet.payload.text, "round": round}));
        }
        Ok(())
    }
}

impl Protocol for Hello {
    type Message = HelloMessage;
    type Node = HelloNode;

    fn create_node(&self, _ctx: &mut NodeContext<HelloMessage>) -> Result<HelloNode, NodeError> {
        Ok(HelloNode::default())
    }
}
