//! Whole-run property checks shared by the property tests and the acceptance runner.
#![allow(dead_code)]

pub mod fabric;

use std::collections::{BTreeMap, BTreeSet};

use roundsim::{config, run, LogDocument, RunConfig};
use serde_json::json;

#[derive(Debug, Clone, Copy)]
pub struct Trial {
    pub seed: u64,
    pub nodes: u32,
    pub max_delay: u64,
    pub loss: f64,
    pub rounds: u64,
}

fn u(r: &roundsim::log::LogRecord, key: &str) -> u64 {
    r.payload[key].as_u64().unwrap_or_else(|| panic!("{} record without {key}", r.tag))
}

pub fn consensus_config(algorithm: &str, t: Trial) -> RunConfig {
    config::from_value(json!({
        "algorithm": algorithm,
        "topology": {"kind": "complete", "nodes": t.nodes},
        "delay": {"kind": "uniform", "min": 1, "max": t.max_delay},
        "lossProbability": t.loss,
        "roundsPerComputation": t.rounds,
        "computationsPerRun": 2,
        "seed": t.seed,
        "logTags": ["commit", "latency", "protocolError"]
    }))
    .unwrap()
}

/// Agreement, integrity and (without loss) progress with bounded latency.
pub fn check_consensus(algorithm: &str, t: Trial) -> Result<(), String> {
    let doc = run(&consensus_config(algorithm, t)).map_err(|e| e.to_string())?;
    if let Some(e) = doc.records("protocolError").first() {
        return Err(format!("protocol error {}", e.payload));
    }
    if let Some(e) = doc.records("error").first() {
        return Err(format!("computation aborted: {}", e.payload));
    }
    let mut decided: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let mut seen: BTreeSet<(u64, u64, u32)> = BTreeSet::new();
    for r in doc.records("commit") {
        let (seq, value) = (u(r, "sequence"), u(r, "value"));
        let node = r.node.map_or(u32::MAX, |n| n.0);
        if !seen.insert((r.computation, seq, node)) {
            return Err(format!("node {node} committed sequence {seq} twice"));
        }
        if let Some(&prev) = decided.get(&(r.computation, seq)) {
            if prev != value {
                return Err(format!("sequence {seq} decided as {prev} and {value}"));
            }
        }
        decided.insert((r.computation, seq), value);
    }
    let hops = if algorithm == "pbft" { 3 } else { 2 };
    // quorums a node reaches on its own finish in one round
    let degenerate = if algorithm == "pbft" { t.nodes < 4 } else { t.nodes < 2 };
    let fastest = if degenerate { 1 } else { hops };
    for r in doc.records("latency") {
        let lat = u(r, "latency");
        if lat < fastest || lat > hops * t.max_delay {
            return Err(format!("latency {lat} outside [{fastest}, {}]", hops * t.max_delay));
        }
        if !decided.contains_key(&(r.computation, u(r, "sequence"))) {
            return Err("leader completed a sequence nobody committed".into());
        }
    }
    if t.loss == 0.0 {
        // one instance needs at most hops * max_delay rounds plus a restart round
        let per_instance = hops * t.max_delay + 1;
        let expect = t.rounds / per_instance;
        for c in 0..2 {
            let done = doc.records("latency").iter().filter(|r| r.computation == c).count() as u64;
            if done + 1 < expect {
                return Err(format!("computation {c}: {done} instances completed, expected about {expect}"));
            }
        }
    }
    Ok(())
}

pub fn datalink_config(algorithm: &str, t: Trial) -> RunConfig {
    config::from_value(json!({
        "algorithm": algorithm,
        "topology": {"kind": "complete", "nodes": 2},
        "delay": {"kind": "uniform", "min": 1, "max": t.max_delay},
        "lossProbability": t.loss,
        "fifo": algorithm == "abp",
        "roundsPerComputation": t.rounds,
        "computationsPerRun": 2,
        "seed": t.seed,
        "logTags": ["sent", "delivered", "utility"]
    }))
    .unwrap()
}

/// Delivered payloads are 0, 1, 2, ... with no gaps or repeats, and never ahead of the sender.
pub fn check_datalink(algorithm: &str, t: Trial) -> Result<(), String> {
    let doc = run(&datalink_config(algorithm, t)).map_err(|e| e.to_string())?;
    check_delivery_order(&doc)
}

pub fn check_delivery_order(doc: &LogDocument) -> Result<(), String> {
    for c in 0..2 {
        let delivered: Vec<u64> =
            doc.records("delivered").iter().filter(|r| r.computation == c).map(|r| u(r, "payload")).collect();
        for (i, &p) in delivered.iter().enumerate() {
            if p != i as u64 {
                return Err(format!("computation {c}: delivery {i} carried payload {p}: {delivered:?}"));
            }
        }
        let highest_sent = doc.records("sent").iter().filter(|r| r.computation == c).map(|r| u(r, "payload")).max();
        if let (Some(&last), Some(sent)) = (delivered.last(), highest_sent) {
            if last > sent {
                return Err(format!("payload {last} delivered but only {sent} sent"));
            }
        }
    }
    Ok(())
}
