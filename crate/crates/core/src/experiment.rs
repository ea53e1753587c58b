//! Parameter sweeps over a base configuration, metric tables and thread benchmarks.
//!
//! A sweep file looks like
//!
//! ```json
//! {
//!   "name": "consensus-latency",
//!   "baseConfig": { "algorithm": "raft", "topology": {"kind": "complete", "nodes": 20}, "...": "..." },
//!   "axis": "delay.value",
//!   "points": [1, 2, 3],
//!   "variants": ["pbft", "raft"],
//!   "metric": "mean_latency"
//! }
//! ```
//!
//! Every point runs each variant with the seed `mix(baseSeed, pointIndex)`, so
//! variants at the same point see the same random workload.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::algorithms::{blockchain, consensus, datalink, dht, AlgorithmKind, Family};
use crate::config::{self, ConfigError, RunConfig, DEFAULT_SEED};
use crate::engine::{self, SimError};
use crate::log::LogDocument;
use crate::metrics::MetricError;
use crate::rng::mix;

/// Moving-average window used by `throughput_series` when a sweep names none.
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("malformed sweep: {0}")]
    Sweep(String),
    #[error("axis {axis:?} does not resolve in the base configuration")]
    Axis { axis: String },
    #[error("metric {metric} does not apply to algorithm {algorithm}")]
    MetricMismatch { metric: &'static str, algorithm: &'static str },
    #[error("point {point} variant {variant}: {source}")]
    Config {
        point: usize,
        variant: String,
        #[source]
        source: ConfigError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("point {point} variant {variant}: {source}")]
    Metric {
        point: usize,
        variant: String,
        #[source]
        source: MetricError,
    },
    #[error("logs differ between 1 and {threads} workers")]
    Nondeterministic { threads: usize },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ThroughputSeries,
    MeanLatency,
    Utility,
    MeanHops,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::ThroughputSeries => "throughput_series",
            MetricKind::MeanLatency => "mean_latency",
            MetricKind::Utility => "utility",
            MetricKind::MeanHops => "mean_hops",
        }
    }

    pub fn family(self) -> Family {
        match self {
            MetricKind::ThroughputSeries => Family::Blockchain,
            MetricKind::MeanLatency => Family::Consensus,
            MetricKind::Utility => Family::DataLink,
            MetricKind::MeanHops => Family::Dht,
        }
    }

    /// Log tags the reducer reads.
    pub fn tags(self) -> &'static [&'static str] {
        match self {
            MetricKind::ThroughputSeries => &["confirmed"],
            MetricKind::MeanLatency => &["latency"],
            MetricKind::Utility => &["utility"],
            MetricKind::MeanHops => &["queryResolved"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub name: String,
    pub base_config: Value,
    pub axis: String,
    pub points: Vec<Value>,
    #[serde(default)]
    pub variants: Vec<String>,
    pub metric: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

impl Sweep {
    pub fn load(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Sweep(e.to_string()))
    }

    pub fn load_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ExperimentError::Io { path: path.display().to_string(), source })?;
        Self::load(&text)
    }

    fn base_algorithm(&self) -> Option<&str> {
        self.base_config.get("algorithm").and_then(Value::as_str)
    }

    /// Variant names to run; the base algorithm when none are listed.
    pub fn variant_names(&self) -> Vec<String> {
        if !self.variants.is_empty() {
            return self.variants.clone();
        }
        let named = self
            .base_config
            .pointer("/algorithmParams/variant")
            .and_then(Value::as_str)
            .or_else(|| self.base_algorithm());
        named.map(str::to_owned).into_iter().collect()
    }

    fn base_seed(&self) -> u64 {
        self.base_config.get("seed").and_then(Value::as_u64).unwrap_or(DEFAULT_SEED)
    }

    pub fn header(&self) -> SweepHeader {
        SweepHeader {
            name: self.name.clone(),
            axis: self.axis.clone(),
            points: self.points.clone(),
            variants: self.variant_names(),
            metric: self.metric,
            base_seed: self.base_seed(),
        }
    }

    /// The concrete run configuration for one (point, variant) pair.
    pub fn point_config(&self, point: usize, variant: &str) -> Result<RunConfig, ExperimentError> {
        let mut doc = self.base_config.clone();
        set_path(&mut doc, &self.axis, self.points[point].clone())
            .ok_or_else(|| ExperimentError::Axis { axis: self.axis.clone() })?;
        let obj = doc.as_object_mut().ok_or_else(|| ExperimentError::Sweep("baseConfig must be an object".into()))?;
        obj.insert("algorithm".into(), Value::String(variant.to_owned()));
        if let Some(Value::Object(params)) = obj.get_mut("algorithmParams") {
            params.remove("variant");
        }
        obj.insert("seed".into(), Value::from(mix(self.base_seed(), point as u64)));
        let tags: BTreeSet<String> = match obj.get("logTags") {
            Some(Value::Array(existing)) => existing
                .iter()
                .filter_map(|t| t.as_str().map(str::to_owned))
                .chain(self.metric.tags().iter().map(|t| (*t).to_owned()))
                .collect(),
            _ => self.metric.tags().iter().map(|t| (*t).to_owned()).collect(),
        };
        obj.insert("logTags".into(), tags.into_iter().map(Value::String).collect());

        let config = config::from_value(doc).map_err(|source| ExperimentError::Config {
            point,
            variant: variant.to_owned(),
            source,
        })?;
        if config.algorithm.family() != self.metric.family() {
            return Err(ExperimentError::MetricMismatch {
                metric: self.metric.name(),
                algorithm: config.algorithm.name(),
            });
        }
        Ok(config)
    }
}

/// Sets the dot-separated `path`; every component but the last must already exist.
fn set_path(doc: &mut Value, path: &str, value: Value) -> Option<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop()?;
    if last.is_empty() {
        return None;
    }
    let mut cur = doc;
    for part in parts {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    let obj: &mut Map<String, Value> = cur.as_object_mut()?;
    obj.insert(last.to_owned(), value);
    Some(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepHeader {
    pub name: String,
    pub axis: String,
    pub points: Vec<Value>,
    pub variants: Vec<String>,
    pub metric: MetricKind,
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricRow {
    pub axis_value: Value,
    pub variant: String,
    pub value: f64,
    pub samples: u64,
    /// Per-round moving average, for `throughput_series` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<Vec<(u64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub header: SweepHeader,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn rows_for<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.variant == variant)
    }
}

/// `(value, sample count, optional per-round series)`.
pub type Reduced = (f64, u64, Option<Vec<(u64, f64)>>);

/// Reduces a run's log with `metric`.
pub fn reduce(metric: MetricKind, doc: &LogDocument, window: usize) -> Result<Reduced, MetricError> {
    Ok(match metric {
        MetricKind::ThroughputSeries => {
            let t = blockchain::throughput_series(doc, window)?;
            (t.mean_blocks_per_round, t.computations, Some(t.series))
        }
        MetricKind::MeanLatency => {
            let l = consensus::mean_latency(doc)?;
            (l.mean, l.samples, None)
        }
        MetricKind::Utility => {
            let (u, counters) = datalink::utility(doc)?;
            (u, counters.sent, None)
        }
        MetricKind::MeanHops => {
            let h = dht::mean_hops(doc)?;
            (h.mean, h.queries, None)
        }
    })
}

/// Runs every (point, variant) pair. Rows come out point-major in variant order.
pub fn run_sweep(sweep: &Sweep, parallel_points: bool) -> Result<MetricTable, ExperimentError> {
    let header = sweep.header();
    if header.variants.is_empty() {
        return Err(ExperimentError::Sweep("no algorithm or variants given".into()));
    }
    for v in &header.variants {
        if AlgorithmKind::from_name(v).is_none() {
            return Err(ExperimentError::Config {
                point: 0,
                variant: v.clone(),
                source: ConfigError::UnknownAlgorithm { path: "variants".into(), name: v.clone() },
            });
        }
    }
    let window = sweep.window.unwrap_or(DEFAULT_WINDOW);
    let jobs: Vec<(usize, &String)> =
        (0..sweep.points.len()).flat_map(|p| header.variants.iter().map(move |v| (p, v))).collect();
    let run_one = |&(point, variant): &(usize, &String)| -> Result<MetricRow, ExperimentError> {
        let config = sweep.point_config(point, variant)?;
        let doc = engine::run(&config)?;
        let (value, samples, series) = reduce(sweep.metric, &doc, window)
            .map_err(|source| ExperimentError::Metric { point, variant: variant.clone(), source })?;
        Ok(MetricRow { axis_value: sweep.points[point].clone(), variant: variant.clone(), value, samples, series })
    };
    let rows = if parallel_points {
        jobs.par_iter().map(run_one).collect::<Result<Vec<_>, _>>()?
    } else {
        jobs.iter().map(run_one).collect::<Result<Vec<_>, _>>()?
    };
    Ok(MetricTable { header, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

/// Six significant digits, positional notation unless the exponent is extreme.
pub fn format_real(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exponent = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&exponent) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - exponent).max(0) as usize;
    let text = format!("{x:.decimals$}");
    // rounding can carry into a new digit (9.999996 -> 10.00000)
    let digits = text.chars().filter(char::is_ascii_digit).collect::<String>();
    if digits.trim_start_matches('0').len() > 6 && decimals > 0 {
        let decimals = decimals - 1;
        return format!("{x:.decimals$}");
    }
    text
}

fn axis_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) if n.is_f64() => format_real(n.as_f64().unwrap_or(0.0)),
        other => other.to_string(),
    }
}

pub fn to_csv(table: &MetricTable) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let write = |w: &mut csv::Writer<Vec<u8>>, rec: &[String]| w.write_record(rec).expect("writing to memory");
    write(&mut writer, &["axisValue", "variant", "value", "samples"].map(String::from));
    for row in &table.rows {
        write(
            &mut writer,
            &[axis_text(&row.axis_value), row.variant.clone(), format_real(row.value), row.samples.to_string()],
        );
    }
    String::from_utf8(writer.into_inner().expect("flushing to memory")).expect("csv output is utf-8")
}

pub fn to_json(table: &MetricTable) -> String {
    let value = serde_json::to_value(table).expect("metric tables serialize");
    let mut text = serde_json::to_string_pretty(&value).expect("values serialize");
    text.push('\n');
    text
}

pub fn render(table: &MetricTable, format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => to_json(table),
        OutputFormat::Csv => to_csv(table),
    }
}

/// Writes `table` to `path`, or to stdout when `path` is `None`.
pub fn emit(table: &MetricTable, format: OutputFormat, path: Option<&Path>) -> Result<(), ExperimentError> {
    write_output(&render(table, format), path)
}

pub fn write_output(text: &str, path: Option<&Path>) -> Result<(), ExperimentError> {
    match path {
        Some(p) => {
            std::fs::write(p, text).map_err(|source| ExperimentError::Io { path: p.display().to_string(), source })
        }
        None => {
            use std::io::Write;
            io::stdout()
                .write_all(text.as_bytes())
                .map_err(|source| ExperimentError::Io { path: "<stdout>".into(), source })
        }
    }
}

/// One run rendered as CSV: one line per record with its payload as JSON.
pub fn log_to_csv(doc: &LogDocument) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["tag", "computation", "round", "node", "payload"]).expect("writing to memory");
    for tag in doc.tags() {
        for r in doc.records(tag) {
            let node = r.node.map(|n| n.to_string()).unwrap_or_default();
            writer
                .write_record([
                    r.tag.clone(),
                    r.computation.to_string(),
                    r.round.to_string(),
                    node,
                    r.payload.to_string(),
                ])
                .expect("writing to memory");
        }
    }
    String::from_utf8(writer.into_inner().expect("flushing to memory")).expect("csv output is utf-8")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub threads: usize,
    pub seconds: f64,
}

/// Times one run per thread count and checks every log matches the first one.
pub fn benchmark_threads(config: &RunConfig, thread_counts: &[usize]) -> Result<Vec<BenchRow>, ExperimentError> {
    let mut reference: Option<String> = None;
    let mut rows = Vec::with_capacity(thread_counts.len());
    for &threads in thread_counts {
        let cfg = config.with_workers(threads);
        let start = Instant::now();
        let doc = engine::run(&cfg)?;
        let seconds = start.elapsed().as_secs_f64();
        let data = doc.serialize();
        match &reference {
            None => reference = Some(data),
            Some(r) if *r != data => return Err(ExperimentError::Nondeterministic { threads }),
            Some(_) => {}
        }
        rows.push(BenchRow { threads, seconds });
    }
    Ok(rows)
}

pub fn bench_to_text(rows: &[BenchRow]) -> String {
    let mut out = String::from("threads,seconds\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.threads, format_real(r.seconds));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn hello_base() -> Value {
        json!({
            "algorithm": "raft",
            "topology": {"kind": "complete", "nodes": 3},
            "delay": {"kind": "deterministic", "value": 1},
            "roundsPerComputation": 20,
            "seed": 7
        })
    }

    fn sweep(points: Vec<Value>, variants: &[&str]) -> Sweep {
        Sweep {
            name: "t".into(),
            base_config: hello_base(),
            axis: "delay.value".into(),
            points,
            variants: variants.iter().map(|s| (*s).to_owned()).collect(),
            metric: MetricKind::MeanLatency,
            window: None,
        }
    }

    #[test]
    fn sig_digits() {
        assert_eq!(format_real(0.2), "0.200000");
        assert_eq!(format_real(32.0), "32.0000");
        assert_eq!(format_real(1.0), "1.00000");
        assert_eq!(format_real(123456.7), "123457");
        assert_eq!(format_real(9.9999996), "10.0000");
        assert_eq!(format_real(0.0), "0");
        assert_eq!(format_real(1.5e-7), "1.50000e-7");
    }

    #[test]
    fn empty_points_give_header_only() {
        let table = run_sweep(&sweep(vec![], &["raft"]), false).unwrap();
        assert!(table.rows.is_empty());
        assert_eq!(table.header.variants, vec!["raft"]);
        assert_eq!(to_csv(&table), "axisValue,variant,value,samples\n");
    }

    #[test]
    fn one_row_per_point_and_variant() {
        let table = run_sweep(&sweep(vec![json!(1), json!(2)], &["pbft", "raft"]), false).unwrap();
        assert_eq!(table.rows.len(), 4);
        let raft: Vec<f64> = table.rows_for("raft").map(|r| r.value).collect();
        assert_eq!(raft, vec![2.0, 4.0]);
        let csv = to_csv(&table);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("2,raft,4.00000,"));
    }

    #[test]
    fn parallel_points_match_sequential() {
        let s = sweep(vec![json!(1), json!(2), json!(3)], &["pbft", "raft"]);
        assert_eq!(run_sweep(&s, false).unwrap(), run_sweep(&s, true).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let table = run_sweep(&sweep(vec![json!(1)], &["raft"]), false).unwrap();
        let back: MetricTable = serde_json::from_str(&to_json(&table)).unwrap();
        assert_eq!(back, table);
        assert_eq!(to_json(&back), to_json(&table));
    }

    #[test]
    fn bad_axis_and_metric() {
        let mut s = sweep(vec![json!(1)], &["raft"]);
        s.axis = "latency.value".into();
        assert!(matches!(run_sweep(&s, false), Err(ExperimentError::Axis { .. })));
        let mut s = sweep(vec![json!(1)], &["raft"]);
        s.metric = MetricKind::MeanHops;
        assert!(matches!(run_sweep(&s, false), Err(ExperimentError::MetricMismatch { .. })));
    }

    #[test]
    fn variants_share_point_seed() {
        let s = sweep(vec![json!(1), json!(2)], &["pbft", "raft"]);
        let a = s.point_config(1, "pbft").unwrap();
        let b = s.point_config(1, "raft").unwrap();
        assert_eq!(a.seed, b.seed);
        assert_ne!(a.seed, s.point_config(0, "pbft").unwrap().seed);
        assert_eq!(a.log_tags.unwrap().into_iter().collect::<Vec<_>>(), vec!["latency"]);
    }

    #[test]
    fn bench_single_row() {
        let cfg = config::from_value(hello_base()).unwrap();
        let rows = benchmark_threads(&cfg, &[1]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].threads, 1);
        let rows = benchmark_threads(&cfg, &[1, 3]).unwrap();
        assert_eq!(rows.len(), 2);
    }
}
