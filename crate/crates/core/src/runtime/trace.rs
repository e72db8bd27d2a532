//! Trace files: one self-describing JSON object per line, UTF-8. The first
//! line is a header carrying version, seed, and configuration; every later
//! line is one executed machine step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pomdp::Belief;
use crate::value::Value;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub seed: u64,
    pub entry: String,
    pub args: Vec<Value>,
    pub simulations: u32,
    pub particles: usize,
    /// Single-threaded runs are bitwise reproducible; parallel runs are not
    /// and must say so here.
    pub reproducible: bool,
}

/// One real primitive execution, with everything replay needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldCall {
    pub name: String,
    pub args: Vec<Value>,
    pub result: Value,
    pub obs: Option<Value>,
}

/// Top weighted values of one hidden slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSummary {
    pub frame: usize,
    pub slot: usize,
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub machine: String,
    pub action: String,
    pub observations: Vec<String>,
    pub cents: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub world: Option<WorldCall>,
    pub belief: Vec<SlotSummary>,
}

/// Build one record, summarizing each hidden slot by its two heaviest values.
pub fn record(
    step: u64,
    machine: String,
    action: String,
    observations: Vec<String>,
    cents: f64,
    world: Option<WorldCall>,
    belief: &Belief,
) -> TraceRecord {
    let mut summary = Vec::new();
    for (frame, slots) in belief.hidden_marginals().iter().enumerate() {
        for (slot, marginal) in slots.iter().enumerate() {
            if marginal.is_empty() {
                continue;
            }
            let mut top: Vec<(String, f64)> = marginal
                .iter()
                .map(|(v, w)| (format!("{v:?}"), (*w * 1e6).round() / 1e6))
                .collect();
            top.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            top.truncate(2);
            summary.push(SlotSummary { frame, slot, top });
        }
    }
    TraceRecord {
        step,
        machine,
        action,
        observations,
        cents,
        world,
        belief: summary,
    }
}

pub fn write_trace(path: &Path, header: &TraceHeader, records: &[TraceRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(header).expect("header serializes"));
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

pub fn read_trace(path: &Path) -> std::io::Result<(TraceHeader, Vec<TraceRecord>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "empty trace"))?;
    let header: TraceHeader = serde_json::from_str(header_line)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_file_round_trips() {
        let header = TraceHeader {
            version: TRACE_VERSION,
            seed: 7,
            entry: "vote-better?".to_string(),
            args: vec![Value::Str("q".into()), Value::Int(0)],
            simulations: 100,
            particles: 500,
            reproducible: true,
        };
        let records = vec![TraceRecord {
            step: 0,
            machine: "vote-better?/s0".to_string(),
            action: "default".to_string(),
            observations: vec![],
            cents: 0.0,
            world: Some(WorldCall {
                name: "crowd-vote".to_string(),
                args: vec![Value::Str("q".into())],
                result: Value::Bool(true),
                obs: Some(Value::Bool(true)),
            }),
            belief: vec![SlotSummary {
                frame: 0,
                slot: 1,
                top: vec![("Bin(3)".to_string(), 0.5)],
            }],
        }];
        let dir = std::env::temp_dir().join(format!("poaps-trace-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("episode.trace");
        write_trace(&path, &header, &records).unwrap();
        let (h2, r2) = read_trace(&path).unwrap();
        assert_eq!(header, h2);
        assert_eq!(records, r2);
        std::fs::remove_dir_all(&dir).ok();
    }
}
