//! Chrome trace and flat metrics output.

use std::io::{self, Write};

use serde_json::{json, Map, Value};

use super::engine::{RunMetrics, ScheduleTrace};
use crate::cluster::ClusterSpec;

/// Duration events in the Chrome trace format, timestamps in microseconds.
/// `pid` is the node and `tid` the global rank.
pub fn chrome_trace(trace: &ScheduleTrace, spec: &ClusterSpec) -> Value {
    let events: Vec<Value> = trace
        .events
        .iter()
        .map(|e| {
            let name = match (e.microbatch, e.chunk) {
                (Some(mb), Some(c)) => format!("{} mb{mb} c{c}", e.kind.as_str()),
                _ => e.kind.as_str().to_string(),
            };
            let mut args = Map::new();
            if let Some(mb) = e.microbatch {
                args.insert("microbatch".into(), json!(mb));
            }
            if let Some(c) = e.chunk {
                args.insert("chunk".into(), json!(c));
            }
            if let Some(p) = e.pass {
                args.insert("pass".into(), json!(p));
            }
            json!({
                "name": name,
                "cat": e.kind.as_str(),
                "ph": "X",
                "ts": e.t_start * 1e6,
                "dur": (e.t_end - e.t_start) * 1e6,
                "pid": spec.node_of(e.rank),
                "tid": e.rank,
                "args": Value::Object(args),
            })
        })
        .collect();
    Value::Array(events)
}

pub fn write_chrome_trace(trace: &ScheduleTrace, spec: &ClusterSpec, out: impl Write) -> io::Result<()> {
    serde_json::to_writer(out, &chrome_trace(trace, spec)).map_err(io::Error::other)
}

fn flat_pairs(m: &RunMetrics) -> Vec<(String, Value)> {
    let mut out = vec![
        ("step_time".to_string(), json!(m.step_time)),
        ("pipeline_end".into(), json!(m.pipeline_end)),
        ("allreduce_exposed".into(), json!(m.allreduce_exposed)),
        ("bubble_ratio".into(), json!(m.bubble_ratio)),
        ("bubble_time".into(), json!(m.bubble_time)),
        ("stall_time".into(), json!(m.stall_time)),
        ("offloaded_bytes".into(), json!(m.offloaded_bytes)),
        ("memory_violations".into(), json!(m.memory_violations.len())),
        ("max_peak_memory".into(), json!(m.peak_memory.iter().copied().max().unwrap_or(0))),
    ];
    for (i, &r) in m.ranks.iter().enumerate() {
        out.push((format!("busy_time.{r}"), json!(m.busy_time[i])));
        out.push((format!("peak_memory.{r}"), json!(m.peak_memory[i])));
    }
    out
}

/// One level of keys; per-rank values appear as `peak_memory.<rank>`.
pub fn metrics_json(m: &RunMetrics) -> Value {
    Value::Object(flat_pairs(m).into_iter().collect())
}

/// `metric,value` rows with the same keys as [`metrics_json`].
pub fn metrics_csv(m: &RunMetrics) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in flat_pairs(m) {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}
