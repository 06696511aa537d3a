//! Activation memory: selective recomputation, per-rank peak estimates and
//! activation reuse across chunks that consume identical inputs.

use serde::{Deserialize, Serialize};

use super::schedule::{Pass, Schedule};
use super::SimError;
use crate::cluster::{ClusterSpec, ModelShape};

/// An operator whose stored output can be dropped and recomputed in backward.
/// Both fields are per (microbatch, chunk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecomputeOp {
    pub name: String,
    pub bytes_saved: u64,
    pub recompute_seconds: f64,
}

impl RecomputeOp {
    pub fn new(name: impl Into<String>, bytes_saved: u64, recompute_seconds: f64) -> Self {
        Self { name: name.into(), bytes_saved, recompute_seconds }
    }
}

/// Per-layer, per-token description of a recomputable operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub name: String,
    pub bytes_per_token: u64,
    pub flops_per_token: f64,
    /// Extra FLOPs per attended pair (attention core only).
    #[serde(default)]
    pub flops_per_pair: f64,
}

/// Stored tensors of one transformer layer that are candidates for recomputation.
pub fn default_operators(shape: &ModelShape) -> Vec<OperatorSpec> {
    let h = shape.hidden_dim as u64;
    let hf = shape.hidden_dim as f64;
    let b = shape.bytes_per_element;
    let op = |name: &str, elems: u64, flops: f64, pair: f64| OperatorSpec {
        name: name.into(),
        bytes_per_token: elems * b,
        flops_per_token: flops,
        flops_per_pair: pair,
    };
    vec![
        op("layernorm", 2 * h, 0.0, 0.0),
        op("qkv_proj", 3 * h, 6.0 * hf * hf, 0.0),
        op("attn_core", h, 0.0, 4.0 * hf),
        op("mlp_fc1", 4 * h, 8.0 * hf * hf, 0.0),
        op("gelu", 4 * h, 0.0, 0.0),
    ]
}

/// Absolute catalog for one (microbatch, chunk) of `tokens` tokens with
/// `attn_nnz` attended pairs over `layers` layers.
pub fn operator_catalog(
    ops: &[OperatorSpec],
    tokens: u64,
    attn_nnz: u64,
    layers: usize,
    spec: &ClusterSpec,
) -> Vec<RecomputeOp> {
    ops.iter()
        .map(|o| {
            let flops = (o.flops_per_token * tokens as f64 + o.flops_per_pair * attn_nnz as f64) * layers as f64;
            RecomputeOp::new(o.name.clone(), o.bytes_per_token * tokens * layers as u64, flops / spec.effective_flops())
        })
        .collect()
}

const NANOS: f64 = 1e9;

fn to_nanos(seconds: f64) -> u64 {
    (seconds * NANOS).round() as u64
}

#[derive(Clone)]
struct State {
    time: u64,
    bytes: u64,
    items: Vec<usize>,
}

/// `a` is at least as good as `b`: more bytes, then fewer items, then
/// lexicographically smaller index list.
fn preferred(a: &State, b: &State) -> bool {
    a.bytes > b.bytes
        || (a.bytes == b.bytes && (a.items.len() < b.items.len() || (a.items.len() == b.items.len() && a.items <= b.items)))
}

/// Exact 0/1 knapsack: maximize bytes saved with total recompute time within
/// `budget` seconds. Returns selected catalog indices, ascending.
///
/// Times are discretized to nanoseconds and the DP keeps only the Pareto
/// frontier of (time, preference). Ties prefer fewer items, then the
/// lexicographically smallest index list.
pub fn select_recompute(catalog: &[RecomputeOp], budget: f64) -> Vec<usize> {
    let limit = if budget.is_infinite() { u64::MAX } else { to_nanos(budget.max(0.0)) };
    let mut frontier = vec![State { time: 0, bytes: 0, items: Vec::new() }];
    for (i, op) in catalog.iter().enumerate() {
        let cost = to_nanos(op.recompute_seconds.max(0.0));
        let mut next = frontier.clone();
        for s in &frontier {
            let Some(time) = s.time.checked_add(cost).filter(|&t| t <= limit) else { continue };
            let mut items = s.items.clone();
            items.push(i);
            next.push(State { time, bytes: s.bytes + op.bytes_saved, items });
        }
        next.sort_by(|a, b| a.time.cmp(&b.time).then_with(|| if preferred(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater }));
        let mut pruned: Vec<State> = Vec::with_capacity(next.len());
        for s in next {
            if pruned.last().is_none_or(|best| !preferred(best, &s)) {
                pruned.push(s);
            }
        }
        frontier = pruned;
    }
    frontier
        .into_iter()
        .reduce(|best, s| if preferred(&best, &s) { best } else { s })
        .map(|s| s.items)
        .unwrap_or_default()
}

/// Chunks whose forward inputs are identical and stored once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkReuse {
    /// Groups of virtual stage indices (`chunk * pp_stages + stage`).
    pub groups: Vec<Vec<usize>>,
    /// Input activation bytes of one chunk for one microbatch on one rank.
    pub input_bytes: u64,
    /// Time to produce one chunk's input, saved for every duplicate.
    #[serde(default)]
    pub input_seconds: f64,
}

impl ChunkReuse {
    pub fn validate(&self, num_virtual_stages: usize) -> Result<(), SimError> {
        let mut seen = vec![false; num_virtual_stages];
        for g in &self.groups {
            for &vs in g {
                if vs >= num_virtual_stages {
                    return Err(SimError::InvalidConfig(format!("reuse group chunk {vs} out of range")));
                }
                if std::mem::replace(&mut seen[vs], true) {
                    return Err(SimError::OverlappingGroups(vs));
                }
            }
        }
        Ok(())
    }

    /// True if `vs` reuses the stored input of an earlier member of its group.
    pub fn is_duplicate(&self, vs: usize) -> bool {
        self.groups.iter().any(|g| g.iter().skip(1).any(|&x| x == vs))
    }
}

/// Savings from reusing identical chunk inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReuseAccounting {
    pub memory_saved_bytes: u64,
    pub compute_saved_seconds: f64,
}

/// Memory saved with `live_microbatches` in flight, and compute saved per
/// microbatch: `(group_size - 1)` copies of the input per group.
pub fn apply_chunk_reuse(
    reuse: &ChunkReuse,
    num_virtual_stages: usize,
    live_microbatches: u64,
) -> Result<ReuseAccounting, SimError> {
    reuse.validate(num_virtual_stages)?;
    let duplicates: u64 = reuse.groups.iter().map(|g| g.len().saturating_sub(1) as u64).sum();
    Ok(ReuseAccounting {
        memory_saved_bytes: duplicates * reuse.input_bytes * live_microbatches,
        compute_saved_seconds: duplicates as f64 * reuse.input_seconds,
    })
}

/// Peak activation bytes per rank and the backward slowdown of a selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub peak_bytes: Vec<u64>,
    /// Stored bytes of one (microbatch, chunk) after recomputation.
    pub stored_per_chunk: u64,
    pub bwd_extra_seconds: f64,
}

/// Walks each rank's operation list, holding a chunk's activations from its
/// forward until its backward.
///
/// One (microbatch, chunk) stores `tokens * layers_per_chunk *
/// bytes_per_token_activation` bytes minus the `bytes_saved` of every
/// selected operator. Duplicate chunks of `reuse` store their input once.
pub fn estimate_activation_memory(
    schedule: &Schedule,
    layers_per_chunk: usize,
    shape: &ModelShape,
    tokens_per_microbatch: u64,
    catalog: &[RecomputeOp],
    selection: &[usize],
    reuse: Option<&ChunkReuse>,
) -> MemoryEstimate {
    let baseline = tokens_per_microbatch * layers_per_chunk as u64 * shape.bytes_per_token_activation;
    let saved: u64 = selection.iter().map(|&i| catalog[i].bytes_saved).sum();
    let stored = baseline.saturating_sub(saved);
    let bwd_extra_seconds = selection.iter().map(|&i| catalog[i].recompute_seconds).sum();
    let pp = schedule.pp_stages;
    let peak_bytes = schedule
        .per_rank
        .iter()
        .enumerate()
        .map(|(rank, ops)| {
            let stage = rank / schedule.lanes;
            let mut live = 0u64;
            let mut peak = 0u64;
            for op in ops {
                let vs = op.chunk * pp + stage;
                let bytes = match reuse {
                    Some(r) if r.is_duplicate(vs) => stored.saturating_sub(r.input_bytes),
                    _ => stored,
                };
                match op.pass {
                    Pass::Fwd => {
                        live += bytes;
                        peak = peak.max(live);
                    }
                    Pass::Bwd => live -= bytes,
                }
            }
            peak
        })
        .collect();
    MemoryEstimate { peak_bytes, stored_per_chunk: stored, bwd_extra_seconds }
}
