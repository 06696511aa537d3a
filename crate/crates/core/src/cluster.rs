//! Hardware topology and the parametric cost model.
//!
//! Compute follows a roofline-style FLOP count; messages follow the
//! alpha–beta model `latency + bytes / bandwidth`. All functions are pure.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ulysses exchanges per transformer layer: Q, K and V before attention and
/// the output after it.
pub const ULYSSES_ALLTOALLS_PER_LAYER: u32 = 4;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("unknown link path `{0}` (expected intra, inter or host)")]
    UnknownPath(String),
    #[error("up_degree {up_degree} does not divide num_heads {num_heads}")]
    IndivisibleHeads { up_degree: usize, num_heads: usize },
    #[error("invalid cluster spec: {field} {reason}")]
    InvalidSpec { field: &'static str, reason: &'static str },
    #[error("invalid model shape: {0}")]
    InvalidShape(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError { line: usize, column: usize, message: String },
    #[error("cannot read cluster file: {0}")]
    Io(#[from] std::io::Error),
}

/// Node/GPU topology and device rates.
///
/// Units: FLOP/s for `peak_flops`, bytes for `device_memory`, bytes/s for the
/// three bandwidths, seconds for latencies. `quant_speedup` multiplies GEMM
/// and attention throughput; `quant_comm_factor` shrinks intra- and
/// inter-node payloads (1.0 disables FP8 communication). Host transfers are
/// never quantized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_nodes: usize,
    pub gpus_per_node: usize,
    pub peak_flops: f64,
    pub device_memory: u64,
    pub host_link_bw: f64,
    pub intra_node_bw: f64,
    pub inter_node_bw: f64,
    pub link_latency_intra: f64,
    pub link_latency_inter: f64,
    pub compute_efficiency: f64,
    pub overlap_efficiency: f64,
    pub quant_speedup: f64,
    pub quant_comm_factor: f64,
}

impl Default for ClusterSpec {
    /// The frozen reference cluster: 4 nodes of 8 GPUs with H800-class
    /// rates. The FP8 factors (1.6x compute, 0.5x payload) are assumptions.
    fn default() -> Self {
        Self {
            num_nodes: 4,
            gpus_per_node: 8,
            peak_flops: 989e12,
            device_memory: 80 * (1 << 30),
            host_link_bw: 25e9,
            intra_node_bw: 200e9,
            inter_node_bw: 50e9,
            link_latency_intra: 5e-6,
            link_latency_inter: 10e-6,
            compute_efficiency: 0.45,
            overlap_efficiency: 0.8,
            quant_speedup: 1.6,
            quant_comm_factor: 0.5,
        }
    }
}

impl ClusterSpec {
    pub fn num_ranks(&self) -> usize {
        self.num_nodes * self.gpus_per_node
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.gpus_per_node
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |field, reason| Err(ClusterError::InvalidSpec { field, reason });
        if self.num_nodes == 0 {
            return bad("num_nodes", "must be >= 1");
        }
        if self.gpus_per_node == 0 {
            return bad("gpus_per_node", "must be >= 1");
        }
        for (field, v) in [
            ("peak_flops", self.peak_flops),
            ("host_link_bw", self.host_link_bw),
            ("intra_node_bw", self.intra_node_bw),
            ("inter_node_bw", self.inter_node_bw),
        ] {
            if !(v > 0.0) {
                return bad(field, "must be > 0");
            }
        }
        for (field, v) in [("link_latency_intra", self.link_latency_intra), ("link_latency_inter", self.link_latency_inter)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, "must be finite and >= 0");
            }
        }
        if !(self.compute_efficiency > 0.0 && self.compute_efficiency <= 1.0) {
            return bad("compute_efficiency", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.overlap_efficiency) {
            return bad("overlap_efficiency", "must be in [0, 1]");
        }
        if !(self.quant_speedup >= 1.0 && self.quant_speedup.is_finite()) {
            return bad("quant_speedup", "must be finite and >= 1");
        }
        if !(self.quant_comm_factor > 0.0 && self.quant_comm_factor <= 1.0) {
            return bad("quant_comm_factor", "must be in (0, 1]");
        }
        Ok(())
    }

    /// Sustained FLOP/s after efficiency and quantization.
    pub fn effective_flops(&self) -> f64 {
        self.peak_flops * self.compute_efficiency * self.quant_speedup
    }

    pub fn latency(&self, path: LinkPath) -> f64 {
        match path {
            LinkPath::Intra => self.link_latency_intra,
            LinkPath::Inter => self.link_latency_inter,
            LinkPath::Host => 0.0,
        }
    }

    pub fn bandwidth(&self, path: LinkPath) -> f64 {
        match path {
            LinkPath::Intra => self.intra_node_bw,
            LinkPath::Inter => self.inter_node_bw,
            LinkPath::Host => self.host_link_bw,
        }
    }

    /// Communication time left on the critical path after overlapping with
    /// `compute` seconds of work.
    pub fn exposed_comm(&self, comm: f64, compute: f64) -> f64 {
        comm - comm.min(self.overlap_efficiency * compute)
    }
}

pub fn parse_cluster(text: &str) -> Result<ClusterSpec, ClusterError> {
    let spec: ClusterSpec = serde_json::from_str(text).map_err(|e| ClusterError::ParseError {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_cluster(path: impl AsRef<Path>) -> Result<ClusterSpec, ClusterError> {
    parse_cluster(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkPath {
    Intra,
    Inter,
    Host,
}

impl FromStr for LinkPath {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intra" => Ok(Self::Intra),
            "inter" => Ok(Self::Inter),
            "host" => Ok(Self::Host),
            other => Err(ClusterError::UnknownPath(other.to_string())),
        }
    }
}

impl fmt::Display for LinkPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Intra => "intra",
            Self::Inter => "inter",
            Self::Host => "host",
        })
    }
}

/// Transformer dimensions. `bytes_per_token_activation` is the activation
/// footprint stored per token per layer for the backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_layers: usize,
    pub bytes_per_token_activation: u64,
    pub bytes_per_element: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            hidden_dim: 3072,
            num_heads: 24,
            head_dim: 128,
            num_layers: 48,
            bytes_per_token_activation: 34 * 3072,
            bytes_per_element: 2,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(ClusterError::InvalidShape(format!(
                "hidden_dim {} != num_heads {} x head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            )));
        }
        if self.hidden_dim == 0 || self.num_layers == 0 || self.bytes_per_element == 0 {
            return Err(ClusterError::InvalidShape("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Bytes of one token's hidden state.
    pub fn token_bytes(&self) -> u64 {
        self.hidden_dim as u64 * self.bytes_per_element
    }
}

/// QKVO projections plus a 4x MLP, two FLOPs per multiply-accumulate.
pub fn gemm_flops(shape: &ModelShape, tokens: u64) -> f64 {
    let h = shape.hidden_dim as f64;
    24.0 * tokens as f64 * h * h
}

/// Score and value products over the permitted pairs.
pub fn attn_flops(shape: &ModelShape, attn_nnz: u64) -> f64 {
    4.0 * attn_nnz as f64 * shape.hidden_dim as f64
}

/// Forward time of one layer over `tokens` tokens with `attn_nnz` attended pairs.
pub fn layer_compute_time(shape: &ModelShape, tokens: u64, attn_nnz: u64, spec: &ClusterSpec) -> f64 {
    debug_assert!(attn_nnz as u128 <= (tokens as u128) * (tokens as u128));
    (gemm_flops(shape, tokens) + attn_flops(shape, attn_nnz)) / spec.effective_flops()
}

/// Alpha–beta time of one message.
pub fn message_time(bytes: u64, path: LinkPath, spec: &ClusterSpec) -> f64 {
    let payload = match path {
        LinkPath::Host => bytes as f64,
        LinkPath::Intra | LinkPath::Inter => bytes as f64 * spec.quant_comm_factor,
    };
    spec.latency(path) + payload / spec.bandwidth(path)
}

/// Tokens rounded up to a multiple of `up_degree`.
pub fn padded_tokens(tokens: u64, up_degree: usize) -> u64 {
    let u = up_degree.max(1) as u64;
    tokens.div_ceil(u) * u
}

/// Bytes each rank sends in one Ulysses all-to-all.
pub fn ulysses_alltoall_bytes(tokens: u64, shape: &ModelShape, up_degree: usize) -> Result<u64, ClusterError> {
    if up_degree == 0 || shape.num_heads % up_degree != 0 {
        return Err(ClusterError::IndivisibleHeads { up_degree, num_heads: shape.num_heads });
    }
    let u = up_degree as u64;
    Ok(padded_tokens(tokens, up_degree) / u * (u - 1) * shape.token_bytes())
}

/// Link used by a Ulysses group of `up_degree` ranks placed node-first.
pub fn ulysses_path(up_degree: usize, spec: &ClusterSpec) -> LinkPath {
    if up_degree <= spec.gpus_per_node {
        LinkPath::Intra
    } else {
        LinkPath::Inter
    }
}

/// Time of one Ulysses all-to-all on one rank: `u - 1` serialized sends.
pub fn ulysses_alltoall_time(
    tokens: u64,
    shape: &ModelShape,
    up_degree: usize,
    spec: &ClusterSpec,
) -> Result<f64, ClusterError> {
    let bytes = ulysses_alltoall_bytes(tokens, shape, up_degree)?;
    if up_degree <= 1 {
        return Ok(0.0);
    }
    let path = ulysses_path(up_degree, spec);
    let payload = bytes as f64 * spec.quant_comm_factor;
    Ok((up_degree - 1) as f64 * spec.latency(path) + payload / spec.bandwidth(path))
}
