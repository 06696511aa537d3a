//! Per-(microbatch, chunk) costs consumed by the simulator.

use serde::{Deserialize, Serialize};

use super::memory::{default_operators, operator_catalog, select_recompute};
use super::{PipelineConfig, SimError};
use crate::cluster::{
    layer_compute_time, message_time, padded_tokens, ulysses_alltoall_time, ClusterSpec, LinkPath, ModelShape,
    ULYSSES_ALLTOALLS_PER_LAYER,
};

/// Cost of one chunk of one microbatch on each member rank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkCost {
    pub fwd: f64,
    pub bwd: f64,
    /// All-to-all time left exposed after overlap with compute.
    #[serde(default)]
    pub fwd_alltoall: f64,
    #[serde(default)]
    pub bwd_alltoall: f64,
    /// Activations held from forward until backward.
    #[serde(default)]
    pub activation_bytes: u64,
    /// Boundary activation sent to the next stage (gradient on the way back).
    #[serde(default)]
    pub p2p_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicrobatchShape {
    pub tokens: u64,
    pub attn_nnz: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    /// Indexed `[microbatch][virtual_stage]`.
    pub chunks: Vec<Vec<ChunkCost>>,
    /// Encoder inference time on each rank of a stage, per stage.
    #[serde(default)]
    pub encoder_seconds: Vec<f64>,
    /// Gradient all-reduce at the end of the step, before overlap.
    #[serde(default)]
    pub allreduce_seconds: f64,
}

impl CostTable {
    /// Same forward and backward time everywhere, no communication.
    pub fn uniform(microbatches: usize, virtual_stages: usize, fwd: f64, bwd: f64) -> Self {
        let cell = ChunkCost { fwd, bwd, ..ChunkCost::default() };
        Self { chunks: vec![vec![cell; virtual_stages]; microbatches], encoder_seconds: Vec::new(), allreduce_seconds: 0.0 }
    }

    /// Costs from the analytic model. Each microbatch runs on its planned
    /// Ulysses degree; backward is twice forward plus the recomputation
    /// chosen within `cfg.recompute_budget`.
    pub fn from_model(
        microbatches: &[MicrobatchShape],
        cfg: &PipelineConfig,
        shape: &ModelShape,
        spec: &ClusterSpec,
    ) -> Result<Self, SimError> {
        if microbatches.len() != cfg.microbatches {
            return Err(SimError::CostShape {
                expected: format!("{} microbatches", cfg.microbatches),
                got: format!("{} microbatches", microbatches.len()),
            });
        }
        let layers = cfg.layers_per_chunk as f64;
        let ops = default_operators(shape);
        let mut chunks = Vec::with_capacity(microbatches.len());
        for (mb, m) in microbatches.iter().enumerate() {
            let u = cfg.up_plan.entry(mb).map_or(1, |e| e.up_degree);
            let padded = padded_tokens(m.tokens, u);
            let local_tokens = padded / u as u64;
            let local_nnz = m.attn_nnz.div_ceil(u as u64);
            let compute = layer_compute_time(shape, padded, m.attn_nnz, spec) * layers / u as f64;
            let a2a = ulysses_alltoall_time(padded, shape, u, spec)? * f64::from(ULYSSES_ALLTOALLS_PER_LAYER) * layers;

            let catalog = operator_catalog(&ops, local_tokens, local_nnz, cfg.layers_per_chunk, spec);
            let selection = select_recompute(&catalog, cfg.recompute_budget);
            let saved: u64 = selection.iter().map(|&i| catalog[i].bytes_saved).sum();
            let extra: f64 = selection.iter().map(|&i| catalog[i].recompute_seconds).sum();
            let stored = (local_tokens * cfg.layers_per_chunk as u64 * shape.bytes_per_token_activation).saturating_sub(saved);

            let cell = ChunkCost {
                fwd: compute,
                bwd: 2.0 * compute + extra,
                fwd_alltoall: spec.exposed_comm(a2a, compute),
                bwd_alltoall: spec.exposed_comm(a2a, 2.0 * compute + extra),
                activation_bytes: stored,
                p2p_bytes: local_tokens * shape.token_bytes(),
            };
            chunks.push(vec![cell; cfg.num_virtual_stages()]);
        }
        Ok(Self { chunks, encoder_seconds: Vec::new(), allreduce_seconds: 0.0 })
    }

    pub fn with_encoder(mut self, per_stage: Vec<f64>) -> Self {
        self.encoder_seconds = per_stage;
        self
    }

    pub fn with_allreduce(mut self, seconds: f64) -> Self {
        self.allreduce_seconds = seconds;
        self
    }

    pub fn check(&self, cfg: &PipelineConfig) -> Result<(), SimError> {
        let vs = cfg.num_virtual_stages();
        if self.chunks.len() != cfg.microbatches || self.chunks.iter().any(|row| row.len() != vs) {
            return Err(SimError::CostShape {
                expected: format!("{} x {vs}", cfg.microbatches),
                got: format!("{} x {}", self.chunks.len(), self.chunks.first().map_or(0, Vec::len)),
            });
        }
        if !self.encoder_seconds.is_empty() && self.encoder_seconds.len() != cfg.pp_stages {
            return Err(SimError::CostShape {
                expected: format!("{} encoder stages", cfg.pp_stages),
                got: format!("{} encoder stages", self.encoder_seconds.len()),
            });
        }
        let negative = |c: &ChunkCost| {
            [c.fwd, c.bwd, c.fwd_alltoall, c.bwd_alltoall].iter().any(|x| !(*x >= 0.0) || !x.is_finite())
        };
        if self.chunks.iter().flatten().any(negative)
            || self.encoder_seconds.iter().any(|x| !(*x >= 0.0))
            || !(self.allreduce_seconds >= 0.0)
        {
            return Err(SimError::InvalidConfig("costs must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Ring all-reduce of `bytes` over `participants` ranks.
pub fn ring_allreduce_time(bytes: u64, participants: usize, path: LinkPath, spec: &ClusterSpec) -> f64 {
    if participants <= 1 {
        return 0.0;
    }
    let p = participants as f64;
    let steps = 2 * (participants - 1);
    let chunk = (bytes as f64 / p).ceil() as u64;
    steps as f64 * message_time(chunk, path, spec)
}
