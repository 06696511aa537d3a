//! Discrete-event simulation of an interleaved 1F1B pipeline with elastic
//! Ulysses microbatches, activation offloading and selective recomputation.

mod costs;
mod engine;
mod export;
mod memory;
mod schedule;

use serde::{Deserialize, Serialize};

use crate::balancer::{BalanceError, UpPlan};
use crate::cluster::{ClusterError, ClusterSpec};

pub use costs::{ring_allreduce_time, ChunkCost, CostTable, MicrobatchShape};
pub use engine::{simulate, EventKind, RunMetrics, ScheduleTrace, TraceEvent};
pub use export::{chrome_trace, metrics_csv, metrics_json, write_chrome_trace};
pub use memory::{
    apply_chunk_reuse, default_operators, estimate_activation_memory, operator_catalog, select_recompute, ChunkReuse,
    MemoryEstimate, OperatorSpec, RecomputeOp, ReuseAccounting,
};
pub use schedule::{generate_schedule, stage_order, Op, Pass, Schedule};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("deadlock: {remaining} tasks could not start; first blocked: {first}")]
    DeadlockDetected { remaining: usize, first: String },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("chunk {0} appears in more than one reuse group")]
    OverlappingGroups(usize),
    #[error("cost table is {got} but the config needs {expected}")]
    CostShape { expected: String, got: String },
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffloadPolicy {
    #[default]
    None,
    PipelineAware,
}

fn default_lead() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pp_stages: usize,
    pub virtual_chunks: usize,
    pub microbatches: usize,
    pub layers_per_chunk: usize,
    pub up_plan: UpPlan,
    #[serde(default)]
    pub offload_policy: OffloadPolicy,
    /// Extra backward seconds allowed for recomputation, per microbatch and chunk.
    #[serde(default)]
    pub recompute_budget: f64,
    /// Onload starts this many rank operations before the matching backward.
    #[serde(default = "default_lead")]
    pub lead_events: usize,
    /// Let encoder inference and DiT work mix instead of a global barrier.
    #[serde(default)]
    pub encoder_overlap: bool,
    /// Parameters, gradients and optimizer state held by every rank.
    #[serde(default)]
    pub model_state_bytes: u64,
    #[serde(default)]
    pub chunk_reuse: Option<ChunkReuse>,
    /// Global rank of this pipeline's first rank.
    #[serde(default)]
    pub rank_offset: usize,
}

impl PipelineConfig {
    /// One rank per stage, no offload, no recomputation.
    pub fn new(pp_stages: usize, virtual_chunks: usize, microbatches: usize) -> Self {
        Self {
            pp_stages,
            virtual_chunks,
            microbatches,
            layers_per_chunk: 1,
            up_plan: UpPlan::trivial(microbatches),
            offload_policy: OffloadPolicy::None,
            recompute_budget: 0.0,
            lead_events: default_lead(),
            encoder_overlap: false,
            model_state_bytes: 0,
            chunk_reuse: None,
            rank_offset: 0,
        }
    }

    pub fn num_virtual_stages(&self) -> usize {
        self.pp_stages * self.virtual_chunks
    }

    pub fn num_ranks(&self) -> usize {
        self.pp_stages * self.up_plan.lanes
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if self.pp_stages == 0 || self.virtual_chunks == 0 || self.microbatches == 0 || self.layers_per_chunk == 0 {
            return bad("pp_stages, virtual_chunks, microbatches and layers_per_chunk must be >= 1");
        }
        if !(self.recompute_budget >= 0.0) {
            return bad("recompute_budget must be >= 0");
        }
        if self.up_plan.entries.len() != self.microbatches {
            return Err(SimError::InvalidConfig(format!(
                "up_plan covers {} microbatches, config has {}",
                self.up_plan.entries.len(),
                self.microbatches
            )));
        }
        self.up_plan.validate(None)?;
        if let Some(reuse) = &self.chunk_reuse {
            reuse.validate(self.num_virtual_stages())?;
        }
        if self.microbatches < self.pp_stages {
            log::warn!("{} microbatches for {} stages leaves the pipeline underfilled", self.microbatches, self.pp_stages);
        }
        Ok(())
    }

    /// Checks that the pipeline's ranks exist in the cluster.
    pub fn validate_against(&self, spec: &ClusterSpec) -> Result<(), SimError> {
        self.validate()?;
        let needed = self.rank_offset + self.num_ranks();
        if needed > spec.num_ranks() {
            return Err(SimError::InvalidConfig(format!(
                "pipeline needs ranks up to {needed} but the cluster has {}",
                spec.num_ranks()
            )));
        }
        Ok(())
    }
}

/// Runs several data-parallel pipelines side by side. Step time is the
/// slowest group; events of all groups are merged.
pub fn simulate_step(groups: &[(PipelineConfig, CostTable)], spec: &ClusterSpec) -> Result<ScheduleTrace, SimError> {
    let mut traces = Vec::with_capacity(groups.len());
    for (cfg, costs) in groups {
        let schedule = generate_schedule(cfg);
        traces.push(simulate(&schedule, costs, spec, cfg)?);
    }
    Ok(ScheduleTrace::merge(traces))
}
