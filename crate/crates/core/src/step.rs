//! One training step from a sample list: microbatch formation, Ulysses
//! degrees, DP placement and the per-group pipeline inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancer::{choose_up_degree, microbatch_time, partition_encoder_tokens, plan_up, reorder_microbatches, BalanceError};
use crate::cluster::{ClusterSpec, LinkPath, ModelShape};
use crate::pipesim::{
    ring_allreduce_time, simulate_step, ChunkReuse, CostTable, MicrobatchShape, OffloadPolicy, PipelineConfig,
    ScheduleTrace, SimError,
};
use crate::workload::{build_mask, mask_nnz, pack_samples, MaskPolicy, PackedSequence, Sample, WorkloadError};

#[derive(Debug, Error)]
pub enum StepError {
    #[error("invalid step options: {0}")]
    Invalid(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// How Ulysses degrees are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpMode {
    /// Per microbatch, among ascending `options`.
    Elastic { options: Vec<usize> },
    /// One degree for every microbatch.
    Static { degree: usize },
}

fn default_mask_policy() -> MaskPolicy {
    MaskPolicy::FullWithinSample
}

fn default_lead() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepOptions {
    pub pp_stages: usize,
    #[serde(default = "one")]
    pub virtual_chunks: usize,
    #[serde(default = "one")]
    pub dp_groups: usize,
    pub up: UpMode,
    /// Largest number of tokens one rank may hold for a microbatch.
    pub token_cap: u64,
    #[serde(default = "default_mask_policy")]
    pub mask_policy: MaskPolicy,
    #[serde(default)]
    pub offload_policy: OffloadPolicy,
    #[serde(default)]
    pub recompute_budget: f64,
    #[serde(default = "default_lead")]
    pub lead_events: usize,
    #[serde(default)]
    pub encoder_overlap: bool,
    /// Encoder seconds per unit of sample encoder load (0 disables the phase).
    #[serde(default)]
    pub encoder_seconds_per_load: f64,
    #[serde(default)]
    pub model_state_bytes: u64,
    #[serde(default)]
    pub chunk_reuse: Option<ChunkReuse>,
}

fn one() -> usize {
    1
}

/// One microbatch of the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrobatchInfo {
    pub dp_group: usize,
    /// Index within its group's pipeline.
    pub microbatch: usize,
    pub sample_ids: Vec<String>,
    pub tokens: u64,
    pub attn_nnz: u64,
    pub up_degree: usize,
    pub member_ranks: Vec<usize>,
    pub device_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub lanes: usize,
    pub microbatches: Vec<MicrobatchInfo>,
    pub groups: Vec<(PipelineConfig, CostTable)>,
}

impl StepPlan {
    pub fn simulate(&self, spec: &ClusterSpec) -> Result<ScheduleTrace, StepError> {
        Ok(simulate_step(&self.groups, spec)?)
    }
}

impl StepOptions {
    fn layers_per_chunk(&self, shape: &ModelShape) -> Result<usize, StepError> {
        let chunks = self.pp_stages * self.virtual_chunks;
        if chunks == 0 || shape.num_layers % chunks != 0 {
            return Err(StepError::Invalid(format!(
                "num_layers {} is not divisible by pp_stages x virtual_chunks = {chunks}",
                shape.num_layers
            )));
        }
        Ok(shape.num_layers / chunks)
    }

    fn lanes(&self, spec: &ClusterSpec) -> Result<usize, StepError> {
        let per_pipeline = self.pp_stages * self.dp_groups;
        if per_pipeline == 0 || spec.num_ranks() % per_pipeline != 0 {
            return Err(StepError::Invalid(format!(
                "{} ranks cannot be split into {} groups of {} stages",
                spec.num_ranks(),
                self.dp_groups,
                self.pp_stages
            )));
        }
        Ok(spec.num_ranks() / per_pipeline)
    }

    /// Smallest degree each sample could run at, or the static degree.
    fn bucket_of(&self, tokens: u64) -> Result<usize, StepError> {
        match &self.up {
            UpMode::Static { degree } => Ok(*degree),
            UpMode::Elastic { options } => options
                .iter()
                .copied()
                .find(|&u| tokens.div_ceil(u as u64) <= self.token_cap)
                .ok_or_else(|| {
                    let max_option = options.last().copied().unwrap_or(1);
                    BalanceError::NoFeasibleDegree { max_option, required_cap: tokens.div_ceil(max_option as u64) }.into()
                }),
        }
    }
}

/// Packs samples by the degree they need: each bucket is packed first-fit
/// decreasing into sequences of `degree * token_cap` tokens.
pub fn form_microbatches(samples: &[Sample], opts: &StepOptions) -> Result<Vec<PackedSequence>, StepError> {
    let mut buckets: std::collections::BTreeMap<usize, Vec<Sample>> = std::collections::BTreeMap::new();
    for s in samples {
        buckets.entry(opts.bucket_of(s.total_tokens())?).or_default().push(s.clone());
    }
    let mut out = Vec::new();
    for (degree, members) in buckets.into_iter().rev() {
        let capacity = usize::try_from(degree as u64 * opts.token_cap)
            .map_err(|_| StepError::Invalid("token_cap too large".into()))?;
        out.extend(pack_samples(&members, capacity)?);
    }
    Ok(out)
}

/// Builds every DP group's pipeline config and costs.
pub fn plan_step(
    samples: &[Sample],
    opts: &StepOptions,
    shape: &ModelShape,
    spec: &ClusterSpec,
) -> Result<StepPlan, StepError> {
    if opts.dp_groups == 0 || opts.pp_stages == 0 || opts.virtual_chunks == 0 {
        return Err(StepError::Invalid("pp_stages, virtual_chunks and dp_groups must be >= 1".into()));
    }
    if samples.is_empty() {
        return Err(StepError::Invalid("workload has no samples".into()));
    }
    let layers_per_chunk = opts.layers_per_chunk(shape)?;
    let lanes = opts.lanes(spec)?;
    let sequences = form_microbatches(samples, opts)?;

    let mut shapes = Vec::with_capacity(sequences.len());
    let mut degrees = Vec::with_capacity(sequences.len());
    let mut times = Vec::with_capacity(sequences.len());
    for seq in &sequences {
        let tokens = seq.used_tokens() as u64;
        let nnz = mask_nnz(&build_mask(seq, opts.mask_policy)).map_err(|e| StepError::Invalid(e.to_string()))?;
        let u = match &opts.up {
            UpMode::Static { degree } => *degree,
            UpMode::Elastic { options } => choose_up_degree(tokens, options, opts.token_cap, shape, spec)?,
        };
        if u > lanes {
            return Err(BalanceError::DegreeExceedsGroup { up_degree: u, lanes }.into());
        }
        if tokens.div_ceil(u as u64) > opts.token_cap {
            return Err(BalanceError::NoFeasibleDegree { max_option: u, required_cap: tokens.div_ceil(u as u64) }.into());
        }
        times.push(microbatch_time(tokens, nnz, u, shape.num_layers, shape, spec)?);
        shapes.push(MicrobatchShape { tokens, attn_nnz: nnz });
        degrees.push(u);
    }

    let device: Vec<f64> = times.iter().map(|t| t.rank_seconds).collect();
    let order = reorder_microbatches(&device, opts.dp_groups)?;
    let stage_params = 12.0 * (shape.hidden_dim as f64).powi(2) * (shape.num_layers / opts.pp_stages) as f64;
    let grad_bytes = (stage_params * shape.bytes_per_element as f64) as u64;
    let allreduce = ring_allreduce_time(grad_bytes, opts.dp_groups, LinkPath::Inter, spec);

    let mut microbatches = Vec::new();
    let mut groups = Vec::new();
    for members in &order {
        if members.is_empty() {
            continue;
        }
        let g_degrees: Vec<usize> = members.iter().map(|&i| degrees[i]).collect();
        let g_costs: Vec<f64> = members.iter().map(|&i| times[i].per_rank()).collect();
        let up_plan = plan_up(&g_degrees, &g_costs, lanes, spec.gpus_per_node)?;
        let cfg = PipelineConfig {
            pp_stages: opts.pp_stages,
            virtual_chunks: opts.virtual_chunks,
            microbatches: members.len(),
            layers_per_chunk,
            up_plan,
            offload_policy: opts.offload_policy,
            recompute_budget: opts.recompute_budget,
            lead_events: opts.lead_events,
            encoder_overlap: opts.encoder_overlap,
            model_state_bytes: opts.model_state_bytes,
            chunk_reuse: opts.chunk_reuse.clone(),
            rank_offset: groups.len() * opts.pp_stages * lanes,
        };
        cfg.validate_against(spec)?;
        let g_shapes: Vec<MicrobatchShape> = members.iter().map(|&i| shapes[i]).collect();
        let mut costs = CostTable::from_model(&g_shapes, &cfg, shape, spec)?.with_allreduce(allreduce);
        if opts.encoder_seconds_per_load > 0.0 {
            let loads: Vec<f64> = members
                .iter()
                .flat_map(|&i| sequences[i].sample_ids())
                .map(|id| samples.iter().find(|s| s.id == id).map_or(0.0, Sample::encoder_load))
                .collect();
            let part = partition_encoder_tokens(&loads, opts.pp_stages)?;
            costs = costs.with_encoder(part.loads.iter().map(|l| l * opts.encoder_seconds_per_load / lanes as f64).collect());
        }
        for (local, &i) in members.iter().enumerate() {
            let entry = cfg.up_plan.entry(local).expect("plan covers every microbatch");
            microbatches.push(MicrobatchInfo {
                dp_group: groups.len(),
                microbatch: local,
                sample_ids: sequences[i].sample_ids().into_iter().map(String::from).collect(),
                tokens: shapes[i].tokens,
                attn_nnz: shapes[i].attn_nnz,
                up_degree: degrees[i],
                member_ranks: entry.member_ranks.clone(),
                device_seconds: device[i],
            });
        }
        groups.push((cfg, costs));
    }
    Ok(StepPlan { lanes, microbatches, groups })
}
