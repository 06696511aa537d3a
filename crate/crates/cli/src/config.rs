//! Scenario files: parsing, path resolution and hashing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use omnisched_core::cluster::{load_cluster, ClusterSpec, ModelShape};
use omnisched_core::pipesim::{ChunkReuse, OffloadPolicy};
use omnisched_core::step::{StepOptions, UpMode};
use omnisched_core::workload::{load_workload, MaskPolicy};
use omnisched_core::Sample;

use crate::error::CliError;

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Mandatory unless given with `--seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub workload: Option<PathBuf>,
    /// Defaults to the frozen reference cluster.
    #[serde(default)]
    pub cluster: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelShape>,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub balancer: BalancerSection,
    #[serde(default = "default_mask")]
    pub mask_policy: MaskPolicy,
    #[serde(default)]
    pub fault_model: Option<FaultSection>,
    #[serde(default)]
    pub comms: Option<CommsSection>,
    #[serde(default)]
    pub attention: Option<AttnSection>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn default_mask() -> MaskPolicy {
    MaskPolicy::FullWithinSample
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    #[serde(default = "one")]
    pub pp_stages: usize,
    #[serde(default = "one")]
    pub virtual_chunks: usize,
    #[serde(default)]
    pub offload_policy: OffloadPolicy,
    #[serde(default)]
    pub recompute_budget: f64,
    #[serde(default = "two")]
    pub lead_events: usize,
    #[serde(default)]
    pub encoder_overlap: bool,
    #[serde(default)]
    pub encoder_seconds_per_load: f64,
    #[serde(default)]
    pub model_state_bytes: u64,
    #[serde(default)]
    pub chunk_reuse: Option<ChunkReuse>,
    /// Fixed per-chunk costs with no communication; replaces the workload.
    #[serde(default)]
    pub uniform: Option<UniformCosts>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformCosts {
    pub microbatches: usize,
    pub fwd: f64,
    pub bwd: f64,
}

fn default_options() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

fn default_cap() -> u64 {
    8192
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancerSection {
    #[serde(default = "one")]
    pub dp_groups: usize,
    /// Elastic degree options, ascending.
    #[serde(default = "default_options")]
    pub up_options: Vec<usize>,
    /// Use this one degree instead of elastic selection.
    #[serde(default)]
    pub static_degree: Option<usize>,
    #[serde(default = "default_cap")]
    pub token_cap: u64,
    /// Also simulate every static degree in `up_options`.
    #[serde(default)]
    pub compare_static: bool,
}

impl Default for BalancerSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn default_duration() -> f64 {
    7.0 * 86400.0
}

fn default_trials() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    pub mtbf: f64,
    #[serde(default = "FaultSection::detect")]
    pub detect_latency: f64,
    #[serde(default = "FaultSection::restart")]
    pub restart_time: f64,
    #[serde(default = "FaultSection::interval")]
    pub checkpoint_interval: f64,
    #[serde(default)]
    pub checkpoint_overhead: f64,
    #[serde(default = "default_duration")]
    pub productive_duration: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Extra mtbf values for the table; `mtbf` is always included.
    #[serde(default)]
    pub mtbf_sweep: Vec<f64>,
    #[serde(default)]
    pub target: Option<f64>,
}

impl FaultSection {
    fn detect() -> f64 {
        60.0
    }
    fn restart() -> f64 {
        30.0
    }
    fn interval() -> f64 {
        600.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMatrix {
    pub max_bytes: u64,
    /// Probability that an off-diagonal entry is non-zero.
    #[serde(default = "full_density")]
    pub density: f64,
}

fn full_density() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommsSection {
    /// JSON file holding a square array of byte counts.
    #[serde(default)]
    pub matrix: Option<PathBuf>,
    #[serde(default)]
    pub random: Option<RandomMatrix>,
}

fn default_steps() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnSection {
    /// `[t, h, w]` latent extents.
    pub grid: [usize; 3],
    #[serde(default)]
    pub prefix_len: usize,
    pub window: [usize; 3],
    #[serde(default)]
    pub exempt_prefix: bool,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub dense_dump: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub command: String,
    /// Dotted config path to the values it takes.
    pub parameters: BTreeMap<String, Vec<Value>>,
}

/// A parsed scenario with its files loaded.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// The resolved document, before typing; sweeps start from it.
    pub raw: Value,
    pub base_dir: PathBuf,
    pub seed: u64,
    pub hash: String,
    pub cluster: ClusterSpec,
    pub shape: ModelShape,
}

pub fn read_document(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn hash_file(hasher: &mut Sha256, field: &str, path: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Validation(format!("{field} ({}): {e}", path.display())))?;
    hasher.update(field.as_bytes());
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(&bytes);
    Ok(())
}

impl Scenario {
    /// Types and validates `raw`. Relative paths resolve against `base_dir`.
    pub fn from_value(mut raw: Value, base_dir: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        if let (Some(seed), Value::Object(map)) = (seed_override, &mut raw) {
            map.insert("seed".into(), seed.into());
        }
        let config: ScenarioConfig = serde_path_to_error::deserialize(raw.clone())
            .map_err(|e| CliError::Validation(format!("{}: {}", e.path(), e.inner())))?;
        let seed = config
            .seed
            .ok_or_else(|| CliError::Validation("seed: missing; set it in the config or pass --seed".into()))?;

        let mut hasher = Sha256::new();
        let mut hashed = raw.clone();
        if let Value::Object(map) = &mut hashed {
            map.remove("output_dir");
        }
        hasher.update(serde_json::to_vec(&hashed).expect("json value serializes"));

        let cluster = match &config.cluster {
            Some(p) => {
                let path = base_dir.join(p);
                hash_file(&mut hasher, "cluster", &path)?;
                load_cluster(&path).map_err(|e| CliError::Validation(format!("cluster ({}): {e}", p.display())))?
            }
            None => ClusterSpec::default(),
        };
        let shape = config.model.clone().unwrap_or_default();
        shape.validate().map_err(|e| CliError::Validation(format!("model: {e}")))?;
        for (field, path) in [("workload", &config.workload), ("comms.matrix", &config.comms.as_ref().and_then(|c| c.matrix.clone()))] {
            if let Some(p) = path {
                hash_file(&mut hasher, field, &base_dir.join(p))?;
            }
        }
        Ok(Self {
            config,
            raw,
            base_dir: base_dir.to_path_buf(),
            seed,
            hash: hex::encode(hasher.finalize()),
            cluster,
            shape,
        })
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let raw = read_document(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_value(raw, &base, seed_override)
    }

    pub fn samples(&self) -> Result<Vec<Sample>, CliError> {
        let p = self
            .config
            .workload
            .as_ref()
            .ok_or_else(|| CliError::Validation("workload: required by this command".into()))?;
        load_workload(self.base_dir.join(p)).map_err(|e| CliError::Validation(format!("workload ({}): {e}", p.display())))
    }

    pub fn step_options(&self, up: UpMode) -> StepOptions {
        let p = &self.config.pipeline;
        let b = &self.config.balancer;
        StepOptions {
            pp_stages: p.pp_stages,
            virtual_chunks: p.virtual_chunks,
            dp_groups: b.dp_groups,
            up,
            token_cap: b.token_cap,
            mask_policy: self.config.mask_policy,
            offload_policy: p.offload_policy,
            recompute_budget: p.recompute_budget,
            lead_events: p.lead_events,
            encoder_overlap: p.encoder_overlap,
            encoder_seconds_per_load: p.encoder_seconds_per_load,
            model_state_bytes: p.model_state_bytes,
            chunk_reuse: p.chunk_reuse.clone(),
        }
    }

    pub fn up_mode(&self) -> UpMode {
        let b = &self.config.balancer;
        match b.static_degree {
            Some(degree) => UpMode::Static { degree },
            None => UpMode::Elastic { options: b.up_options.clone() },
        }
    }
}

/// Sets `path` (dot separated) in `doc`, creating objects on the way.
/// Numeric segments index into arrays.
pub fn set_dotted(doc: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let bad = || CliError::Validation(format!("sweep.parameters.{path}: cannot be set on this config"));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad());
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| bad())?;
                let slot = items.get_mut(idx).ok_or_else(bad)?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(bad()),
        };
    }
    Err(bad())
}
