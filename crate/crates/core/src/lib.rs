//! Scheduling and discrete-event performance modeling for multimodal
//! diffusion-transformer training and inference clusters.
//!
//! Modules, bottom-up:
//! - [`workload`]: samples, 1D packing and packed attention masks.
//! - [`cluster`]: topology and the compute/communication cost model.
//! - [`balancer`]: DP assignment, encoder partitioning, elastic Ulysses degrees.
//! - [`comms`]: direct and two-tier all-to-all planning.
//! - [`pipesim`]: interleaved 1F1B simulation with offloading and recompute.
//! - [`attnwin`]: shifted-window and asymmetric attention analysis.
//! - [`reliability`]: fault injection and effective training time ratio.

pub mod attnwin;
pub mod balancer;
pub mod cluster;
pub mod comms;
pub mod pipesim;
pub mod reliability;
pub mod step;
pub mod workload;

pub use balancer::{Assignment, UpPlan};
pub use cluster::{ClusterSpec, LinkPath, ModelShape};
pub use pipesim::{PipelineConfig, ScheduleTrace};
pub use workload::{MaskSpec, PackedSequence, Sample};
