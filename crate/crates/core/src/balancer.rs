//! Heuristic load balancing: sample to DP-group assignment, encoder token
//! partitioning across pipeline stages, per-microbatch Ulysses degree
//! selection and microbatch reordering.
//!
//! Every tie breaks toward the smallest id, index or degree so results are
//! reproducible across runs and platforms.

use std::cmp::Ordering;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{
    layer_compute_time, padded_tokens, ulysses_alltoall_time, ClusterError, ClusterSpec, ModelShape,
    ULYSSES_ALLTOALLS_PER_LAYER,
};
use crate::workload::Sample;

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("no UP degree fits: largest option {max_option} needs a per-rank cap of {required_cap} tokens")]
    NoFeasibleDegree { max_option: usize, required_cap: u64 },
    #[error("UP degree options must be non-empty, positive and ascending")]
    InvalidOptions,
    #[error("number of groups or stages must be >= 1")]
    ZeroGroups,
    #[error("cannot partition an empty load list")]
    EmptyLoads,
    #[error("UP degree {up_degree} exceeds the {lanes} ranks of the group")]
    DegreeExceedsGroup { up_degree: usize, lanes: usize },
    #[error("invalid UP plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpGroup {
    pub group_id: usize,
    pub sample_ids: Vec<String>,
    pub load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub dp_groups: Vec<DpGroup>,
}

impl Assignment {
    pub fn makespan(&self) -> f64 {
        self.dp_groups.iter().map(|g| g.load).fold(0.0, f64::max)
    }

    pub fn imbalance(&self) -> Imbalance {
        Imbalance::of(&self.dp_groups.iter().map(|g| g.load).collect::<Vec<_>>())
    }
}

/// Load spread across groups. `ratio` is max / mean (1.0 when balanced).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Imbalance {
    pub max: f64,
    pub mean: f64,
    pub ratio: f64,
}

impl Imbalance {
    pub fn of(loads: &[f64]) -> Self {
        let max = loads.iter().copied().fold(0.0, f64::max);
        let mean = if loads.is_empty() { 0.0 } else { loads.iter().sum::<f64>() / loads.len() as f64 };
        let ratio = if mean > 0.0 { max / mean } else { 1.0 };
        Self { max, mean, ratio }
    }
}

/// Longest-processing-time greedy over `loads`; `tie` orders equal loads.
/// Returns member indices per group, in placement order, and group loads.
pub fn lpt_assign(
    loads: &[f64],
    num_groups: usize,
    tie: impl Fn(usize, usize) -> Ordering,
) -> (Vec<Vec<usize>>, Vec<f64>) {
    let mut order: Vec<usize> = (0..loads.len()).collect();
    order.sort_by(|&a, &b| loads[b].total_cmp(&loads[a]).then_with(|| tie(a, b)));
    let mut members = vec![Vec::new(); num_groups];
    let mut totals = vec![0.0f64; num_groups];
    for i in order {
        let lightest = (0..num_groups)
            .min_by(|&a, &b| totals[a].total_cmp(&totals[b]).then(a.cmp(&b)))
            .expect("num_groups >= 1");
        members[lightest].push(i);
        totals[lightest] += loads[i];
    }
    (members, totals)
}

/// Assigns samples to DP groups with LPT on `load_fn`, ties by sample id.
pub fn assign_to_dp(
    samples: &[Sample],
    num_groups: usize,
    load_fn: impl Fn(&Sample) -> f64,
) -> Result<Assignment, BalanceError> {
    if num_groups == 0 {
        return Err(BalanceError::ZeroGroups);
    }
    let loads: Vec<f64> = samples.iter().map(&load_fn).collect();
    let (members, totals) = lpt_assign(&loads, num_groups, |a, b| samples[a].id.cmp(&samples[b].id));
    let dp_groups = members
        .into_iter()
        .zip(totals)
        .enumerate()
        .map(|(group_id, (idx, load))| DpGroup {
            group_id,
            sample_ids: idx.iter().map(|&i| samples[i].id.clone()).collect(),
            load,
        })
        .collect();
    Ok(Assignment { dp_groups })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePartition {
    pub ranges: Vec<Range<usize>>,
    pub loads: Vec<f64>,
    pub max_load: f64,
}

/// Splits an ordered load list into `num_stages` contiguous ranges that
/// minimize the largest range sum.
///
/// The optimum is one of the O(n^2) contiguous range sums; a binary search
/// over them with a greedy feasibility check finds it. Among optimal
/// partitions the lexicographically earliest cuts win. Ranges are non-empty
/// while items remain, so surplus stages get trailing empty ranges.
pub fn partition_encoder_tokens(loads: &[f64], num_stages: usize) -> Result<StagePartition, BalanceError> {
    if num_stages == 0 {
        return Err(BalanceError::ZeroGroups);
    }
    if loads.is_empty() {
        return Err(BalanceError::EmptyLoads);
    }
    let n = loads.len();
    let prefix: Vec<f64> = std::iter::once(0.0)
        .chain(loads.iter().scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        }))
        .collect();
    let sum = |a: usize, b: usize| prefix[b] - prefix[a];

    let mut candidates: Vec<f64> = (0..n).flat_map(|i| (i + 1..=n).map(move |j| (i, j))).map(|(i, j)| sum(i, j)).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    // fewest ranges needed to cover [start, n) with every range <= bound
    let ranges_needed = |start: usize, bound: f64| -> usize {
        let mut count = 0;
        let mut i = start;
        while i < n {
            if sum(i, i + 1) > bound {
                return usize::MAX;
            }
            let mut j = i + 1;
            while j < n && sum(i, j + 1) <= bound {
                j += 1;
            }
            count += 1;
            i = j;
        }
        count
    };

    let (mut lo, mut hi) = (0, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if ranges_needed(0, candidates[mid]) <= num_stages {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let bound = candidates[lo];

    let mut ranges = Vec::with_capacity(num_stages);
    let mut start = 0;
    for stage in 0..num_stages {
        let remaining = num_stages - stage - 1;
        let end = if start == n || remaining == 0 {
            n
        } else {
            (start + 1..=n)
                .find(|&end| sum(start, end) <= bound && ranges_needed(end, bound) <= remaining)
                .expect("bound is feasible")
        };
        ranges.push(start..end);
        start = end;
    }
    let stage_loads: Vec<f64> = ranges.iter().map(|r| sum(r.start, r.end)).collect();
    let max_load = stage_loads.iter().copied().fold(0.0, f64::max);
    Ok(StagePartition { ranges, loads: stage_loads, max_load })
}

/// Modeled cost of one microbatch under Ulysses degree `up_degree`, summed
/// over all layers of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicrobatchTime {
    pub up_degree: usize,
    /// Forward compute per member rank.
    pub compute_per_rank: f64,
    /// All-to-all time per member rank before overlap.
    pub alltoall: f64,
    /// All-to-all time left after overlapping with compute.
    pub exposed_alltoall: f64,
    /// Device time occupied across all member ranks.
    pub rank_seconds: f64,
}

impl MicrobatchTime {
    pub fn per_rank(&self) -> f64 {
        self.compute_per_rank + self.exposed_alltoall
    }
}

pub fn microbatch_time(
    tokens: u64,
    attn_nnz: u64,
    up_degree: usize,
    layers: usize,
    shape: &ModelShape,
    spec: &ClusterSpec,
) -> Result<MicrobatchTime, BalanceError> {
    let padded = padded_tokens(tokens, up_degree);
    let layers_f = layers as f64;
    let compute = layer_compute_time(shape, padded, attn_nnz, spec) * layers_f;
    let compute_per_rank = compute / up_degree as f64;
    let alltoall = ulysses_alltoall_time(padded, shape, up_degree, spec)? * f64::from(ULYSSES_ALLTOALLS_PER_LAYER) * layers_f;
    let exposed_alltoall = spec.exposed_comm(alltoall, compute_per_rank);
    Ok(MicrobatchTime {
        up_degree,
        compute_per_rank,
        alltoall,
        exposed_alltoall,
        rank_seconds: compute + up_degree as f64 * exposed_alltoall,
    })
}

/// Picks the Ulysses degree for one microbatch.
///
/// Among options that keep `ceil(tokens / u)` within `per_rank_token_cap`,
/// returns the one with the least device time (`compute + u * exposed
/// all-to-all`), smallest degree on ties. Attention is taken as dense.
pub fn choose_up_degree(
    microbatch_tokens: u64,
    options: &[usize],
    per_rank_token_cap: u64,
    shape: &ModelShape,
    spec: &ClusterSpec,
) -> Result<usize, BalanceError> {
    if options.is_empty() || options[0] == 0 || options.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BalanceError::InvalidOptions);
    }
    let nnz = microbatch_tokens * microbatch_tokens;
    let mut best: Option<(usize, f64)> = None;
    for &u in options {
        if microbatch_tokens.div_ceil(u as u64) > per_rank_token_cap {
            continue;
        }
        let t = microbatch_time(microbatch_tokens, nnz, u, shape.num_layers, shape, spec)?.rank_seconds;
        if best.is_none_or(|(_, b)| t < b) {
            best = Some((u, t));
        }
    }
    let max_option = *options.last().expect("non-empty");
    best.map(|(u, _)| u).ok_or(BalanceError::NoFeasibleDegree {
        max_option,
        required_cap: microbatch_tokens.div_ceil(max_option as u64),
    })
}

/// Distributes microbatches over DP groups with LPT on `costs` and orders
/// each group longest first. Returns microbatch indices per group.
pub fn reorder_microbatches(costs: &[f64], dp_groups: usize) -> Result<Vec<Vec<usize>>, BalanceError> {
    if dp_groups == 0 {
        return Err(BalanceError::ZeroGroups);
    }
    let (mut members, _) = lpt_assign(costs, dp_groups, |a, b| a.cmp(&b));
    for group in &mut members {
        group.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
    }
    Ok(members)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpEntry {
    pub microbatch: usize,
    pub up_degree: usize,
    /// Ranks of the group (0-based within the group) that run this microbatch.
    pub member_ranks: Vec<usize>,
    /// Scheduling slot; each rank sees its microbatches in increasing wave order.
    pub wave: usize,
}

/// Per-microbatch Ulysses groups within one DP group of `lanes` ranks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpPlan {
    pub lanes: usize,
    pub entries: Vec<UpEntry>,
}

impl UpPlan {
    /// Every microbatch on rank 0 of a single-rank group.
    pub fn trivial(microbatches: usize) -> Self {
        Self {
            lanes: 1,
            entries: (0..microbatches)
                .map(|mb| UpEntry { microbatch: mb, up_degree: 1, member_ranks: vec![0], wave: mb })
                .collect(),
        }
    }

    pub fn num_waves(&self) -> usize {
        self.entries.iter().map(|e| e.wave + 1).max().unwrap_or(0)
    }

    pub fn entry(&self, microbatch: usize) -> Option<&UpEntry> {
        self.entries.iter().find(|e| e.microbatch == microbatch)
    }

    pub fn validate(&self, allowed: Option<&[usize]>) -> Result<(), BalanceError> {
        let bad = |m: String| Err(BalanceError::InvalidPlan(m));
        let mut seen_mb = std::collections::BTreeSet::new();
        let mut lane_waves = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen_mb.insert(e.microbatch) {
                return bad(format!("microbatch {} planned twice", e.microbatch));
            }
            if allowed.is_some_and(|a| !a.contains(&e.up_degree)) {
                return bad(format!("microbatch {}: degree {} not allowed", e.microbatch, e.up_degree));
            }
            if e.member_ranks.len() != e.up_degree {
                return bad(format!("microbatch {}: {} members for degree {}", e.microbatch, e.member_ranks.len(), e.up_degree));
            }
            let distinct: std::collections::BTreeSet<_> = e.member_ranks.iter().collect();
            if distinct.len() != e.member_ranks.len() {
                return bad(format!("microbatch {}: duplicate member ranks", e.microbatch));
            }
            for &r in &e.member_ranks {
                if r >= self.lanes {
                    return bad(format!("microbatch {}: rank {r} outside group of {}", e.microbatch, self.lanes));
                }
                if !lane_waves.insert((r, e.wave)) {
                    return bad(format!("rank {r} has two microbatches in wave {}", e.wave));
                }
            }
        }
        if seen_mb.len() != self.entries.len() || seen_mb.iter().enumerate().any(|(i, &mb)| i != mb) {
            return bad("microbatch ids must be 0..m".into());
        }
        Ok(())
    }
}

/// Places microbatches on ranks of a group of `lanes` ranks.
///
/// Microbatches are taken in the given order. Each goes to the aligned block
/// of `up_degree` ranks that finishes earliest, preferring blocks inside one
/// node; ties go to the lowest block. `costs` is per-rank time.
pub fn plan_up(
    degrees: &[usize],
    costs: &[f64],
    lanes: usize,
    gpus_per_node: usize,
) -> Result<UpPlan, BalanceError> {
    if lanes == 0 {
        return Err(BalanceError::ZeroGroups);
    }
    let mut finish = vec![0.0f64; lanes];
    let mut next_wave = vec![0usize; lanes];
    let mut entries = Vec::with_capacity(degrees.len());
    for (mb, (&u, &cost)) in degrees.iter().zip(costs).enumerate() {
        if u == 0 || u > lanes {
            return Err(BalanceError::DegreeExceedsGroup { up_degree: u, lanes });
        }
        let blocks: Vec<usize> = (0..lanes / u).map(|k| k * u).collect();
        let node = |lane: usize| lane / gpus_per_node.max(1);
        let in_node: Vec<usize> = blocks.iter().copied().filter(|&s| node(s) == node(s + u - 1)).collect();
        let pool = if in_node.is_empty() { blocks } else { in_node };
        let start = pool
            .into_iter()
            .min_by(|&a, &b| {
                let fa = finish[a..a + u].iter().copied().fold(0.0, f64::max);
                let fb = finish[b..b + u].iter().copied().fold(0.0, f64::max);
                fa.total_cmp(&fb).then(a.cmp(&b))
            })
            .expect("u <= lanes gives at least one block");
        let members: Vec<usize> = (start..start + u).collect();
        let begin = members.iter().map(|&l| finish[l]).fold(0.0, f64::max);
        let wave = members.iter().map(|&l| next_wave[l]).max().unwrap_or(0);
        for &l in &members {
            finish[l] = begin + cost;
            next_wave[l] = wave + 1;
        }
        entries.push(UpEntry { microbatch: mb, up_degree: u, member_ranks: members, wave });
    }
    Ok(UpPlan { lanes, entries })
}
