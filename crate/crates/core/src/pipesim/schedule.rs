//! Interleaved one-forward-one-backward ordering.
//!
//! The ordering is computed over *waves*: a wave is one slot of the classic
//! schedule, and every microbatch of the Ulysses plan occupies one wave on
//! each of its member ranks. With one rank per stage and one microbatch per
//! wave this is the textbook interleaved 1F1B. Each rank executes the stage
//! order filtered to its own microbatches, so all ranks of a stage agree on
//! relative order and gang operations cannot cross-wait.

use serde::{Deserialize, Serialize};

use super::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Fwd,
    Bwd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Op {
    pub pass: Pass,
    pub microbatch: usize,
    /// Model chunk on this stage, `0..virtual_chunks`.
    pub chunk: usize,
}

impl Op {
    pub fn fwd(microbatch: usize, chunk: usize) -> Self {
        Self { pass: Pass::Fwd, microbatch, chunk }
    }

    pub fn bwd(microbatch: usize, chunk: usize) -> Self {
        Self { pass: Pass::Bwd, microbatch, chunk }
    }
}

/// Per-rank operation lists. Rank `stage * lanes + lane`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub pp_stages: usize,
    pub virtual_chunks: usize,
    pub lanes: usize,
    pub per_rank: Vec<Vec<Op>>,
}

impl Schedule {
    pub fn rank(&self, stage: usize, lane: usize) -> usize {
        stage * self.lanes + lane
    }

    pub fn num_ranks(&self) -> usize {
        self.per_rank.len()
    }
}

type StageOp = (Pass, usize, usize);

/// Forward and backward sequences over `waves`: `pp` waves per group,
/// chunks ascending within a group for forwards and descending for backwards.
fn sequences(pp: usize, v: usize, waves: usize) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let groups: Vec<std::ops::Range<usize>> =
        (0..waves.div_ceil(pp)).map(|g| g * pp..((g + 1) * pp).min(waves)).collect();
    let forwards = groups.iter().flat_map(|g| (0..v).flat_map(move |c| g.clone().map(move |w| (w, c)))).collect();
    let backwards = groups.iter().flat_map(|g| (0..v).rev().flat_map(move |c| g.clone().map(move |w| (w, c)))).collect();
    (forwards, backwards)
}

fn warmup(pp: usize, v: usize, stage: usize) -> usize {
    if v == 1 {
        pp - stage - 1
    } else {
        (pp - stage - 1) * 2 + (v - 1) * pp
    }
}

/// Stage order over `waves` slots as `(pass, wave, chunk)`.
///
/// The rank runs a warmup of forwards, then alternates forward and
/// backward, then drains the remaining backwards. When the last group is
/// partial and chunks are interleaved this fixed pattern can wait on
/// itself; the orders then come from [`greedy_orders`] instead.
pub fn stage_order(pp: usize, v: usize, waves: usize, stage: usize) -> Vec<StageOp> {
    stage_orders(pp, v, waves).swap_remove(stage)
}

fn fixed_order(pp: usize, v: usize, waves: usize, stage: usize) -> Vec<StageOp> {
    let (forwards, backwards) = sequences(pp, v, waves);
    let total = waves * v;
    let warmup = warmup(pp, v, stage).min(total);
    let mut order = Vec::with_capacity(2 * total);
    order.extend(forwards[..warmup].iter().map(|&(w, c)| (Pass::Fwd, w, c)));
    for i in 0..total - warmup {
        let (w, c) = forwards[warmup + i];
        order.push((Pass::Fwd, w, c));
        let (w, c) = backwards[i];
        order.push((Pass::Bwd, w, c));
    }
    order.extend(backwards[total - warmup..].iter().map(|&(w, c)| (Pass::Bwd, w, c)));
    order
}

fn stage_orders(pp: usize, v: usize, waves: usize) -> Vec<Vec<StageOp>> {
    let fixed: Vec<_> = (0..pp).map(|s| fixed_order(pp, v, waves, s)).collect();
    if runs_to_completion(pp, v, waves, &fixed) {
        fixed
    } else {
        greedy_orders(pp, v, waves)
    }
}

fn op_ready(done: &std::collections::HashSet<(Pass, usize, usize)>, pp: usize, v: usize, op: StageOp, stage: usize) -> bool {
    let (pass, w, c) = op;
    let vs = c * pp + stage;
    match pass {
        Pass::Fwd => vs == 0 || done.contains(&(Pass::Fwd, w, vs - 1)),
        Pass::Bwd => done.contains(&(Pass::Fwd, w, vs)) && (vs + 1 == pp * v || done.contains(&(Pass::Bwd, w, vs + 1))),
    }
}

/// Executes the orders with dependencies only, ignoring time.
fn runs_to_completion(pp: usize, v: usize, waves: usize, orders: &[Vec<StageOp>]) -> bool {
    let mut done = std::collections::HashSet::new();
    let mut head = vec![0; pp];
    let mut progress = true;
    while progress {
        progress = false;
        for s in 0..pp {
            while let Some(&op) = orders[s].get(head[s]) {
                if !op_ready(&done, pp, v, op, s) {
                    break;
                }
                done.insert((op.0, op.1, op.2 * pp + s));
                head[s] += 1;
                progress = true;
            }
        }
    }
    done.len() == 2 * pp * v * waves
}

/// Orders recorded from a unit-time run (forward 1, backward 2) in which a
/// free stage takes its next backward when ready, else its next forward
/// while under the warmup limit of in-flight forwards. If every stage is
/// stuck the lowest stage with a ready forward exceeds its limit. Orders
/// taken from one feasible execution cannot wait on each other.
pub fn greedy_orders(pp: usize, v: usize, waves: usize) -> Vec<Vec<StageOp>> {
    let (forwards, backwards) = sequences(pp, v, waves);
    let total = waves * v;
    let mut done = std::collections::HashSet::new();
    let mut orders = vec![Vec::with_capacity(2 * total); pp];
    let (mut fi, mut bi) = (vec![0; pp], vec![0; pp]);
    let mut running: Vec<Option<(u64, StageOp)>> = vec![None; pp];
    let mut now = 0u64;
    while bi.iter().any(|&b| b < total) {
        for s in 0..pp {
            if let Some((end, op)) = running[s] {
                if end <= now {
                    done.insert((op.0, op.1, op.2 * pp + s));
                    running[s] = None;
                }
            }
        }
        let mut started = false;
        for s in 0..pp {
            if running[s].is_some() {
                continue;
            }
            let limit = warmup(pp, v, s) + 1;
            let bwd = backwards.get(bi[s]).map(|&(w, c)| (Pass::Bwd, w, c));
            let fwd = forwards.get(fi[s]).map(|&(w, c)| (Pass::Fwd, w, c));
            let op = if bwd.is_some_and(|op| op_ready(&done, pp, v, op, s)) {
                bwd
            } else if fwd.is_some_and(|op| fi[s] - bi[s] < limit && op_ready(&done, pp, v, op, s)) {
                fwd
            } else {
                None
            };
            if let Some(op) = op {
                let (len, idx) = if op.0 == Pass::Fwd { (1, &mut fi) } else { (2, &mut bi) };
                idx[s] += 1;
                running[s] = Some((now + len, op));
                orders[s].push(op);
                started = true;
            }
        }
        if !started && running.iter().all(Option::is_none) {
            let s = (0..pp)
                .find(|&s| forwards.get(fi[s]).is_some_and(|&(w, c)| op_ready(&done, pp, v, (Pass::Fwd, w, c), s)))
                .expect("a forward is always ready when nothing runs");
            let (w, c) = forwards[fi[s]];
            fi[s] += 1;
            running[s] = Some((now + 1, (Pass::Fwd, w, c)));
            orders[s].push((Pass::Fwd, w, c));
        }
        now = running.iter().flatten().map(|&(end, _)| end).min().unwrap_or(now);
    }
    orders
}

/// Builds every rank's operation list from the config and its Ulysses plan.
pub fn generate_schedule(cfg: &PipelineConfig) -> Schedule {
    let plan = &cfg.up_plan;
    let lanes = plan.lanes.max(1);
    let waves = plan.num_waves();
    // microbatches of each wave, ordered by their first member lane
    let mut by_wave: Vec<Vec<(usize, &[usize])>> = vec![Vec::new(); waves];
    for e in &plan.entries {
        by_wave[e.wave].push((e.microbatch, &e.member_ranks));
    }
    for w in &mut by_wave {
        w.sort_by_key(|(mb, members)| (members.iter().min().copied(), *mb));
    }

    let mut per_rank = vec![Vec::new(); cfg.pp_stages * lanes];
    for (stage, order) in stage_orders(cfg.pp_stages, cfg.virtual_chunks, waves).into_iter().enumerate() {
        for (pass, wave, chunk) in order {
            for &(mb, members) in &by_wave[wave] {
                for &lane in members {
                    per_rank[stage * lanes + lane].push(Op { pass, microbatch: mb, chunk });
                }
            }
        }
    }
    Schedule { pp_stages: cfg.pp_stages, virtual_chunks: cfg.virtual_chunks, lanes, per_rank }
}
