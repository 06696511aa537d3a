//! The event-driven executor.
//!
//! Every forward or backward of a (microbatch, virtual stage) is one gang
//! task over the microbatch's Ulysses members on that stage. A task starts
//! once its dependencies are met and it is at the head of every member's
//! operation list. Host-link transfers run FIFO per rank beside compute.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::costs::CostTable;
use super::schedule::{Pass, Schedule};
use super::{OffloadPolicy, PipelineConfig, SimError};
use crate::cluster::{message_time, ClusterSpec, LinkPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Recv,
    Encoder,
    Fwd,
    Bwd,
    Alltoall,
    Send,
    Offload,
    Onload,
    Stall,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Recv => "recv",
            Self::Encoder => "encoder",
            Self::Fwd => "fwd",
            Self::Bwd => "bwd",
            Self::Alltoall => "alltoall",
            Self::Send => "send",
            Self::Offload => "offload",
            Self::Onload => "onload",
            Self::Stall => "stall",
        }
    }

    /// Occupies the rank's compute stream.
    pub fn is_compute(self) -> bool {
        matches!(self, Self::Encoder | Self::Fwd | Self::Bwd | Self::Alltoall)
    }

    pub fn is_host(self) -> bool {
        matches!(self, Self::Offload | Self::Onload)
    }
}

/// One interval on one rank. `chunk` is the virtual stage index
/// (`chunk_on_stage * pp_stages + stage`), so chunk `c + 1` follows `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_start: f64,
    pub t_end: f64,
    pub rank: usize,
    pub kind: EventKind,
    pub microbatch: Option<usize>,
    pub chunk: Option<usize>,
    /// Direction of a send or recv, or the pass a stall delayed.
    pub pass: Option<Pass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub step_time: f64,
    pub pipeline_end: f64,
    pub allreduce_exposed: f64,
    pub bubble_ratio: f64,
    pub bubble_time: f64,
    pub stall_time: f64,
    pub offloaded_bytes: u64,
    /// Global rank ids; the per-rank vectors below follow this order.
    pub ranks: Vec<usize>,
    pub busy_time: Vec<f64>,
    pub peak_memory: Vec<u64>,
    pub memory_violations: Vec<usize>,
}

impl RunMetrics {
    fn fill_bubble(&mut self) {
        let end = self.pipeline_end;
        self.bubble_time = self.busy_time.iter().map(|b| (end - b).max(0.0)).sum();
        let denom = end * self.busy_time.len() as f64;
        self.bubble_ratio = if denom > 0.0 { self.bubble_time / denom } else { 0.0 };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub events: Vec<TraceEvent>,
    pub metrics: RunMetrics,
}

fn event_order(a: &TraceEvent, b: &TraceEvent) -> Ordering {
    a.t_start
        .total_cmp(&b.t_start)
        .then(a.rank.cmp(&b.rank))
        .then(a.kind.cmp(&b.kind))
        .then(a.microbatch.cmp(&b.microbatch))
        .then(a.chunk.cmp(&b.chunk))
        .then(a.pass.cmp(&b.pass))
        .then(a.t_end.total_cmp(&b.t_end))
}

impl ScheduleTrace {
    /// Combines pipelines that ran side by side on disjoint ranks.
    pub fn merge(traces: Vec<ScheduleTrace>) -> ScheduleTrace {
        let mut events = Vec::new();
        let mut metrics = RunMetrics {
            step_time: 0.0,
            pipeline_end: 0.0,
            allreduce_exposed: 0.0,
            bubble_ratio: 0.0,
            bubble_time: 0.0,
            stall_time: 0.0,
            offloaded_bytes: 0,
            ranks: Vec::new(),
            busy_time: Vec::new(),
            peak_memory: Vec::new(),
            memory_violations: Vec::new(),
        };
        for t in traces {
            events.extend(t.events);
            let m = t.metrics;
            metrics.step_time = metrics.step_time.max(m.step_time);
            metrics.pipeline_end = metrics.pipeline_end.max(m.pipeline_end);
            metrics.allreduce_exposed = metrics.allreduce_exposed.max(m.allreduce_exposed);
            metrics.stall_time += m.stall_time;
            metrics.offloaded_bytes += m.offloaded_bytes;
            metrics.ranks.extend(m.ranks);
            metrics.busy_time.extend(m.busy_time);
            metrics.peak_memory.extend(m.peak_memory);
            metrics.memory_violations.extend(m.memory_violations);
        }
        events.sort_by(event_order);
        metrics.fill_bubble();
        ScheduleTrace { events, metrics }
    }

    /// Checks causality and resource exclusivity. Returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        const EPS: f64 = 1e-12;
        let mut compute: BTreeMap<usize, Vec<&TraceEvent>> = BTreeMap::new();
        let mut host: BTreeMap<usize, Vec<&TraceEvent>> = BTreeMap::new();
        let mut fwd_end: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        let mut grad_recv: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        for e in &self.events {
            if !(e.t_end >= e.t_start) {
                return Err(format!("negative duration: {e:?}"));
            }
            if e.kind.is_compute() {
                compute.entry(e.rank).or_default().push(e);
            }
            if e.kind.is_host() {
                host.entry(e.rank).or_default().push(e);
            }
            if let (Some(mb), Some(c)) = (e.microbatch, e.chunk) {
                match (e.kind, e.pass) {
                    (EventKind::Fwd, _) => {
                        fwd_end.insert((e.rank, mb, c), e.t_end);
                    }
                    (EventKind::Recv, Some(Pass::Bwd)) => {
                        let v = grad_recv.entry((e.rank, mb, c)).or_insert(0.0);
                        *v = v.max(e.t_end);
                    }
                    _ => {}
                }
            }
        }
        for (label, streams) in [("compute", &compute), ("host", &host)] {
            for (rank, evs) in streams {
                let mut evs = evs.clone();
                evs.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.t_end.total_cmp(&b.t_end)));
                for w in evs.windows(2) {
                    if w[1].t_start < w[0].t_end - EPS * w[0].t_end.abs().max(1.0) {
                        return Err(format!("{label} overlap on rank {rank}: {:?} and {:?}", w[0], w[1]));
                    }
                }
            }
        }
        for e in self.events.iter().filter(|e| e.kind == EventKind::Bwd) {
            let (Some(mb), Some(c)) = (e.microbatch, e.chunk) else { continue };
            match fwd_end.get(&(e.rank, mb, c)) {
                None => return Err(format!("bwd without fwd: {e:?}")),
                Some(&f) if e.t_start < f - EPS * f.max(1.0) => return Err(format!("bwd before fwd ends: {e:?}")),
                _ => {}
            }
            if let Some(&r) = grad_recv.get(&(e.rank, mb, c)) {
                if e.t_start < r - EPS * r.max(1.0) {
                    return Err(format!("bwd before its gradient arrives: {e:?}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TaskKind {
    Encoder { stage: usize },
    Barrier,
    Compute { pass: Pass, mb: usize, vs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Waiting,
    Scheduled,
    Done,
}

struct Task {
    kind: TaskKind,
    members: Vec<usize>,
    compute: f64,
    alltoall: f64,
    pending: usize,
    ready_at: f64,
    succs: Vec<(usize, f64)>,
    state: State,
    start: f64,
}

impl Task {
    fn duration(&self) -> f64 {
        self.compute + self.alltoall
    }

    fn describe(&self) -> String {
        match self.kind {
            TaskKind::Encoder { stage } => format!("encoder(stage {stage})"),
            TaskKind::Barrier => "encoder barrier".into(),
            TaskKind::Compute { pass, mb, vs } => format!("{pass:?}(mb {mb}, chunk {vs})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Phase {
    End,
    Start,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    rank: usize,
    phase: Phase,
    seq: u64,
    task: usize,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.rank.cmp(&other.rank))
            .then(self.phase.cmp(&other.phase))
            .then(self.seq.cmp(&other.seq))
    }
}

struct Engine<'a> {
    cfg: &'a PipelineConfig,
    spec: &'a ClusterSpec,
    costs: &'a CostTable,
    lanes: usize,
    tasks: Vec<Task>,
    lists: Vec<Vec<usize>>,
    head: Vec<usize>,
    busy: Vec<bool>,
    free_at: Vec<f64>,
    host_free: Vec<f64>,
    /// Onloads to issue when the operation at `(rank, list position)` starts.
    triggers: BTreeMap<(usize, usize), Vec<(usize, usize)>>,
    /// `(rank, mb, vs)` with offloaded activations, and when the offload lands.
    offloaded: BTreeMap<(usize, usize, usize), Option<f64>>,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    events: Vec<TraceEvent>,
    memory: Vec<Vec<(f64, i64)>>,
    busy_time: Vec<f64>,
    offloaded_bytes: u64,
    done: usize,
}

/// Executes `schedule` under `costs` and returns the trace and metrics.
pub fn simulate(
    schedule: &Schedule,
    costs: &CostTable,
    spec: &ClusterSpec,
    cfg: &PipelineConfig,
) -> Result<ScheduleTrace, SimError> {
    cfg.validate_against(spec)?;
    costs.check(cfg)?;
    if cfg.offload_policy == OffloadPolicy::PipelineAware && cfg.lead_events == 0 {
        return Err(SimError::InvalidConfig("lead_events must be >= 1 with pipeline-aware offload".into()));
    }
    if schedule.pp_stages != cfg.pp_stages
        || schedule.virtual_chunks != cfg.virtual_chunks
        || schedule.lanes != cfg.up_plan.lanes.max(1)
    {
        return Err(SimError::InvalidConfig("schedule was generated for a different config".into()));
    }
    let mut engine = Engine::build(schedule, costs, spec, cfg);
    engine.run()?;
    Ok(engine.finish())
}

impl<'a> Engine<'a> {
    fn build(schedule: &Schedule, costs: &'a CostTable, spec: &'a ClusterSpec, cfg: &'a PipelineConfig) -> Self {
        let pp = cfg.pp_stages;
        let lanes = schedule.lanes;
        let ranks = pp * lanes;
        let nvs = cfg.num_virtual_stages();
        let m = cfg.microbatches;
        let reuse = cfg.chunk_reuse.as_ref();

        let mut tasks = Vec::new();
        let task = |kind, members, compute, alltoall| Task {
            kind,
            members,
            compute,
            alltoall,
            pending: 0,
            ready_at: 0.0,
            succs: Vec::new(),
            state: State::Waiting,
            start: 0.0,
        };
        // compute tasks: id = (mb * nvs + vs) * 2 + pass
        for mb in 0..m {
            let lanes_of = cfg.up_plan.entry(mb).map_or(vec![0], |e| e.member_ranks.clone());
            for vs in 0..nvs {
                let stage = vs % pp;
                let members: Vec<usize> = lanes_of.iter().map(|&l| stage * lanes + l).collect();
                let c = costs.chunks[mb][vs];
                let saved = reuse.filter(|r| r.is_duplicate(vs)).map_or(0.0, |r| r.input_seconds);
                let fwd = (c.fwd - saved).max(0.0);
                tasks.push(task(TaskKind::Compute { pass: Pass::Fwd, mb, vs }, members.clone(), fwd, c.fwd_alltoall));
                tasks.push(task(TaskKind::Compute { pass: Pass::Bwd, mb, vs }, members, c.bwd, c.bwd_alltoall));
            }
        }
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); ranks];
        let mut encoders = Vec::new();
        if !costs.encoder_seconds.is_empty() {
            for (stage, &secs) in costs.encoder_seconds.iter().enumerate() {
                for lane in 0..lanes {
                    let r = stage * lanes + lane;
                    lists[r].push(tasks.len());
                    encoders.push(tasks.len());
                    tasks.push(task(TaskKind::Encoder { stage }, vec![r], secs, 0.0));
                }
            }
        }
        let id = |pass: Pass, mb: usize, vs: usize| (mb * nvs + vs) * 2 + usize::from(pass == Pass::Bwd);

        for (local, ops) in schedule.per_rank.iter().enumerate() {
            let stage = local / lanes;
            lists[local].extend(ops.iter().map(|op| id(op.pass, op.microbatch, op.chunk * pp + stage)));
        }

        let mut engine = Engine {
            cfg,
            spec,
            costs,
            lanes,
            tasks,
            lists,
            head: vec![0; ranks],
            busy: vec![false; ranks],
            free_at: vec![0.0; ranks],
            host_free: vec![0.0; ranks],
            triggers: BTreeMap::new(),
            offloaded: BTreeMap::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            events: Vec::new(),
            memory: vec![Vec::new(); ranks],
            busy_time: vec![0.0; ranks],
            offloaded_bytes: 0,
            done: 0,
        };

        let mut edges = Vec::new();
        for mb in 0..m {
            for vs in 0..nvs {
                if vs > 0 {
                    edges.push((id(Pass::Fwd, mb, vs - 1), id(Pass::Fwd, mb, vs), engine.p2p_delay(mb, vs - 1, vs)));
                }
                edges.push((id(Pass::Fwd, mb, vs), id(Pass::Bwd, mb, vs), 0.0));
                if vs + 1 < nvs {
                    edges.push((id(Pass::Bwd, mb, vs + 1), id(Pass::Bwd, mb, vs), engine.p2p_delay(mb, vs + 1, vs)));
                }
            }
        }
        if !encoders.is_empty() && !cfg.encoder_overlap {
            let barrier = engine.tasks.len();
            engine.tasks.push(task(TaskKind::Barrier, Vec::new(), 0.0, 0.0));
            edges.extend(encoders.iter().map(|&e| (e, barrier, 0.0)));
            edges.extend((0..m).map(|mb| (barrier, id(Pass::Fwd, mb, 0), 0.0)));
        }
        for (from, to, delay) in edges {
            engine.tasks[from].succs.push((to, delay));
            engine.tasks[to].pending += 1;
        }

        if cfg.offload_policy == OffloadPolicy::PipelineAware {
            let lead = cfg.lead_events;
            for r in 0..ranks {
                let mut fwd_pos = BTreeMap::new();
                for (pos, &t) in engine.lists[r].iter().enumerate() {
                    if let TaskKind::Compute { pass, mb, vs } = engine.tasks[t].kind {
                        match pass {
                            Pass::Fwd => {
                                fwd_pos.insert((mb, vs), pos);
                            }
                            Pass::Bwd => {
                                let f = fwd_pos[&(mb, vs)];
                                if pos >= lead && pos - lead > f && engine.activation_bytes(mb, vs) > 0 {
                                    engine.triggers.entry((r, pos - lead)).or_default().push((mb, vs));
                                    engine.offloaded.insert((r, mb, vs), None);
                                    engine.tasks[t].pending += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        engine
    }

    fn global(&self, local: usize) -> usize {
        self.cfg.rank_offset + local
    }

    fn activation_bytes(&self, mb: usize, vs: usize) -> u64 {
        let bytes = self.costs.chunks[mb][vs].activation_bytes;
        match &self.cfg.chunk_reuse {
            Some(r) if r.is_duplicate(vs) => bytes.saturating_sub(r.input_bytes),
            _ => bytes,
        }
    }

    /// Per-lane `(src, dst, seconds)` for moving data of `mb` from virtual
    /// stage `from` to `to`. Empty when both live on the same rank.
    fn p2p_links(&self, mb: usize, from: usize, to: usize) -> Vec<(usize, usize, f64)> {
        let pp = self.cfg.pp_stages;
        let (sa, sb) = (from % pp, to % pp);
        let bytes = self.costs.chunks[mb][from.min(to)].p2p_bytes;
        if sa == sb || bytes == 0 {
            return Vec::new();
        }
        let lanes_of = self.cfg.up_plan.entry(mb).map_or(vec![0], |e| e.member_ranks.clone());
        lanes_of
            .iter()
            .map(|&l| {
                let src = sa * self.lanes + l;
                let dst = sb * self.lanes + l;
                let path = if self.spec.node_of(self.global(src)) == self.spec.node_of(self.global(dst)) {
                    LinkPath::Intra
                } else {
                    LinkPath::Inter
                };
                (src, dst, message_time(bytes, path, self.spec))
            })
            .collect()
    }

    fn p2p_delay(&self, mb: usize, from: usize, to: usize) -> f64 {
        self.p2p_links(mb, from, to).iter().map(|l| l.2).fold(0.0, f64::max)
    }

    fn push(&mut self, time: f64, phase: Phase, task: usize) {
        let rank = self.tasks[task].members.first().copied().unwrap_or(0);
        self.seq += 1;
        self.heap.push(Reverse(Event { time, rank, phase, seq: self.seq, task }));
    }

    fn emit(&mut self, t_start: f64, t_end: f64, local: usize, kind: EventKind, mb: Option<usize>, chunk: Option<usize>, pass: Option<Pass>) {
        let rank = self.global(local);
        self.events.push(TraceEvent { t_start, t_end, rank, kind, microbatch: mb, chunk, pass });
    }

    fn try_start(&mut self, t: usize) {
        let task = &self.tasks[t];
        if task.state != State::Waiting || task.pending > 0 {
            return;
        }
        let mut start = task.ready_at;
        for &r in &task.members {
            if self.busy[r] || self.lists[r].get(self.head[r]) != Some(&t) {
                return;
            }
            start = start.max(self.free_at[r]);
        }
        let members = task.members.clone();
        for r in members {
            self.busy[r] = true;
        }
        self.tasks[t].state = State::Scheduled;
        self.push(start, Phase::Start, t);
    }

    fn run(&mut self) -> Result<(), SimError> {
        for t in 0..self.tasks.len() {
            self.try_start(t);
        }
        while let Some(Reverse(ev)) = self.heap.pop() {
            match ev.phase {
                Phase::Start => self.on_start(ev.task, ev.time),
                Phase::End => self.on_end(ev.task, ev.time),
            }
        }
        if self.done < self.tasks.len() {
            let first = self.tasks.iter().find(|t| t.state != State::Done).map(Task::describe).unwrap_or_default();
            return Err(SimError::DeadlockDetected { remaining: self.tasks.len() - self.done, first });
        }
        Ok(())
    }

    fn on_start(&mut self, t: usize, now: f64) {
        self.tasks[t].start = now;
        let kind = self.tasks[t].kind;
        let (compute, alltoall) = (self.tasks[t].compute, self.tasks[t].alltoall);
        let members = self.tasks[t].members.clone();
        for &r in &members {
            let (mb, vs, pass) = match kind {
                TaskKind::Compute { pass, mb, vs } => (Some(mb), Some(vs), Some(pass)),
                _ => (None, None, None),
            };
            if now > self.free_at[r] {
                self.emit(self.free_at[r], now, r, EventKind::Stall, mb, vs, pass);
            }
            let ek = match kind {
                TaskKind::Encoder { .. } => EventKind::Encoder,
                TaskKind::Compute { pass: Pass::Fwd, .. } => EventKind::Fwd,
                TaskKind::Compute { pass: Pass::Bwd, .. } => EventKind::Bwd,
                TaskKind::Barrier => unreachable!("barrier has no members"),
            };
            self.emit(now, now + compute, r, ek, mb, vs, None);
            if alltoall > 0.0 {
                self.emit(now + compute, now + compute + alltoall, r, EventKind::Alltoall, mb, vs, pass);
            }
            self.busy_time[r] += compute + alltoall;
            if let TaskKind::Compute { pass: Pass::Fwd, mb, vs } = kind {
                let bytes = self.activation_bytes(mb, vs) as i64;
                self.memory[r].push((now, bytes));
            }
            let pos = self.head[r];
            if let Some(onloads) = self.triggers.remove(&(r, pos)) {
                for (mb, vs) in onloads {
                    self.onload(r, mb, vs, now);
                }
            }
        }
        let end = now + self.tasks[t].duration();
        self.push(end, Phase::End, t);
    }

    fn onload(&mut self, r: usize, mb: usize, vs: usize, now: f64) {
        let landed = self.offloaded[&(r, mb, vs)].expect("offload is issued when the forward ends");
        let bytes = self.activation_bytes(mb, vs);
        let start = now.max(landed).max(self.host_free[r]);
        let end = start + message_time(bytes, LinkPath::Host, self.spec);
        self.host_free[r] = end;
        self.memory[r].push((start, bytes as i64));
        self.emit(start, end, r, EventKind::Onload, Some(mb), Some(vs), None);
        let nvs = self.cfg.num_virtual_stages();
        let b = (mb * nvs + vs) * 2 + 1;
        self.tasks[b].pending -= 1;
        self.tasks[b].ready_at = self.tasks[b].ready_at.max(end);
        self.try_start(b);
    }

    fn on_end(&mut self, t: usize, now: f64) {
        self.tasks[t].state = State::Done;
        self.done += 1;
        let kind = self.tasks[t].kind;
        let members = self.tasks[t].members.clone();
        for &r in &members {
            self.busy[r] = false;
            self.free_at[r] = now;
            self.head[r] += 1;
        }
        if let TaskKind::Compute { pass, mb, vs } = kind {
            let bytes = self.activation_bytes(mb, vs);
            for &r in &members {
                match pass {
                    Pass::Fwd => {
                        if let Some(slot) = self.offloaded.get(&(r, mb, vs)).copied() {
                            debug_assert!(slot.is_none());
                            let start = now.max(self.host_free[r]);
                            let end = start + message_time(bytes, LinkPath::Host, self.spec);
                            self.host_free[r] = end;
                            self.offloaded.insert((r, mb, vs), Some(end));
                            self.offloaded_bytes += bytes;
                            self.memory[r].push((end, -(bytes as i64)));
                            self.emit(start, end, r, EventKind::Offload, Some(mb), Some(vs), None);
                        }
                    }
                    Pass::Bwd => self.memory[r].push((now, -(bytes as i64))),
                }
            }
            let nvs = self.cfg.num_virtual_stages();
            let next = match pass {
                Pass::Fwd if vs + 1 < nvs => Some(vs + 1),
                Pass::Bwd if vs > 0 => Some(vs - 1),
                _ => None,
            };
            if let Some(to) = next {
                for (src, dst, secs) in self.p2p_links(mb, vs, to) {
                    self.emit(now, now + secs, src, EventKind::Send, Some(mb), Some(vs), Some(pass));
                    self.emit(now, now + secs, dst, EventKind::Recv, Some(mb), Some(to), Some(pass));
                }
            }
        }
        let succs = std::mem::take(&mut self.tasks[t].succs);
        for &(s, delay) in &succs {
            self.tasks[s].pending -= 1;
            self.tasks[s].ready_at = self.tasks[s].ready_at.max(now + delay);
            self.try_start(s);
        }
        self.tasks[t].succs = succs;
        for r in members {
            if let Some(&next) = self.lists[r].get(self.head[r]) {
                self.try_start(next);
            }
        }
    }

    fn finish(mut self) -> ScheduleTrace {
        let pipeline_end = self.tasks.iter().map(|t| t.start + t.duration()).fold(0.0, f64::max);
        let allreduce_exposed = self.costs.allreduce_seconds * (1.0 - self.spec.overlap_efficiency);
        let ranks: Vec<usize> = (0..self.lists.len()).map(|r| self.global(r)).collect();
        let peak_memory: Vec<u64> = self
            .memory
            .iter_mut()
            .map(|deltas| {
                deltas.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut live = 0i64;
                let mut peak = 0i64;
                for &(_, d) in deltas.iter() {
                    live += d;
                    peak = peak.max(live);
                }
                debug_assert_eq!(live, 0, "activations leaked");
                self.cfg.model_state_bytes + peak as u64
            })
            .collect();
        let memory_violations = ranks
            .iter()
            .zip(&peak_memory)
            .filter(|(_, &p)| p > self.spec.device_memory)
            .map(|(&r, _)| r)
            .collect();
        let stall_time = self.events.iter().filter(|e| e.kind == EventKind::Stall).map(|e| e.t_end - e.t_start).sum();
        self.events.sort_by(event_order);
        let mut metrics = RunMetrics {
            step_time: pipeline_end + allreduce_exposed,
            pipeline_end,
            allreduce_exposed,
            bubble_ratio: 0.0,
            bubble_time: 0.0,
            stall_time,
            offloaded_bytes: self.offloaded_bytes,
            ranks,
            busy_time: self.busy_time,
            peak_memory,
            memory_violations,
        };
        metrics.fill_bubble();
        ScheduleTrace { events: self.events, metrics }
    }
}
