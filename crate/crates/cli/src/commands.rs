//! One function per subcommand. Each returns its files and a headline
//! number for sweep indexes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use omnisched_core::attnwin::{
    bridge_report, build_window_mask, connectivity_diameter, dense_csv, dense_pgm, kv_cache_report,
    super_resolution_mask, AttnError, LayerParity, TokenGrid, WindowSpec,
};
use omnisched_core::balancer::{Assignment, DpGroup};
use omnisched_core::comms::{
    inter_link_seconds, plan_cost, plan_direct, plan_two_tier, trace_delivery, CommPlan, TransferMatrix,
};
use omnisched_core::pipesim::{chrome_trace, metrics_csv, metrics_json, simulate_step, CostTable, SimError};
use omnisched_core::reliability::{ettr_table, mtbf_threshold_for_target, FaultModel};
use omnisched_core::step::{plan_step, StepError, StepPlan, UpMode};
use omnisched_core::workload::mask_nnz;
use omnisched_core::{PipelineConfig, ScheduleTrace};

use crate::config::Scenario;
use crate::error::CliError;
use crate::output::{csv, Artifacts, Format};

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub format: Format,
    pub trace: bool,
}

pub struct Outcome {
    pub artifacts: Artifacts,
    pub headline: (&'static str, f64),
}

fn sim_err(e: SimError) -> CliError {
    match e {
        SimError::DeadlockDetected { .. } => CliError::Invariant(e.to_string()),
        other => CliError::Validation(format!("pipeline: {other}")),
    }
}

fn step_err(e: StepError) -> CliError {
    match e {
        StepError::Sim(s) => sim_err(s),
        StepError::Invalid(m) => CliError::Validation(format!("pipeline/balancer: {m}")),
        StepError::Workload(w) => CliError::Validation(format!("workload: {w}")),
        StepError::Balance(b) => CliError::Validation(format!("balancer: {b}")),
    }
}

fn header(command: &str, sc: &Scenario) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(command));
    m.insert("config_hash".into(), json!(sc.hash));
    m.insert("seed".into(), json!(sc.seed));
    m
}

fn finish_trace(trace: &ScheduleTrace) -> Result<(), CliError> {
    trace.check_invariants().map_err(CliError::Invariant)
}

fn microbatch_rows(plan: &StepPlan) -> String {
    csv(
        "dp_group,microbatch,samples,tokens,attn_nnz,up_degree,device_seconds",
        plan.microbatches.iter().map(|m| {
            vec![
                m.dp_group.to_string(),
                m.microbatch.to_string(),
                m.sample_ids.len().to_string(),
                m.tokens.to_string(),
                m.attn_nnz.to_string(),
                m.up_degree.to_string(),
                m.device_seconds.to_string(),
            ]
        }),
    )
}

pub fn simulate(sc: &Scenario, ro: RunOptions) -> Result<Outcome, CliError> {
    let mut report = header("simulate", sc);
    let mut arts = Artifacts::default();
    let p = &sc.config.pipeline;
    let trace = if let Some(u) = &p.uniform {
        let cfg = PipelineConfig {
            offload_policy: p.offload_policy,
            recompute_budget: p.recompute_budget,
            lead_events: p.lead_events,
            model_state_bytes: p.model_state_bytes,
            chunk_reuse: p.chunk_reuse.clone(),
            ..PipelineConfig::new(p.pp_stages, p.virtual_chunks, u.microbatches)
        };
        let costs = CostTable::uniform(u.microbatches, cfg.num_virtual_stages(), u.fwd, u.bwd);
        report.insert("mode".into(), json!("uniform"));
        simulate_step(&[(cfg, costs)], &sc.cluster).map_err(sim_err)?
    } else {
        let samples = sc.samples()?;
        let up = sc.up_mode();
        let plan = plan_step(&samples, &sc.step_options(up.clone()), &sc.shape, &sc.cluster).map_err(step_err)?;
        let trace = plan.simulate(&sc.cluster).map_err(step_err)?;
        report.insert("mode".into(), json!("model"));
        report.insert("up_mode".into(), serde_json::to_value(&up).expect("serializes"));
        report.insert("samples".into(), json!(samples.len()));
        report.insert("microbatches".into(), serde_json::to_value(&plan.microbatches).expect("serializes"));
        if sc.config.balancer.compare_static {
            if let UpMode::Elastic { options } = &up {
                let cmp = compare_static(sc, &samples, options, trace.metrics.step_time)?;
                report.insert("up_comparison".into(), cmp);
            }
        }
        if ro.format.csv() {
            arts.text("microbatches.csv", microbatch_rows(&plan));
        }
        trace
    };
    finish_trace(&trace)?;
    report.insert("metrics".into(), metrics_json(&trace.metrics));
    if ro.format.json() {
        arts.json("report.json", &Value::Object(report));
    }
    if ro.format.csv() {
        let mut text = format!("metric,value\nconfig_hash,{}\nseed,{}\n", sc.hash, sc.seed);
        text.push_str(metrics_csv(&trace.metrics).trim_start_matches("metric,value\n"));
        arts.text("metrics.csv", text);
    }
    if ro.trace {
        arts.json("trace.json", &chrome_trace(&trace, &sc.cluster));
    }
    Ok(Outcome { artifacts: arts, headline: ("step_time", trace.metrics.step_time) })
}

/// Every static degree among `options`, simulated on the same samples.
fn compare_static(
    sc: &Scenario,
    samples: &[omnisched_core::Sample],
    options: &[usize],
    elastic: f64,
) -> Result<Value, CliError> {
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for &degree in options {
        let opts = sc.step_options(UpMode::Static { degree });
        match plan_step(samples, &opts, &sc.shape, &sc.cluster) {
            Ok(plan) => {
                let trace = plan.simulate(&sc.cluster).map_err(step_err)?;
                finish_trace(&trace)?;
                let t = trace.metrics.step_time;
                if best.is_none_or(|(_, b)| t < b) {
                    best = Some((degree, t));
                }
                rows.push(json!({"degree": degree, "step_time": t}));
            }
            Err(StepError::Sim(e @ SimError::DeadlockDetected { .. })) => return Err(sim_err(e)),
            Err(e) => rows.push(json!({"degree": degree, "infeasible": e.to_string()})),
        }
    }
    let (best_degree, best_time) = best.map_or((Value::Null, Value::Null), |(d, t)| (json!(d), json!(t)));
    let gain = best.map_or(Value::Null, |(_, t)| json!(1.0 - elastic / t));
    Ok(json!({
        "elastic_step_time": elastic,
        "static": rows,
        "best_static_degree": best_degree,
        "best_static_step_time": best_time,
        "elastic_gain": gain,
    }))
}

pub fn balance(sc: &Scenario, ro: RunOptions) -> Result<Outcome, CliError> {
    let samples = sc.samples()?;
    let up = sc.up_mode();
    let plan = plan_step(&samples, &sc.step_options(up.clone()), &sc.shape, &sc.cluster).map_err(step_err)?;
    let groups = (0..sc.config.balancer.dp_groups)
        .map(|g| {
            let mbs = plan.microbatches.iter().filter(|m| m.dp_group == g);
            DpGroup {
                group_id: g,
                sample_ids: mbs.clone().flat_map(|m| m.sample_ids.iter().cloned()).collect(),
                load: mbs.map(|m| m.device_seconds).sum(),
            }
        })
        .collect();
    let assignment = Assignment { dp_groups: groups };
    let imbalance = assignment.imbalance();
    let mut arts = Artifacts::default();
    if ro.format.json() {
        let mut report = header("balance", sc);
        report.insert("up_mode".into(), serde_json::to_value(&up).expect("serializes"));
        report.insert("lanes".into(), json!(plan.lanes));
        report.insert("assignment".into(), serde_json::to_value(&assignment).expect("serializes"));
        report.insert("imbalance".into(), serde_json::to_value(imbalance).expect("serializes"));
        report.insert(
            "up_plans".into(),
            Value::Array(plan.groups.iter().map(|(c, _)| serde_json::to_value(&c.up_plan).expect("serializes")).collect()),
        );
        report.insert("microbatches".into(), serde_json::to_value(&plan.microbatches).expect("serializes"));
        arts.json("balance.json", &Value::Object(report));
    }
    if ro.format.csv() {
        arts.text("microbatches.csv", microbatch_rows(&plan));
        arts.text(
            "groups.csv",
            csv(
                "dp_group,samples,load_seconds",
                assignment.dp_groups.iter().map(|g| vec![g.group_id.to_string(), g.sample_ids.len().to_string(), g.load.to_string()]),
            ),
        );
    }
    Ok(Outcome { artifacts: arts, headline: ("imbalance_ratio", imbalance.ratio) })
}

fn transfer_matrix(sc: &Scenario) -> Result<TransferMatrix, CliError> {
    let section = sc.config.comms.as_ref().ok_or_else(|| CliError::Validation("comms: section required".into()))?;
    let n = sc.cluster.num_ranks();
    let bytes = match (&section.matrix, &section.random) {
        (Some(p), None) => {
            let path = sc.base_dir.join(p);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Validation(format!("comms.matrix ({}): {e}", p.display())))?;
            serde_json::from_str::<Vec<Vec<u64>>>(&text)
                .map_err(|e| CliError::Validation(format!("comms.matrix ({}): {e}", p.display())))?
        }
        (None, Some(r)) => {
            if !(0.0..=1.0).contains(&r.density) {
                return Err(CliError::Validation("comms.random.density: must be in [0, 1]".into()));
            }
            if r.max_bytes == 0 {
                return Err(CliError::Validation("comms.random.max_bytes: must be >= 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| if i != j && rng.random_bool(r.density) { rng.random_range(1..=r.max_bytes) } else { 0 })
                        .collect()
                })
                .collect()
        }
        _ => return Err(CliError::Validation("comms: set exactly one of matrix or random".into())),
    };
    TransferMatrix::new(bytes).map_err(|e| CliError::Validation(format!("comms.matrix: {e}")))
}

fn plan_summary(name: &str, plan: &CommPlan, m: &TransferMatrix, sc: &Scenario) -> Result<Value, CliError> {
    let delivered = trace_delivery(plan, m).map_err(|e| CliError::Invariant(format!("{name} plan: {e}")))?;
    let off_diagonal = |i: usize, j: usize| if i == j { 0 } else { m.bytes[i][j] };
    if (0..m.num_ranks).any(|i| (0..m.num_ranks).any(|j| delivered[i][j] != off_diagonal(i, j))) {
        return Err(CliError::Invariant(format!("{name} plan does not deliver the transfer matrix")));
    }
    Ok(json!({
        "inter_messages": plan.inter_messages(),
        "inter_bytes": plan.inter_bytes(),
        "inter_link_seconds": inter_link_seconds(plan, &sc.cluster),
        "cost": plan_cost(plan, &sc.cluster),
        "plan": plan,
    }))
}

pub fn comms(sc: &Scenario, ro: RunOptions) -> Result<Outcome, CliError> {
    let m = transfer_matrix(sc)?;
    let topo = |e| CliError::Validation(format!("comms: {e}"));
    let direct = plan_direct(&m, &sc.cluster).map_err(topo)?;
    let two_tier = plan_two_tier(&m, &sc.cluster).map_err(topo)?;
    let nodes = sc.cluster.num_nodes;
    if two_tier.inter_messages() > nodes * nodes.saturating_sub(1) {
        return Err(CliError::Invariant("two-tier plan sends more than one message per node pair".into()));
    }
    let mut arts = Artifacts::default();
    let tt_cost = plan_cost(&two_tier, &sc.cluster);
    if ro.format.json() {
        let mut report = header("comms", sc);
        report.insert("num_ranks".into(), json!(m.num_ranks));
        report.insert("total_bytes".into(), json!(m.bytes.iter().flatten().sum::<u64>()));
        report.insert("direct".into(), plan_summary("direct", &direct, &m, sc)?);
        report.insert("two_tier".into(), plan_summary("two-tier", &two_tier, &m, sc)?);
        arts.json("comms.json", &Value::Object(report));
    } else {
        plan_summary("direct", &direct, &m, sc)?;
        plan_summary("two-tier", &two_tier, &m, sc)?;
    }
    if ro.format.csv() {
        let mut rows = Vec::new();
        for (name, cost) in [("direct", plan_cost(&direct, &sc.cluster)), ("two_tier", tt_cost.clone())] {
            for node in 0..nodes {
                rows.push(vec![
                    name.to_string(),
                    node.to_string(),
                    cost.uplink_bytes[node].to_string(),
                    cost.uplink_messages[node].to_string(),
                    cost.intra_bytes[node].to_string(),
                    cost.intra_messages[node].to_string(),
                ]);
            }
        }
        arts.text("links.csv", csv("plan,node,uplink_bytes,uplink_messages,intra_bytes,intra_messages", rows));
    }
    Ok(Outcome { artifacts: arts, headline: ("two_tier_seconds", tt_cost.total_seconds) })
}

pub fn attn_report(sc: &Scenario, ro: RunOptions) -> Result<Outcome, CliError> {
    let a = sc.config.attention.as_ref().ok_or_else(|| CliError::Validation("attention: section required".into()))?;
    let grid = TokenGrid { prefix_len: a.prefix_len, ..TokenGrid::new(a.grid[0], a.grid[1], a.grid[2]) };
    let win = WindowSpec { exempt_prefix: a.exempt_prefix, ..WindowSpec::new(a.window[0], a.window[1], a.window[2]) };
    grid.validate().map_err(|e| CliError::Validation(format!("attention.grid: {e}")))?;
    win.validate().map_err(|e| CliError::Validation(format!("attention.window: {e}")))?;
    let attn = |e: AttnError| CliError::Validation(format!("attention: {e}"));
    let cond: Vec<usize> = (0..grid.prefix_len).collect();
    let n = grid.num_tokens() as u64;

    let mut arts = Artifacts::default();
    let mut per_parity = serde_json::Map::new();
    let mut kv_rows = Vec::new();
    let mut headline = 0.0;
    for (name, parity) in [("even", LayerParity::Even), ("odd", LayerParity::Odd)] {
        let window = build_window_mask(&grid, &win, parity);
        let sr = super_resolution_mask(&grid, &win, parity).map_err(attn)?;
        let kv = kv_cache_report(&sr, &cond, &sc.shape, a.steps, &sc.cluster).map_err(attn)?;
        let window_nnz = mask_nnz(&window).map_err(|e| CliError::Invariant(e.to_string()))?;
        let sr_nnz = mask_nnz(&sr).map_err(|e| CliError::Invariant(e.to_string()))?;
        if parity == LayerParity::Even {
            headline = kv.end_to_end_ratio;
        }
        for s in &kv.cached {
            kv_rows.push(vec![
                name.to_string(),
                s.step.to_string(),
                s.projection_tokens.to_string(),
                s.attn_pairs.to_string(),
                s.flops.to_string(),
                s.seconds.to_string(),
            ]);
        }
        per_parity.insert(
            name.into(),
            json!({
                "window_nnz": window_nnz,
                "window_density": window_nnz as f64 / (n * n) as f64,
                "super_resolution_nnz": sr_nnz,
                "kv_cache": kv,
            }),
        );
        if a.dense_dump {
            let dump = |e: AttnError| CliError::Validation(format!("attention.dense_dump: {e}"));
            arts.text(&format!("mask_{name}.pgm"), dense_pgm(&sr).map_err(dump)?);
            if ro.format.csv() {
                arts.text(&format!("mask_{name}.csv"), dense_csv(&sr).map_err(dump)?);
            }
        }
    }
    let bridges = bridge_report(&grid, &win);
    if ro.format.json() {
        let mut report = header("attn-report", sc);
        report.insert("grid".into(), serde_json::to_value(grid).expect("serializes"));
        report.insert("window".into(), serde_json::to_value(win).expect("serializes"));
        report.insert("num_tokens".into(), json!(n));
        report.insert("connectivity_diameter".into(), json!(connectivity_diameter(&grid, &win)));
        report.insert(
            "bridges".into(),
            json!({"adjacent_pairs": bridges.adjacent_pairs, "bridged_pairs": bridges.bridged_pairs, "all_bridged": bridges.all_bridged()}),
        );
        report.insert("parity".into(), Value::Object(per_parity));
        arts.json("attn.json", &Value::Object(report));
    }
    if ro.format.csv() {
        arts.text("kv_steps.csv", csv("parity,step,projection_tokens,attn_pairs,flops,seconds", kv_rows));
    }
    Ok(Outcome { artifacts: arts, headline: ("kv_end_to_end_ratio", headline) })
}

pub fn reliability(sc: &Scenario, ro: RunOptions) -> Result<Outcome, CliError> {
    let f = sc.config.fault_model.as_ref().ok_or_else(|| CliError::Validation("fault_model: section required".into()))?;
    let fm = FaultModel {
        mtbf: f.mtbf,
        detect_latency: f.detect_latency,
        restart_time: f.restart_time,
        checkpoint_interval: f.checkpoint_interval,
        checkpoint_overhead: f.checkpoint_overhead,
        rng_seed: sc.seed,
    };
    let invalid = |e: omnisched_core::reliability::ReliabilityError| CliError::Validation(format!("fault_model: {e}"));
    fm.validate().map_err(invalid)?;
    let mut mtbfs = vec![f.mtbf];
    mtbfs.extend(f.mtbf_sweep.iter().copied());
    let rows = ettr_table(&fm, &mtbfs, f.productive_duration, f.trials).map_err(invalid)?;
    let threshold = match f.target {
        Some(target) => {
            let mtbf = mtbf_threshold_for_target(&fm, target)
                .map_err(|e| CliError::Validation(format!("fault_model.target: {e}")))?;
            json!({"target": target, "mtbf": mtbf})
        }
        None => Value::Null,
    };
    let mut arts = Artifacts::default();
    if ro.format.json() {
        let mut report = header("reliability", sc);
        report.insert("fault_model".into(), serde_json::to_value(&fm).expect("serializes"));
        report.insert("productive_duration".into(), json!(f.productive_duration));
        report.insert("rows".into(), serde_json::to_value(&rows).expect("serializes"));
        report.insert("threshold".into(), threshold);
        arts.json("reliability.json", &Value::Object(report));
    }
    if ro.format.csv() {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        arts.text(
            "ettr.csv",
            csv(
                "mtbf,renewal,first_order,mc_ettr,mc_std_error,mc_mean_faults",
                rows.iter().map(|r| {
                    let mc = r.monte_carlo.as_ref();
                    vec![
                        r.mtbf.to_string(),
                        r.renewal.to_string(),
                        r.first_order.to_string(),
                        opt(mc.map(|m| m.ettr)),
                        opt(mc.map(|m| m.std_error)),
                        opt(mc.map(|m| m.mean_faults)),
                    ]
                }),
            ),
        );
    }
    Ok(Outcome { artifacts: arts, headline: ("ettr_renewal", rows[0].renewal) })
}

pub fn run_named(name: &str, sc: &Scenario, ro: RunOptions) -> Result<Outcome, CliError> {
    match name {
        "simulate" => simulate(sc, ro),
        "balance" => balance(sc, ro),
        "comms" => comms(sc, ro),
        "attn-report" => attn_report(sc, ro),
        "reliability" => reliability(sc, ro),
        other => Err(CliError::Validation(format!(
            "sweep.command: unknown command {other:?}; expected simulate, balance, comms, attn-report or reliability"
        ))),
    }
}

/// The output directory: `--out`, else the config's `output_dir` relative to the config file.
pub fn output_dir(sc: &Scenario, out: Option<&Path>) -> Result<std::path::PathBuf, CliError> {
    match (out, &sc.config.output_dir) {
        (Some(o), _) => Ok(o.to_path_buf()),
        (None, Some(d)) => Ok(sc.base_dir.join(d)),
        (None, None) => Err(CliError::Validation("output_dir: missing; set it in the config or pass --out".into())),
    }
}
