use std::collections::BTreeMap;

use proptest::prelude::*;

use omnisched_core::attnwin::{
    build_asymmetric_mask, build_window_mask, kv_cache_report, LayerParity, TokenGrid, WindowSpec,
};
use omnisched_core::balancer::{assign_to_dp, partition_encoder_tokens};
use omnisched_core::comms::{plan_two_tier, trace_delivery, TransferMatrix};
use omnisched_core::pipesim::{generate_schedule, simulate, CostTable, EventKind};
use omnisched_core::reliability::{ettr_first_order, ettr_renewal, mtbf_threshold_for_target, FaultModel};
use omnisched_core::step::{plan_step, StepOptions, UpMode};
use omnisched_core::workload::{build_mask, compose_masks, mask_nnz, pack_samples, MaskPolicy};
use omnisched_core::{ClusterSpec, ModelShape, PipelineConfig, Sample, ScheduleTrace};

fn samples_strategy(max: usize, max_len: u64) -> impl Strategy<Value = Vec<Sample>> {
    prop::collection::vec((0..max_len, 0..max_len, 0..3usize), 1..max).prop_map(move |raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (text, visual, kind))| {
                let text = text.max(1);
                match kind {
                    0 => Sample::new(format!("s{i:03}"), text, 0, 0),
                    1 => Sample::new(format!("s{i:03}"), text, visual, 0),
                    _ => Sample::new(format!("s{i:03}"), text, 0, visual),
                }
            })
            .collect()
    })
}

/// Independent replay checks: per-rank compute never overlaps, forwards run
/// in virtual-stage order, and each backward follows its forward and the
/// next stage's backward.
fn check_trace(trace: &ScheduleTrace) -> Result<(), TestCaseError> {
    trace.check_invariants().map_err(TestCaseError::fail)?;
    let mut per_rank: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    let mut spans: BTreeMap<(usize, usize, bool), (f64, f64)> = BTreeMap::new();
    for e in &trace.events {
        if matches!(e.kind, EventKind::Fwd | EventKind::Bwd | EventKind::Alltoall | EventKind::Encoder) {
            per_rank.entry(e.rank).or_default().push((e.t_start, e.t_end));
        }
        if let (Some(mb), Some(c), EventKind::Fwd | EventKind::Bwd) = (e.microbatch, e.chunk, e.kind) {
            let s = spans.entry((mb, c, e.kind == EventKind::Bwd)).or_insert((f64::INFINITY, 0.0));
            s.0 = s.0.min(e.t_start);
            s.1 = s.1.max(e.t_end);
        }
    }
    for (rank, mut evs) in per_rank {
        evs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in evs.windows(2) {
            prop_assert!(w[1].0 >= w[0].1 - 1e-9, "rank {} overlaps: {:?}", rank, w);
        }
    }
    for (&(mb, c, bwd), &(start, _)) in &spans {
        if !bwd {
            if c > 0 {
                let prev = spans[&(mb, c - 1, false)];
                prop_assert!(start >= prev.1 - 1e-9, "F mb{} c{} before F c{}", mb, c, c - 1);
            }
        } else {
            prop_assert!(start >= spans[&(mb, c, false)].1 - 1e-9, "B before F mb{} c{}", mb, c);
            if let Some(next) = spans.get(&(mb, c + 1, true)) {
                prop_assert!(start >= next.1 - 1e-9, "B mb{} c{} before B c{}", mb, c, c + 1);
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn packing_conserves_samples(samples in samples_strategy(24, 40), cap in 80usize..200) {
        let packed = pack_samples(&samples, cap).unwrap();
        let mut tokens: BTreeMap<String, u64> = BTreeMap::new();
        for seq in &packed {
            prop_assert!(seq.used_tokens() <= cap);
            prop_assert_eq!(seq.used_tokens() + seq.padding, cap);
            for seg in &seq.segments {
                *tokens.entry(seg.sample_id.clone()).or_default() += seg.length as u64;
            }
        }
        let want: BTreeMap<String, u64> = samples.iter().map(|s| (s.id.clone(), s.total_tokens())).collect();
        prop_assert_eq!(tokens, want);
    }

    #[test]
    fn masks_stay_inside_samples(samples in samples_strategy(8, 12), causal in any::<bool>()) {
        let policy = if causal { MaskPolicy::CausalTextBidirVisual } else { MaskPolicy::FullWithinSample };
        for seq in pack_samples(&samples, 64).unwrap() {
            let mask = build_mask(&seq, policy);
            mask.validate().unwrap();
            let dense = mask.to_dense();
            let mut owner = vec![None; seq.capacity];
            for (k, (span, _)) in seq.sample_spans().into_iter().enumerate() {
                for i in span {
                    owner[i] = Some(k);
                }
            }
            let mut per_sample = 0u64;
            for (q, row) in dense.iter().enumerate() {
                for (k, &allowed) in row.iter().enumerate() {
                    if allowed {
                        prop_assert!(owner[q].is_some() && owner[q] == owner[k], "({}, {}) crosses samples", q, k);
                    }
                    if !causal {
                        prop_assert_eq!(allowed, dense[k][q]);
                    }
                }
                if owner[q].is_some() {
                    prop_assert!(row[q], "token {} cannot attend itself", q);
                }
            }
            for (span, _) in seq.sample_spans() {
                per_sample += (span.len() * span.len()) as u64;
            }
            let nnz = mask_nnz(&mask).unwrap();
            prop_assert!(nnz <= per_sample);
            if !causal {
                prop_assert_eq!(nnz, per_sample);
            }
            let both = compose_masks(&mask, &build_mask(&seq, MaskPolicy::CausalTextBidirVisual)).unwrap();
            prop_assert!(mask_nnz(&both).unwrap() <= nnz);
        }
    }

    #[test]
    fn lpt_respects_lower_bounds(samples in samples_strategy(20, 500), groups in 1usize..6) {
        let a = assign_to_dp(&samples, groups, |s| s.total_tokens() as f64).unwrap();
        let loads: Vec<f64> = samples.iter().map(|s| s.total_tokens() as f64).collect();
        let total: f64 = loads.iter().sum();
        let max = loads.iter().copied().fold(0.0, f64::max);
        prop_assert!(a.makespan() >= max && a.makespan() >= total / groups as f64 - 1e-9);
        let by_id: BTreeMap<&str, f64> = samples.iter().map(|s| (s.id.as_str(), s.total_tokens() as f64)).collect();
        let mut seen = 0;
        for g in &a.dp_groups {
            let sum: f64 = g.sample_ids.iter().map(|id| by_id[id.as_str()]).sum();
            prop_assert!((sum - g.load).abs() < 1e-9);
            seen += g.sample_ids.len();
        }
        prop_assert_eq!(seen, samples.len());
        prop_assert!(a.imbalance().ratio >= 1.0 - 1e-12);
    }

    #[test]
    fn partition_is_contiguous_and_bounded(loads in prop::collection::vec(0u32..100, 1..30), stages in 1usize..8) {
        let loads: Vec<f64> = loads.into_iter().map(f64::from).collect();
        let p = partition_encoder_tokens(&loads, stages).unwrap();
        prop_assert_eq!(p.ranges.len(), stages);
        let mut next = 0;
        for (r, &l) in p.ranges.iter().zip(&p.loads) {
            prop_assert_eq!(r.start, next);
            prop_assert_eq!(l, loads[r.clone()].iter().sum::<f64>());
            next = r.end;
        }
        prop_assert_eq!(next, loads.len());
        let max = loads.iter().copied().fold(0.0, f64::max);
        let total: f64 = loads.iter().sum();
        prop_assert!(p.max_load >= max && p.max_load >= total / stages as f64 - 1e-9);
    }

    #[test]
    fn window_masks_are_symmetric_and_reflexive(
        t in 1usize..4, h in 1usize..7, w in 1usize..7,
        wt in 1usize..5, wh in 1usize..8, ww in 1usize..8,
        prefix in 0usize..4, exempt in any::<bool>(), odd in any::<bool>(),
    ) {
        let grid = TokenGrid { prefix_len: prefix, ..TokenGrid::new(t, h, w) };
        let win = WindowSpec { exempt_prefix: exempt, ..WindowSpec::new(wt, wh, ww) };
        let parity = if odd { LayerParity::Odd } else { LayerParity::Even };
        let dense = build_window_mask(&grid, &win, parity).to_dense();
        prop_assert_eq!(dense.len(), grid.num_tokens());
        for i in 0..dense.len() {
            prop_assert!(dense[i][i]);
            for j in 0..dense.len() {
                prop_assert_eq!(dense[i][j], dense[j][i]);
            }
        }
        for i in prefix..dense.len() {
            for j in prefix..dense.len() {
                for k in prefix..dense.len() {
                    if dense[i][j] && dense[j][k] {
                        prop_assert!(dense[i][k], "window relation is not transitive");
                    }
                }
            }
        }
    }

    #[test]
    fn asymmetric_nnz_matches_formula(total in 0usize..=64, seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let cond: Vec<usize> = (0..total).filter(|i| (seed.rotate_left(*i as u32) & 1 == 1) || frac > 0.99).collect();
        let c = cond.len() as u64;
        let n = total as u64 - c;
        let mask = build_asymmetric_mask(total, &cond).unwrap();
        let dense = mask.to_dense().iter().flatten().filter(|&&b| b).count() as u64;
        prop_assert_eq!(mask_nnz(&mask).unwrap(), c * c + n * (c + n));
        prop_assert_eq!(dense, c * c + n * (c + n));
    }

    #[test]
    fn kv_cache_gain_grows_with_steps(c in 1usize..48, n in 1usize..48, steps in 2usize..30) {
        let shape = ModelShape::default();
        let spec = ClusterSpec::default();
        let cond: Vec<usize> = (0..c).collect();
        let mask = build_asymmetric_mask(c + n, &cond).unwrap();
        let a = kv_cache_report(&mask, &cond, &shape, steps, &spec).unwrap();
        let b = kv_cache_report(&mask, &cond, &shape, steps + 1, &spec).unwrap();
        prop_assert!(a.end_to_end_ratio > 1.0);
        prop_assert!(b.end_to_end_ratio > a.end_to_end_ratio);
        prop_assert!(a.end_to_end_ratio < a.steady_state_ratio);
        let more = (0..c + 1).collect::<Vec<_>>();
        let mask2 = build_asymmetric_mask(c + n, &more).unwrap();
        let r2 = kv_cache_report(&mask2, &more, &shape, steps, &spec).unwrap();
        prop_assert!(r2.cached[1].seconds < a.cached[1].seconds);
    }

    #[test]
    fn ettr_is_monotone(mtbf in 600.0f64..1e6, factor in 1.01f64..10.0, detect in 0.0f64..300.0, restart in 0.0f64..300.0) {
        let fm = FaultModel { detect_latency: detect, restart_time: restart, ..FaultModel::new(mtbf) };
        let better = FaultModel { mtbf: mtbf * factor, ..fm.clone() };
        let slower = FaultModel { restart_time: restart + 30.0, ..fm.clone() };
        for f in [ettr_renewal, ettr_first_order] {
            let e = f(&fm);
            prop_assert!(e > 0.0 && e <= 1.0);
            prop_assert!(f(&better) > e);
            prop_assert!(f(&slower) < e);
        }
        let target = ettr_first_order(&fm);
        if let Ok(m) = mtbf_threshold_for_target(&FaultModel { mtbf: 1.0, ..fm.clone() }, target) {
            prop_assert!((m - mtbf).abs() <= 1e-6 * mtbf);
        }
    }

    #[test]
    fn two_tier_conserves_payload(nodes in 1usize..5, gpus in 1usize..5, seed in any::<u64>()) {
        let spec = ClusterSpec { num_nodes: nodes, gpus_per_node: gpus, ..ClusterSpec::default() };
        let n = nodes * gpus;
        let bytes: Vec<Vec<u64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0 } else { seed.rotate_left((i * n + j) as u32) % 5 * 1000 }).collect())
            .collect();
        let m = TransferMatrix::new(bytes.clone()).unwrap();
        let plan = plan_two_tier(&m, &spec).unwrap();
        prop_assert_eq!(trace_delivery(&plan, &m).unwrap(), bytes);
        prop_assert!(plan.inter_messages() <= nodes * (nodes - 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_pipelines_respect_dependencies(
        pp in 1usize..5, v in 1usize..4, m in 1usize..10,
        cells in prop::collection::vec((0.1f64..2.0, 0.1f64..4.0, 0u64..3), 120),
    ) {
        let cfg = PipelineConfig::new(pp, v, m);
        let mut costs = CostTable::uniform(m, pp * v, 1.0, 2.0);
        for (k, cell) in costs.chunks.iter_mut().flatten().enumerate() {
            let (f, b, p2p) = cells[k % cells.len()];
            cell.fwd = f;
            cell.bwd = b;
            cell.p2p_bytes = p2p * 1_000_000_000;
        }
        let spec = ClusterSpec::default();
        let schedule = generate_schedule(&cfg);
        let trace = simulate(&schedule, &costs, &spec, &cfg).unwrap();
        check_trace(&trace)?;
        let again = simulate(&schedule, &costs, &spec, &cfg).unwrap();
        prop_assert_eq!(&trace, &again);
        let work: f64 = costs.chunks.iter().flatten().map(|c| c.fwd + c.bwd).sum();
        prop_assert!(trace.metrics.pipeline_end * pp as f64 >= work - 1e-9);
        let ops = trace.events.iter().filter(|e| matches!(e.kind, EventKind::Fwd | EventKind::Bwd)).count();
        prop_assert_eq!(ops, 2 * m * pp * v);
        prop_assert!(trace.events.iter().filter(|e| e.kind == EventKind::Recv).all(|e| e.pass.is_some()));
    }

    #[test]
    fn elastic_plans_simulate_cleanly(
        samples in samples_strategy(24, 6000),
        pp in prop::sample::select(vec![1usize, 2, 4]),
        v in 1usize..3,
        dp in prop::sample::select(vec![1usize, 2]),
        offload in any::<bool>(),
    ) {
        let opts = StepOptions {
            pp_stages: pp,
            virtual_chunks: v,
            dp_groups: dp,
            up: UpMode::Elastic { options: vec![1, 2, 4, 8] },
            token_cap: 2048,
            mask_policy: MaskPolicy::CausalTextBidirVisual,
            offload_policy: if offload { omnisched_core::pipesim::OffloadPolicy::PipelineAware } else { Default::default() },
            recompute_budget: 0.0,
            lead_events: 2,
            encoder_overlap: false,
            encoder_seconds_per_load: 1e-6,
            model_state_bytes: 0,
            chunk_reuse: None,
        };
        let spec = ClusterSpec::default();
        let shape = ModelShape::default();
        let plan = match plan_step(&samples, &opts, &shape, &spec) {
            Ok(p) => p,
            Err(e) => {
                // only the degree limit of a group may reject these workloads
                prop_assert!(e.to_string().contains("exceeds") || e.to_string().contains("capacity"), "{}", e);
                return Ok(());
            }
        };
        let placed: usize = plan.microbatches.iter().map(|m| m.sample_ids.len()).sum();
        prop_assert_eq!(placed, samples.len());
        let trace = plan.simulate(&spec).unwrap();
        trace.check_invariants().map_err(TestCaseError::fail)?;
        for (cfg, costs) in &plan.groups {
            check_trace(&simulate(&generate_schedule(cfg), costs, &spec, cfg).unwrap())?;
        }
        prop_assert_eq!(&trace, &plan_step(&samples, &opts, &shape, &spec).unwrap().simulate(&spec).unwrap());
    }
}
