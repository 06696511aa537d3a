//! Fault injection and the effective training time ratio (ETTR).
//!
//! Faults arrive as a Poisson process in up-time (wall clock minus recovery).
//! A fault costs detection plus restart, and training resumes from the last
//! completed checkpoint. Checkpoints are taken after every
//! `checkpoint_interval` seconds of progress, including one at the very end
//! when the duration is a multiple of the interval.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReliabilityError {
    #[error("invalid fault model: {0}")]
    InvalidModel(String),
    #[error("target ETTR {target} must lie strictly between 0 and 1")]
    InvalidTarget { target: f64 },
    #[error("target ETTR {target} is unreachable: checkpoint overhead alone caps it at {ceiling}")]
    TargetUnreachable { target: f64, ceiling: f64 },
}

/// Times in seconds. `mtbf` may be infinite (no faults).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultModel {
    pub mtbf: f64,
    #[serde(default = "FaultModel::default_detect")]
    pub detect_latency: f64,
    #[serde(default = "FaultModel::default_restart")]
    pub restart_time: f64,
    #[serde(default = "FaultModel::default_interval")]
    pub checkpoint_interval: f64,
    #[serde(default)]
    pub checkpoint_overhead: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl FaultModel {
    fn default_detect() -> f64 {
        60.0
    }

    fn default_restart() -> f64 {
        30.0
    }

    fn default_interval() -> f64 {
        600.0
    }

    pub fn new(mtbf: f64) -> Self {
        Self {
            mtbf,
            detect_latency: Self::default_detect(),
            restart_time: Self::default_restart(),
            checkpoint_interval: Self::default_interval(),
            checkpoint_overhead: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ReliabilityError> {
        let bad = |m: &str| Err(ReliabilityError::InvalidModel(m.into()));
        if !(self.mtbf > 0.0) {
            return bad("mtbf must be > 0");
        }
        if !(self.detect_latency >= 0.0 && self.restart_time >= 0.0 && self.checkpoint_overhead >= 0.0) {
            return bad("detect_latency, restart_time and checkpoint_overhead must be >= 0");
        }
        if ![self.detect_latency, self.restart_time, self.checkpoint_overhead].iter().all(|x| x.is_finite()) {
            return bad("recovery costs must be finite");
        }
        if !(self.checkpoint_interval > 0.0) {
            return bad("checkpoint_interval must be > 0");
        }
        Ok(())
    }

    fn recovery(&self) -> f64 {
        self.detect_latency + self.restart_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Work,
    Checkpoint,
    Detect,
    Restart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: f64,
    pub end: f64,
}

/// Wall-clock account of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub productive: f64,
    pub wall_clock: f64,
    pub faults: usize,
    pub lost_work: f64,
    pub downtime: f64,
    pub checkpoint_time: f64,
    pub checkpoints: usize,
    pub segments: Vec<Segment>,
}

impl Timeline {
    pub fn ettr(&self) -> f64 {
        ettr(self)
    }
}

/// Productive time over wall clock.
pub fn ettr(timeline: &Timeline) -> f64 {
    timeline.productive / timeline.wall_clock
}

fn run(productive: f64, fm: &FaultModel, mut next_gap: impl FnMut() -> f64, record: bool) -> Timeline {
    let tau = fm.checkpoint_interval;
    let mut tl = Timeline {
        productive,
        wall_clock: 0.0,
        faults: 0,
        lost_work: 0.0,
        downtime: 0.0,
        checkpoint_time: 0.0,
        checkpoints: 0,
        segments: Vec::new(),
    };
    let seg = |tl: &mut Timeline, kind, len: f64| {
        if record && len > 0.0 {
            tl.segments.push(Segment { kind, start: tl.wall_clock, end: tl.wall_clock + len });
        }
        tl.wall_clock += len;
    };
    let mut up = 0.0;
    let mut next_fault = next_gap();
    // checkpoints completed; progress always restarts from the last one
    let mut k = 0u64;
    loop {
        let saved = k as f64 * tau;
        let target = (k + 1) as f64 * tau;
        let has_ckpt = target <= productive * (1.0 + 1e-12);
        let work = if has_ckpt { target.min(productive) } else { productive } - saved;
        let overhead = if has_ckpt { fm.checkpoint_overhead } else { 0.0 };
        let len = work + overhead;
        if next_fault - up >= len {
            up += len;
            seg(&mut tl, SegmentKind::Work, work);
            if !has_ckpt {
                break;
            }
            seg(&mut tl, SegmentKind::Checkpoint, overhead);
            tl.checkpoint_time += overhead;
            tl.checkpoints += 1;
            k += 1;
            if target >= productive * (1.0 - 1e-12) {
                break;
            }
        } else {
            let dt = next_fault - up;
            up = next_fault;
            let done = dt.min(work);
            seg(&mut tl, SegmentKind::Work, done);
            let wasted_ckpt = dt - done;
            seg(&mut tl, SegmentKind::Checkpoint, wasted_ckpt);
            tl.checkpoint_time += wasted_ckpt;
            tl.lost_work += done;
            tl.faults += 1;
            seg(&mut tl, SegmentKind::Detect, fm.detect_latency);
            seg(&mut tl, SegmentKind::Restart, fm.restart_time);
            tl.downtime += fm.recovery();
            next_fault = up + next_gap();
        }
    }
    tl
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn sampled(productive: f64, fm: &FaultModel, trial: u64, record: bool) -> Timeline {
    if fm.mtbf.is_infinite() {
        return run(productive, fm, || f64::INFINITY, record);
    }
    let exp = Exp::new(1.0 / fm.mtbf).expect("mtbf validated > 0");
    let mut rng = trial_rng(fm.rng_seed, trial);
    run(productive, fm, || exp.sample(&mut rng), record)
}

fn check_duration(productive: f64) -> Result<(), ReliabilityError> {
    if !(productive > 0.0 && productive.is_finite()) {
        return Err(ReliabilityError::InvalidModel("productive duration must be finite and > 0".into()));
    }
    Ok(())
}

/// Runs `productive_duration` seconds of training under random faults drawn
/// from `fm.rng_seed`.
pub fn inject_faults(productive_duration: f64, fm: &FaultModel) -> Result<Timeline, ReliabilityError> {
    fm.validate()?;
    check_duration(productive_duration)?;
    Ok(sampled(productive_duration, fm, 0, true))
}

/// Like [`inject_faults`] with faults at the given up-time instants
/// (seconds of wall clock excluding recovery). `fm.mtbf` is ignored.
pub fn inject_scheduled_faults(
    productive_duration: f64,
    fm: &FaultModel,
    fault_times: &[f64],
) -> Result<Timeline, ReliabilityError> {
    FaultModel { mtbf: f64::INFINITY, ..fm.clone() }.validate()?;
    check_duration(productive_duration)?;
    let mut times: Vec<f64> = fault_times.to_vec();
    times.sort_by(f64::total_cmp);
    let mut iter = times.into_iter();
    let mut last = 0.0;
    Ok(run(
        productive_duration,
        fm,
        || {
            let next = iter.next().unwrap_or(f64::INFINITY);
            let gap = (next - last).max(0.0);
            last = next;
            gap
        },
        true,
    ))
}

/// Long-run ETTR of the renewal model: each interval of work plus its
/// checkpoint must finish without a fault, and every fault costs its
/// elapsed time plus recovery.
pub fn ettr_renewal(fm: &FaultModel) -> f64 {
    let tau = fm.checkpoint_interval;
    let seg = tau + fm.checkpoint_overhead;
    if fm.mtbf.is_infinite() {
        return tau / seg;
    }
    let lambda = 1.0 / fm.mtbf;
    tau / ((fm.mtbf + fm.recovery()) * (lambda * seg).exp_m1())
}

/// First-order approximation `1 / (1 + (detect + restart + interval/2) / mtbf)`,
/// scaled by the checkpoint duty cycle.
pub fn ettr_first_order(fm: &FaultModel) -> f64 {
    let tau = fm.checkpoint_interval;
    let duty = tau / (tau + fm.checkpoint_overhead);
    duty / (1.0 + (fm.recovery() + tau / 2.0) / fm.mtbf)
}

/// Smallest mtbf whose first-order ETTR reaches `target`.
pub fn mtbf_threshold_for_target(fm: &FaultModel, target: f64) -> Result<f64, ReliabilityError> {
    FaultModel { mtbf: f64::INFINITY, ..fm.clone() }.validate()?;
    if !(target > 0.0 && target < 1.0) {
        return Err(ReliabilityError::InvalidTarget { target });
    }
    let tau = fm.checkpoint_interval;
    let k = fm.recovery() + tau / 2.0;
    let duty = tau / (tau + fm.checkpoint_overhead);
    if k == 0.0 && duty == 1.0 {
        return Ok(0.0);
    }
    let needed = target / duty;
    if needed >= 1.0 {
        return Err(ReliabilityError::TargetUnreachable { target, ceiling: duty });
    }
    Ok(k * needed / (1.0 - needed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEttr {
    pub trials: usize,
    /// Total productive time over total wall clock across trials.
    pub ettr: f64,
    /// Standard error of `ettr` (delta method).
    pub std_error: f64,
    pub mean_faults: f64,
}

/// Independent trials, each on its own stream of `fm.rng_seed`.
pub fn monte_carlo_ettr(productive_duration: f64, fm: &FaultModel, trials: usize) -> Result<MonteCarloEttr, ReliabilityError> {
    fm.validate()?;
    check_duration(productive_duration)?;
    if trials == 0 {
        return Err(ReliabilityError::InvalidModel("trials must be >= 1".into()));
    }
    let results: Vec<(f64, f64, usize)> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let tl = sampled(productive_duration, fm, i, false);
            (tl.productive, tl.wall_clock, tl.faults)
        })
        .collect();
    let n = trials as f64;
    let total_p: f64 = results.iter().map(|r| r.0).sum();
    let total_w: f64 = results.iter().map(|r| r.1).sum();
    let ratio = total_p / total_w;
    let mean_w = total_w / n;
    let var = if trials > 1 {
        results.iter().map(|r| (r.0 - ratio * r.1).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(MonteCarloEttr {
        trials,
        ettr: ratio,
        std_error: var.sqrt() / (mean_w * n.sqrt()),
        mean_faults: results.iter().map(|r| r.2 as f64).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EttrRow {
    pub mtbf: f64,
    pub renewal: f64,
    pub first_order: f64,
    pub monte_carlo: Option<MonteCarloEttr>,
}

/// ETTR at each mtbf; Monte Carlo only when `trials > 0`.
pub fn ettr_table(
    fm: &FaultModel,
    mtbfs: &[f64],
    productive_duration: f64,
    trials: usize,
) -> Result<Vec<EttrRow>, ReliabilityError> {
    mtbfs
        .iter()
        .map(|&mtbf| {
            let m = FaultModel { mtbf, ..fm.clone() };
            m.validate()?;
            let monte_carlo = if trials > 0 { Some(monte_carlo_ettr(productive_duration, &m, trials)?) } else { None };
            Ok(EttrRow { mtbf, renewal: ettr_renewal(&m), first_order: ettr_first_order(&m), monte_carlo })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: f64 = 60.0;

    fn minutes() -> FaultModel {
        FaultModel {
            mtbf: f64::INFINITY,
            detect_latency: MIN,
            restart_time: MIN,
            checkpoint_interval: 10.0 * MIN,
            checkpoint_overhead: 0.0,
            rng_seed: 1,
        }
    }

    #[test]
    fn no_faults() {
        let tl = inject_faults(100.0 * MIN, &minutes()).unwrap();
        assert_eq!(tl.wall_clock, 100.0 * MIN);
        assert_eq!(tl.ettr(), 1.0);
        assert_eq!(tl.checkpoints, 10);
        let fm = FaultModel { checkpoint_overhead: 5.0, ..minutes() };
        let tl = inject_faults(100.0 * MIN, &fm).unwrap();
        assert_eq!(tl.wall_clock, 100.0 * MIN + 50.0);
    }

    #[test]
    fn single_scheduled_fault() {
        let tl = inject_scheduled_faults(100.0 * MIN, &minutes(), &[25.0 * MIN]).unwrap();
        assert_eq!(tl.faults, 1);
        assert!((tl.lost_work - 5.0 * MIN).abs() < 1e-9);
        assert!((tl.wall_clock - 107.0 * MIN).abs() < 1e-9);
        assert!((tl.ettr() - 100.0 / 107.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_runs_repeat() {
        let fm = FaultModel { mtbf: 20.0 * MIN, ..minutes() };
        let a = inject_faults(300.0 * MIN, &fm).unwrap();
        let b = inject_faults(300.0 * MIN, &fm).unwrap();
        assert_eq!(a, b);
        assert!(a.faults >= 2);
    }

    #[test]
    fn segments_tile_wall_clock() {
        let fm = FaultModel { mtbf: 15.0 * MIN, checkpoint_overhead: 30.0, ..minutes() };
        let tl = inject_faults(200.0 * MIN, &fm).unwrap();
        let mut t = 0.0;
        for s in &tl.segments {
            assert!((s.start - t).abs() < 1e-6);
            t = s.end;
        }
        assert!((t - tl.wall_clock).abs() < 1e-6);
        let work: f64 = tl.segments.iter().filter(|s| s.kind == SegmentKind::Work).map(|s| s.end - s.start).sum();
        assert!((work - tl.productive - tl.lost_work).abs() < 1e-6);
    }

    #[test]
    fn threshold_examples() {
        let fm = minutes();
        assert!((mtbf_threshold_for_target(&fm, 0.97).unwrap() - 13580.0).abs() < 1e-6);
        assert!(mtbf_threshold_for_target(&fm, 1e-9).unwrap() < 1e-5);
        let free = FaultModel { detect_latency: 0.0, restart_time: 0.0, checkpoint_interval: 1e-300, ..fm.clone() };
        assert!(mtbf_threshold_for_target(&free, 0.99).unwrap() < 1e-200);
        let slow = FaultModel { checkpoint_overhead: 60.0, ..fm };
        assert!(matches!(mtbf_threshold_for_target(&slow, 0.95), Err(ReliabilityError::TargetUnreachable { .. })));
        assert!(matches!(mtbf_threshold_for_target(&minutes(), 1.0), Err(ReliabilityError::InvalidTarget { .. })));
    }

    #[test]
    fn analytic_forms_agree_when_faults_are_rare() {
        let fm = FaultModel { mtbf: 1e6, ..minutes() };
        assert!((ettr_renewal(&fm) / ettr_first_order(&fm) - 1.0).abs() < 1e-3);
        assert_eq!(ettr_renewal(&minutes()), 1.0);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let fm = FaultModel { mtbf: 3600.0, ..minutes() };
        let a = monte_carlo_ettr(6000.0, &fm, 200).unwrap();
        let b = monte_carlo_ettr(6000.0, &fm, 200).unwrap();
        assert_eq!(a, b);
        assert!(a.std_error > 0.0);
    }

    #[test]
    fn invalid_models() {
        assert!(FaultModel { mtbf: 0.0, ..minutes() }.validate().is_err());
        assert!(FaultModel { restart_time: -1.0, ..minutes() }.validate().is_err());
        assert!(inject_faults(0.0, &minutes()).is_err());
    }
}
