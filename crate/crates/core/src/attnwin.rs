//! Attention structure of the super-resolution stage: local windows with a
//! half-window shift on odd layers, condition tokens that only self-attend,
//! and the savings from caching condition keys and values across steps.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{attn_flops, gemm_flops, ClusterSpec, ModelShape};
use crate::workload::{MaskError, MaskSpec};

pub use crate::workload::compose_masks;

/// Largest mask that [`dense_pgm`] and [`dense_csv`] will write.
pub const DENSE_DUMP_LIMIT: usize = 128;

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("token index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid grid or window: {0}")]
    Invalid(String),
    #[error("mask of {0} tokens is too large for a dense dump (limit {DENSE_DUMP_LIMIT})")]
    TooLargeForDump(usize),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// A `t x h x w` latent grid flattened t-major, after a flat prefix of
/// `prefix_len` condition tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    #[serde(default)]
    pub prefix_len: usize,
}

impl TokenGrid {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w, prefix_len: 0 }
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    pub fn grid_tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn num_tokens(&self) -> usize {
        self.prefix_len + self.grid_tokens()
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        self.prefix_len + (t * self.h + h) * self.w + w
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let g = index - self.prefix_len;
        [g / (self.h * self.w), g / self.w % self.h, g % self.w]
    }

    pub fn validate(&self) -> Result<(), AttnError> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(AttnError::Invalid(format!("grid extents must be >= 1, got {}x{}x{}", self.t, self.h, self.w)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub wt: usize,
    pub wh: usize,
    pub ww: usize,
    /// Leave the condition prefix out of windowing: it attends and is
    /// attended by every token. Otherwise the prefix is one window of its own.
    #[serde(default)]
    pub exempt_prefix: bool,
}

impl WindowSpec {
    pub fn new(wt: usize, wh: usize, ww: usize) -> Self {
        Self { wt, wh, ww, exempt_prefix: false }
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.wt, self.wh, self.ww]
    }

    pub fn validate(&self) -> Result<(), AttnError> {
        if self.wt == 0 || self.wh == 0 || self.ww == 0 {
            return Err(AttnError::Invalid("window extents must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerParity {
    Even,
    Odd,
}

impl LayerParity {
    pub fn of_layer(layer: usize) -> Self {
        if layer % 2 == 0 {
            Self::Even
        } else {
            Self::Odd
        }
    }
}

/// Windows along one axis of length `extent`. Odd layers shift the
/// boundaries by half a window; edge windows are cut short, not wrapped.
/// A window at least as long as the axis covers it on both parities.
pub fn axis_windows(extent: usize, window: usize, parity: LayerParity) -> Vec<Range<usize>> {
    let w = window.max(1);
    if w >= extent {
        return vec![0..extent];
    }
    let shift = match parity {
        LayerParity::Even => 0,
        LayerParity::Odd => w / 2,
    };
    let mut out = Vec::new();
    let mut start = 0;
    let mut end = if shift == 0 { w } else { shift };
    while start < extent {
        out.push(start..end.min(extent));
        start = end;
        end += w;
    }
    out
}

/// Index of the window containing `pos`, consistent with [`axis_windows`].
pub fn axis_window_of(pos: usize, extent: usize, window: usize, parity: LayerParity) -> usize {
    let w = window.max(1);
    if w >= extent {
        return 0;
    }
    match parity {
        LayerParity::Even => pos / w,
        LayerParity::Odd => {
            let shift = w / 2;
            if shift == 0 {
                pos / w
            } else {
                (pos + w - shift) / w
            }
        }
    }
}

fn box_intervals(grid: &TokenGrid, b: [&Range<usize>; 3]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    for t in b[0].clone() {
        for h in b[1].clone() {
            out.push(grid.index(t, h, b[2].start)..grid.index(t, h, b[2].start) + b[2].len());
        }
    }
    out
}

/// Window attention for one layer: a grid token attends exactly the tokens
/// of its window.
pub fn build_window_mask(grid: &TokenGrid, win: &WindowSpec, parity: LayerParity) -> MaskSpec {
    let n = grid.num_tokens();
    let p = grid.prefix_len;
    let axes: Vec<Vec<Range<usize>>> =
        (0..3).map(|a| axis_windows(grid.extents()[a], win.extents()[a], parity)).collect();
    let mut rows: Vec<Vec<Range<usize>>> = Vec::with_capacity(n);
    let prefix_row = if win.exempt_prefix { vec![0..n] } else { vec![0..p] };
    rows.extend(std::iter::repeat_n(prefix_row, p));
    for t in 0..grid.t {
        let wt = &axes[0][axis_window_of(t, grid.t, win.wt, parity)];
        for h in 0..grid.h {
            let wh = &axes[1][axis_window_of(h, grid.h, win.wh, parity)];
            for w in 0..grid.w {
                let ww = &axes[2][axis_window_of(w, grid.w, win.ww, parity)];
                let mut row = box_intervals(grid, [wt, wh, ww]);
                if win.exempt_prefix && p > 0 {
                    row.push(0..p);
                }
                rows.push(row);
            }
        }
    }
    MaskSpec::from_rows(n, &rows)
}

fn runs(sorted: &[usize]) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    for &i in sorted {
        match out.last_mut() {
            Some(r) if r.end == i => r.end += 1,
            _ => out.push(i..i + 1),
        }
    }
    out
}

fn condition_flags(total_len: usize, condition_set: &[usize]) -> Result<Vec<bool>, AttnError> {
    let mut flags = vec![false; total_len];
    for &i in condition_set {
        if i >= total_len {
            return Err(AttnError::IndexOutOfRange { index: i, len: total_len });
        }
        flags[i] = true;
    }
    Ok(flags)
}

/// Condition rows attend only condition columns; every other row attends
/// the whole sequence.
pub fn build_asymmetric_mask(total_len: usize, condition_set: &[usize]) -> Result<MaskSpec, AttnError> {
    let flags = condition_flags(total_len, condition_set)?;
    let members: Vec<usize> = (0..total_len).filter(|&i| flags[i]).collect();
    let cond_row = runs(&members);
    let rows: Vec<Vec<Range<usize>>> =
        flags.iter().map(|&c| if c { cond_row.clone() } else { vec![0..total_len] }).collect();
    Ok(MaskSpec::from_rows(total_len, &rows))
}

/// Window mask of the given parity intersected with the asymmetric rule
/// over the grid's prefix.
pub fn super_resolution_mask(grid: &TokenGrid, win: &WindowSpec, parity: LayerParity) -> Result<MaskSpec, AttnError> {
    let window = build_window_mask(grid, win, parity);
    let cond: Vec<usize> = (0..grid.prefix_len).collect();
    let asym = build_asymmetric_mask(grid.num_tokens(), &cond)?;
    Ok(compose_masks(&window, &asym)?)
}

/// Modeled cost of one sampling step, summed over layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub step: usize,
    /// Tokens whose QKV, output and MLP are computed.
    pub projection_tokens: u64,
    pub attn_pairs: u64,
    pub flops: f64,
    pub seconds: f64,
}

fn step_cost(step: usize, tokens: u64, pairs: u64, shape: &ModelShape, spec: &ClusterSpec) -> StepCost {
    let flops = (gemm_flops(shape, tokens) + attn_flops(shape, pairs)) * shape.num_layers as f64;
    StepCost { step, projection_tokens: tokens, attn_pairs: pairs, flops, seconds: flops / spec.effective_flops() }
}

/// Per-step costs with condition keys and values cached after step 1.
///
/// Step 1 computes every token and every permitted pair. Later steps skip
/// condition tokens entirely: their projections and their query rows.
pub fn kv_cache_step_costs(
    mask: &MaskSpec,
    condition_set: &[usize],
    shape: &ModelShape,
    steps: usize,
    spec: &ClusterSpec,
) -> Result<Vec<StepCost>, AttnError> {
    if steps == 0 {
        return Err(AttnError::Invalid("steps must be >= 1".into()));
    }
    let flags = condition_flags(mask.length, condition_set)?;
    let n = mask.length as u64;
    let cond = flags.iter().filter(|&&c| c).count() as u64;
    let all_pairs = crate::workload::mask_nnz(mask)?;
    let noisy_pairs = mask.nnz_rows_where(|q| !flags[q]);
    Ok((1..=steps)
        .map(|s| if s == 1 { step_cost(s, n, all_pairs, shape, spec) } else { step_cost(s, n - cond, noisy_pairs, shape, spec) })
        .collect())
}

/// Cached versus uncached sampling over `steps` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCacheReport {
    pub steps: usize,
    pub cached: Vec<StepCost>,
    pub uncached_step: StepCost,
    /// Uncached step cost over a cached step after the first.
    pub steady_state_ratio: f64,
    /// Total uncached cost over total cached cost.
    pub end_to_end_ratio: f64,
}

pub fn kv_cache_report(
    mask: &MaskSpec,
    condition_set: &[usize],
    shape: &ModelShape,
    steps: usize,
    spec: &ClusterSpec,
) -> Result<KvCacheReport, AttnError> {
    let cached = kv_cache_step_costs(mask, condition_set, shape, steps, spec)?;
    let uncached_step = cached[0];
    let steady = cached.last().expect("steps >= 1").seconds;
    let total: f64 = cached.iter().map(|c| c.seconds).sum();
    Ok(KvCacheReport {
        steps,
        steady_state_ratio: uncached_step.seconds / steady,
        end_to_end_ratio: uncached_step.seconds * steps as f64 / total,
        cached,
        uncached_step,
    })
}

/// Smallest interval of windows covering `reach` on one axis.
fn expand(reach: &Range<usize>, windows: &[Range<usize>]) -> Range<usize> {
    let lo = windows.iter().find(|w| w.end > reach.start).map_or(reach.start, |w| w.start.min(reach.start));
    let hi = windows.iter().rev().find(|w| w.start < reach.end).map_or(reach.end, |w| w.end.max(reach.end));
    lo..hi
}

fn axis_diameter(extent: usize, window: usize) -> Option<usize> {
    let even = axis_windows(extent, window, LayerParity::Even);
    let odd = axis_windows(extent, window, LayerParity::Odd);
    let mut worst = 1;
    for start in 0..extent {
        let mut reach = start..start + 1;
        let mut pairs = 0;
        loop {
            let next = expand(&expand(&reach, &even), &odd);
            pairs += 1;
            if next == (0..extent) {
                break;
            }
            if next == reach {
                return None;
            }
            reach = next;
        }
        worst = worst.max(pairs);
    }
    Some(worst)
}

/// Number of (even, odd) layer pairs after which every grid token has
/// reached every other grid token. `None` if that never happens.
///
/// Windows are boxes, so the reachable set from a token stays a box and
/// each axis grows independently; the answer is the slowest axis.
pub fn connectivity_diameter(grid: &TokenGrid, win: &WindowSpec) -> Option<usize> {
    (0..3)
        .map(|a| axis_diameter(grid.extents()[a], win.extents()[a]))
        .try_fold(1, |acc, d| d.map(|d| acc.max(d)))
}

/// Adjacent even-layer window pairs and how many of them share an odd-layer window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub adjacent_pairs: usize,
    pub bridged_pairs: usize,
}

impl BridgeReport {
    pub fn all_bridged(&self) -> bool {
        self.adjacent_pairs == self.bridged_pairs
    }
}

/// For every pair of even-layer windows that touch along an axis, checks
/// whether some odd-layer window contains tokens of both.
pub fn bridge_report(grid: &TokenGrid, win: &WindowSpec) -> BridgeReport {
    let ext = grid.extents();
    let wins = win.extents();
    let even: Vec<Vec<Range<usize>>> = (0..3).map(|a| axis_windows(ext[a], wins[a], LayerParity::Even)).collect();
    let odd_id = |c: [usize; 3]| -> [usize; 3] {
        [0, 1, 2].map(|a| axis_window_of(c[a], ext[a], wins[a], LayerParity::Odd))
    };
    let mut report = BridgeReport { adjacent_pairs: 0, bridged_pairs: 0 };
    for axis in 0..3 {
        for k in 0..even[axis].len().saturating_sub(1) {
            let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
            for i in 0..even[others[0]].len() {
                for j in 0..even[others[1]].len() {
                    report.adjacent_pairs += 1;
                    let boundary = even[axis][k + 1].start;
                    let (ra, rb) = (&even[others[0]][i], &even[others[1]][j]);
                    let bridged = ra.clone().any(|x| {
                        rb.clone().any(|y| {
                            let mut a = [0; 3];
                            a[others[0]] = x;
                            a[others[1]] = y;
                            let mut b = a;
                            a[axis] = boundary - 1;
                            b[axis] = boundary;
                            odd_id(a) == odd_id(b)
                        })
                    });
                    report.bridged_pairs += usize::from(bridged);
                }
            }
        }
    }
    report
}

fn check_dump(mask: &MaskSpec) -> Result<Vec<Vec<bool>>, AttnError> {
    if mask.length > DENSE_DUMP_LIMIT {
        return Err(AttnError::TooLargeForDump(mask.length));
    }
    Ok(mask.to_dense())
}

/// Plain (ASCII) PGM, white where attention is permitted.
pub fn dense_pgm(mask: &MaskSpec) -> Result<String, AttnError> {
    let dense = check_dump(mask)?;
    let mut s = format!("P2\n{} {}\n1\n", mask.length, mask.length);
    for row in dense {
        let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    Ok(s)
}

/// Dense 0/1 matrix, one query row per line.
pub fn dense_csv(mask: &MaskSpec) -> Result<String, AttnError> {
    let dense = check_dump(mask)?;
    let mut s = String::new();
    for row in dense {
        let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    Ok(s)
}
