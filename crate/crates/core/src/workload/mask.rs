//! Exact block representation of attention masks.
//!
//! A [`MaskSpec`] is a list of non-overlapping `(query_range, key_range)`
//! rectangles over a sequence of `length` tokens. A `(q, k)` pair is permitted
//! iff some block contains it. Masks produced by this crate are built through
//! [`MaskSpec::from_rows`], which stacks consecutive rows with identical key
//! intervals into a single rectangle, so equal masks have equal block lists.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask blocks {0} and {1} overlap")]
    NonCanonicalMask(usize, usize),
    #[error("block {index} exceeds mask length {length}")]
    BlockOutOfRange { index: usize, length: usize },
    #[error("mask lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// A rectangle of permitted `(query, key)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    pub query: Range<usize>,
    pub key: Range<usize>,
}

impl Block {
    pub fn new(query: Range<usize>, key: Range<usize>) -> Self {
        Self { query, key }
    }

    pub fn area(&self) -> u64 {
        (self.query.len() as u64) * (self.key.len() as u64)
    }

    fn is_empty(&self) -> bool {
        self.query.is_empty() || self.key.is_empty()
    }

    fn overlaps(&self, other: &Block) -> bool {
        ranges_overlap(&self.query, &other.query) && ranges_overlap(&self.key, &other.key)
    }
}

fn ranges_overlap(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub length: usize,
    pub blocks: Vec<Block>,
}

impl MaskSpec {
    pub fn empty(length: usize) -> Self {
        Self { length, blocks: Vec::new() }
    }

    /// Every token attends every token.
    pub fn full(length: usize) -> Self {
        if length == 0 {
            return Self::empty(0);
        }
        Self { length, blocks: vec![Block::new(0..length, 0..length)] }
    }

    /// Builds a canonical mask from per-row key intervals.
    ///
    /// Intervals within a row are sorted and merged first. Maximal runs of
    /// consecutive rows with identical interval sets become one block per
    /// interval.
    pub fn from_rows(length: usize, rows: &[Vec<Range<usize>>]) -> Self {
        debug_assert_eq!(rows.len(), length);
        let normalized: Vec<Vec<Range<usize>>> = rows.iter().map(|r| normalize_intervals(r)).collect();
        let mut blocks = Vec::new();
        let mut start = 0;
        while start < normalized.len() {
            let mut end = start + 1;
            while end < normalized.len() && normalized[end] == normalized[start] {
                end += 1;
            }
            for key in &normalized[start] {
                blocks.push(Block::new(start..end, key.clone()));
            }
            start = end;
        }
        Self { length, blocks }
    }

    /// Key intervals permitted for each query row, sorted and merged.
    pub fn rows(&self) -> Vec<Vec<Range<usize>>> {
        let mut rows = vec![Vec::new(); self.length];
        for block in &self.blocks {
            for row in block.query.clone() {
                rows[row].push(block.key.clone());
            }
        }
        rows.iter().map(|r| normalize_intervals(r)).collect()
    }

    /// Checks bounds and that no two blocks overlap.
    pub fn validate(&self) -> Result<(), MaskError> {
        for (index, block) in self.blocks.iter().enumerate() {
            if block.query.end > self.length || block.key.end > self.length {
                return Err(MaskError::BlockOutOfRange { index, length: self.length });
            }
        }
        let mut order: Vec<usize> = (0..self.blocks.len()).filter(|&i| !self.blocks[i].is_empty()).collect();
        order.sort_by_key(|&i| (self.blocks[i].query.start, i));
        for (pos, &i) in order.iter().enumerate() {
            let a = &self.blocks[i];
            for &j in &order[pos + 1..] {
                let b = &self.blocks[j];
                if b.query.start >= a.query.end {
                    break;
                }
                if a.overlaps(b) {
                    return Err(MaskError::NonCanonicalMask(i.min(j), i.max(j)));
                }
            }
        }
        Ok(())
    }

    pub fn is_permitted(&self, query: usize, key: usize) -> bool {
        self.blocks.iter().any(|b| b.query.contains(&query) && b.key.contains(&key))
    }

    /// Dense row-major boolean matrix. Intended for small masks only.
    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let mut dense = vec![vec![false; self.length]; self.length];
        for block in &self.blocks {
            for q in block.query.clone() {
                for k in block.key.clone() {
                    dense[q][k] = true;
                }
            }
        }
        dense
    }

    /// Number of permitted pairs whose query row satisfies `keep`.
    pub fn nnz_rows_where(&self, keep: impl Fn(usize) -> bool) -> u64 {
        self.blocks
            .iter()
            .map(|b| b.query.clone().filter(|&q| keep(q)).count() as u64 * b.key.len() as u64)
            .sum()
    }

    /// Pairs permitted by both masks.
    pub fn intersect(&self, other: &MaskSpec) -> Result<MaskSpec, MaskError> {
        if self.length != other.length {
            return Err(MaskError::LengthMismatch(self.length, other.length));
        }
        let a = self.rows();
        let b = other.rows();
        let rows: Vec<Vec<Range<usize>>> =
            a.iter().zip(b.iter()).map(|(ra, rb)| intersect_intervals(ra, rb)).collect();
        Ok(MaskSpec::from_rows(self.length, &rows))
    }
}

/// Exact count of permitted pairs; rejects overlapping blocks.
pub fn mask_nnz(mask: &MaskSpec) -> Result<u64, MaskError> {
    mask.validate()?;
    Ok(mask.blocks.iter().map(Block::area).sum())
}

/// Intersection of two masks, re-canonicalized.
pub fn compose_masks(a: &MaskSpec, b: &MaskSpec) -> Result<MaskSpec, MaskError> {
    a.intersect(b)
}

fn normalize_intervals(intervals: &[Range<usize>]) -> Vec<Range<usize>> {
    let mut sorted: Vec<Range<usize>> = intervals.iter().filter(|r| !r.is_empty()).cloned().collect();
    sorted.sort_by_key(|r| (r.start, r.end));
    let mut merged: Vec<Range<usize>> = Vec::with_capacity(sorted.len());
    for r in sorted {
        match merged.last_mut() {
            Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
            _ => merged.push(r),
        }
    }
    merged
}

fn intersect_intervals(a: &[Range<usize>], b: &[Range<usize>]) -> Vec<Range<usize>> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        let start = a[i].start.max(b[j].start);
        let end = a[i].end.min(b[j].end);
        if start < end {
            out.push(start..end);
        }
        if a[i].end < b[j].end {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}
