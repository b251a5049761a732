//! Contiguous node-interval partitions. Intervals are described by their
//! boundaries `[0, w_1, ..., n]`; unit `k` owns `w_k..w_{k+1}`. The cost
//! of a node is `max(1, out_degree)`, one op per child pushed (dangling
//! nodes still cost the collect).

use std::ops::Range;

use thiserror::Error;

use crate::graph::Graph;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("cannot split {n} nodes into {k} non-empty intervals")]
    TooManyParts { k: usize, n: usize },
    #[error("boundary adaptation only supports 2 units, got {k}")]
    AdaptUnsupported { k: usize },
    #[error("boundaries must start at 0, end at n and strictly increase")]
    BadBoundaries,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    boundaries: Vec<usize>,
}

impl Partition {
    pub fn from_boundaries(boundaries: Vec<usize>) -> Result<Self, PartitionError> {
        let ok = boundaries.len() >= 2
            && boundaries[0] == 0
            && boundaries.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(PartitionError::BadBoundaries);
        }
        Ok(Partition { boundaries })
    }

    pub fn k(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn n(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn interval(&self, unit: usize) -> Range<usize> {
        self.boundaries[unit]..self.boundaries[unit + 1]
    }

    /// Unit owning `node`.
    pub fn owner(&self, node: usize) -> usize {
        debug_assert!(node < self.n());
        self.boundaries.partition_point(|&b| b <= node) - 1
    }

    pub fn csv_row(&self) -> String {
        self.boundaries
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Splits `0..n` into `k` intervals whose sizes differ by at most one,
/// larger intervals first.
pub fn uniform(n: usize, k: usize) -> Result<Partition, PartitionError> {
    if k == 0 || k > n {
        return Err(PartitionError::TooManyParts { k, n });
    }
    let base = n / k;
    let extra = n % k;
    let mut boundaries = Vec::with_capacity(k + 1);
    let mut at = 0;
    boundaries.push(0);
    for i in 0..k {
        at += base + usize::from(i < extra);
        boundaries.push(at);
    }
    Ok(Partition { boundaries })
}

/// Greedy sweep that closes an interval as soon as its accumulated cost
/// reaches the average cost still to place, re-derived for every interval.
/// Equal-cost nodes reproduce the uniform split.
pub fn cost_balanced(g: &Graph, k: usize) -> Result<Partition, PartitionError> {
    let n = g.n();
    if k == 0 || k > n {
        return Err(PartitionError::TooManyParts { k, n });
    }
    let mut remaining: u64 = (0..n).map(|v| g.out_degree(v).max(1) as u64).sum();
    let mut boundaries = Vec::with_capacity(k + 1);
    boundaries.push(0);
    let mut start = 0usize;
    for part in 0..k - 1 {
        let parts_left = k - part;
        // leave one node for each interval still to close
        let max_end = n - (parts_left - 1);
        let target = remaining.div_ceil(parts_left as u64);
        let mut cum = 0u64;
        let mut end = start;
        while end < max_end {
            cum += g.out_degree(end).max(1) as u64;
            end += 1;
            if cum >= target {
                break;
            }
        }
        remaining -= cum;
        boundaries.push(end);
        start = end;
    }
    boundaries.push(n);
    Ok(Partition { boundaries })
}

/// Load figures a running unit reports for rebalancing decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitLoad {
    pub residual: f64,
    pub ops: u64,
}

/// Two-unit rebalancing: when one unit holds more than twice the other's
/// residual *and* more than 1.2x its operation count, the shared boundary
/// moves by 10% of its current value, shrinking the interval of the unit
/// with the larger residual. Returns an unchanged partition otherwise.
pub fn adapt_boundary(p: &Partition, loads: &[UnitLoad]) -> Result<Partition, PartitionError> {
    if p.k() != 2 || loads.len() != 2 {
        return Err(PartitionError::AdaptUnsupported { k: p.k() });
    }
    let (a, b) = (loads[0], loads[1]);
    let r_hot = a.residual.max(b.residual);
    let r_cold = a.residual.min(b.residual);
    let ops_hot = a.ops.max(b.ops) as f64;
    let ops_cold = a.ops.min(b.ops) as f64;
    if !(r_hot > 2.0 * r_cold && ops_hot > 1.2 * ops_cold) {
        return Ok(p.clone());
    }
    let w = p.boundaries[1];
    let delta = (w as f64 * 0.1).round() as usize;
    let moved = if a.residual >= b.residual {
        w.saturating_sub(delta)
    } else {
        w + delta
    };
    let clamped = moved.clamp(1, p.n() - 1);
    Partition::from_boundaries(vec![0, clamped, p.n()])
}
