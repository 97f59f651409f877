//! Exact k-nearest-neighbor retrieval over an arm's sample pool.
//!
//! Search is a linear scan with a bounded max-heap: exact, deterministic,
//! and fast enough for pools in the tens of thousands. Distances are
//! Euclidean; contexts are used raw (no standardization).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// One observed (context, reward) pair stored in an arm's pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord<R> {
    pub context: Vec<R>,
    pub reward: R,
}

/// Per-arm sample history, append-only during a run.
#[derive(Debug, Clone, Default)]
pub struct ArmPool<R> {
    samples: Vec<SampleRecord<R>>,
}

impl<R: Real> ArmPool<R> {
    pub fn new() -> Self {
        ArmPool {
            samples: Vec::new(),
        }
    }

    /// Number of stored samples (N_m).
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, record: SampleRecord<R>) {
        self.samples.push(record);
    }

    pub fn samples(&self) -> &[SampleRecord<R>] {
        &self.samples
    }

    pub fn get(&self, index: usize) -> Result<&SampleRecord<R>> {
        self.samples.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.samples.len(),
        })
    }
}

/// Euclidean distance between two equal-length vectors.
pub fn euclidean<R: Real>(a: &[R], b: &[R]) -> Result<R> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut acc = R::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc = acc + d * d;
    }
    Ok(acc.sqrt())
}

/// Heap entry ordered so the worst candidate (largest distance, then largest
/// index) sits at the top of the max-heap.
struct Candidate<R> {
    distance: R,
    index: usize,
}

impl<R: Real> PartialEq for Candidate<R> {
    fn eq(&self, other: &Self) -> bool {
        self.distance == other.distance && self.index == other.index
    }
}
impl<R: Real> Eq for Candidate<R> {}

impl<R: Real> Ord for Candidate<R> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .partial_cmp(&other.distance)
            .expect("non-finite distance in neighbor search")
            .then(self.index.cmp(&other.index))
    }
}
impl<R: Real> PartialOrd for Candidate<R> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Returns the min(k, N_m) nearest samples to `query`, as (index, distance)
/// pairs sorted by ascending distance, ties broken by ascending index.
///
/// # Errors
/// `EmptyInput` on an empty pool, `InvalidParameter` for k = 0,
/// `DimensionMismatch` if the query length differs from stored contexts.
pub fn query_top<R: Real>(
    pool: &ArmPool<R>,
    query: &[R],
    k: usize,
) -> Result<Vec<(usize, R)>> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("neighbor query on empty pool"));
    }
    if k == 0 {
        return Err(Error::invalid("neighbor count k must be at least 1"));
    }
    let mut heap: BinaryHeap<Candidate<R>> = BinaryHeap::with_capacity(k + 1);
    for (index, record) in pool.samples().iter().enumerate() {
        let distance = euclidean(&record.context, query)?;
        if heap.len() < k {
            heap.push(Candidate { distance, index });
        } else if let Some(worst) = heap.peek() {
            if (Candidate { distance, index }) < *worst {
                heap.pop();
                heap.push(Candidate { distance, index });
            }
        }
    }
    let mut out: Vec<(usize, R)> = heap
        .into_sorted_vec()
        .into_iter()
        .map(|c| (c.index, c.distance))
        .collect();
    debug_assert!(out.windows(2).all(|w| w[0].1 <= w[1].1));
    out.shrink_to_fit();
    Ok(out)
}

/// Euclidean distances from `query` to the pool records at `indices`,
/// in the same order as `indices`.
pub fn distances_to<R: Real>(
    pool: &ArmPool<R>,
    query: &[R],
    indices: &[usize],
) -> Result<Vec<R>> {
    indices
        .iter()
        .map(|&index| euclidean(&pool.get(index)?.context, query))
        .collect()
}
