//! Attention plans: which query rows may attend to which key columns.
//!
//! The shielded plan implements the interpolation attention rule: observed
//! nodes attend to all observed nodes; each unobserved node attends to itself
//! plus all observed nodes. This guarantees an unobserved node's output never
//! depends on which other unobserved nodes share the sequence.

use crate::error::{Error, Result};

/// CSR-style list of allowed (query row, key column) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairList {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl PairList {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn total(&self) -> usize {
        self.cols.len()
    }

    pub fn max_row_len(&self) -> usize {
        (0..self.row_ptr.len() - 1)
            .map(|i| self.row_ptr[i + 1] - self.row_ptr[i])
            .max()
            .unwrap_or(0)
    }
}

/// Per-sequence description of allowed query-to-key pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPlan {
    len: usize,
    observed: Vec<usize>,
    unobserved: Vec<usize>,
    pairs: PairList,
}

impl AttentionPlan {
    /// Shielded plan from the set of observed row indices. Rows not listed
    /// are unobserved and attend to themselves plus the observed set.
    pub fn shielded(len: usize, observed: &[usize]) -> Result<AttentionPlan> {
        if len == 0 {
            return Err(Error::contract("attention_plan", "empty sequence"));
        }
        let mut is_observed = vec![false; len];
        for &i in observed {
            if i >= len {
                return Err(Error::contract(
                    "attention_plan",
                    format!("observed index {i} out of range for length {len}"),
                ));
            }
            if is_observed[i] {
                return Err(Error::contract(
                    "attention_plan",
                    format!("observed index {i} listed twice"),
                ));
            }
            is_observed[i] = true;
        }
        let mut obs: Vec<usize> = (0..len).filter(|&i| is_observed[i]).collect();
        if obs.is_empty() {
            return Err(Error::contract(
                "attention_plan",
                "at least one observed node is required",
            ));
        }
        obs.sort_unstable();
        let unobs: Vec<usize> = (0..len).filter(|&i| !is_observed[i]).collect();

        let m = obs.len();
        let mut row_ptr = Vec::with_capacity(len + 1);
        let mut cols = Vec::with_capacity(m * m + (len - m) * (m + 1));
        row_ptr.push(0);
        for i in 0..len {
            if is_observed[i] {
                cols.extend_from_slice(&obs);
            } else {
                // Keep columns sorted: splice self into the observed list.
                let pos = obs.partition_point(|&j| j < i);
                cols.extend_from_slice(&obs[..pos]);
                cols.push(i);
                cols.extend_from_slice(&obs[pos..]);
            }
            row_ptr.push(cols.len());
        }
        Ok(AttentionPlan {
            len,
            observed: obs,
            unobserved: unobs,
            pairs: PairList { row_ptr, cols },
        })
    }

    /// Unshielded plan: every row attends to every column (the `shield = off`
    /// ablation). All rows are treated as observed.
    pub fn full(len: usize) -> Result<AttentionPlan> {
        if len == 0 {
            return Err(Error::contract("attention_plan", "empty sequence"));
        }
        let all: Vec<usize> = (0..len).collect();
        let mut row_ptr = Vec::with_capacity(len + 1);
        let mut cols = Vec::with_capacity(len * len);
        row_ptr.push(0);
        for _ in 0..len {
            cols.extend_from_slice(&all);
            row_ptr.push(cols.len());
        }
        Ok(AttentionPlan {
            len,
            observed: all,
            unobserved: Vec::new(),
            pairs: PairList { row_ptr, cols },
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn unobserved(&self) -> &[usize] {
        &self.unobserved
    }

    pub fn allowed(&self, i: usize) -> &[usize] {
        self.pairs.row(i)
    }

    pub fn pairs(&self) -> &PairList {
        &self.pairs
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.total()
    }

    /// Closed-form pair count of a shielded plan: m^2 + (L-m)(m+1).
    pub fn shielded_pair_count(len: usize, m: usize) -> usize {
        m * m + (len - m) * (m + 1)
    }
}
