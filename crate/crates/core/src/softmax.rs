//! Streaming row-wise softmax.
//!
//! Per row the state keeps the running maximum `m` and the running sum `l` of
//! `exp(x - m)` over everything seen so far. Blocks of scores are folded in
//! with [`SoftmaxState::block_update`]; two independent states combine with
//! [`SoftmaxState::merge`]:
//!
//! ```text
//! m = max(m1, m2)
//! l = exp(m1 - m) * l1 + exp(m2 - m) * l2
//! ```
//!
//! All arithmetic is binary32. Masked scores are `-inf`.

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxState {
    m: Vec<f32>,
    l: Vec<f32>,
}

/// Result of folding one block of scores into a state.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockUpdate {
    /// `exp(s - m_new)`, row-major `rows x cols`.
    pub p: Vec<f32>,
    /// Per-row `exp(m_old - m_new)`; multiply previously accumulated outputs by it.
    pub rescale: Vec<f32>,
}

/// Per-row normalization data.
#[derive(Clone, Debug, PartialEq)]
pub struct Finalized {
    pub inv_l: Vec<f32>,
    /// `m + ln l`, the row log-sum-exp.
    pub lse: Vec<f32>,
}

/// `exp(a - b)` treating `-inf - -inf` as an empty contribution.
#[inline]
fn shifted_exp(a: f32, b: f32) -> f32 {
    if a == f32::NEG_INFINITY {
        0.0
    } else {
        (a - b).exp()
    }
}

impl SoftmaxState {
    pub fn new(rows: usize) -> Result<Self> {
        if rows == 0 {
            return Err(Error::Config("softmax state needs at least one row".into()));
        }
        Ok(Self {
            m: vec![f32::NEG_INFINITY; rows],
            l: vec![0.0; rows],
        })
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    pub fn max(&self) -> &[f32] {
        &self.m
    }

    pub fn sum(&self) -> &[f32] {
        &self.l
    }

    /// Fold a `rows x cols` block of scores into the state.
    pub fn block_update(&mut self, scores: &[f32], cols: usize) -> Result<BlockUpdate> {
        let rows = self.rows();
        if cols == 0 || scores.len() != rows * cols {
            return Err(Error::Shape(format!(
                "score block of {} elements for {rows} rows x {cols} cols",
                scores.len()
            )));
        }
        let mut p = vec![0f32; scores.len()];
        let mut rescale = vec![1f32; rows];
        for i in 0..rows {
            let row = &scores[i * cols..(i + 1) * cols];
            let mut block_max = f32::NEG_INFINITY;
            for &s in row {
                if s.is_nan() {
                    return Err(Error::NanScore { row: i });
                }
                block_max = block_max.max(s);
            }
            let m_old = self.m[i];
            let m_new = m_old.max(block_max);
            if m_new == f32::NEG_INFINITY {
                // nothing unmasked yet: weights stay zero, nothing to rescale
                continue;
            }
            let alpha = shifted_exp(m_old, m_new);
            let mut sum = 0f32;
            for (dst, &s) in p[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *dst = shifted_exp(s, m_new);
                sum += *dst;
            }
            self.m[i] = m_new;
            self.l[i] = alpha * self.l[i] + sum;
            rescale[i] = alpha;
        }
        Ok(BlockUpdate { p, rescale })
    }

    pub fn merge(&self, other: &SoftmaxState) -> Result<SoftmaxState> {
        if self.rows() != other.rows() {
            return Err(Error::Shape(format!(
                "merging states with {} and {} rows",
                self.rows(),
                other.rows()
            )));
        }
        let mut out = self.clone();
        for i in 0..self.rows() {
            let m = self.m[i].max(other.m[i]);
            if m == f32::NEG_INFINITY {
                continue;
            }
            out.m[i] = m;
            out.l[i] = shifted_exp(self.m[i], m) * self.l[i] + shifted_exp(other.m[i], m) * other.l[i];
        }
        Ok(out)
    }

    /// Per-row `1 / l` and log-sum-exp. Rows that never saw an unmasked
    /// element are an error.
    pub fn finalize(&self) -> Result<Finalized> {
        let mut inv_l = Vec::with_capacity(self.rows());
        let mut lse = Vec::with_capacity(self.rows());
        for (row, (&m, &l)) in self.m.iter().zip(&self.l).enumerate() {
            if l <= 0.0 || m == f32::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row });
            }
            inv_l.push(1.0 / l);
            lse.push(m + l.ln());
        }
        Ok(Finalized { inv_l, lse })
    }
}

/// Alias matching the operation name used throughout the docs.
pub fn state_init(rows: usize) -> Result<SoftmaxState> {
    SoftmaxState::new(rows)
}
