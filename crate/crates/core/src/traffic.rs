//! Modeled HBM traffic and on-chip event counts.
//!
//! Element counts tally every value that crosses the HBM boundary. Matrix
//! pass counts are the number of distinct `(pass, matrix)` pairs read or
//! written, where a pass is one kernel launch: the fused forward is a single
//! pass reading Q, K, V and writing O; the three-kernel baseline reads five
//! and writes three matrices. Per-row vectors (log-sum-exp, dPsum) are
//! counted as elements but are not matrices.
//!
//! Closed forms per `(batch, head)` for the forward kernels, with
//! `T_q = N / Br` query tiles and `v(i)` visible key tiles of query tile `i`
//! (`N / Bc` without a causal mask):
//!
//! ```text
//! fused        reads  = N*d + 2 * Bc * d * sum_i v(i)        (+ 0 vectors)
//!              writes = N*d + N                              (O, lse)
//! traditional  reads  = 3*N*d + 2*N^2
//!              writes = N*d + 2*N^2 + N                      (S, P, O, lse)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::ops::AddAssign;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Operand {
    Q,
    K,
    V,
    O,
    Lse,
    S,
    P,
    #[serde(rename = "do")]
    DO,
    DPsum,
    DQ,
    DK,
    DV,
}

impl Operand {
    pub fn is_matrix(self) -> bool {
        !matches!(self, Operand::Lse | Operand::DPsum)
    }

    /// `N x N` intermediates.
    pub fn is_quadratic(self) -> bool {
        matches!(self, Operand::S | Operand::P)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IoCount {
    pub reads: u64,
    pub writes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrafficCounter {
    pub matrix_pass_reads: u64,
    pub matrix_pass_writes: u64,
    pub element_reads: u64,
    pub element_writes: u64,
    /// `m8n8k4` computations (8-lane units) issued.
    pub mma_invocations: u64,
    /// Cross-lane shuffles spent on softmax row reductions.
    pub shuffle_events: u64,
    /// Precision conversions spent on the softmax path.
    pub convert_events: u64,
    /// Cross-lane shuffles spent on accumulator -> operand layout transforms.
    pub layout_shuffle_events: u64,
    /// Conversions performed inside layout transforms.
    pub layout_convert_events: u64,
    pub per_operand: BTreeMap<Operand, IoCount>,
    #[serde(skip)]
    pass: u32,
    #[serde(skip)]
    passes_used: u32,
    #[serde(skip)]
    read_set: BTreeSet<(u32, Operand)>,
    #[serde(skip)]
    write_set: BTreeSet<(u32, Operand)>,
}

impl TrafficCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Subsequent traffic belongs to pass `index` (0-based launch number).
    pub fn set_pass(&mut self, index: u32) {
        self.pass = index;
    }

    pub fn read(&mut self, op: Operand, elements: usize) {
        self.element_reads += elements as u64;
        self.per_operand.entry(op).or_default().reads += elements as u64;
        self.passes_used = self.passes_used.max(self.pass + 1);
        if self.read_set.insert((self.pass, op)) && op.is_matrix() {
            self.matrix_pass_reads += 1;
        }
    }

    pub fn write(&mut self, op: Operand, elements: usize) {
        self.element_writes += elements as u64;
        self.per_operand.entry(op).or_default().writes += elements as u64;
        self.passes_used = self.passes_used.max(self.pass + 1);
        if self.write_set.insert((self.pass, op)) && op.is_matrix() {
            self.matrix_pass_writes += 1;
        }
    }

    /// Operands written to HBM at any point.
    pub fn written(&self) -> BTreeSet<Operand> {
        self.write_set.iter().map(|&(_, op)| op).collect()
    }

    pub fn passes(&self) -> u32 {
        self.passes_used
    }

    pub fn operand(&self, op: Operand) -> IoCount {
        self.per_operand.get(&op).copied().unwrap_or_default()
    }

    /// Combine counters of units that ran concurrently in the same passes.
    pub fn merge(&mut self, other: &TrafficCounter) {
        self.combine(other, 0);
    }

    /// Append counters of launches that ran after everything in `self`.
    pub fn then(&mut self, other: &TrafficCounter) {
        let offset = self.passes_used;
        self.combine(other, offset);
    }

    fn combine(&mut self, other: &TrafficCounter, offset: u32) {
        self.element_reads += other.element_reads;
        self.element_writes += other.element_writes;
        self.mma_invocations += other.mma_invocations;
        self.shuffle_events += other.shuffle_events;
        self.convert_events += other.convert_events;
        self.layout_shuffle_events += other.layout_shuffle_events;
        self.layout_convert_events += other.layout_convert_events;
        for (op, io) in &other.per_operand {
            let e = self.per_operand.entry(*op).or_default();
            e.reads += io.reads;
            e.writes += io.writes;
        }
        self.read_set
            .extend(other.read_set.iter().map(|&(p, op)| (p + offset, op)));
        self.write_set
            .extend(other.write_set.iter().map(|&(p, op)| (p + offset, op)));
        self.passes_used = self.passes_used.max(other.passes_used + offset);
        self.matrix_pass_reads = self.read_set.iter().filter(|(_, op)| op.is_matrix()).count() as u64;
        self.matrix_pass_writes = self.write_set.iter().filter(|(_, op)| op.is_matrix()).count() as u64;
    }
}

impl AddAssign<&TrafficCounter> for TrafficCounter {
    fn add_assign(&mut self, rhs: &TrafficCounter) {
        self.merge(rhs);
    }
}
