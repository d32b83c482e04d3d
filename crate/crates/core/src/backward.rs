//! Fused attention backward (FP16-ACC only).
//!
//! The forward is re-run to recover O, `dPsum_i = sum_c dO_ic O_ic` is
//! computed row-wise, and one unit per `(batch, head, key tile j)` walks the
//! visible query tiles `i`:
//!
//! ```text
//! S^T  = K_j Q_i^T                   P^T = exp(scale S^T - L_i)   (masked -> 0)
//! dV_j += (P^T∘M) dO_i               dP^T = V_j dO_i^T
//! dS^T = P^T∘(dP^T∘M - dPsum_i)·scale
//! dK_j += dS^T Q_i                   dQ_i += dS K_j               (shared, binary32)
//! ```
//!
//! Computing transposed products keeps `P^T` and `dS^T` in the accumulator
//! layout that the layout transform turns into `A` operands for the dV and dK
//! updates. The dQ product needs `dS` itself as an `A` operand; it is staged
//! through on-chip shared memory, which costs no HBM traffic. dK and dV stay
//! in registers for the whole unit and are written once. No `N x N` matrix
//! ever reaches HBM.

use std::sync::Arc;

use crate::config::AttnConfig;
use crate::dropout::{Dropout, MaskDigest};
use crate::forward::{check_inputs, forward_fused, is_masked, run_units, unit_list};
use crate::fp::{Element, Half};
use crate::mma::{LayoutDescriptor, Role};
use crate::tensor::{Matrix, Tensor};
use crate::tiles::{accumulator_to_operand, gemm, load_rows, FragGrid};
use crate::traffic::{Operand, TrafficCounter};
use crate::{AccMode, Error, Result};

#[derive(Clone, Debug)]
pub struct GradOutputs {
    pub dq: Tensor<Half>,
    pub dk: Tensor<Half>,
    pub dv: Tensor<Half>,
    /// Forward recompute, dPsum pass and gradient pass, in launch order.
    pub traffic: TrafficCounter,
    /// Dropout decisions replayed by the gradient pass.
    pub mask_digest: MaskDigest,
}

/// `dPsum_i = sum_c dO_ic * O_ic`; products are exact in binary32 and summed
/// in column order.
pub fn compute_dpsum(d_o: &Tensor<Half>, o: &Tensor<Half>) -> Result<Tensor<f32>> {
    if d_o.shape() != o.shape() || o.shape().is_empty() {
        return Err(Error::Shape(format!("dO {:?} vs O {:?}", d_o.shape(), o.shape())));
    }
    let (rows_shape, d) = o.shape().split_at(o.shape().len() - 1);
    let d = d[0];
    let sums = d_o
        .as_slice()
        .chunks(d.max(1))
        .zip(o.as_slice().chunks(d.max(1)))
        .map(|(a, b)| a.iter().zip(b).fold(0.0f32, |s, (x, y)| s + x.to_f32() * y.to_f32()))
        .collect();
    Tensor::from_vec(rows_shape, sums)
}

/// One logged `dQ` contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub unit: usize,
    /// Element offset into the buffer.
    pub offset: usize,
    pub values: Vec<f32>,
}

/// Shared binary32 `dQ` buffer receiving atomic adds from every key-tile
/// unit, rounded to binary16 once at the end.
#[derive(Clone, Debug)]
pub struct DqAccumulator {
    shape: Vec<usize>,
    buffer: Vec<f32>,
    log: Vec<Contribution>,
}

impl DqAccumulator {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            buffer: vec![0.0; shape.iter().product()],
            log: Vec::new(),
        }
    }

    /// Element-wise binary32 add of `values` at `offset`, recorded as coming
    /// from `unit`.
    pub fn add(&mut self, unit: usize, offset: usize, values: &[f32]) -> Result<()> {
        let dst = self
            .buffer
            .get_mut(offset..offset + values.len())
            .ok_or_else(|| Error::Shape(format!("contribution at {offset} overruns dQ buffer")))?;
        for (d, v) in dst.iter_mut().zip(values) {
            *d += v;
        }
        self.log.push(Contribution {
            unit,
            offset,
            values: values.to_vec(),
        });
        Ok(())
    }

    pub fn buffer(&self) -> &[f32] {
        &self.buffer
    }

    pub fn contributions(&self) -> &[Contribution] {
        &self.log
    }

    /// Distinct contributing units in first-seen order.
    pub fn units(&self) -> Vec<usize> {
        let mut units: Vec<usize> = Vec::new();
        for c in &self.log {
            if !units.contains(&c.unit) {
                units.push(c.unit);
            }
        }
        units
    }

    /// Rounds the buffer to binary16.
    pub fn finish(&self) -> Tensor<Half> {
        Tensor::from_vec(&self.shape, self.buffer.iter().map(|&x| Half::from_f32(x)).collect())
            .expect("buffer matches shape")
    }

    /// Re-applies the logged contributions with whole units in `order` (each
    /// unit's own contributions keep their order) and rounds the result.
    pub fn replay(&self, order: &[usize]) -> Tensor<Half> {
        let mut acc = DqAccumulator::new(&self.shape);
        for &u in order {
            for c in self.log.iter().filter(|c| c.unit == u) {
                acc.add(c.unit, c.offset, &c.values).expect("logged contribution fits");
            }
        }
        acc.finish()
    }
}

/// Gradients of the fused forward for upstream gradient `d_o`; `lse` is the
/// forward's row log-sum-exp.
pub fn backward_fused(
    q: &Tensor<Half>,
    k: &Tensor<Half>,
    v: &Tensor<Half>,
    d_o: &Tensor<Half>,
    lse: &Tensor<f32>,
    cfg: &AttnConfig,
) -> Result<GradOutputs> {
    Ok(backward_with_dq(q, k, v, d_o, lse, cfg)?.0)
}

/// [`backward_fused`] that also returns the `dQ` accumulator and its log.
pub fn backward_with_dq(
    q: &Tensor<Half>,
    k: &Tensor<Half>,
    v: &Tensor<Half>,
    d_o: &Tensor<Half>,
    lse: &Tensor<f32>,
    cfg: &AttnConfig,
) -> Result<(GradOutputs, DqAccumulator)> {
    if cfg.acc_mode != AccMode::Fp16 {
        return Err(Error::UnsupportedMode(cfg.acc_mode));
    }
    check_inputs(&[("Q", q), ("K", k), ("V", v), ("dO", d_o)], cfg)?;
    if lse.shape() != cfg.row_shape() {
        return Err(Error::Shape(format!(
            "lse has shape {:?}, config expects {:?}",
            lse.shape(),
            cfg.row_shape()
        )));
    }
    let (n, d) = (cfg.seq_len, cfg.head_dim);

    let fwd = forward_fused(q, k, v, cfg)?;
    let mut traffic = fwd.traffic.clone();

    let dpsum = compute_dpsum(d_o, &fwd.o)?;
    let mut dpsum_pass = TrafficCounter::new();
    dpsum_pass.read(Operand::DO, d_o.len());
    dpsum_pass.read(Operand::O, fwd.o.len());
    dpsum_pass.write(Operand::DPsum, dpsum.len());
    traffic.then(&dpsum_pass);

    let units = unit_list(cfg, cfg.key_tiles());
    let inputs = BackwardInputs { q, k, v, d_o, lse, dpsum: &dpsum };
    let results = run_units(&units, |b, h, kj| key_tile_unit(&inputs, b, h, kj, cfg))?;

    let mut dk = Tensor::zeros(&cfg.qkv_shape());
    let mut dv = Tensor::zeros(&cfg.qkv_shape());
    let mut dq = DqAccumulator::new(&cfg.qkv_shape());
    let mut grad_pass = TrafficCounter::new();
    let mut mask_digest = MaskDigest::default();
    let bc = cfg.tile_cols;
    // atomic adds land in ascending unit order
    for (index, ((b, h, kj), out)) in results.into_iter().enumerate() {
        let r0 = kj * bc * d;
        dk.head_mut(b, h)[r0..r0 + bc * d].copy_from_slice(&out.dk);
        dv.head_mut(b, h)[r0..r0 + bc * d].copy_from_slice(&out.dv);
        let head_offset = (b * cfg.heads + h) * n * d;
        for (row0, values) in &out.dq {
            dq.add(index, head_offset + row0 * d, values)?;
        }
        grad_pass.merge(&out.traffic);
        mask_digest.combine(&out.digest);
    }
    traffic.then(&grad_pass);

    Ok((
        GradOutputs {
            dq: dq.finish(),
            dk,
            dv,
            traffic,
            mask_digest,
        },
        dq,
    ))
}

struct BackwardInputs<'a> {
    q: &'a Tensor<Half>,
    k: &'a Tensor<Half>,
    v: &'a Tensor<Half>,
    d_o: &'a Tensor<Half>,
    lse: &'a Tensor<f32>,
    dpsum: &'a Tensor<f32>,
}

struct UnitGrads {
    dk: Vec<Half>,
    dv: Vec<Half>,
    /// `(first query row, br x d contribution)` per visible query tile.
    dq: Vec<(usize, Vec<f32>)>,
    traffic: TrafficCounter,
    digest: MaskDigest,
}

fn half_matrix(rows: usize, cols: usize, values: impl Iterator<Item = f32>) -> Matrix<Half> {
    Matrix::from_vec(rows, cols, values.map(Half::narrow).collect()).expect("sized by caller")
}

fn key_tile_unit(x: &BackwardInputs, b: usize, h: usize, kj: usize, cfg: &AttnConfig) -> Result<UnitGrads> {
    let (d, br, bc) = (cfg.head_dim, cfg.tile_rows, cfg.tile_cols);
    let scale = cfg.softmax_scale;
    let col0 = kj * bc;
    let dropout = Dropout::new(cfg.dropout_p, cfg.seed);
    let a_desc = LayoutDescriptor::standard(Role::A);
    let b_desc = LayoutDescriptor::standard(Role::B);
    let c_desc: Arc<LayoutDescriptor> = LayoutDescriptor::standard(Role::CFp16);
    let mode = AccMode::Fp16;
    let (qh, kh, vh, doh) = (x.q.head(b, h), x.k.head(b, h), x.v.head(b, h), x.d_o.head(b, h));
    let (lse, dpsum) = (x.lse.head(b, h), x.dpsum.head(b, h));

    let mut t = TrafficCounter::new();
    let mut digest = MaskDigest::default();

    let k_tile = load_rows(kh, d, col0, bc);
    let v_tile = load_rows(vh, d, col0, bc);
    t.read(Operand::K, bc * d);
    t.read(Operand::V, bc * d);
    let k_a = FragGrid::from_matrix(&k_tile, a_desc.clone())?;
    let k_b = FragGrid::from_matrix(&k_tile, b_desc.clone())?;
    let v_a = FragGrid::from_matrix(&v_tile, a_desc.clone())?;

    let mut dk_acc = FragGrid::<Half>::zeros(c_desc.clone(), bc, d)?;
    let mut dv_acc = FragGrid::<Half>::zeros(c_desc.clone(), bc, d)?;
    let mut dq = Vec::new();

    for qi in 0..cfg.query_tiles() {
        if !cfg.tile_visible(qi, kj) {
            continue;
        }
        let row0 = qi * br;
        let q_tile = load_rows(qh, d, row0, br);
        let do_tile = load_rows(doh, d, row0, br);
        t.read(Operand::Q, br * d);
        t.read(Operand::DO, br * d);
        t.read(Operand::Lse, br);
        t.read(Operand::DPsum, br);

        // P^T from recomputed scores and the stored log-sum-exp
        let qt_b = FragGrid::from_matrix(&q_tile.transpose(), b_desc.clone())?;
        let mut st_acc = FragGrid::<Half>::zeros(c_desc.clone(), bc, br)?;
        gemm(&k_a, &qt_b, &mut st_acc, mode, &mut t)?;
        let st = st_acc.to_matrix();
        t.convert_events += (bc * br) as u64;
        let mut pt = vec![0.0f32; bc * br];
        let mut mt = vec![0.0f32; bc * br];
        for c in 0..bc {
            for r in 0..br {
                let (row, col) = (row0 + r, col0 + c);
                if is_masked(cfg, row, col) {
                    continue;
                }
                digest.absorb(b, h, row, col, dropout.keep(b, h, row, col));
                pt[c * br + r] = (st[(c, r)].to_f32() * scale - lse[row]).exp();
                mt[c * br + r] = dropout.factor(b, h, row, col);
            }
        }

        // dV += (P^T∘M) dO
        let pdt = half_matrix(bc, br, pt.iter().zip(&mt).map(|(p, m)| p * m));
        t.convert_events += (bc * br) as u64;
        let pdt_a = accumulator_to_operand(&FragGrid::from_matrix(&pdt, c_desc.clone())?, &a_desc, &mut t)?;
        let do_b = FragGrid::from_matrix(&do_tile, b_desc.clone())?;
        gemm(&pdt_a, &do_b, &mut dv_acc, mode, &mut t)?;

        // dP^T = V dO^T
        let dot_b = FragGrid::from_matrix(&do_tile.transpose(), b_desc.clone())?;
        let mut dpt_acc = FragGrid::<Half>::zeros(c_desc.clone(), bc, br)?;
        gemm(&v_a, &dot_b, &mut dpt_acc, mode, &mut t)?;
        let dpt = dpt_acc.to_matrix();
        t.convert_events += (bc * br) as u64;

        // dS^T, then dK += dS^T Q
        let dst: Vec<f32> = (0..bc * br)
            .map(|i| {
                let (c, r) = (i / br, i % br);
                pt[i] * (dpt[(c, r)].to_f32() * mt[i] - dpsum[row0 + r]) * scale
            })
            .collect();
        let dst_h = half_matrix(bc, br, dst.into_iter());
        t.convert_events += (bc * br) as u64;
        let dst_a = accumulator_to_operand(&FragGrid::from_matrix(&dst_h, c_desc.clone())?, &a_desc, &mut t)?;
        let q_b = FragGrid::from_matrix(&q_tile, b_desc.clone())?;
        gemm(&dst_a, &q_b, &mut dk_acc, mode, &mut t)?;

        // dQ_i += dS K, dS staged through shared memory
        let ds_a = FragGrid::from_matrix(&dst_h.transpose(), a_desc.clone())?;
        let mut dq_acc = FragGrid::<Half>::zeros(c_desc.clone(), br, d)?;
        gemm(&ds_a, &k_b, &mut dq_acc, mode, &mut t)?;
        dq.push((row0, dq_acc.to_matrix().as_slice().iter().map(|x| x.to_f32()).collect()));
        t.read(Operand::DQ, br * d);
        t.write(Operand::DQ, br * d);
    }

    t.write(Operand::DK, bc * d);
    t.write(Operand::DV, bc * d);
    Ok(UnitGrads {
        dk: dk_acc.to_matrix().into_vec(),
        dv: dv_acc.to_matrix().into_vec(),
        dq,
        traffic: t,
        digest,
    })
}
