//! Attention forward kernels.
//!
//! [`forward_fused`] runs one thread-block unit per `(batch, head, query tile)`.
//! Each unit loads its Q tile once and walks the key tiles:
//!
//! 1. load the K tile, `S = Q K^T` on the warp model;
//! 2. scale, mask, fold into the online softmax, rescale the O accumulator;
//! 3. apply the dropout mask and turn the weight accumulator into an `A` operand;
//! 4. load the V tile and accumulate `P V` into O.
//!
//! After the last key tile O is divided by the row sums and written once,
//! together with the row log-sum-exp. Under a causal mask key tiles strictly
//! above the diagonal are skipped entirely and diagonal tiles mask
//! element-wise.
//!
//! [`forward_traditional`] is the three-launch baseline that materializes S
//! and P in HBM. Intermediates are stored in the accumulator type (binary16
//! for FP16-ACC, binary32 for FP32-ACC).

use rayon::prelude::*;

use crate::config::AttnConfig;
use crate::dropout::{Dropout, MaskDigest};
use crate::fp::Half;
use crate::mma::{LayoutDescriptor, Role};
use crate::softmax::SoftmaxState;
use crate::tensor::{Matrix, Tensor};
use crate::tiles::{accumulator_to_operand, gemm, load_rows, row_reduction_shuffles, FragGrid, OperandSource};
use crate::traffic::{Operand, TrafficCounter};
use crate::{AccMode, Error, Result};

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch, heads, seq_len, head_dim]`
    pub o: Tensor<Half>,
    /// `[batch, heads, seq_len]`, natural-log log-sum-exp of the scaled scores.
    pub lse: Tensor<f32>,
    pub traffic: TrafficCounter,
    /// Digest of the dropout decisions consumed at unmasked positions.
    pub mask_digest: MaskDigest,
}

pub(crate) fn check_inputs(tensors: &[(&str, &Tensor<Half>)], cfg: &AttnConfig) -> Result<()> {
    cfg.validate()?;
    let expected = cfg.qkv_shape();
    for (name, t) in tensors {
        if t.shape() != expected {
            return Err(Error::Shape(format!(
                "{name} has shape {:?}, config expects {expected:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Output of one thread-block unit: `rows` consecutive query rows of one head.
struct UnitOut {
    o: Vec<Half>,
    lse: Vec<f32>,
    traffic: TrafficCounter,
    digest: MaskDigest,
}

fn assemble(cfg: &AttnConfig, units: Vec<((usize, usize, usize), UnitOut)>, rows_per_unit: usize) -> ForwardOutput {
    let d = cfg.head_dim;
    let mut o = Tensor::zeros(&cfg.qkv_shape());
    let mut lse = Tensor::zeros(&cfg.row_shape());
    let mut traffic = TrafficCounter::new();
    let mut mask_digest = MaskDigest::default();
    for ((b, h, u), out) in units {
        let r0 = u * rows_per_unit;
        o.head_mut(b, h)[r0 * d..(r0 + rows_per_unit) * d].copy_from_slice(&out.o);
        lse.head_mut(b, h)[r0..r0 + rows_per_unit].copy_from_slice(&out.lse);
        traffic.merge(&out.traffic);
        mask_digest.combine(&out.digest);
    }
    ForwardOutput {
        o,
        lse,
        traffic,
        mask_digest,
    }
}

/// Run `f` for every unit in parallel; results come back in unit order.
pub(crate) fn run_units<T: Send>(
    units: &[(usize, usize, usize)],
    f: impl Fn(usize, usize, usize) -> Result<T> + Sync,
) -> Result<Vec<((usize, usize, usize), T)>> {
    units
        .par_iter()
        .map(|&(b, h, u)| f(b, h, u).map(|out| ((b, h, u), out)))
        .collect()
}

pub(crate) fn unit_list(cfg: &AttnConfig, per_head: usize) -> Vec<(usize, usize, usize)> {
    let mut units = Vec::with_capacity(cfg.batch * cfg.heads * per_head);
    for b in 0..cfg.batch {
        for h in 0..cfg.heads {
            for u in 0..per_head {
                units.push((b, h, u));
            }
        }
    }
    units
}

#[inline]
pub(crate) fn is_masked(cfg: &AttnConfig, row: usize, col: usize) -> bool {
    cfg.causal && col > row
}

/// Fused single-launch forward: 3 matrix reads (Q, K, V), 1 matrix write (O).
pub fn forward_fused(q: &Tensor<Half>, k: &Tensor<Half>, v: &Tensor<Half>, cfg: &AttnConfig) -> Result<ForwardOutput> {
    check_inputs(&[("Q", q), ("K", k), ("V", v)], cfg)?;
    let units = unit_list(cfg, cfg.query_tiles());
    let results = run_units(&units, |b, h, qi| {
        let heads = (q.head(b, h), k.head(b, h), v.head(b, h));
        match cfg.acc_mode {
            AccMode::Fp16 => fused_unit::<Half>(heads, b, h, qi, cfg),
            AccMode::Fp32 => fused_unit::<f32>(heads, b, h, qi, cfg),
        }
    })?;
    Ok(assemble(cfg, results, cfg.tile_rows))
}

fn fused_unit<C: OperandSource>(
    (q, k, v): (&[Half], &[Half], &[Half]),
    b: usize,
    h: usize,
    qi: usize,
    cfg: &AttnConfig,
) -> Result<UnitOut> {
    let (d, br, bc) = (cfg.head_dim, cfg.tile_rows, cfg.tile_cols);
    let row0 = qi * br;
    let half_acc = C::MODE == AccMode::Fp16;
    let dropout = Dropout::new(cfg.dropout_p, cfg.seed);
    let a_desc = LayoutDescriptor::standard(Role::A);
    let b_desc = LayoutDescriptor::standard(Role::B);
    let c_desc = LayoutDescriptor::standard(Role::accumulator(C::MODE));
    // max and sum, per 8x8 block of the score tile
    let reduction_shuffles = 2 * row_reduction_shuffles(&c_desc) * ((br / 8) * (bc / 8)) as u64;

    let mut t = TrafficCounter::new();
    let mut digest = MaskDigest::default();

    let q_tile = load_rows(q, d, row0, br);
    t.read(Operand::Q, br * d);
    let q_op = FragGrid::from_matrix(&q_tile, a_desc.clone())?;

    let mut state = SoftmaxState::new(br)?;
    let mut o_acc = FragGrid::<C>::zeros(c_desc.clone(), br, d)?;

    for kj in 0..cfg.key_tiles() {
        if !cfg.tile_visible(qi, kj) {
            continue;
        }
        let col0 = kj * bc;

        // 1. S = Q K^T
        let k_tile = load_rows(k, d, col0, bc);
        t.read(Operand::K, bc * d);
        let kt_op = FragGrid::from_matrix(&k_tile.transpose(), b_desc.clone())?;
        let mut s_acc = FragGrid::<C>::zeros(c_desc.clone(), br, bc)?;
        gemm(&q_op, &kt_op, &mut s_acc, C::MODE, &mut t)?;

        // 2. online softmax in binary32
        let s = s_acc.to_matrix();
        if half_acc {
            t.convert_events += (br * bc) as u64;
        } else {
            t.shuffle_events += reduction_shuffles;
        }
        let mut scores = Vec::with_capacity(br * bc);
        for r in 0..br {
            for c in 0..bc {
                scores.push(if is_masked(cfg, row0 + r, col0 + c) {
                    f32::NEG_INFINITY
                } else {
                    s[(r, c)].widen() * cfg.softmax_scale
                });
            }
        }
        let update = state
            .block_update(&scores, bc)
            .map_err(|e| offset_row(e, row0))?;
        o_acc.for_each_mut(|r, _, x| *x = C::narrow(x.widen() * update.rescale[r]));
        if half_acc {
            t.convert_events += (2 * br * d) as u64;
        }

        // 3. dropout, then accumulator layout -> operand layout
        let mut p = update.p;
        for r in 0..br {
            for c in 0..bc {
                let (row, col) = (row0 + r, col0 + c);
                if is_masked(cfg, row, col) {
                    continue;
                }
                let keep = dropout.keep(b, h, row, col);
                digest.absorb(b, h, row, col, keep);
                p[r * bc + c] *= dropout.factor(b, h, row, col);
            }
        }
        let p_acc = FragGrid::from_matrix(&Matrix::from_vec(br, bc, p.into_iter().map(C::narrow).collect())?, c_desc.clone())?;
        if half_acc {
            t.convert_events += (br * bc) as u64;
        }
        let p_op = accumulator_to_operand(&p_acc, &a_desc, &mut t)?;

        // 4. O += P V
        let v_tile = load_rows(v, d, col0, bc);
        t.read(Operand::V, bc * d);
        let v_op = FragGrid::from_matrix(&v_tile, b_desc.clone())?;
        gemm(&p_op, &v_op, &mut o_acc, C::MODE, &mut t)?;
    }

    let fin = state.finalize().map_err(|e| offset_row(e, row0))?;
    let o_mat = o_acc.to_matrix();
    if half_acc {
        t.convert_events += (br * d) as u64;
    }
    let mut o = Vec::with_capacity(br * d);
    for r in 0..br {
        for c in 0..d {
            o.push(Half::from_f32(o_mat[(r, c)].widen() * fin.inv_l[r]));
        }
    }
    t.write(Operand::O, br * d);
    t.write(Operand::Lse, br);
    Ok(UnitOut {
        o,
        lse: fin.lse,
        traffic: t,
        digest,
    })
}

fn offset_row(e: Error, row0: usize) -> Error {
    match e {
        Error::FullyMaskedRow { row } => Error::FullyMaskedRow { row: row + row0 },
        Error::NanScore { row } => Error::NanScore { row: row + row0 },
        other => other,
    }
}

/// Three-launch baseline: `S = QK^T` to HBM, `P = dropout(softmax(S))` to HBM,
/// `O = PV`. 5 matrix reads (Q, K, S, P, V), 3 matrix writes (S, P, O).
pub fn forward_traditional(
    q: &Tensor<Half>,
    k: &Tensor<Half>,
    v: &Tensor<Half>,
    cfg: &AttnConfig,
) -> Result<ForwardOutput> {
    check_inputs(&[("Q", q), ("K", k), ("V", v)], cfg)?;
    let units = unit_list(cfg, 1);
    let results = run_units(&units, |b, h, _| {
        let heads = (q.head(b, h), k.head(b, h), v.head(b, h));
        match cfg.acc_mode {
            AccMode::Fp16 => traditional_head::<Half>(heads, b, h, cfg),
            AccMode::Fp32 => traditional_head::<f32>(heads, b, h, cfg),
        }
    })?;
    Ok(assemble(cfg, results, cfg.seq_len))
}

fn traditional_head<C: OperandSource>(
    (q, k, v): (&[Half], &[Half], &[Half]),
    b: usize,
    h: usize,
    cfg: &AttnConfig,
) -> Result<UnitOut> {
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let half_acc = C::MODE == AccMode::Fp16;
    let dropout = Dropout::new(cfg.dropout_p, cfg.seed);
    let a_desc = LayoutDescriptor::standard(Role::A);
    let b_desc = LayoutDescriptor::standard(Role::B);
    let c_desc = LayoutDescriptor::standard(Role::accumulator(C::MODE));
    let mut t = TrafficCounter::new();
    let mut digest = MaskDigest::default();

    // launch 1: S = scale * Q K^T
    t.set_pass(0);
    let q_mat = load_rows(q, d, 0, n);
    let k_mat = load_rows(k, d, 0, n);
    t.read(Operand::Q, n * d);
    t.read(Operand::K, n * d);
    let q_op = FragGrid::from_matrix(&q_mat, a_desc.clone())?;
    let kt_op = FragGrid::from_matrix(&k_mat.transpose(), b_desc.clone())?;
    let mut s_acc = FragGrid::<C>::zeros(c_desc.clone(), n, n)?;
    gemm(&q_op, &kt_op, &mut s_acc, C::MODE, &mut t)?;
    let s_hbm: Vec<C> = s_acc
        .to_matrix()
        .as_slice()
        .iter()
        .map(|x| C::narrow(x.widen() * cfg.softmax_scale))
        .collect();
    t.write(Operand::S, n * n);

    // launch 2: P = dropout(softmax(S))
    t.set_pass(1);
    t.read(Operand::S, n * n);
    if half_acc {
        t.convert_events += (n * n) as u64;
    }
    let scores: Vec<f32> = s_hbm
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if is_masked(cfg, i / n, i % n) {
                f32::NEG_INFINITY
            } else {
                x.widen()
            }
        })
        .collect();
    let mut state = SoftmaxState::new(n)?;
    let update = state.block_update(&scores, n)?;
    let fin = state.finalize()?;
    let mut p_hbm = Vec::with_capacity(n * n);
    for (i, &p) in update.p.iter().enumerate() {
        let (row, col) = (i / n, i % n);
        let mut w = p * fin.inv_l[row];
        if !is_masked(cfg, row, col) {
            digest.absorb(b, h, row, col, dropout.keep(b, h, row, col));
            w *= dropout.factor(b, h, row, col);
        }
        p_hbm.push(C::narrow(w));
    }
    if half_acc {
        t.convert_events += (n * n) as u64;
    }
    t.write(Operand::P, n * n);
    t.write(Operand::Lse, n);

    // launch 3: O = P V
    t.set_pass(2);
    t.read(Operand::P, n * n);
    let v_mat = load_rows(v, d, 0, n);
    t.read(Operand::V, n * d);
    if !half_acc {
        t.convert_events += (n * n) as u64;
    }
    let p_mat = Matrix::from_vec(n, n, p_hbm.iter().map(|x| Half::from_f32(x.widen())).collect())?;
    let p_op = FragGrid::from_matrix(&p_mat, a_desc)?;
    let v_op = FragGrid::from_matrix(&v_mat, b_desc)?;
    let mut o_acc = FragGrid::<C>::zeros(c_desc, n, d)?;
    gemm(&p_op, &v_op, &mut o_acc, C::MODE, &mut t)?;
    let o = o_acc
        .to_matrix()
        .as_slice()
        .iter()
        .map(|x| Half::from_f32(x.widen()))
        .collect();
    t.write(Operand::O, n * d);

    Ok(UnitOut {
        o,
        lse: fin.lse,
        traffic: t,
        digest,
    })
}
