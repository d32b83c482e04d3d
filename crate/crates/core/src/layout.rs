//! Warp-level conversion of MMA accumulator fragments into `A` operands.
//!
//! An 8x8 `C` block holding attention weights becomes the left operand of the
//! next multiplication as two 8x4 `A` blocks (columns 0..4 and 4..8). For a
//! binary16 accumulator every cell already sits in the lane that needs it, so
//! the transform only re-slots registers. For a binary32 accumulator half of
//! each row lives in the `lane ^ 2` partner and has to be exchanged with
//! `shfl_xor(2)`, followed by one binary32 -> binary16 conversion per element.
//!
//! Which slots move is not hard-coded: it is the set of cells whose `C` owner
//! differs from their `A` owner. Computations other than the first use the same
//! lane-relative pairing, offset by `8g`.

use std::sync::Arc;

use crate::fp::{f32_to_f16, Element, Half};
use crate::mma::{LayoutDescriptor, Role, WarpFragment, GROUPS, GROUP_LANES, WARP_SIZE};
use crate::{Error, Result};

/// Lane distance of the only cross-lane exchange the transforms may use.
pub const PAIR_MASK: usize = 2;

/// Butterfly exchange: lane `t` receives the value of lane `t ^ mask`.
pub fn shfl_xor<T: Copy>(values: &[T; WARP_SIZE], mask: usize) -> [T; WARP_SIZE] {
    assert!(mask < WARP_SIZE, "shuffle mask {mask} out of range");
    std::array::from_fn(|t| values[t ^ mask])
}

/// Cross-lane traffic performed by a transform.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LaneTraffic {
    /// Number of `shfl_xor` instructions issued.
    pub rounds: usize,
    /// One `(source lane, destination lane)` entry per value that was consumed.
    pub transfers: Vec<(u8, u8)>,
    /// binary32 -> binary16 conversions.
    pub conversions: usize,
}

impl LaneTraffic {
    pub fn is_xor_pairing(&self, mask: usize) -> bool {
        self.transfers
            .iter()
            .all(|&(src, dst)| src as usize ^ mask == dst as usize)
    }
}

/// Where an `A` register gets its value from inside the `C` fragment.
#[derive(Clone, Copy, Debug)]
struct Source {
    half: usize,
    a_slot: usize,
    c_lane: usize,
    c_slot: usize,
}

/// For every lane of a computation: the `A` cells it must fill, split into
/// those already in-lane and those owned by the xor partner.
fn plan(c_desc: &LayoutDescriptor, a_desc: &LayoutDescriptor) -> Result<[(Vec<Source>, Vec<Source>); GROUP_LANES]> {
    if a_desc.role() != Role::A {
        return Err(Error::RoleMismatch {
            expected: Role::A,
            found: a_desc.role(),
        });
    }
    let mut out: [(Vec<Source>, Vec<Source>); GROUP_LANES] = Default::default();
    for lane in 0..GROUP_LANES {
        for half in 0..2 {
            for a_slot in 0..a_desc.slots() {
                let (r, c) = a_desc.coord(lane, a_slot);
                let (c_lane, c_slot) = c_desc.owner(r, 4 * half + c);
                let src = Source {
                    half,
                    a_slot,
                    c_lane,
                    c_slot,
                };
                if c_lane == lane {
                    out[lane].0.push(src);
                } else if c_lane == lane ^ PAIR_MASK {
                    out[lane].1.push(src);
                } else {
                    return Err(Error::Layout(format!(
                        "A lane {lane} needs cell ({r}, {}) from lane {c_lane}, not its xor-{PAIR_MASK} partner",
                        4 * half + c
                    )));
                }
            }
        }
    }
    Ok(out)
}

fn expect_role<T: Element>(frag: &WarpFragment<T>, role: Role) -> Result<()> {
    if frag.role() != role {
        return Err(Error::RoleMismatch {
            expected: role,
            found: frag.role(),
        });
    }
    Ok(())
}

/// binary16 accumulator to two `A` fragments by in-lane register moves only.
pub fn transform_c16_to_a(
    frag: &WarpFragment<Half>,
    a_desc: &Arc<LayoutDescriptor>,
) -> Result<[WarpFragment<Half>; 2]> {
    expect_role(frag, Role::CFp16)?;
    let plan = plan(frag.descriptor(), a_desc)?;
    if plan.iter().any(|(_, remote)| !remote.is_empty()) {
        return Err(Error::Layout(
            "binary16 accumulator layout needs cross-lane traffic".into(),
        ));
    }
    let mut out = [
        WarpFragment::zeros(a_desc.clone())?,
        WarpFragment::zeros(a_desc.clone())?,
    ];
    for g in 0..GROUPS {
        let src = frag.group(g);
        for (lane, (local, _)) in plan.iter().enumerate() {
            for s in local {
                out[s.half]
                    .group_mut(g)
                    .set_reg(lane, s.a_slot, src.reg(s.c_lane, s.c_slot));
            }
        }
    }
    Ok(out)
}

/// binary32 accumulator to two binary16 `A` fragments: `shfl_xor(2)` for the
/// cells held by the partner lane, then one rounding conversion per element.
pub fn transform_c32_to_a(
    frag: &WarpFragment<f32>,
    a_desc: &Arc<LayoutDescriptor>,
) -> Result<([WarpFragment<Half>; 2], LaneTraffic)> {
    expect_role(frag, Role::CFp32)?;
    let plan = plan(frag.descriptor(), a_desc)?;
    let rounds = plan.iter().map(|(_, remote)| remote.len()).max().unwrap_or(0);

    // Staging registers in binary32 until after the exchange.
    let mut staged = [[[0f32; 4]; WARP_SIZE]; 2];
    let mut traffic = LaneTraffic {
        rounds,
        ..Default::default()
    };

    for lane in 0..WARP_SIZE {
        let base = lane - lane % GROUP_LANES;
        for s in &plan[lane % GROUP_LANES].0 {
            staged[s.half][lane][s.a_slot] = frag.reg(base + s.c_lane, s.c_slot);
        }
    }

    for round in 0..rounds {
        // Each lane sends the register its partner asks for in this round.
        let send: [f32; WARP_SIZE] = std::array::from_fn(|lane| {
            let partner = (lane % GROUP_LANES) ^ PAIR_MASK;
            match plan[partner].1.get(round) {
                Some(s) => {
                    debug_assert_eq!(s.c_lane, lane % GROUP_LANES);
                    frag.reg(lane, s.c_slot)
                }
                None => 0.0,
            }
        });
        let recv = shfl_xor(&send, PAIR_MASK);
        for lane in 0..WARP_SIZE {
            if let Some(s) = plan[lane % GROUP_LANES].1.get(round) {
                staged[s.half][lane][s.a_slot] = recv[lane];
                traffic.transfers.push(((lane ^ PAIR_MASK) as u8, lane as u8));
            }
        }
    }

    let mut out = [
        WarpFragment::zeros(a_desc.clone())?,
        WarpFragment::zeros(a_desc.clone())?,
    ];
    for (half, frag_out) in out.iter_mut().enumerate() {
        for lane in 0..WARP_SIZE {
            for slot in 0..a_desc.slots() {
                frag_out.set_reg(lane, slot, f32_to_f16(staged[half][lane][slot]));
                traffic.conversions += 1;
            }
        }
    }
    Ok((out, traffic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp::f16_ulp;
    use crate::mma::mma_m8n8k4;
    use crate::tensor::Matrix;
    use crate::AccMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn a_desc() -> Arc<LayoutDescriptor> {
        LayoutDescriptor::standard(Role::A)
    }

    fn halves<T: Copy + Default>(m: &Matrix<T>) -> [Matrix<T>; 2] {
        [m.window(0, 0, 8, 4), m.window(0, 4, 8, 4)]
    }

    #[test]
    fn shfl_identity_and_involution() {
        let lanes: [usize; 32] = std::array::from_fn(|i| i);
        assert_eq!(shfl_xor(&lanes, 0), lanes);
        let x2 = shfl_xor(&lanes, 2);
        for t in 0..32 {
            assert_eq!(x2[t], t ^ 2);
        }
        assert_eq!(shfl_xor(&x2, 2), lanes);
    }

    #[test]
    fn c16_zero_and_random() {
        let c = WarpFragment::<Half>::zeros(LayoutDescriptor::standard(Role::CFp16)).unwrap();
        let [a0, a1] = transform_c16_to_a(&c, &a_desc()).unwrap();
        for g in 0..4 {
            assert!(a0.gather(g).as_slice().iter().all(|x| x.to_f32() == 0.0));
            assert!(a1.gather(g).as_slice().iter().all(|x| x.to_f32() == 0.0));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mats: [Matrix<Half>; 4] =
            std::array::from_fn(|_| Matrix::from_fn(8, 8, |_, _| Half::from_bits(rng.gen_range(0..0x7C00))));
        let c = WarpFragment::from_matrices(LayoutDescriptor::standard(Role::CFp16), &mats).unwrap();
        let a = transform_c16_to_a(&c, &a_desc()).unwrap();
        for g in 0..4 {
            let [h0, h1] = halves(&mats[g]);
            assert_eq!(a[0].gather(g), h0);
            assert_eq!(a[1].gather(g), h1);
        }
    }

    #[test]
    fn role_mismatch_rejected() {
        let c = WarpFragment::<Half>::zeros(LayoutDescriptor::standard(Role::A)).unwrap();
        assert!(matches!(
            transform_c16_to_a(&c, &a_desc()),
            Err(Error::RoleMismatch { .. })
        ));
    }

    #[test]
    fn c32_rounds_once() {
        let mut m = Matrix::from_fn(8, 8, |r, c| (r * 8 + c) as f32 * 0.5);
        m[(3, 5)] = 2049.0;
        let mats: [Matrix<f32>; 4] = std::array::from_fn(|_| m.clone());
        let c = WarpFragment::from_matrices(LayoutDescriptor::standard(Role::CFp32), &mats).unwrap();
        let (a, traffic) = transform_c32_to_a(&c, &a_desc()).unwrap();
        assert_eq!(a[1].gather(0)[(3, 1)].to_f32(), 2048.0);
        assert_eq!(a[0].gather(2)[(4, 3)].to_f32(), 17.5);
        assert_eq!(traffic.conversions, 2 * 32 * 4);
        assert_eq!(traffic.rounds, 4);
        assert!(traffic.is_xor_pairing(2));
        assert_eq!(traffic.transfers.len(), 32 * 4);
    }

    #[test]
    fn c32_cell_travels_from_lane_zero_to_lane_two() {
        let c_desc = LayoutDescriptor::standard(Role::CFp32);
        // lane 0 holds part of row 2; the A layout gives row 2 to lane 2
        let (lane, slot) = c_desc.owner(2, 0);
        assert_eq!(lane, 0);
        let mut c = WarpFragment::<f32>::zeros(c_desc).unwrap();
        c.set_reg(lane, slot, 7.0);
        let (a, traffic) = transform_c32_to_a(&c, &a_desc()).unwrap();
        let (a_lane, a_slot) = a_desc().owner(2, 0);
        assert_eq!(a_lane, 2);
        assert_eq!(a[0].reg(a_lane, a_slot).to_f32(), 7.0);
        assert!(traffic.transfers.contains(&(0, 2)));
        assert!(traffic.transfers.contains(&(2, 0)));
    }

    #[test]
    fn non_pairing_layout_rejected() {
        // rows split between lanes t and t^1: not reachable by xor-2
        let odd = LayoutDescriptor::from_fn(Role::CFp32, |lane, slot| {
            let lower = lane & !1;
            let row = if slot < 4 { lower } else { lower | 1 };
            (row, (slot % 4) + if lane & 1 == 1 { 4 } else { 0 })
        })
        .unwrap();
        let c = WarpFragment::<f32>::zeros(Arc::new(odd)).unwrap();
        assert!(matches!(
            transform_c32_to_a(&c, &a_desc()),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn fused_tile_matches_two_stage_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let small = |rng: &mut ChaCha8Rng| Half::from_f32(rng.gen_range(-3i32..=3) as f32);
        let q: [Matrix<Half>; 4] = std::array::from_fn(|_| Matrix::from_fn(8, 4, |_, _| small(&mut rng)));
        let kt: [Matrix<Half>; 4] = std::array::from_fn(|_| Matrix::from_fn(4, 8, |_, _| small(&mut rng)));
        let v: [Matrix<Half>; 4] = std::array::from_fn(|_| Matrix::from_fn(8, 8, |_, _| small(&mut rng)));

        let qf = WarpFragment::from_matrices(a_desc(), &q).unwrap();
        let kf = WarpFragment::from_matrices(LayoutDescriptor::standard(Role::B), &kt).unwrap();
        let b_desc = LayoutDescriptor::standard(Role::B);
        let v_top = WarpFragment::from_matrices(b_desc.clone(), &std::array::from_fn(|g| v[g].window(0, 0, 4, 8))).unwrap();
        let v_bot = WarpFragment::from_matrices(b_desc, &std::array::from_fn(|g| v[g].window(4, 0, 4, 8))).unwrap();

        let expected: Vec<Matrix<f64>> = (0..4)
            .map(|g| {
                let s = Matrix::from_fn(8, 8, |r, c| {
                    (0..4).map(|k| q[g][(r, k)].to_f64() * kt[g][(k, c)].to_f64()).sum::<f64>()
                });
                Matrix::from_fn(8, 8, |r, c| (0..8).map(|k| s[(r, k)] * v[g][(k, c)].to_f64()).sum())
            })
            .collect();

        for mode in [AccMode::Fp16, AccMode::Fp32] {
            let got: Vec<Matrix<f64>> = match mode {
                AccMode::Fp16 => {
                    let zero = WarpFragment::<Half>::zeros(LayoutDescriptor::standard(Role::CFp16)).unwrap();
                    let s = mma_m8n8k4(&qf, &kf, &zero, mode).unwrap();
                    let [p0, p1] = transform_c16_to_a(&s, &a_desc()).unwrap();
                    let o = mma_m8n8k4(&p0, &v_top, &zero, mode).unwrap();
                    let o = mma_m8n8k4(&p1, &v_bot, &o, mode).unwrap();
                    (0..4).map(|g| o.gather(g).map(|x| x.to_f64())).collect()
                }
                AccMode::Fp32 => {
                    let zero = WarpFragment::<f32>::zeros(LayoutDescriptor::standard(Role::CFp32)).unwrap();
                    let s = mma_m8n8k4(&qf, &kf, &zero, mode).unwrap();
                    let ([p0, p1], _) = transform_c32_to_a(&s, &a_desc()).unwrap();
                    let o = mma_m8n8k4(&p0, &v_top, &zero, mode).unwrap();
                    let o = mma_m8n8k4(&p1, &v_bot, &o, mode).unwrap();
                    (0..4).map(|g| o.gather(g).map(|x| x as f64)).collect()
                }
            };
            assert_eq!(got, expected, "{mode}");
        }
    }

    #[test]
    fn c32_error_bounded_by_half_ulp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mats: [Matrix<f32>; 4] =
            std::array::from_fn(|_| Matrix::from_fn(8, 8, |_, _| rng.gen_range(-100.0f32..100.0)));
        let c = WarpFragment::from_matrices(LayoutDescriptor::standard(Role::CFp32), &mats).unwrap();
        let (a, _) = transform_c32_to_a(&c, &a_desc()).unwrap();
        for g in 0..4 {
            for (half, part) in halves(&mats[g]).iter().enumerate() {
                let got = a[half].gather(g);
                for (x, y) in part.as_slice().iter().zip(got.as_slice()) {
                    assert!((y.to_f32() - x).abs() <= f16_ulp(*x) / 2.0);
                }
            }
        }
    }
}
