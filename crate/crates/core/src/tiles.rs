//! Tile-level matrix products executed on the warp model.
//!
//! A tile operand is stored as a grid of per-computation register blocks
//! ([`FragGrid`]). Output blocks are assigned to warps in row-major order, four
//! per warp, so one warp covers an 8-row band of up to 32 output columns.
//! Operands whose extent is not a multiple of the block shape are zero-padded;
//! padded blocks are still issued, as on hardware.

use std::sync::Arc;

use crate::fp::{Element, Half};
use crate::layout::{transform_c16_to_a, transform_c32_to_a};
use crate::mma::{
    mma_m8n8k4, Accumulator, GroupFragment, LayoutDescriptor, Role, WarpFragment, GROUPS, GROUP_LANES,
};
use crate::tensor::Matrix;
use crate::traffic::TrafficCounter;
use crate::{AccMode, Error, Result};

#[derive(Clone, Debug)]
pub struct FragGrid<T> {
    desc: Arc<LayoutDescriptor>,
    rows: usize,
    cols: usize,
    block_rows: usize,
    block_cols: usize,
    blocks: Vec<GroupFragment<T>>,
}

impl<T: Element> FragGrid<T> {
    pub fn zeros(desc: Arc<LayoutDescriptor>, rows: usize, cols: usize) -> Result<Self> {
        let (br, bc) = desc.role().shape();
        let block_rows = rows.div_ceil(br);
        let block_cols = cols.div_ceil(bc);
        let zero = GroupFragment::zeros(desc.role())?;
        Ok(Self {
            desc,
            rows,
            cols,
            block_rows,
            block_cols,
            blocks: vec![zero; block_rows * block_cols],
        })
    }

    /// Distribute `m` block by block under `desc`.
    pub fn from_matrix(m: &Matrix<T>, desc: Arc<LayoutDescriptor>) -> Result<Self> {
        let mut grid = Self::zeros(desc.clone(), m.rows(), m.cols())?;
        let (br, bc) = desc.role().shape();
        for i in 0..grid.block_rows {
            for j in 0..grid.block_cols {
                let block = &mut grid.blocks[i * grid.block_cols + j];
                for lane in 0..GROUP_LANES {
                    for slot in 0..desc.slots() {
                        let (r, c) = desc.coord(lane, slot);
                        let (r, c) = (i * br + r, j * bc + c);
                        if r < m.rows() && c < m.cols() {
                            block.set_reg(lane, slot, m[(r, c)]);
                        }
                    }
                }
            }
        }
        Ok(grid)
    }

    /// Gather the logical (unpadded) matrix.
    pub fn to_matrix(&self) -> Matrix<T> {
        let (br, bc) = self.desc.role().shape();
        let mut m = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.block_rows {
            for j in 0..self.block_cols {
                let block = self.block(i, j);
                for lane in 0..GROUP_LANES {
                    for slot in 0..self.desc.slots() {
                        let (r, c) = self.desc.coord(lane, slot);
                        let (r, c) = (i * br + r, j * bc + c);
                        if r < self.rows && c < self.cols {
                            m[(r, c)] = block.reg(lane, slot);
                        }
                    }
                }
            }
        }
        m
    }

    pub fn descriptor(&self) -> &Arc<LayoutDescriptor> {
        &self.desc
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.block_rows, self.block_cols)
    }

    pub fn block(&self, i: usize, j: usize) -> &GroupFragment<T> {
        &self.blocks[i * self.block_cols + j]
    }

    pub fn block_mut(&mut self, i: usize, j: usize) -> &mut GroupFragment<T> {
        &mut self.blocks[i * self.block_cols + j]
    }

    /// Apply `f(row, col, value)` to every register of the grid in place,
    /// with logical coordinates. Padding cells are visited too.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, usize, &mut T)) {
        let (br, bc) = self.desc.role().shape();
        for i in 0..self.block_rows {
            for j in 0..self.block_cols {
                for lane in 0..GROUP_LANES {
                    for slot in 0..self.desc.slots() {
                        let (r, c) = self.desc.coord(lane, slot);
                        let idx = i * self.block_cols + j;
                        let mut v = self.blocks[idx].reg(lane, slot);
                        f(i * br + r, j * bc + c, &mut v);
                        self.blocks[idx].set_reg(lane, slot, v);
                    }
                }
            }
        }
    }
}

/// `c += a * b` with `a` in `A` blocks (8x4), `b` in `B` blocks (4x8) and `c`
/// in accumulator blocks (8x8).
pub fn gemm<C: Accumulator>(
    a: &FragGrid<Half>,
    b: &FragGrid<Half>,
    c: &mut FragGrid<C>,
    mode: AccMode,
    traffic: &mut TrafficCounter,
) -> Result<()> {
    if a.block_cols != b.block_rows || a.block_rows != c.block_rows || b.block_cols != c.block_cols {
        return Err(Error::Shape(format!(
            "gemm blocks {}x{} * {}x{} into {}x{}",
            a.block_rows, a.block_cols, b.block_rows, b.block_cols, c.block_rows, c.block_cols
        )));
    }
    let outputs: Vec<(usize, usize)> = (0..c.block_rows)
        .flat_map(|i| (0..c.block_cols).map(move |j| (i, j)))
        .collect();
    let zero_a = GroupFragment::<Half>::zeros(Role::A)?;
    let zero_b = GroupFragment::<Half>::zeros(Role::B)?;
    let zero_c = GroupFragment::<C>::zeros(c.desc.role())?;
    for warp in outputs.chunks(GROUPS) {
        let mut acc = WarpFragment::from_groups(
            c.desc.clone(),
            std::array::from_fn(|g| warp.get(g).map_or(zero_c, |&(i, j)| *c.block(i, j))),
        )?;
        for k in 0..a.block_cols {
            let af = WarpFragment::from_groups(
                a.desc.clone(),
                std::array::from_fn(|g| warp.get(g).map_or(zero_a, |&(i, _)| *a.block(i, k))),
            )?;
            let bf = WarpFragment::from_groups(
                b.desc.clone(),
                std::array::from_fn(|g| warp.get(g).map_or(zero_b, |&(_, j)| *b.block(k, j))),
            )?;
            acc = mma_m8n8k4(&af, &bf, &acc, mode)?;
            traffic.mma_invocations += warp.len() as u64;
        }
        let groups = acc.into_groups();
        for (g, &(i, j)) in warp.iter().enumerate() {
            *c.block_mut(i, j) = groups[g];
        }
    }
    Ok(())
}

/// Accumulator grid (`rows x cols`) to an `A` operand grid over the same
/// logical matrix. binary16 accumulators are re-slotted in lane; binary32
/// accumulators go through the xor-2 exchange and one narrowing each.
pub fn accumulator_to_operand<C: OperandSource>(
    c: &FragGrid<C>,
    a_desc: &Arc<LayoutDescriptor>,
    traffic: &mut TrafficCounter,
) -> Result<FragGrid<Half>> {
    if c.cols % 8 != 0 {
        return Err(Error::Shape(format!("accumulator width {} is not a multiple of 8", c.cols)));
    }
    let mut out = FragGrid::<Half>::zeros(a_desc.clone(), c.rows, c.cols)?;
    let blocks: Vec<(usize, usize)> = (0..c.block_rows)
        .flat_map(|i| (0..c.block_cols).map(move |j| (i, j)))
        .collect();
    let zero = GroupFragment::<C>::zeros(c.desc.role())?;
    for warp in blocks.chunks(GROUPS) {
        let frag = WarpFragment::from_groups(
            c.desc.clone(),
            std::array::from_fn(|g| warp.get(g).map_or(zero, |&(i, j)| *c.block(i, j))),
        )?;
        let halves = C::to_operand(&frag, a_desc, warp.len(), traffic)?;
        for (g, &(i, j)) in warp.iter().enumerate() {
            *out.block_mut(i, 2 * j) = *halves[0].group(g);
            *out.block_mut(i, 2 * j + 1) = *halves[1].group(g);
        }
    }
    Ok(out)
}

/// Accumulator element types that know their accumulator -> operand transform.
pub trait OperandSource: Accumulator {
    const MODE: AccMode;

    fn to_operand(
        frag: &WarpFragment<Self>,
        a_desc: &Arc<LayoutDescriptor>,
        active_groups: usize,
        traffic: &mut TrafficCounter,
    ) -> Result<[WarpFragment<Half>; 2]>;
}

impl OperandSource for Half {
    const MODE: AccMode = AccMode::Fp16;

    fn to_operand(
        frag: &WarpFragment<Self>,
        a_desc: &Arc<LayoutDescriptor>,
        _active_groups: usize,
        _traffic: &mut TrafficCounter,
    ) -> Result<[WarpFragment<Half>; 2]> {
        transform_c16_to_a(frag, a_desc)
    }
}

impl OperandSource for f32 {
    const MODE: AccMode = AccMode::Fp32;

    fn to_operand(
        frag: &WarpFragment<Self>,
        a_desc: &Arc<LayoutDescriptor>,
        active_groups: usize,
        traffic: &mut TrafficCounter,
    ) -> Result<[WarpFragment<Half>; 2]> {
        let (halves, lanes) = transform_c32_to_a(frag, a_desc)?;
        let active_lanes = active_groups * GROUP_LANES;
        traffic.layout_shuffle_events += lanes
            .transfers
            .iter()
            .filter(|&&(_, dst)| (dst as usize) < active_lanes)
            .count() as u64;
        traffic.layout_convert_events += (lanes.conversions * active_groups / GROUPS) as u64;
        Ok(halves)
    }
}

/// Shuffles needed per 8x8 accumulator block for one row reduction (max or
/// sum): a butterfly over the lanes sharing each row.
pub fn row_reduction_shuffles(desc: &LayoutDescriptor) -> u64 {
    (0..desc.rows())
        .map(|r| {
            let k = desc.lanes_holding_row(r) as u64;
            k * k.trailing_zeros() as u64
        })
        .sum()
}

/// Rows `r0..r0+rows` of a row-major `[_, cols]` slice.
pub fn load_rows<T: Copy + Default>(src: &[T], cols: usize, r0: usize, rows: usize) -> Matrix<T> {
    Matrix::from_vec(rows, cols, src[r0 * cols..(r0 + rows) * cols].to_vec())
        .expect("slice length matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp::f32_to_f16;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_half(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<Half> {
        Matrix::from_fn(rows, cols, |_, _| f32_to_f16(rng.gen_range(-3i32..=3) as f32))
    }

    fn dense(a: &Matrix<Half>, b: &Matrix<Half>) -> Matrix<f32> {
        Matrix::from_fn(a.rows(), b.cols(), |r, c| {
            (0..a.cols()).map(|k| a[(r, k)].to_f32() * b[(k, c)].to_f32()).sum()
        })
    }

    #[test]
    fn grid_round_trip_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = rand_half(&mut rng, 16, 12);
        for role in [Role::A, Role::B, Role::CFp16] {
            let g = FragGrid::from_matrix(&m, LayoutDescriptor::standard(role)).unwrap();
            assert_eq!(g.to_matrix(), m);
        }
    }

    #[test]
    fn gemm_matches_dense_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_half(&mut rng, 24, 12);
        let b = rand_half(&mut rng, 12, 20);
        let ag = FragGrid::from_matrix(&a, LayoutDescriptor::standard(Role::A)).unwrap();
        let bg = FragGrid::from_matrix(&b, LayoutDescriptor::standard(Role::B)).unwrap();
        let mut t = TrafficCounter::new();
        let mut c = FragGrid::<f32>::zeros(LayoutDescriptor::standard(Role::CFp32), 24, 20).unwrap();
        gemm(&ag, &bg, &mut c, AccMode::Fp32, &mut t).unwrap();
        assert_eq!(c.to_matrix(), dense(&a, &b));
        // 3 row blocks x 3 (padded) column blocks x 3 k steps
        assert_eq!(t.mma_invocations, 27);
    }

    #[test]
    fn gemm_rejects_mismatched_grids() {
        let a = FragGrid::<Half>::zeros(LayoutDescriptor::standard(Role::A), 8, 8).unwrap();
        let b = FragGrid::<Half>::zeros(LayoutDescriptor::standard(Role::B), 4, 8).unwrap();
        let mut c = FragGrid::<Half>::zeros(LayoutDescriptor::standard(Role::CFp16), 8, 8).unwrap();
        let mut t = TrafficCounter::new();
        assert!(gemm(&a, &b, &mut c, AccMode::Fp16, &mut t).is_err());
    }

    #[test]
    fn operand_transform_preserves_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = rand_half(&mut rng, 16, 40);
        let a_desc = LayoutDescriptor::standard(Role::A);
        let mut t = TrafficCounter::new();
        let c16 = FragGrid::from_matrix(&m, LayoutDescriptor::standard(Role::CFp16)).unwrap();
        assert_eq!(accumulator_to_operand(&c16, &a_desc, &mut t).unwrap().to_matrix(), m);
        assert_eq!(t.layout_shuffle_events, 0);

        let c32 = FragGrid::from_matrix(&m.map(|x| x.to_f32()), LayoutDescriptor::standard(Role::CFp32)).unwrap();
        assert_eq!(accumulator_to_operand(&c32, &a_desc, &mut t).unwrap().to_matrix(), m);
        // 10 blocks, 8 lanes each receiving 4 values
        assert_eq!(t.layout_shuffle_events, 10 * 32);
        assert_eq!(t.layout_convert_events, 10 * 64);
    }

    #[test]
    fn reduction_shuffle_costs() {
        assert_eq!(row_reduction_shuffles(&LayoutDescriptor::standard(Role::CFp16)), 0);
        assert_eq!(row_reduction_shuffles(&LayoutDescriptor::standard(Role::CFp32)), 16);
    }
}
