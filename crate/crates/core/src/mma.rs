//! Warp-level model of the Volta `m8n8k4` MMA.
//!
//! A warp of 32 lanes is split into four independent *computations* of eight
//! lanes each (lanes `8g..8g+8` form computation `g`). Each computation
//! multiplies an 8x4 `A` by a 4x8 `B` and accumulates into an 8x8 `C`. Every
//! lane owns 4 `A` elements, 4 `B` elements and 8 `C` elements; which
//! logical cell lives in which `(lane, slot)` is described by a
//! [`LayoutDescriptor`].
//!
//! The default descriptors are:
//!
//! * `A`: lane `t` owns row `t`, slot `s` is column `s`.
//! * `B`: lane `t` owns column `t`, slot `s` is row `s`.
//! * `C` (binary16): lane `t` owns row `t` as two 4-element halves.
//! * `C` (binary32): lanes `t` and `t ^ 2` share rows `t & !2` and `t | 2`;
//!   the lower lane of the pair holds column pairs {0,1} and {4,5}, the upper
//!   lane {2,3} and {6,7}. Slots 0..4 hold the lower row, 4..8 the upper row.
//!
//! The lane-to-computation partition is a modeling simplification: hardware
//! interleaves quad pairs, which is not observable here.

use std::sync::{Arc, LazyLock};

use serde::Serialize;

use crate::fp::{dot4_f16, dot4_f32, AccMode, Element, Half};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const WARP_SIZE: usize = 32;
pub const GROUP_LANES: usize = 8;
pub const GROUPS: usize = WARP_SIZE / GROUP_LANES;
/// Register slots reserved per lane (the `C` maximum).
pub const MAX_SLOTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Role {
    A,
    B,
    CFp16,
    CFp32,
}

impl Role {
    /// Logical `(rows, cols)` of the operand.
    pub const fn shape(self) -> (usize, usize) {
        match self {
            Role::A => (8, 4),
            Role::B => (4, 8),
            Role::CFp16 | Role::CFp32 => (8, 8),
        }
    }

    pub const fn slots(self) -> usize {
        match self {
            Role::A | Role::B => 4,
            Role::CFp16 | Role::CFp32 => 8,
        }
    }

    pub const fn accumulator(mode: AccMode) -> Role {
        match mode {
            AccMode::Fp16 => Role::CFp16,
            AccMode::Fp32 => Role::CFp32,
        }
    }

    /// Whether registers of this role hold binary32 values.
    pub const fn holds_f32(self) -> bool {
        matches!(self, Role::CFp32)
    }
}

/// Bijection between `(lane, slot)` within one computation and `(row, col)`
/// of the operand's logical matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutDescriptor {
    role: Role,
    /// Indexed by `lane * slots + slot`.
    coords: Vec<(u8, u8)>,
    /// Indexed by `row * cols + col`.
    owners: Vec<(u8, u8)>,
}

impl LayoutDescriptor {
    /// Builds a descriptor from `f(lane, slot) -> (row, col)`, rejecting maps
    /// that are not bijective onto the role's logical matrix.
    pub fn from_fn(role: Role, f: impl Fn(usize, usize) -> (usize, usize)) -> Result<Self> {
        let (rows, cols) = role.shape();
        let slots = role.slots();
        let mut coords = Vec::with_capacity(GROUP_LANES * slots);
        let mut owners = vec![(u8::MAX, u8::MAX); rows * cols];
        for lane in 0..GROUP_LANES {
            for slot in 0..slots {
                let (r, c) = f(lane, slot);
                if r >= rows || c >= cols {
                    return Err(Error::Layout(format!(
                        "{role:?}: lane {lane} slot {slot} maps outside {rows}x{cols}"
                    )));
                }
                let cell = &mut owners[r * cols + c];
                if cell.0 != u8::MAX {
                    return Err(Error::Layout(format!(
                        "{role:?}: cell ({r}, {c}) owned twice"
                    )));
                }
                *cell = (lane as u8, slot as u8);
                coords.push((r as u8, c as u8));
            }
        }
        Ok(Self {
            role,
            coords,
            owners,
        })
    }

    /// Shared instance of the default descriptor for `role`.
    pub fn standard(role: Role) -> Arc<LayoutDescriptor> {
        static A: LazyLock<Arc<LayoutDescriptor>> =
            LazyLock::new(|| Arc::new(LayoutDescriptor::from_fn(Role::A, |t, s| (t, s)).unwrap()));
        static B: LazyLock<Arc<LayoutDescriptor>> =
            LazyLock::new(|| Arc::new(LayoutDescriptor::from_fn(Role::B, |t, s| (s, t)).unwrap()));
        static C16: LazyLock<Arc<LayoutDescriptor>> = LazyLock::new(|| {
            Arc::new(LayoutDescriptor::from_fn(Role::CFp16, |t, s| (t, s)).unwrap())
        });
        static C32: LazyLock<Arc<LayoutDescriptor>> = LazyLock::new(|| {
            Arc::new(LayoutDescriptor::from_fn(Role::CFp32, c32_standard).unwrap())
        });
        match role {
            Role::A => A.clone(),
            Role::B => B.clone(),
            Role::CFp16 => C16.clone(),
            Role::CFp32 => C32.clone(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn slots(&self) -> usize {
        self.role.slots()
    }

    pub fn rows(&self) -> usize {
        self.role.shape().0
    }

    pub fn cols(&self) -> usize {
        self.role.shape().1
    }

    #[inline]
    pub fn coord(&self, lane: usize, slot: usize) -> (usize, usize) {
        let (r, c) = self.coords[lane * self.slots() + slot];
        (r as usize, c as usize)
    }

    #[inline]
    pub fn owner(&self, row: usize, col: usize) -> (usize, usize) {
        let (l, s) = self.owners[row * self.cols() + col];
        (l as usize, s as usize)
    }

    /// Number of distinct lanes holding part of logical row `row`.
    pub fn lanes_holding_row(&self, row: usize) -> usize {
        let mut seen = [false; GROUP_LANES];
        for c in 0..self.cols() {
            seen[self.owner(row, c).0] = true;
        }
        seen.iter().filter(|&&x| x).count()
    }
}

fn c32_standard(lane: usize, slot: usize) -> (usize, usize) {
    let lower = lane & !2;
    let upper_lane = lane & 2 != 0;
    let row = if slot < 4 { lower } else { lower | 2 };
    let k = slot % 4;
    // column pairs {0,1},{4,5} for the lower lane, {2,3},{6,7} for the upper
    let col = (k / 2) * 4 + (k % 2) + if upper_lane { 2 } else { 0 };
    (row, col)
}

/// Registers of one 8-lane computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupFragment<T> {
    role: Role,
    regs: [T; GROUP_LANES * MAX_SLOTS],
}

impl<T: Element> GroupFragment<T> {
    pub fn zeros(role: Role) -> Result<Self> {
        check_element::<T>(role)?;
        Ok(Self {
            role,
            regs: [T::default(); GROUP_LANES * MAX_SLOTS],
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    #[inline]
    pub fn reg(&self, lane: usize, slot: usize) -> T {
        self.regs[lane * MAX_SLOTS + slot]
    }

    #[inline]
    pub fn set_reg(&mut self, lane: usize, slot: usize, value: T) {
        self.regs[lane * MAX_SLOTS + slot] = value;
    }

    pub fn lane(&self, lane: usize) -> &[T] {
        &self.regs[lane * MAX_SLOTS..lane * MAX_SLOTS + self.role.slots()]
    }
}

fn check_element<T: Element>(role: Role) -> Result<()> {
    if T::IS_F32 != role.holds_f32() {
        return Err(Error::Layout(format!(
            "{role:?} registers cannot hold {} values",
            if T::IS_F32 { "binary32" } else { "binary16" }
        )));
    }
    Ok(())
}

/// Scatter a logical operand matrix into the registers of one computation.
pub fn distribute<T: Element>(m: &Matrix<T>, desc: &LayoutDescriptor) -> Result<GroupFragment<T>> {
    let role = desc.role();
    if m.shape() != role.shape() {
        return Err(Error::Shape(format!(
            "{role:?} operand must be {:?}, got {:?}",
            role.shape(),
            m.shape()
        )));
    }
    let mut frag = GroupFragment::zeros(role)?;
    for lane in 0..GROUP_LANES {
        for slot in 0..desc.slots() {
            frag.set_reg(lane, slot, m[desc.coord(lane, slot)]);
        }
    }
    Ok(frag)
}

/// Reassemble the logical matrix held by one computation.
pub fn gather<T: Element>(frag: &GroupFragment<T>, desc: &LayoutDescriptor) -> Result<Matrix<T>> {
    if frag.role() != desc.role() {
        return Err(Error::RoleMismatch {
            expected: desc.role(),
            found: frag.role(),
        });
    }
    let (rows, cols) = desc.role().shape();
    let mut m = Matrix::zeros(rows, cols);
    for lane in 0..GROUP_LANES {
        for slot in 0..desc.slots() {
            m[desc.coord(lane, slot)] = frag.reg(lane, slot);
        }
    }
    Ok(m)
}

/// Operand registers of a whole warp: four computations sharing a descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpFragment<T> {
    desc: Arc<LayoutDescriptor>,
    groups: [GroupFragment<T>; GROUPS],
}

impl<T: Element> WarpFragment<T> {
    pub fn zeros(desc: Arc<LayoutDescriptor>) -> Result<Self> {
        let g = GroupFragment::zeros(desc.role())?;
        Ok(Self {
            desc,
            groups: [g; GROUPS],
        })
    }

    pub fn from_groups(desc: Arc<LayoutDescriptor>, groups: [GroupFragment<T>; GROUPS]) -> Result<Self> {
        for g in &groups {
            if g.role() != desc.role() {
                return Err(Error::RoleMismatch {
                    expected: desc.role(),
                    found: g.role(),
                });
            }
        }
        Ok(Self { desc, groups })
    }

    /// Distribute one logical matrix per computation.
    pub fn from_matrices(desc: Arc<LayoutDescriptor>, mats: &[Matrix<T>; GROUPS]) -> Result<Self> {
        let mut frag = Self::zeros(desc)?;
        for (g, m) in mats.iter().enumerate() {
            frag.distribute(g, m)?;
        }
        Ok(frag)
    }

    pub fn descriptor(&self) -> &Arc<LayoutDescriptor> {
        &self.desc
    }

    pub fn role(&self) -> Role {
        self.desc.role()
    }

    pub fn group(&self, g: usize) -> &GroupFragment<T> {
        &self.groups[g]
    }

    pub fn group_mut(&mut self, g: usize) -> &mut GroupFragment<T> {
        &mut self.groups[g]
    }

    pub fn into_groups(self) -> [GroupFragment<T>; GROUPS] {
        self.groups
    }

    /// Register `slot` of warp lane `lane` (0..32).
    #[inline]
    pub fn reg(&self, lane: usize, slot: usize) -> T {
        self.groups[lane / GROUP_LANES].reg(lane % GROUP_LANES, slot)
    }

    #[inline]
    pub fn set_reg(&mut self, lane: usize, slot: usize, value: T) {
        self.groups[lane / GROUP_LANES].set_reg(lane % GROUP_LANES, slot, value);
    }

    pub fn distribute(&mut self, group: usize, m: &Matrix<T>) -> Result<()> {
        self.groups[group] = distribute(m, &self.desc)?;
        Ok(())
    }

    pub fn gather(&self, group: usize) -> Matrix<T> {
        gather(&self.groups[group], &self.desc).expect("roles checked on construction")
    }
}

/// Accumulator element with its `m8n8k4` step.
pub trait Accumulator: Element {
    fn mma_step(a: &[Half; 4], b: &[Half; 4], acc: Self) -> Self;
}

impl Accumulator for Half {
    #[inline]
    fn mma_step(a: &[Half; 4], b: &[Half; 4], acc: Self) -> Self {
        dot4_f16(a, b, acc)
    }
}

impl Accumulator for f32 {
    #[inline]
    fn mma_step(a: &[Half; 4], b: &[Half; 4], acc: Self) -> Self {
        dot4_f32(a, b, acc)
    }
}

/// `D = A * B + C` for each of the four computations of a warp.
///
/// Each computation only reads registers of its own eight lanes.
pub fn mma_m8n8k4<C: Accumulator>(
    a: &WarpFragment<Half>,
    b: &WarpFragment<Half>,
    c: &WarpFragment<C>,
    mode: AccMode,
) -> Result<WarpFragment<C>> {
    expect_role(a.role(), Role::A)?;
    expect_role(b.role(), Role::B)?;
    expect_role(c.role(), Role::accumulator(mode))?;
    let mut out = c.clone();
    for g in 0..GROUPS {
        out.groups[g] = mma_group(
            &a.groups[g],
            &a.desc,
            &b.groups[g],
            &b.desc,
            &c.groups[g],
            &c.desc,
        );
    }
    Ok(out)
}

fn expect_role(found: Role, expected: Role) -> Result<()> {
    if found != expected {
        return Err(Error::RoleMismatch { expected, found });
    }
    Ok(())
}

/// One 8-lane computation. Lane reads go through the descriptors' owner maps.
pub(crate) fn mma_group<C: Accumulator>(
    a: &GroupFragment<Half>,
    a_desc: &LayoutDescriptor,
    b: &GroupFragment<Half>,
    b_desc: &LayoutDescriptor,
    c: &GroupFragment<C>,
    c_desc: &LayoutDescriptor,
) -> GroupFragment<C> {
    let mut a_rows = [[Half::ZERO; 4]; 8];
    let mut b_cols = [[Half::ZERO; 4]; 8];
    for i in 0..8 {
        for k in 0..4 {
            let (l, s) = a_desc.owner(i, k);
            a_rows[i][k] = a.reg(l, s);
            let (l, s) = b_desc.owner(k, i);
            b_cols[i][k] = b.reg(l, s);
        }
    }
    let mut out = *c;
    for lane in 0..GROUP_LANES {
        for slot in 0..MAX_SLOTS {
            let (r, col) = c_desc.coord(lane, slot);
            out.set_reg(lane, slot, C::mma_step(&a_rows[r], &b_cols[col], c.reg(lane, slot)));
        }
    }
    out
}
