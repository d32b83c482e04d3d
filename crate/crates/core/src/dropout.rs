//! Counter-based dropout masks.
//!
//! The keep decision for an attention weight is a pure function of
//! `(seed, batch, head, row, col)`, so the fused forward, the three-pass
//! baseline, the backward replay and the reference all draw the same mask no
//! matter in which order they visit the weights. Kept weights are scaled by
//! `1 / (1 - p)`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn position_hash(seed: u64, batch: usize, head: usize, row: usize, col: usize) -> u64 {
    let mut x = mix64(seed.wrapping_add(GOLDEN));
    for v in [batch, head, row, col] {
        x = mix64(x ^ (v as u64).wrapping_mul(GOLDEN));
    }
    x
}

/// Uniform draw in `[0, 1)` for one attention weight.
#[inline]
pub fn uniform(seed: u64, batch: usize, head: usize, row: usize, col: usize) -> f64 {
    (position_hash(seed, batch, head, row, col) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Keep decision for probability `p` of dropping.
#[inline]
pub fn dropout_mask(seed: u64, p: f32, batch: usize, head: usize, row: usize, col: usize) -> bool {
    p <= 0.0 || uniform(seed, batch, head, row, col) >= p as f64
}

/// Dropout policy of one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub p: f32,
    pub seed: u64,
}

impl Dropout {
    pub fn new(p: f32, seed: u64) -> Self {
        Self { p, seed }
    }

    pub fn is_active(&self) -> bool {
        self.p > 0.0
    }

    #[inline]
    pub fn keep(&self, batch: usize, head: usize, row: usize, col: usize) -> bool {
        dropout_mask(self.seed, self.p, batch, head, row, col)
    }

    /// Multiplier applied to a weight: `0` if dropped, `1/(1-p)` if kept.
    #[inline]
    pub fn factor(&self, batch: usize, head: usize, row: usize, col: usize) -> f32 {
        if !self.is_active() {
            1.0
        } else if self.keep(batch, head, row, col) {
            1.0 / (1.0 - self.p)
        } else {
            0.0
        }
    }

    /// Same multiplier in binary64 for the reference path.
    #[inline]
    pub fn factor_f64(&self, batch: usize, head: usize, row: usize, col: usize) -> f64 {
        if !self.is_active() {
            1.0
        } else if self.keep(batch, head, row, col) {
            1.0 / (1.0 - self.p as f64)
        } else {
            0.0
        }
    }
}

/// Order-independent digest of the mask decisions a kernel consumed.
///
/// Each decision contributes a hash of its position and outcome; contributions
/// are summed modulo 2^64, so parallel units can be combined in any order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct MaskDigest {
    value: u64,
    count: u64,
}

impl MaskDigest {
    #[inline]
    pub fn absorb(&mut self, batch: usize, head: usize, row: usize, col: usize, keep: bool) {
        let h = position_hash(0x6D61_736B, batch, head, row, col);
        self.value = self.value.wrapping_add(mix64(h ^ keep as u64));
        self.count += 1;
    }

    pub fn combine(&mut self, other: &MaskDigest) {
        self.value = self.value.wrapping_add(other.value);
        self.count += other.count;
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    /// Number of decisions absorbed.
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn hex(&self) -> String {
        format!("{:016x}", self.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probability_keeps_everything() {
        let d = Dropout::new(0.0, 9);
        assert!((0..1000).all(|c| d.keep(0, 0, 3, c)));
        assert_eq!(d.factor(0, 0, 1, 1), 1.0);
    }

    #[test]
    fn deterministic() {
        for c in 0..100 {
            assert_eq!(dropout_mask(7, 0.5, 1, 2, 3, c), dropout_mask(7, 0.5, 1, 2, 3, c));
            assert_eq!(uniform(7, 1, 2, 3, c), uniform(7, 1, 2, 3, c));
        }
        // coordinates are not interchangeable
        assert_ne!(uniform(7, 0, 0, 1, 2), uniform(7, 0, 0, 2, 1));
        assert_ne!(uniform(7, 0, 0, 1, 2), uniform(8, 0, 0, 1, 2));
    }

    #[test]
    fn keep_rate_at_point_one() {
        let d = Dropout::new(0.1, 1234);
        let n = 1_000_000usize;
        let kept = (0..n).filter(|i| d.keep(i % 3, i % 5, i / 1000, i % 1000)).count();
        let rate = kept as f64 / n as f64;
        assert!((rate - 0.9).abs() <= 0.002, "keep rate {rate}");
    }

    #[test]
    fn inverted_scaling() {
        let d = Dropout::new(0.1, 3);
        let f: Vec<f32> = (0..200).map(|c| d.factor(0, 0, 0, c)).collect();
        assert!(f.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.9).abs() < 1e-7));
    }

    #[test]
    fn digest_is_order_independent() {
        let mut a = MaskDigest::default();
        let mut b = MaskDigest::default();
        for c in 0..50 {
            a.absorb(0, 1, 2, c, c % 3 == 0);
        }
        for c in (0..50).rev() {
            b.absorb(0, 1, 2, c, c % 3 == 0);
        }
        assert_eq!(a, b);
        let mut c = MaskDigest::default();
        c.absorb(0, 1, 2, 0, false);
        let mut d = MaskDigest::default();
        d.absorb(0, 1, 2, 0, true);
        assert_ne!(c, d);
    }
}
