use serde::{Deserialize, Serialize};

use crate::fp::AccMode;
use crate::{Error, Result};

/// Default query/key tile edge.
pub const DEFAULT_TILE: usize = 64;

/// Problem shape, tiling and numerics of one attention run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    /// Query rows per thread-block unit (`Br`).
    pub tile_rows: usize,
    /// Key columns per iteration (`Bc`).
    pub tile_cols: usize,
    pub causal: bool,
    pub dropout_p: f32,
    pub seed: u64,
    pub acc_mode: AccMode,
    pub softmax_scale: f32,
}

impl AttnConfig {
    /// Square `min(64, seq_len)` tiles, no mask, no dropout, FP32-ACC,
    /// scale `1/sqrt(head_dim)`.
    pub fn new(batch: usize, heads: usize, seq_len: usize, head_dim: usize) -> Self {
        let tile = DEFAULT_TILE.min(seq_len.max(1));
        Self {
            batch,
            heads,
            seq_len,
            head_dim,
            tile_rows: tile,
            tile_cols: tile,
            causal: false,
            dropout_p: 0.0,
            seed: 0,
            acc_mode: AccMode::Fp32,
            softmax_scale: 1.0 / (head_dim.max(1) as f32).sqrt(),
        }
    }

    pub fn with_tiles(mut self, rows: usize, cols: usize) -> Self {
        self.tile_rows = rows;
        self.tile_cols = cols;
        self
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn with_dropout(mut self, p: f32, seed: u64) -> Self {
        self.dropout_p = p;
        self.seed = seed;
        self
    }

    pub fn with_acc(mut self, mode: AccMode) -> Self {
        self.acc_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `[batch, heads, seq_len, head_dim]`
    pub fn qkv_shape(&self) -> [usize; 4] {
        [self.batch, self.heads, self.seq_len, self.head_dim]
    }

    /// `[batch, heads, seq_len]`
    pub fn row_shape(&self) -> [usize; 3] {
        [self.batch, self.heads, self.seq_len]
    }

    pub fn query_tiles(&self) -> usize {
        self.seq_len / self.tile_rows
    }

    pub fn key_tiles(&self) -> usize {
        self.seq_len / self.tile_cols
    }

    /// Whether key tile `kj` holds any key visible to query tile `qi`.
    /// Tiles strictly above the diagonal are skipped without loads or MMAs.
    pub fn tile_visible(&self, qi: usize, kj: usize) -> bool {
        !self.causal || kj * self.tile_cols <= (qi + 1) * self.tile_rows - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch == 0 || self.heads == 0 || self.seq_len == 0 || self.head_dim == 0 {
            return fail("batch, heads, seq_len and head_dim must be positive".into());
        }
        if self.tile_rows == 0 || self.tile_rows % 8 != 0 || self.tile_cols == 0 || self.tile_cols % 8 != 0 {
            return fail(format!(
                "tile sizes must be positive multiples of 8 (got {}x{})",
                self.tile_rows, self.tile_cols
            ));
        }
        if self.head_dim % 4 != 0 {
            return fail(format!("head_dim {} is not a multiple of 4", self.head_dim));
        }
        if self.seq_len % self.tile_rows != 0 || self.seq_len % self.tile_cols != 0 {
            return fail(format!(
                "sequence length {} is not a multiple of tile size {}x{}",
                self.seq_len, self.tile_rows, self.tile_cols
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout probability {} outside [0, 1)", self.dropout_p));
        }
        if !self.softmax_scale.is_finite() {
            return fail("softmax scale must be finite".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = AttnConfig::new(1, 2, 256, 64);
        assert_eq!((c.tile_rows, c.tile_cols), (64, 64));
        assert_eq!(c.softmax_scale, 0.125);
        c.validate().unwrap();
        assert_eq!(AttnConfig::new(1, 1, 8, 8).tile_rows, 8);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(AttnConfig::new(1, 1, 100, 64).validate().is_err());
        assert!(AttnConfig::new(1, 1, 64, 10).validate().is_err());
        AttnConfig::new(1, 1, 8, 4).validate().unwrap();
        assert!(AttnConfig::new(1, 1, 64, 64).with_tiles(12, 8).validate().is_err());
        assert!(AttnConfig::new(1, 1, 64, 64).with_dropout(1.0, 0).validate().is_err());
        assert!(AttnConfig::new(0, 1, 64, 64).validate().is_err());
    }

    #[test]
    fn causal_tile_visibility() {
        let c = AttnConfig::new(1, 1, 256, 64).with_causal(true);
        let visible = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|&(i, j)| c.tile_visible(i, j))
            .count();
        assert_eq!(visible, 10);
        let rect = AttnConfig::new(1, 1, 64, 8).with_tiles(16, 8).with_causal(true);
        assert!(rect.tile_visible(0, 1));
        assert!(!rect.tile_visible(0, 2));
    }
}
