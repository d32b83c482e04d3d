use serde::Serialize;
use sparkattn::oracle::ErrorMetrics;
use sparkattn::{AccMode, AttnConfig, TrafficCounter};

/// Mean relative error bound of the fused forward per accumulation mode.
pub fn forward_tolerance(kernel: &str, acc: AccMode) -> f64 {
    let fused = match acc {
        AccMode::Fp32 => 1e-3,
        AccMode::Fp16 => 2e-2,
    };
    if kernel == "fused" {
        fused
    } else {
        2.0 * fused
    }
}

/// Mean relative error bound of each backward gradient.
pub const BACKWARD_TOLERANCE: f64 = 1e-2;

#[derive(Serialize, Debug)]
pub struct ConfigEcho {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub causal: bool,
    pub dropout_p: f32,
    pub seed: u64,
    pub softmax_scale: f32,
}

impl From<&AttnConfig> for ConfigEcho {
    fn from(c: &AttnConfig) -> Self {
        Self {
            batch: c.batch,
            heads: c.heads,
            seq_len: c.seq_len,
            head_dim: c.head_dim,
            tile_rows: c.tile_rows,
            tile_cols: c.tile_cols,
            causal: c.causal,
            dropout_p: c.dropout_p,
            seed: c.seed,
            softmax_scale: c.softmax_scale,
        }
    }
}

#[derive(Serialize, Debug)]
pub struct Check {
    pub quantity: String,
    /// Mean element-wise `|t - r| / max(|r|, 1e-6)` against the reference.
    pub mean_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(quantity: impl Into<String>, metrics: &ErrorMetrics, tolerance: f64) -> Self {
        Self {
            quantity: quantity.into(),
            mean_rel: metrics.mean_rel,
            tolerance,
            pass: metrics.mean_rel <= tolerance,
        }
    }
}

#[derive(Serialize, Debug)]
pub struct ForwardRun {
    pub kernel: String,
    pub acc_mode: AccMode,
    pub traffic: TrafficCounter,
    pub mask_digest: String,
    pub mask_decisions: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<Check>,
}

#[derive(Serialize, Debug)]
pub struct ForwardReport {
    pub command: &'static str,
    pub config: ConfigEcho,
    pub runs: Vec<ForwardRun>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verified: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

#[derive(Serialize, Debug)]
pub struct PassSection {
    pub traffic: TrafficCounter,
    pub mask_digest: String,
    pub mask_decisions: u64,
}

#[derive(Serialize, Debug)]
pub struct GradErrors {
    pub dq: ErrorMetrics,
    pub dk: ErrorMetrics,
    pub dv: ErrorMetrics,
}

#[derive(Serialize, Debug)]
pub struct BackwardReport {
    pub command: &'static str,
    pub config: ConfigEcho,
    pub acc_mode: AccMode,
    pub forward: PassSection,
    pub backward: PassSection,
    pub mask_digest_match: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<GradErrors>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verified: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

/// One CSV line of a sweep.
#[derive(Serialize, Debug)]
pub struct SweepRow {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub batch: usize,
    pub causal: bool,
    pub acc_mode: AccMode,
    pub kernel: String,
    pub mean_rel: Option<f64>,
    pub max_rel: Option<f64>,
    pub mean_abs: Option<f64>,
    pub max_abs: Option<f64>,
    pub pass: Option<bool>,
    pub matrix_pass_reads: u64,
    pub matrix_pass_writes: u64,
    pub element_reads: u64,
    pub element_writes: u64,
    pub mma_invocations: u64,
    pub shuffle_events: u64,
    pub convert_events: u64,
    pub layout_shuffle_events: u64,
    pub layout_convert_events: u64,
    pub mask_digest: String,
}
