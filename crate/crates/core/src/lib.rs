//! Deterministic software model of fused multi-head attention on Volta-style
//! m8n8k4 tensor cores.
//!
//! Every multiply-accumulate runs through a lane-accurate warp model
//! ([`mma`]), softmax is computed online ([`softmax`]), MMA outputs are fed
//! back into MMA inputs through warp-level layout transforms ([`layout`]),
//! and all modeled HBM traffic is tallied ([`traffic`]). Results are judged
//! against dense binary64 references ([`oracle`]).
//!
//! Forward variants are interchangeable [`kernel::ForwardKernel`]s looked up
//! by name in a [`kernel::KernelRegistry`].

pub mod backward;
pub mod config;
pub mod dropout;
pub mod forward;
pub mod fp;
pub mod kernel;
pub mod layout;
pub mod mma;
pub mod oracle;
pub mod softmax;
pub mod spat;
pub mod tensor;
pub mod tiles;
pub mod traffic;
pub mod workload;

pub use backward::{backward_fused, compute_dpsum, DqAccumulator, GradOutputs};
pub use config::AttnConfig;
pub use forward::{forward_fused, forward_traditional, ForwardOutput};
pub use fp::{AccMode, Half};
pub use kernel::{ForwardKernel, KernelRegistry};
pub use tensor::{Matrix, Tensor};
pub use traffic::TrafficCounter;

use mma::Role;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("accumulator holds {found} values but mode is {expected}")]
    ModeMismatch { expected: AccMode, found: AccMode },
    #[error("fragment role mismatch: expected {expected:?}, found {found:?}")]
    RoleMismatch { expected: Role, found: Role },
    #[error("invalid layout descriptor: {0}")]
    Layout(String),
    #[error("NaN score in row {row}")]
    NanScore { row: usize },
    #[error("row {row} has no unmasked element")]
    FullyMaskedRow { row: usize },
    #[error("{0} accumulation is not supported by the backward kernel")]
    UnsupportedMode(AccMode),
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("tensor has a zero dimension or rank")]
    ZeroDimension,
    #[error("tensor dimensions overflow addressable size")]
    DimensionOverflow,
    #[error("payload is {found} bytes, expected {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
