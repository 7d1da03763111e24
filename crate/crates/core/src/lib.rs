//! Multi-task dense-prediction decoder built on selective state-space scans.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major tensors over `f32`/`f64` plus a reverse-mode
//!   autodiff tape. Feature maps are channel-last `[B, H, W, C]`.
//! - [`ssm`]: 1D selective state-space kernels (discretization, input-dependent
//!   parameter projection, sequential/chunked scans, cross-parameterized scan).
//! - [`scan2d`]: four-direction 2D scans (unfold, per-direction 1D scan, fold, sum)
//!   and their cross variant operating on paired feature maps.
//! - [`attention`]: windowed multi-head self/cross attention used as the
//!   quadratic-complexity baseline for the scan kernels.
//! - [`blocks`]: decoder blocks (ECR, STM, F-CTM, S-CTM) and prediction heads.
//! - [`model`]: toy convolutional encoder, three-stage multi-task decoder,
//!   attention-swapped variant, parameter/FLOP counters.
//! - [`data`], [`metrics`], [`train`]: synthetic scene generator, task losses and
//!   metrics (including the signed multi-task delta metric), AdamW + poly LR loop.
//! - [`oracle`], [`gradcheck`], [`bench`]: independent reference implementations,
//!   finite-difference checking, and scaling benchmarks.

pub mod attention;
pub mod bench;
pub mod blocks;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod scan2d;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use tensor::{Dtype, Element, Tensor};

/// Crate-wide error type. Shape and precondition violations are reported here
/// rather than by panic so the CLI can map them to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Worker cap shared by every parallel region. Reads `MTK_THREADS` once;
/// values below 1 clamp to 1. Defaults to the machine's available parallelism.
pub fn max_threads() -> usize {
    use std::sync::OnceLock;
    static CAP: OnceLock<usize> = OnceLock::new();
    *CAP.get_or_init(|| {
        let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
        match std::env::var("MTK_THREADS") {
            Ok(v) => v.trim().parse::<usize>().map_or(avail, |n| n.max(1)),
            Err(_) => avail,
        }
    })
}
