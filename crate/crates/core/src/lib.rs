//! Block floating point (BFP) activation compression for weight-only
//! quantized transformer inference.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: FP16 handling and the FP16 to BFP group conversion.
//! - [`grouping`]: per-token / per-channel layouts, the incremental V
//!   residual group and the streaming converter paths.
//! - [`pe`]: bit-accurate emulation of the M8W4 / M8M4 / M8M8 MAC modes.
//! - [`smoothing`]: offline per-channel scaling and online K offsets.
//! - [`kvcache`]: precision-regioned K/V storage with bit accounting.
//! - [`dataflow`]: column-first / row-first external memory access models.
//! - [`pipeline`]: a toy attention block tying everything together, with an
//!   FP64 shadow path for error measurement.

pub mod dataflow;
pub mod error;
pub mod grouping;
pub mod kvcache;
pub mod numerics;
pub mod pe;
pub mod pipeline;
pub mod smoothing;
pub mod tensor;

pub use error::{HarmoniaError, Result};
pub use half::f16;
pub use numerics::{BfpConfig, BfpGroup};
pub use tensor::Tensor;
