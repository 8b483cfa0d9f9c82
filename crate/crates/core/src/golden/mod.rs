//! Bit-exact functional reference for fixed-point CNN training.
//!
//! Every other execution path in the toolchain (the tiled architectural
//! simulator in particular) is required to reproduce this module's results
//! bit for bit. The kernels accumulate products at full 32-bit precision and
//! requantize exactly once per output element, after the complete reduction;
//! that single rule plus the rounding mode pins every output bit.

pub mod checkpoint;
pub mod ops;
pub mod tensor;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use tensor::{BitTensor, FxpTensor, PoolIdx};
pub use train::{evaluate_accuracy, TrainState};
