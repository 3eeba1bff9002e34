//! Double-precision tensors with a tape-based reverse-mode differentiator.
//!
//! Every layer the anti-spoofing network needs is a primitive here: 2-D
//! convolution, pooling, batch and layer normalization, dense layers,
//! batched matrix products, softmax and the binary cross-entropy loss.
//! Forward passes record onto a [`Tape`]; [`Tape::backward`] walks it in
//! reverse and returns a [`Gradients`] table.
//!
//! ```
//! use m3fas_numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use ops::norm::{BatchStats, NormMode, RunningStats};
pub use optim::{Adam, AdamConfig, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{gemm, gemm_a_bt, gemm_at_b, Tensor};
