//! Dense tensors and a reverse-mode tape covering the operations the encoder,
//! decoder and losses use.

mod gradcheck;
pub mod io;
pub(crate) mod resize;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use resize::source_coord;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
