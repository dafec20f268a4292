//! Tensor-centric KV-cache transfer over emulated one-sided RDMA, plus a
//! disaggregated prefill/decode inference simulator built on top of it.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod block_pool;
pub mod layout;
pub mod oracle;
pub mod transport;
pub mod time;

pub use layout::{ByteSpan, LayoutError, TensorLayout};
pub use time::SimTime;
