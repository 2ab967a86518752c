pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod networks;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod types;

pub use error::{GadError, Result};

// training allocates and frees large activation buffers every phase; a
// pooling allocator keeps that off the mmap/page-fault path
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
