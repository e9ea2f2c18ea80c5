//! Multi-task facial affect recognition and masked co-training for
//! expression recognition, trained and evaluated on synthetic data.

pub mod backbone;
pub mod cli;
pub mod cotex;
pub mod data;
pub mod emma;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};

// Training allocates and frees large activation buffers constantly; the
// default allocator hands them back to the OS each time, which turns every
// step into a page-fault storm. mimalloc keeps them pooled.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
