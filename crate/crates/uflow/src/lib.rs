//! Everything around the numerical core that touches the outside world:
//! the UFT tensor format, datasets and checkpoints on disk, training loops,
//! evaluation reports, rendering and the `uflow` command line.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod render;
pub mod train;
pub mod uft;

pub use config::Config;
pub use error::{Error, Result};
