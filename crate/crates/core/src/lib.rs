//! Infrared/visible image fusion via interactive feature embedding:
//! a self-contained f64 conv-net engine, the three-branch fusion network,
//! its self-supervised training objective, objective quality metrics,
//! PGM data handling, and the run pipeline behind the CLI.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
