pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SpaceError};
