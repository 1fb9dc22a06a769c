pub mod amalgam;
pub mod blocknet;
pub mod branchout;
pub mod dataio;
pub mod error;
pub mod evalmetrics;
pub mod filters;
pub mod nncore;
pub mod pipeline;
pub mod teachers;

pub use error::{Error, Result};
