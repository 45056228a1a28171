//! Variable-aware representation learning for irregularly sampled clinical
//! time series on top of a small frozen autoregressive transformer.

pub mod analysis;
pub mod backbone;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod train;
pub mod opt;
pub mod report;
pub mod tensor;
