pub mod assignment;
pub mod corridor;
pub mod dataset;
pub mod geometry;
pub mod metrics;
pub mod numeric;
pub mod sparsity;
pub mod synthetic;
pub mod losses;
pub mod profiler;
pub mod checks;
pub mod config;
pub mod harness;
