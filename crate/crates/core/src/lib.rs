pub mod backend;
pub mod config;
pub mod dataset;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod store;
pub mod synthetic;
