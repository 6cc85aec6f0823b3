pub mod metrics;
pub mod retrieval;
pub mod mesh;
pub mod io;
pub mod dataset;
pub mod config;
pub mod cli;
