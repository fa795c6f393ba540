pub mod context;
pub mod decoder;
pub mod eval;
pub mod metrics;
pub mod reward;
pub mod service;
pub mod sim;
pub mod taskgen;
