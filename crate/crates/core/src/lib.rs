pub mod autodiff;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod slicer;
pub mod training;
pub mod volio;
