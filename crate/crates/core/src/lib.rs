pub mod autodiff;
pub mod dataset;
pub mod envs;
pub mod harness;
pub mod metrics;
pub mod rl;
pub mod rng;
pub mod srl;
