//! Per-class Wasserstein GANs for synthetic labeled flow-feature records,
//! histogram fidelity metrics and random-forest evaluation of synthetic
//! training sets.

pub mod data;
pub mod nn;
pub mod eval;
pub mod forest;
pub mod metrics;
pub mod wgan;
pub mod policy;
pub mod experiment;
