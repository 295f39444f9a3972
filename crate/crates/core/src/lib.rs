pub mod crystal;
pub mod coupling;
pub mod lattice;
pub mod dynamics;
pub mod stochastic;
pub mod estimator;
pub mod scenario;
pub mod export;
pub mod pipeline;
