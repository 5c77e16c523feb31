//! Uncertainty-aware deep hedging.
//!
//! Heston path simulation with proportional transaction costs, LSTM hedgers
//! trained by backpropagation through the hedging rollout, deep-ensemble
//! disagreement, classical Black-Scholes and Whalley-Wilmott baselines, an
//! uncertainty-weighted blend of ensemble and delta hedges, and the
//! statistics used to compare them.

pub mod accounting;
pub mod autodiff;
pub mod blend;
pub mod classical;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod market_sim;
pub mod neural_hedger;
pub mod optim;
pub mod pipeline;
pub mod risk;
pub mod rng;

pub use accounting::{compute_pnl, CostSpec, HedgeSchedule, PnLReport};
pub use blend::{BlendObjective, BlendParams};
pub use classical::{BSInputs, VolMode};
pub use ensemble::EnsembleOutput;
pub use error::{HedgeError, Result};
pub use market_sim::{simulate_gbm, simulate_heston, HestonParams, MarketPaths, PathGrid};
pub use neural_hedger::{HedgerModel, MarketModel, TrainConfig};
pub use risk::RiskSpec;
