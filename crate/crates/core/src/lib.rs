//! Federated learning simulator with client contribution normalization.
//!
//! Each participating client reports the mean activation of its model's last
//! hidden layer over its local data. The server turns the pairwise cosine
//! similarities of those vectors into per-client contribution factors and uses
//! them to rescale the aggregation weights of an underlying strategy (FedAvg,
//! FedProx, SCAFFOLD, server momentum, FedNova or FedBABU). Clients whose data
//! looks unlike the rest of the cohort are weighted up.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] - a small multilayer perceptron with manual backpropagation.
//! * [`data`] - synthetic and IDX datasets plus non-IID partitioners.
//! * [`normalization`] - similarity matrix, contribution factors, weights.
//! * [`aggregation`] - the six server strategies and their local hooks.
//! * [`sim`] - round orchestration over a simulated federation.
//! * [`config`] and [`report`] - run configuration, metrics rows, comparisons.

pub mod aggregation;
pub mod config;
pub mod data;
mod error;
pub mod math;
pub mod nn;
pub mod normalization;
pub mod report;
pub mod rng;
pub mod sim;

pub use aggregation::{ClientUpdate, StrategyConfig, StrategyKind};
pub use config::RunConfig;
pub use data::{Dataset, PartitionPlan};
pub use error::{Error, Result};
pub use nn::{ModelSpec, ParameterVector};
pub use normalization::{AggregationWeights, ContributionVector, MeanLatent, SimilarityMatrix};
pub use sim::{run_experiment, RoundReport, Simulation};
