//! Mixed-membership stochastic blockmodels with hinge-loss MRF priors.
//!
//! The crate covers the whole pipeline: network ingestion ([`data`]), a small
//! weighted-rule language ([`rules`]), grounding of rules into hinge potentials
//! ([`grounding`]), consensus ADMM ([`admm`]), batch EM ([`model`]), stochastic
//! EM ([`stochastic`]), a TCP parameter server ([`server`]), rule-weight
//! learning ([`weights`]) and held-out evaluation ([`eval`]).

pub mod admm;
pub mod data;
pub mod eval;
pub mod grounding;
pub mod model;
pub mod rules;
pub mod server;
pub mod stochastic;
pub mod synthetic;
pub mod weights;

use thiserror::Error;

/// Floor applied to probabilities before taking logs.
pub const EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data: {0}")]
    Data(#[from] data::DataError),
    #[error("rules: {0}")]
    Rules(#[from] rules::RuleError),
    #[error("grounding: {0}")]
    Grounding(#[from] grounding::GroundingError),
    #[error("model: {0}")]
    Model(#[from] model::ModelError),
    #[error("weights: {0}")]
    Weights(#[from] weights::WeightError),
    #[error("eval: {0}")]
    Eval(#[from] eval::EvalError),
    #[error("server: {0}")]
    Server(#[from] server::ServerError),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
