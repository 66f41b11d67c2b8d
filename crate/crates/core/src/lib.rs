//! Attention with learned role transport between token slots, over
//! sentences, triples and n-ary facts, plus an external key/value
//! repository the language stream can retrieve from.
//!
//! Numerical code is generic over [`numerics::Scalar`]; the aliases below
//! fix it to `f64`, which is what the CLI and the acceptance suite use.

pub mod attention;
pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod numerics;
pub mod operators;
pub mod repository;
pub mod schema;
pub mod training;

pub use error::{Error, Result};

pub type Matrix64 = numerics::Matrix<f64>;
pub type Vector64 = numerics::Vector<f64>;
pub type Tape64 = numerics::Tape<f64>;
pub type RoleOperator64 = operators::RoleOperator<f64>;
pub type OperatorTable64 = operators::OperatorTable<f64>;
pub type Model64 = model::Model<f64>;
pub type Parameters64 = model::Parameters<f64>;
pub type Repository64 = repository::Repository<f64>;
