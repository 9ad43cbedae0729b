//! Federated-learning simulator with poisoning attacks, baseline robust
//! aggregators and a defense that compares clients by the relational
//! structure of their intermediate outputs.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod federation;
pub mod fedmid;
pub mod harness;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
