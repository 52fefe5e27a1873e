//! Deterministic federated-learning simulator.
//!
//! Small dense classifiers are trained across simulated clients. A QMIX
//! controller picks each client's proximal coefficient, and the server
//! averages client models with weights from a self-organising map.
//! FedAvg, FedProx and FedNova run on the same harness for comparison.
//!
//! The guide in `book/` walks through each part; its code samples are
//! compiled as doctests.

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod orchestrator;
pub mod qmix;
pub mod report;
pub mod rng;
pub mod som;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/controller.md")]
    mod controller {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/training-loop.md")]
    mod training_loop {}
    #[doc = include_str!("../../../book/src/fairness.md")]
    mod fairness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
