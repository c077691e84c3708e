//! Session-based next-item recommendation: spring-style propagation over an
//! item co-occurrence graph, entropy-ranked anchor items and a shared GRU.

pub mod anchors;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod graph;
pub mod gsn;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
