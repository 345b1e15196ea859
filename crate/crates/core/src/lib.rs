//! Few-shot named entity recognition with prototypical networks and causal
//! interventions on context and prototypes.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod intervention;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod protonet;

pub use error::{Error, Result};
