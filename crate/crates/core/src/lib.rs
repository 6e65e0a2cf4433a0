//! Context-conditioned character-level query completion and multilabel
//! instance-probability estimation.
//!
//! A coupled-gate LSTM language model whose recurrent weights receive a
//! low-rank, context-dependent adaptation completes a typed prefix by beam
//! search; a recurrent query encoder with a sigmoid output layer then scores
//! every instance class for the completed query.

pub mod beam;
pub mod checkpoint;
pub mod data;
pub mod factorcell;
pub mod gradcheck;
pub mod instance;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vocab;
