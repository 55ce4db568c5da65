//! Character-relation grid tagging for Chinese named entity recognition.
//!
//! Every character pair of a sentence is a cell of an `n × n` grid; entities
//! are recovered from word-level tags placed on that grid.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod enhance;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod predictor;
pub mod training;
