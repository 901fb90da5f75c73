pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod evaluator;
pub mod extractors;
pub mod hbt;
pub mod nn;
pub mod synthetic;
pub mod tagset;
pub mod trainer;
