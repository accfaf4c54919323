pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod fewshot;
pub mod config;
pub mod corpus;
pub mod metrics;
pub mod nn;
pub mod trainer;
